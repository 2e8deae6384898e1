#include "fpro/prompt.hpp"

#include <cmath>

namespace fpro {

// ---- windowed cross-attention ----

template <typename T>
WindowCrossAttention<T>::WindowCrossAttention(ParamSet<T>& reg, const std::string& prefix,
                                              int q_channels, int kv_channels, AttentionConfig cfg)
    : q_channels_(q_channels), kv_channels_(kv_channels), cfg_(cfg) {
    if (cfg.heads < 1 || q_channels % cfg.heads != 0)
        throw ConfigError("window attention: channels " + std::to_string(q_channels) +
                          " not divisible by " + std::to_string(cfg.heads) + " heads");
    if (cfg.window < 1) throw ConfigError("window attention: window must be >= 1");
    q_w_ = reg.trunc_normal(prefix + ".q.w", {q_channels, q_channels});
    q_b_ = reg.zeros(prefix + ".q.b", {q_channels});
    k_w_ = reg.trunc_normal(prefix + ".k.w", {kv_channels, q_channels});
    k_b_ = reg.zeros(prefix + ".k.b", {q_channels});
    v_w_ = reg.trunc_normal(prefix + ".v.w", {kv_channels, q_channels});
    v_b_ = reg.zeros(prefix + ".v.b", {q_channels});
    out_w_ = reg.trunc_normal(prefix + ".out.w", {q_channels, q_channels});
    out_b_ = reg.zeros(prefix + ".out.b", {q_channels});
}

namespace {

// [B, nh*M, nw*M, C] -> [B*nh*nw, M*M, C]
template <typename T>
Tensor<T> window_split(const Tensor<T>& x, int m) {
    int64_t B = x.shape()[0], H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
    int64_t nh = H / m, nw = W / m;
    auto r = reshape(x, {B, nh, m, nw, m, C});
    auto p = permute(r, {0, 1, 3, 2, 4, 5});
    return reshape(p, {B * nh * nw, int64_t(m) * m, C});
}

template <typename T>
Tensor<T> window_join(const Tensor<T>& wins, int64_t B, int64_t H, int64_t W, int m) {
    int64_t nh = H / m, nw = W / m, C = wins.shape()[2];
    auto r = reshape(wins, {B, nh, nw, m, m, C});
    auto p = permute(r, {0, 1, 3, 2, 4, 5});
    return reshape(p, {B, H, W, C});
}

// [N, L, C] -> [N, heads, L, d]
template <typename T>
Tensor<T> head_split(const Tensor<T>& x, int heads) {
    int64_t N = x.shape()[0], L = x.shape()[1], C = x.shape()[2];
    return permute(reshape(x, {N, L, heads, C / heads}), {0, 2, 1, 3});
}

template <typename T>
Tensor<T> head_join(const Tensor<T>& x) {
    int64_t N = x.shape()[0], h = x.shape()[1], L = x.shape()[2], d = x.shape()[3];
    return reshape(permute(x, {0, 2, 1, 3}), {N, L, h * d});
}

}  // namespace

template <typename T>
Tensor<T> WindowCrossAttention<T>::attend(const Tensor<T>& f_l, const Tensor<T>& kv_source) const {
    if (f_l.dim(-1) != q_channels_ || kv_source.dim(-1) != kv_channels_)
        throw ShapeError("window attention: channel mismatch");
    if (f_l.shape()[1] != kv_source.shape()[1] || f_l.shape()[2] != kv_source.shape()[2])
        throw ShapeError("window attention: query and prompt resolutions differ");
    int64_t B = f_l.shape()[0], H = f_l.shape()[1], W = f_l.shape()[2];
    int m = cfg_.window;
    int64_t pad_h = (m - H % m) % m, pad_w = (m - W % m) % m;
    Tensor<T> q_in = reflect_pad2d_to(f_l, int(pad_h), int(pad_w));
    Tensor<T> kv_in = reflect_pad2d_to(kv_source, int(pad_h), int(pad_w));
    int64_t Hp = H + pad_h, Wp = W + pad_w;

    Tensor<T> q = window_split(linear(q_in, q_w_, q_b_), m);
    Tensor<T> k = window_split(linear(kv_in, k_w_, k_b_), m);
    Tensor<T> v = window_split(linear(kv_in, v_w_, v_b_), m);

    int64_t d = int64_t(q_channels_) / cfg_.heads;
    Tensor<T> qh = mul_scalar(head_split(q, cfg_.heads), T(1.0 / std::sqrt(double(d))));
    Tensor<T> kh = head_split(k, cfg_.heads);
    Tensor<T> vh = head_split(v, cfg_.heads);

    Tensor<T> logits = matmul(qh, permute(kh, {0, 1, 3, 2}));  // [N, h, M2, M2]
    Tensor<T> attn = softmax(logits, 3);
    Tensor<T> mixed = head_join(matmul(attn, vh));  // [N, M2, C]
    Tensor<T> merged = window_join(mixed, B, Hp, Wp, m);
    return crop2d(merged, H, W);
}

template <typename T>
Tensor<T> WindowCrossAttention<T>::forward(const Tensor<T>& f_l, const Tensor<T>& kv_source) const {
    return linear(attend(f_l, kv_source), out_w_, out_b_);
}

// ---- pooled cross-attention ----

template <typename T>
PooledCrossAttention<T>::PooledCrossAttention(ParamSet<T>& reg, const std::string& prefix,
                                              int q_channels, int kv_channels, int heads)
    : q_channels_(q_channels), kv_channels_(kv_channels), heads_(heads) {
    if (heads < 1 || kv_channels % heads != 0)
        throw ConfigError("pooled attention: channels " + std::to_string(kv_channels) +
                          " not divisible by " + std::to_string(heads) + " heads");
    int64_t d = int64_t(kv_channels) / heads;
    q_w_ = reg.trunc_normal(prefix + ".q.w", {q_channels, kv_channels});
    q_b_ = reg.zeros(prefix + ".q.b", {kv_channels});
    k_w_ = reg.trunc_normal(prefix + ".k.w", {kv_channels, kv_channels});
    k_b_ = reg.zeros(prefix + ".k.b", {kv_channels});
    v_w_ = reg.trunc_normal(prefix + ".v.w", {kv_channels, kv_channels});
    v_b_ = reg.zeros(prefix + ".v.b", {kv_channels});
    out_w_ = reg.trunc_normal(prefix + ".out.w", {kv_channels, kv_channels});
    out_b_ = reg.zeros(prefix + ".out.b", {kv_channels});
    alpha_ = reg.constant(prefix + ".alpha", {heads}, T(std::sqrt(double(d))));
}

template <typename T>
Tensor<T> PooledCrossAttention<T>::forward(const Tensor<T>& f_l, const Tensor<T>& prompt) const {
    if (f_l.dim(-1) != q_channels_ || prompt.dim(-1) != kv_channels_)
        throw ShapeError("pooled attention: channel mismatch");
    int64_t B = f_l.shape()[0], H = f_l.shape()[1], W = f_l.shape()[2];
    int64_t C = kv_channels_, h = heads_, d = C / h;

    Tensor<T> pooled = reduce_mean(reduce_mean(prompt, 1, false), 1, false);  // [B, C]
    Tensor<T> q = linear(f_l, q_w_, q_b_);                                    // [B,H,W,C]
    Tensor<T> k = linear(pooled, k_w_, k_b_);                                 // [B, C]
    Tensor<T> v = linear(pooled, v_w_, v_b_);                                 // [B, C]

    Tensor<T> qh = permute(reshape(q, {B, H * W, h, d}), {0, 2, 1, 3});  // [B,h,HW,d]
    Tensor<T> kh = permute(reshape(k, {B, 1, h, d}), {0, 2, 3, 1});      // [B,h,d,1]
    Tensor<T> vh = permute(reshape(v, {B, 1, h, d}), {0, 2, 1, 3});      // [B,h,1,d]

    Tensor<T> logits = div(matmul(qh, kh), reshape(alpha_, {h, 1, 1}));  // [B,h,HW,1]
    Tensor<T> attn = softmax(logits, 2);                                 // over the spatial axis
    Tensor<T> mixed = matmul(attn, vh);                                  // [B,h,HW,d]
    Tensor<T> joined = reshape(permute(mixed, {0, 2, 1, 3}), {B, H, W, C});
    return linear(joined, out_w_, out_b_);
}

// ---- high-frequency prompt modulator ----

template <typename T>
Hpm<T>::Hpm(ParamSet<T>& reg, const std::string& prefix, int prompt_channels, int level_channels,
            AttentionConfig cfg, int64_t native_h, int64_t native_w)
    : prompt_channels_(prompt_channels),
      gate_w_(reg.trunc_normal(prefix + ".gate_dconv.w", {3, 3, prompt_channels})),
      gate_b_(reg.zeros(prefix + ".gate_dconv.b", {prompt_channels})),
      kv_w_(reg.trunc_normal(prefix + ".kv_dconv.w", {3, 3, prompt_channels})),
      kv_b_(reg.zeros(prefix + ".kv_dconv.b", {prompt_channels})),
      p_hi_(reg.trunc_normal(prefix + ".p_hi", {1, native_h, native_w, prompt_channels}, 0.02, 1.0)),
      attn_(reg, prefix + ".attn", level_channels, prompt_channels, cfg) {}

template <typename T>
Tensor<T> Hpm<T>::gate(const Tensor<T>& x) const {
    return mul(x, gelu(depthwise_conv2d_valid(reflect_pad2d(x, 1), gate_w_, gate_b_)));
}

template <typename T>
Tensor<T> Hpm<T>::inject(const Tensor<T>& x) const {
    Tensor<T> p = resize_bilinear(p_hi_, x.shape()[1], x.shape()[2]);
    return mul(x, p);
}

template <typename T>
Tensor<T> Hpm<T>::forward(const Tensor<T>& f_l, const Tensor<T>& f_hi) const {
    Tensor<T> resized = resize_bilinear(f_hi, f_l.shape()[1], f_l.shape()[2]);
    Tensor<T> injected = inject(gate(resized));
    Tensor<T> kv = depthwise_conv2d_valid(reflect_pad2d(injected, 1), kv_w_, kv_b_);
    return attn_.forward(f_l, kv);
}

// ---- low-frequency prompt modulator ----

template <typename T>
Lpm<T>::Lpm(ParamSet<T>& reg, const std::string& prefix, int prompt_channels, int level_channels,
            int heads, int64_t native_h, int64_t native_w)
    : prompt_channels_(prompt_channels),
      gate_w_(reg.trunc_normal(prefix + ".gate.w", {2 * prompt_channels, 2 * prompt_channels})),
      gate_b_(reg.zeros(prefix + ".gate.b", {2 * prompt_channels})),
      attn_(reg, prefix + ".attn", level_channels, prompt_channels, heads) {
    // near-identity start: unit real parts, zero imaginary parts, small noise
    int64_t wh = native_w / 2 + 1;
    Rng rng = Rng::fork(reg.seed(), prefix + ".p_lo");
    Tensor<T> p({1, native_h, wh, 2 * int64_t(prompt_channels)});
    auto buf = p.raw_data();
    for (int64_t i = 0; i < p.numel(); ++i) {
        int64_t ch = i % (2 * int64_t(prompt_channels));
        T base = ch < prompt_channels ? T(1) : T(0);
        buf[size_t(i)] = base + T(0.02 * rng.truncated_normal());
    }
    p_lo_ = reg.add(prefix + ".p_lo", std::move(p));
}

template <typename T>
Tensor<T> Lpm<T>::spectral_gate(const Tensor<T>& x) const {
    Tensor<T> spec = rfft2(x);
    Tensor<T> gate = gelu(linear(spec, gate_w_, gate_b_));
    return complex_mul(spec, gate);
}

template <typename T>
Tensor<T> Lpm<T>::inject(const Tensor<T>& spec_gated, int64_t h, int64_t w) const {
    if (spec_gated.shape()[2] != w / 2 + 1)
        throw ShapeError("lpm inject: spectrum width " + std::to_string(spec_gated.shape()[2]) +
                         " does not match target " + std::to_string(w / 2 + 1));
    Tensor<T> p = resize_bilinear(p_lo_, h, w / 2 + 1);
    return irfft2(complex_mul(spec_gated, p), h, w);
}

template <typename T>
Tensor<T> Lpm<T>::forward(const Tensor<T>& f_l, const Tensor<T>& f_lo) const {
    int64_t h = f_l.shape()[1], w = f_l.shape()[2];
    Tensor<T> resized = resize_bilinear(f_lo, h, w);
    Tensor<T> prompt = inject(spectral_gate(resized), h, w);
    return attn_.forward(f_l, prompt);
}

// ---- dual prompt block ----

template <typename T>
Dpb<T>::Dpb(ParamSet<T>& reg, const std::string& prefix, int prompt_channels, int level_channels,
            AttentionConfig cfg, int64_t native_h, int64_t native_w, bool use_hpm, bool use_lpm) {
    if (use_hpm)
        hpm_.emplace(reg, prefix + ".hpm", prompt_channels, level_channels, cfg, native_h, native_w);
    if (use_lpm)
        lpm_.emplace(reg, prefix + ".lpm", prompt_channels, level_channels, cfg.heads, native_h, native_w);
}

template <typename T>
typename Dpb<T>::Out Dpb<T>::forward(const Tensor<T>& f_l, const FrequencyPair<T>& bands) const {
    Out out;
    if (hpm_) out.hi = hpm_->forward(f_l, bands.hi);
    if (lpm_) out.lo = lpm_->forward(f_l, bands.lo);
    return out;
}

// ---- convolution-theorem fixture ----

double lpm_equivalence_error(const Tensor<double>& f_lo, const Tensor<double>& gate_w,
                             const Tensor<double>& gate_b, const Tensor<double>& p_lo) {
    int64_t B = f_lo.shape()[0], H = f_lo.shape()[1], W = f_lo.shape()[2], C = f_lo.shape()[3];

    Tensor<double> spec = rfft2(f_lo);
    Tensor<double> gate = gelu(linear(spec, gate_w, gate_b));
    Tensor<double> path_a = irfft2(complex_mul(complex_mul(spec, gate), p_lo), H, W);

    // spatial route: kernel as large as the image, circular convolution
    Tensor<double> kern = irfft2(complex_mul(gate, p_lo), H, W);  // [B,H,W,C]
    Tensor<double> path_b({B, H, W, C});
    auto pb = path_b.raw_data();
    auto px = f_lo.data();
    auto pk = kern.data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w)
                for (int64_t c = 0; c < C; ++c) {
                    double acc = 0.0;
                    for (int64_t a = 0; a < H; ++a)
                        for (int64_t bb = 0; bb < W; ++bb) {
                            int64_t sh = ((h - a) % H + H) % H;
                            int64_t sw = ((w - bb) % W + W) % W;
                            acc += px[size_t(((b * H + sh) * W + sw) * C + c)] *
                                   pk[size_t(((b * H + a) * W + bb) * C + c)];
                        }
                    pb[size_t(((b * H + h) * W + w) * C + c)] = acc;
                }

    double max_err = 0.0, max_abs = 0.0;
    for (int64_t i = 0; i < path_a.numel(); ++i) {
        max_err = std::max(max_err, std::abs(path_a.data()[size_t(i)] - path_b.data()[size_t(i)]));
        max_abs = std::max(max_abs, std::abs(path_a.data()[size_t(i)]));
    }
    return max_abs > 0 ? max_err / max_abs : max_err;
}

#define FPRO_INSTANTIATE_PROMPT(T)       \
    template class WindowCrossAttention<T>; \
    template class PooledCrossAttention<T>; \
    template class Hpm<T>;               \
    template class Lpm<T>;               \
    template class Dpb<T>;

FPRO_INSTANTIATE_PROMPT(float)
FPRO_INSTANTIATE_PROMPT(double)

}  // namespace fpro
