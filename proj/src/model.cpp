#include "fpro/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace fpro {

void ModelConfig::validate() const {
    if (levels < 1) throw ConfigError("config: levels must be >= 1");
    if (int(blocks.size()) != levels || int(heads.size()) != levels)
        throw ConfigError("config: blocks and heads must list one entry per level");
    for (int b : blocks)
        if (b < 1) throw ConfigError("config: block counts must be >= 1");
    for (int i = 0; i < levels; ++i) {
        if (heads[size_t(i)] < 1 || base_channels % heads[size_t(i)] != 0)
            throw ConfigError("config: channels " + std::to_string(base_channels) +
                              " not divisible by head count " + std::to_string(heads[size_t(i)]));
    }
    if (gdd_groups < 1 || base_channels % gdd_groups != 0)
        throw ConfigError("config: channels " + std::to_string(base_channels) +
                          " not divisible by gdd groups " + std::to_string(gdd_groups));
    if (gdd_kernel < 1 || gdd_kernel % 2 == 0) throw ConfigError("config: gdd kernel must be odd");
    if (ffn_expansion < 1) throw ConfigError("config: ffn expansion must be >= 1");
    if (window < 1) throw ConfigError("config: window must be >= 1");
    int64_t mult = int64_t(1) << levels;
    if (native_patch < mult || native_patch % mult != 0)
        throw ConfigError("config: native patch must be a positive multiple of " + std::to_string(mult));
}

// ---- FFN ----

template <typename T>
FfnBlock<T>::FfnBlock(ParamSet<T>& reg, const std::string& prefix, int channels, int expansion)
    : channels_(channels), hidden_(channels * expansion) {
    ln_g_ = reg.constant(prefix + ".ln.g", {channels}, T(1));
    ln_b_ = reg.zeros(prefix + ".ln.b", {channels});
    in_w_ = reg.trunc_normal(prefix + ".in.w", {channels, 2 * hidden_});
    in_b_ = reg.zeros(prefix + ".in.b", {2 * hidden_});
    dw_w_ = reg.trunc_normal(prefix + ".dw.w", {3, 3, 2 * hidden_});
    dw_b_ = reg.zeros(prefix + ".dw.b", {2 * hidden_});
    out_w_ = reg.trunc_normal(prefix + ".out.w", {hidden_, channels});
    out_b_ = reg.zeros(prefix + ".out.b", {channels});
}

template <typename T>
Tensor<T> FfnBlock<T>::forward(const Tensor<T>& x) const {
    Tensor<T> h = layer_norm(x, ln_g_, ln_b_, T(1e-5));
    h = linear(h, in_w_, in_b_);
    h = depthwise_conv2d_valid(reflect_pad2d(h, 1), dw_w_, dw_b_);
    Tensor<T> a = narrow_last(h, 0, hidden_);
    Tensor<T> b = narrow_last(h, hidden_, hidden_);
    h = linear(mul(gelu(a), b), out_w_, out_b_);
    return add(x, h);
}

// ---- MSA ----

template <typename T>
MsaBlock<T>::MsaBlock(ParamSet<T>& reg, const std::string& prefix, int channels, int heads)
    : channels_(channels), heads_(heads) {
    if (heads < 1 || channels % heads != 0)
        throw ConfigError("msa: channels " + std::to_string(channels) + " not divisible by " +
                          std::to_string(heads) + " heads");
    ln_g_ = reg.constant(prefix + ".ln.g", {channels}, T(1));
    ln_b_ = reg.zeros(prefix + ".ln.b", {channels});
    qkv_w_ = reg.trunc_normal(prefix + ".qkv.w", {channels, 3 * channels});
    qkv_b_ = reg.zeros(prefix + ".qkv.b", {3 * channels});
    dw_w_ = reg.trunc_normal(prefix + ".dw.w", {3, 3, 3 * channels});
    dw_b_ = reg.zeros(prefix + ".dw.b", {3 * channels});
    temp_ = reg.constant(prefix + ".temp", {heads}, T(1));
    out_w_ = reg.trunc_normal(prefix + ".out.w", {channels, channels});
    out_b_ = reg.zeros(prefix + ".out.b", {channels});
}

template <typename T>
Tensor<T> MsaBlock<T>::forward(const Tensor<T>& x) const {
    int64_t B = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    int64_t C = channels_, h = heads_, d = C / h;
    Tensor<T> n = layer_norm(x, ln_g_, ln_b_, T(1e-5));
    Tensor<T> qkv = depthwise_conv2d_valid(reflect_pad2d(linear(n, qkv_w_, qkv_b_), 1), dw_w_, dw_b_);
    Tensor<T> q = narrow_last(qkv, 0, C);
    Tensor<T> k = narrow_last(qkv, C, C);
    Tensor<T> v = narrow_last(qkv, 2 * C, C);

    // channel descriptors: [B, heads, d, HW], normalized along pixels
    auto to_desc = [&](const Tensor<T>& t) {
        return permute(reshape(t, {B, H * W, h, d}), {0, 2, 3, 1});
    };
    Tensor<T> qn = l2_normalize(to_desc(q), 3, T(1e-12));
    Tensor<T> kn = l2_normalize(to_desc(k), 3, T(1e-12));
    Tensor<T> vd = to_desc(v);

    Tensor<T> logits = mul(matmul(qn, permute(kn, {0, 1, 3, 2})), reshape(temp_, {h, 1, 1}));
    Tensor<T> attn = softmax(logits, 3);             // [B,h,d,d]
    Tensor<T> mixed = matmul(attn, vd);              // [B,h,d,HW]
    Tensor<T> joined = reshape(permute(mixed, {0, 3, 1, 2}), {B, H, W, C});
    return add(x, linear(joined, out_w_, out_b_));
}

// ---- model ----

namespace {

template <typename T>
Tensor<T> clamp01_copy(const Tensor<T>& x) {
    Tensor<T> out = x.detach();
    for (auto& v : out.raw_data()) v = std::min(std::max(v, T(0)), T(1));
    return out;
}

}  // namespace

template <typename T>
FproModel<T>::FproModel(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)), seed_(seed), reg_(seed) {
    cfg_.validate();
    int C = cfg_.base_channels;
    int L = cfg_.levels;

    shallow_w_ = reg_.trunc_normal("shallow.w", {3, 3, 3, C});
    shallow_b_ = reg_.zeros("shallow.b", {C});

    if (cfg_.prompts_enabled()) {
        if (cfg_.single_gdd) {
            gdds_.emplace_back(reg_, "gdd", C, cfg_.gdd_groups, cfg_.gdd_kernel);
        } else {
            for (int l = 0; l < L; ++l)
                gdds_.emplace_back(reg_, "gdd" + std::to_string(l), C, cfg_.gdd_groups, cfg_.gdd_kernel);
        }
    }

    for (int l = 0; l < L; ++l) {
        int ch = C << l;
        std::vector<FfnBlock<T>> blocks;
        for (int b = 0; b < cfg_.blocks[size_t(l)]; ++b)
            blocks.emplace_back(reg_, "enc" + std::to_string(l) + ".ffn" + std::to_string(b), ch,
                                cfg_.ffn_expansion);
        enc_blocks_.push_back(std::move(blocks));
        // unshuffle quadruples channels; 1x1 projects to twice the level width
        down_.emplace_back(reg_.trunc_normal("down" + std::to_string(l) + ".w", {4 * ch, 2 * ch}),
                           reg_.zeros("down" + std::to_string(l) + ".b", {2 * ch}));
    }

    dpbs_.resize(size_t(L));
    fuse_prompt_.resize(size_t(L));
    dec_ffn_.resize(size_t(L));
    dec_msa_.resize(size_t(L));
    up_.resize(size_t(L));
    skip_.resize(size_t(L));
    for (int l = L - 1; l >= 0; --l) {
        int ch = C << (l + 1);  // decoder blocks run below the skip resolution
        std::string dl = "dec" + std::to_string(l);
        if (cfg_.prompts_enabled()) {
            dpbs_[size_t(l)].emplace(reg_, "dpb" + std::to_string(l), C, ch,
                                     AttentionConfig{cfg_.heads[size_t(l)], cfg_.window},
                                     cfg_.native_patch >> (l + 1), cfg_.native_patch >> (l + 1),
                                     cfg_.use_hpm, cfg_.use_lpm);
            int fused_in = ch + (cfg_.use_hpm ? ch : 0) + (cfg_.use_lpm ? C : 0);
            fuse_prompt_[size_t(l)] = {reg_.trunc_normal(dl + ".fuse_prompt.w", {fused_in, ch}),
                                       reg_.zeros(dl + ".fuse_prompt.b", {ch})};
        }
        for (int b = 0; b < cfg_.blocks[size_t(l)]; ++b) {
            dec_ffn_[size_t(l)].emplace_back(reg_, dl + ".ffn" + std::to_string(b), ch, cfg_.ffn_expansion);
            dec_msa_[size_t(l)].emplace_back(reg_, dl + ".msa" + std::to_string(b), ch,
                                             cfg_.heads[size_t(l)]);
        }
        // 1x1 doubles channels, shuffle quarters them: net halving per level
        up_[size_t(l)] = {reg_.trunc_normal("up" + std::to_string(l) + ".w", {ch, 2 * ch}),
                          reg_.zeros("up" + std::to_string(l) + ".b", {2 * ch})};
        int sk = C << l;
        skip_[size_t(l)] = {reg_.trunc_normal("skip" + std::to_string(l) + ".w", {2 * sk, sk}),
                            reg_.zeros("skip" + std::to_string(l) + ".b", {sk})};
    }

    // zero start: the network opens as the identity mapping
    final_w_ = reg_.zeros("final.w", {3, 3, C, 3});
    final_b_ = reg_.zeros("final.b", {3});
}

template <typename T>
Tensor<T> FproModel<T>::shallow_features(const Tensor<T>& image) {
    if (image.rank() != 4 || image.dim(-1) != 3)
        throw ShapeError("model: expected [B,H,W,3], got " + shape_str(image.shape()));
    int64_t H = image.shape()[1], W = image.shape()[2];
    if (H < 8 || W < 8) throw ShapeError("model: image too small, need at least 8x8");
    int64_t mult = int64_t(1) << cfg_.levels;
    int64_t pad_h = (mult - H % mult) % mult, pad_w = (mult - W % mult) % mult;
    Tensor<T> padded = reflect_pad2d_to(image, int(pad_h), int(pad_w));
    return conv2d_valid(reflect_pad2d(padded, 1), shallow_w_, shallow_b_);
}

template <typename T>
FrequencyPair<T> FproModel<T>::decompose_input(const Tensor<T>& image, Mode mode) {
    if (gdds_.empty()) throw ConfigError("model: built without a frequency decoupler");
    Tensor<T> f_s = shallow_features(image);
    auto pair = gdds_.front().decompose(f_s, mode);
    int64_t H = image.shape()[1], W = image.shape()[2];
    return {crop2d(pair.lo, H, W), crop2d(pair.hi, H, W)};
}

template <typename T>
Tensor<T> FproModel<T>::run(const Tensor<T>& image, Mode mode, bool clamp) {
    if (image.rank() != 4 || image.dim(-1) != 3)
        throw ShapeError("model: expected [B,H,W,3], got " + shape_str(image.shape()));
    int64_t H = image.shape()[1], W = image.shape()[2];
    if (H < 8 || W < 8) throw ShapeError("model: image too small, need at least 8x8");
    int64_t mult = int64_t(1) << cfg_.levels;
    int64_t pad_h = (mult - H % mult) % mult, pad_w = (mult - W % mult) % mult;
    Tensor<T> padded = reflect_pad2d_to(image, int(pad_h), int(pad_w));

    Tensor<T> f_s = conv2d_valid(reflect_pad2d(padded, 1), shallow_w_, shallow_b_);

    FrequencyPair<T> shared_bands;
    if (cfg_.prompts_enabled() && cfg_.single_gdd) shared_bands = gdds_.front().decompose(f_s, mode);

    std::vector<Tensor<T>> skips;
    Tensor<T> x = f_s;
    for (int l = 0; l < cfg_.levels; ++l) {
        for (const auto& blk : enc_blocks_[size_t(l)]) x = blk.forward(x);
        skips.push_back(x);
        x = linear(pixel_unshuffle(x, 2), down_[size_t(l)].first, down_[size_t(l)].second);
    }

    for (int l = cfg_.levels - 1; l >= 0; --l) {
        if (cfg_.prompts_enabled()) {
            FrequencyPair<T> level_bands;
            if (!cfg_.single_gdd) level_bands = gdds_[size_t(l)].decompose(f_s, mode);
            const FrequencyPair<T>& bands = cfg_.single_gdd ? shared_bands : level_bands;
            auto prompts = dpbs_[size_t(l)]->forward(x, bands);
            std::vector<Tensor<T>> cat{x};
            if (prompts.hi.defined()) cat.push_back(prompts.hi);
            if (prompts.lo.defined()) cat.push_back(prompts.lo);
            x = linear(concat_last(cat), fuse_prompt_[size_t(l)].first, fuse_prompt_[size_t(l)].second);
        }
        for (int b = 0; b < cfg_.blocks[size_t(l)]; ++b) {
            x = dec_ffn_[size_t(l)][size_t(b)].forward(x);
            x = dec_msa_[size_t(l)][size_t(b)].forward(x);
        }
        x = pixel_shuffle(linear(x, up_[size_t(l)].first, up_[size_t(l)].second), 2);
        x = linear(concat_last<T>({x, skips[size_t(l)]}), skip_[size_t(l)].first, skip_[size_t(l)].second);
    }

    Tensor<T> residual = conv2d_valid(reflect_pad2d(x, 1), final_w_, final_b_);
    Tensor<T> restored = crop2d(add(padded, residual), H, W);
    return clamp ? clamp01_copy(restored) : restored;
}

template <typename T>
Tensor<T> FproModel<T>::forward(const Tensor<T>& image, Mode mode) {
    return run(image, mode, false);
}

template <typename T>
Tensor<T> FproModel<T>::infer(const Tensor<T>& image) {
    return run(image, Mode::Eval, true);
}

int64_t param_count(const ModelConfig& cfg) {
    FproModel<float> model(cfg, 0);
    return model.param_count();
}

std::vector<std::pair<std::string, int64_t>> param_breakdown(const ModelConfig& cfg) {
    FproModel<float> model(cfg, 0);
    std::map<std::string, int64_t> groups;
    for (const auto& [name, t] : model.params().params()) {
        std::string prefix = name.substr(0, name.find('.'));
        groups[prefix] += t.numel();
    }
    return {groups.begin(), groups.end()};
}

#define FPRO_INSTANTIATE_MODEL(T) \
    template class FfnBlock<T>;   \
    template class MsaBlock<T>;   \
    template class FproModel<T>;

FPRO_INSTANTIATE_MODEL(float)
FPRO_INSTANTIATE_MODEL(double)

}  // namespace fpro
