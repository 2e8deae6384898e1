#include "fpro/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

namespace fpro {

// ---- degradation synthesis ----

const char* degradation_name(DegradationKind kind) {
    switch (kind) {
        case DegradationKind::RainStreak: return "rain-streak";
        case DegradationKind::RaindropBlob: return "raindrop-blob";
        case DegradationKind::MoireSinusoid: return "moire-sinusoid";
    }
    return "rain-streak";
}

DegradationKind parse_degradation(const std::string& name) {
    if (name == "rain-streak") return DegradationKind::RainStreak;
    if (name == "raindrop-blob") return DegradationKind::RaindropBlob;
    if (name == "moire-sinusoid") return DegradationKind::MoireSinusoid;
    throw ConfigError("unknown degradation kind: " + name);
}

template <typename T>
Tensor<T> synth_clean_image(int64_t h, int64_t w, uint64_t seed) {
    Rng rng(seed);
    Tensor<T> img({h, w, 3});
    auto px = img.raw_data();

    // smooth shading from a few low-frequency waves per channel
    double fx[3], fy[3], ph[3], amp[3], base[3];
    for (int c = 0; c < 3; ++c) {
        base[c] = rng.uniform(0.25, 0.75);
        amp[c] = rng.uniform(0.08, 0.22);
        fx[c] = rng.uniform(0.5, 2.0) / double(w);
        fy[c] = rng.uniform(0.5, 2.0) / double(h);
        ph[c] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j)
            for (int64_t c = 0; c < 3; ++c)
                px[size_t((i * w + j) * 3 + c)] = T(
                    base[c] + amp[c] * std::sin(2.0 * std::numbers::pi * (fx[c] * double(j) + fy[c] * double(i)) +
                                                ph[c]));

    // a few soft-edged discs and rectangles
    int shapes = int(rng.uniform_int(2, 5));
    for (int s = 0; s < shapes; ++s) {
        bool disc = rng.uniform() < 0.5;
        double cx = rng.uniform(0.1, 0.9) * double(w);
        double cy = rng.uniform(0.1, 0.9) * double(h);
        double rx = rng.uniform(0.08, 0.3) * double(w);
        double ry = disc ? rx : rng.uniform(0.08, 0.3) * double(h);
        double col[3] = {rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)};
        double edge = rng.uniform(1.0, 3.0);
        for (int64_t i = 0; i < h; ++i)
            for (int64_t j = 0; j < w; ++j) {
                double dx = (double(j) - cx) / rx, dy = (double(i) - cy) / ry;
                double dist = disc ? std::sqrt(dx * dx + dy * dy) : std::max(std::abs(dx), std::abs(dy));
                double m = 1.0 / (1.0 + std::exp((dist - 1.0) * 4.0 * edge));
                if (m < 1e-4) continue;
                for (int64_t c = 0; c < 3; ++c) {
                    size_t at = size_t((i * w + j) * 3 + c);
                    px[at] = T((1.0 - m) * double(px[at]) + m * col[c]);
                }
            }
    }

    // light per-pixel texture
    double tex = rng.uniform(0.01, 0.03);
    for (int64_t i = 0; i < h * w; ++i) {
        double n = tex * rng.normal();
        for (int64_t c = 0; c < 3; ++c) {
            size_t at = size_t(i * 3 + c);
            px[at] = T(std::min(std::max(double(px[at]) + n, 0.0), 1.0));
        }
    }
    return img;
}

namespace {

template <typename T>
void add_rain_streaks(std::vector<double>& art, int64_t h, int64_t w, double intensity, Rng& rng) {
    int count = std::max<int>(1, int(std::lround(30.0 * intensity)));
    for (int s = 0; s < count; ++s) {
        double cx = rng.uniform(0.0, double(w));
        double cy = rng.uniform(0.0, double(h));
        double angle = std::numbers::pi / 2.0 + rng.uniform(-0.35, 0.35);
        double len = rng.uniform(0.15, 0.45) * double(std::min(h, w));
        double sigma = rng.uniform(0.5, 1.2);
        double amp = intensity * rng.uniform(0.25, 0.6);
        double dx = std::cos(angle), dy = std::sin(angle);
        int64_t x0 = int64_t(std::floor(cx - std::abs(dx) * len / 2 - 3 * sigma));
        int64_t x1 = int64_t(std::ceil(cx + std::abs(dx) * len / 2 + 3 * sigma));
        int64_t y0 = int64_t(std::floor(cy - std::abs(dy) * len / 2 - 3 * sigma));
        int64_t y1 = int64_t(std::ceil(cy + std::abs(dy) * len / 2 + 3 * sigma));
        for (int64_t i = std::max<int64_t>(0, y0); i <= std::min(h - 1, y1); ++i)
            for (int64_t j = std::max<int64_t>(0, x0); j <= std::min(w - 1, x1); ++j) {
                // distance from the pixel to the finite segment
                double px_ = double(j) - cx, py_ = double(i) - cy;
                double t = std::clamp(px_ * dx + py_ * dy, -len / 2, len / 2);
                double qx = px_ - t * dx, qy = py_ - t * dy;
                double d2 = qx * qx + qy * qy;
                art[size_t(i * w + j)] += amp * std::exp(-d2 / (2.0 * sigma * sigma));
            }
    }
}

template <typename T>
void add_raindrop_blobs(std::vector<double>& art, int64_t h, int64_t w, double intensity, Rng& rng) {
    int count = std::max<int>(1, int(std::lround(10.0 * intensity)));
    for (int s = 0; s < count; ++s) {
        double cx = rng.uniform(0.05, 0.95) * double(w);
        double cy = rng.uniform(0.05, 0.95) * double(h);
        double r = rng.uniform(0.03, 0.12) * double(std::min(h, w));
        double amp = intensity * rng.uniform(0.25, 0.55);
        for (int64_t i = std::max<int64_t>(0, int64_t(cy - 2 * r)); i <= std::min(h - 1, int64_t(cy + 2 * r)); ++i)
            for (int64_t j = std::max<int64_t>(0, int64_t(cx - 2 * r)); j <= std::min(w - 1, int64_t(cx + 2 * r));
                 ++j) {
                double d = std::hypot(double(j) - cx, double(i) - cy) / r;
                art[size_t(i * w + j)] += amp * std::exp(-d * d * d * d);
            }
    }
}

template <typename T>
void add_moire(std::vector<double>& art, int64_t h, int64_t w, double intensity, Rng& rng) {
    double freq = rng.uniform(0.12, 0.35);
    double angle = rng.uniform(0.0, std::numbers::pi);
    double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    double amp = intensity * 0.30;
    double fx = freq * std::cos(angle), fy = freq * std::sin(angle);
    for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j)
            art[size_t(i * w + j)] +=
                amp * std::sin(2.0 * std::numbers::pi * (fx * double(j) + fy * double(i)) + phase);
}

}  // namespace

template <typename T>
Tensor<T> synth_degrade(const Tensor<T>& clean, const DegradationSpec& spec) {
    if (clean.rank() != 3 || clean.dim(-1) != 3)
        throw ShapeError("synth_degrade: expected [H,W,3], got " + shape_str(clean.shape()));
    int64_t h = clean.shape()[0], w = clean.shape()[1];
    Tensor<T> out = clean.clone();
    if (spec.intensity <= 0.0) return out;

    Rng rng(spec.seed);
    std::vector<double> artifact(size_t(h * w), 0.0);
    switch (spec.kind) {
        case DegradationKind::RainStreak: add_rain_streaks<T>(artifact, h, w, spec.intensity, rng); break;
        case DegradationKind::RaindropBlob: add_raindrop_blobs<T>(artifact, h, w, spec.intensity, rng); break;
        case DegradationKind::MoireSinusoid: add_moire<T>(artifact, h, w, spec.intensity, rng); break;
    }
    auto px = out.raw_data();
    for (int64_t i = 0; i < h * w; ++i)
        for (int64_t c = 0; c < 3; ++c) {
            size_t at = size_t(i * 3 + c);
            px[at] = T(std::min(std::max(double(px[at]) + artifact[size_t(i)], 0.0), 1.0));
        }
    return out;
}

// ---- manifest ----

std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open manifest: " + path);
    std::vector<ManifestEntry> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::stringstream ss(line);
        ManifestEntry e;
        std::string kind;
        if (!(ss >> e.clean_path >> e.seed >> kind >> e.intensity))
            throw FormatError("malformed manifest record: " + line);
        e.kind = parse_degradation(kind);
        out.push_back(std::move(e));
    }
    return out;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot write manifest: " + path);
    for (const auto& e : entries)
        out << e.clean_path << "\t" << e.seed << "\t" << degradation_name(e.kind) << "\t" << e.intensity
            << "\n";
}

// ---- loss ----

template <typename T>
Tensor<T> restoration_loss(const Tensor<T>& restored, const Tensor<T>& target, T lambda_spec) {
    if (restored.shape() != target.shape())
        throw ShapeError("loss: shapes " + shape_str(restored.shape()) + " vs " +
                         shape_str(target.shape()));
    Tensor<T> l1 = mean_all(abs_val(sub(restored, target)));
    if (lambda_spec == T(0)) return l1;
    Tensor<T> r4 = restored.rank() == 3 ? reshape(restored, {1, restored.shape()[0], restored.shape()[1],
                                                             restored.shape()[2]})
                                        : restored;
    Tensor<T> t4 = target.rank() == 3
                       ? reshape(target, {1, target.shape()[0], target.shape()[1], target.shape()[2]})
                       : target;
    Tensor<T> spec = mean_all(abs_val(sub(complex_abs(rfft2(r4)), complex_abs(rfft2(t4)))));
    return add(l1, mul_scalar(spec, lambda_spec));
}

// ---- schedule and optimizer ----

double cosine_lr(int64_t iter, int64_t total, double lr_max, double lr_min) {
    if (iter < 0 || iter > total) throw Error("cosine_lr: iteration outside [0, total]");
    if (total == 0) return lr_max;
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * double(iter) / double(total)));
}

template <typename T>
void AdamW<T>::step(ParamSet<T>& params, T lr) {
    ++step_;
    T bc1 = T(1) - T(std::pow(double(hyper_.beta1), double(step_)));
    T bc2 = T(1) - T(std::pow(double(hyper_.beta2), double(step_)));
    size_t slot_idx = 0;
    for (auto& [name, t] : params.params()) {
        if (slot_idx >= slots_.size()) slots_.emplace_back(name, Slot{});
        auto& [slot_name, slot] = slots_[slot_idx];
        if (slot_name != name) throw Error("adamw: parameter order changed (" + name + ")");
        if (slot.m.empty()) {
            slot.m.assign(size_t(t.numel()), T(0));
            slot.v.assign(size_t(t.numel()), T(0));
        }
        Tensor<T> param = t;
        auto vals = param.raw_data();
        if (param.has_grad()) {
            auto g = param.grad();
            for (int64_t i = 0; i < param.numel(); ++i) {
                T gi = g[size_t(i)];
                slot.m[size_t(i)] = hyper_.beta1 * slot.m[size_t(i)] + (T(1) - hyper_.beta1) * gi;
                slot.v[size_t(i)] = hyper_.beta2 * slot.v[size_t(i)] + (T(1) - hyper_.beta2) * gi * gi;
                T mhat = slot.m[size_t(i)] / bc1;
                T vhat = slot.v[size_t(i)] / bc2;
                vals[size_t(i)] -=
                    lr * (mhat / (std::sqrt(vhat) + hyper_.eps) + hyper_.weight_decay * vals[size_t(i)]);
            }
        } else {
            // decoupled decay still applies when no gradient reached the leaf
            for (int64_t i = 0; i < param.numel(); ++i) vals[size_t(i)] -= lr * hyper_.weight_decay * vals[size_t(i)];
        }
        ++slot_idx;
    }
}

template <typename T>
NamedVectors<T> AdamW<T>::export_state() const {
    NamedVectors<T> out;
    out.emplace_back("step", std::vector<T>{T(step_)});
    for (const auto& [name, slot] : slots_) {
        out.emplace_back("m." + name, slot.m);
        out.emplace_back("v." + name, slot.v);
    }
    return out;
}

template <typename T>
void AdamW<T>::import_state(const NamedVectors<T>& state) {
    slots_.clear();
    step_ = 0;
    for (const auto& [name, vec] : state) {
        if (name == "step") {
            if (!vec.empty()) step_ = int64_t(vec[0]);
        } else if (name.rfind("m.", 0) == 0) {
            slots_.emplace_back(name.substr(2), Slot{vec, {}});
        } else if (name.rfind("v.", 0) == 0) {
            for (auto& [sn, slot] : slots_)
                if (sn == name.substr(2)) {
                    slot.v = vec;
                    break;
                }
        }
    }
}

// ---- metrics ----

namespace {

template <typename T>
std::vector<double> to_luma(const Tensor<T>& img) {
    int64_t hw = img.shape()[0] * img.shape()[1];
    std::vector<double> y(static_cast<size_t>(hw));
    auto px = img.data();
    for (int64_t i = 0; i < hw; ++i)
        y[size_t(i)] =
            0.299 * double(px[size_t(i * 3)]) + 0.587 * double(px[size_t(i * 3 + 1)]) + 0.114 * double(px[size_t(i * 3 + 2)]);
    return y;
}

template <typename T>
std::vector<std::vector<double>> metric_planes(const Tensor<T>& img, MetricSpace space) {
    if (img.rank() != 3 || img.dim(-1) != 3)
        throw ShapeError("metrics: expected [H,W,3], got " + shape_str(img.shape()));
    if (space == MetricSpace::Luma) return {to_luma(img)};
    int64_t hw = img.shape()[0] * img.shape()[1];
    std::vector<std::vector<double>> planes(3, std::vector<double>(size_t(hw)));
    auto px = img.data();
    for (int64_t i = 0; i < hw; ++i)
        for (int64_t c = 0; c < 3; ++c) planes[size_t(c)][size_t(i)] = double(px[size_t(i * 3 + c)]);
    return planes;
}

}  // namespace

template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, MetricSpace space) {
    if (a.shape() != b.shape())
        throw ShapeError("psnr: shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto pa = metric_planes(a, space), pb = metric_planes(b, space);
    double mse = 0;
    int64_t n = 0;
    for (size_t p = 0; p < pa.size(); ++p)
        for (size_t i = 0; i < pa[p].size(); ++i) {
            double d = pa[p][i] - pb[p][i];
            mse += d * d;
            ++n;
        }
    mse /= double(n);
    if (mse <= 0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, MetricSpace space) {
    if (a.shape() != b.shape())
        throw ShapeError("ssim: shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    int64_t H = a.shape()[0], W = a.shape()[1];
    constexpr int win = 11;
    if (H < win || W < win) throw ShapeError("ssim: image smaller than the 11x11 window");

    // normalized gaussian window, sigma 1.5
    double kernel[win][win];
    double sum = 0;
    for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
            double di = i - win / 2, dj = j - win / 2;
            kernel[i][j] = std::exp(-(di * di + dj * dj) / (2.0 * 1.5 * 1.5));
            sum += kernel[i][j];
        }
    for (auto& row : kernel)
        for (double& v : row) v /= sum;

    constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    auto pa = metric_planes(a, space), pb = metric_planes(b, space);
    double total = 0;
    for (size_t p = 0; p < pa.size(); ++p) {
        const auto& x = pa[p];
        const auto& y = pb[p];
        double acc = 0;
        int64_t count = 0;
        for (int64_t i = 0; i + win <= H; ++i)
            for (int64_t j = 0; j + win <= W; ++j) {
                double mx = 0, my = 0;
                for (int u = 0; u < win; ++u)
                    for (int v = 0; v < win; ++v) {
                        mx += kernel[u][v] * x[size_t((i + u) * W + j + v)];
                        my += kernel[u][v] * y[size_t((i + u) * W + j + v)];
                    }
                double vx = 0, vy = 0, cov = 0;
                for (int u = 0; u < win; ++u)
                    for (int v = 0; v < win; ++v) {
                        double dx = x[size_t((i + u) * W + j + v)] - mx;
                        double dy = y[size_t((i + u) * W + j + v)] - my;
                        vx += kernel[u][v] * dx * dx;
                        vy += kernel[u][v] * dy * dy;
                        cov += kernel[u][v] * dx * dy;
                    }
                acc += ((2 * mx * my + c1) * (2 * cov + c2)) /
                       ((mx * mx + my * my + c1) * (vx + vy + c2));
                ++count;
            }
        total += acc / double(count);
    }
    return total / double(pa.size());
}

// ---- training loop ----

template <typename T>
TrainResult<T> train_loop(FproModel<T>& model, AdamW<T>& opt,
                          const std::vector<std::pair<Tensor<T>, Tensor<T>>>& train_pairs,
                          const std::vector<std::pair<Tensor<T>, Tensor<T>>>& eval_pairs,
                          const TrainConfig& cfg) {
    if (train_pairs.empty()) throw ConfigError("train: empty corpus");
    TrainResult<T> result;
    std::ostringstream log;
    log << "# iter lr loss psnr ssim\n";

    Rng batch_rng = Rng::fork(cfg.seed, "batches");
    char line[160];

    auto evaluate = [&](int64_t iter, double lr, double loss_val) {
        double psnr_sum = 0, ssim_sum = 0;
        if (!eval_pairs.empty()) {
            for (const auto& [degraded, clean] : eval_pairs) {
                Tensor<T> input = reshape(degraded, {1, degraded.shape()[0], degraded.shape()[1], 3});
                Tensor<T> restored = model.infer(input);
                Tensor<T> img = reshape(restored, {degraded.shape()[0], degraded.shape()[1], 3});
                psnr_sum += psnr(img, clean, cfg.eval_space);
                ssim_sum += ssim(img, clean, cfg.eval_space);
            }
            psnr_sum /= double(eval_pairs.size());
            ssim_sum /= double(eval_pairs.size());
        }
        std::snprintf(line, sizeof line, "%lld %.8e %.8e %.4f %.6f\n", (long long)iter, lr, loss_val,
                      psnr_sum, ssim_sum);
        log << line;
        result.final_psnr = psnr_sum;
        result.final_ssim = ssim_sum;
    };

    for (int64_t iter = 0; iter < cfg.iterations; ++iter) {
        // deterministic batch assembly: indices then crops, in order
        std::vector<Tensor<T>> degraded_patches, clean_patches;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& [degraded, clean] = train_pairs[size_t(
                batch_rng.uniform_int(0, int64_t(train_pairs.size()) - 1))];
            int64_t h = degraded.shape()[0], w = degraded.shape()[1];
            int64_t ph = std::min(cfg.patch, h), pw = std::min(cfg.patch, w);
            int64_t oy = h > ph ? batch_rng.uniform_int(0, h - ph) : 0;
            int64_t ox = w > pw ? batch_rng.uniform_int(0, w - pw) : 0;
            Tensor<T> dp({1, ph, pw, 3}), cp({1, ph, pw, 3});
            for (int64_t i = 0; i < ph; ++i)
                for (int64_t j = 0; j < pw; ++j)
                    for (int64_t c = 0; c < 3; ++c) {
                        dp.raw_data()[size_t(((i * pw) + j) * 3 + c)] =
                            degraded.data()[size_t((((oy + i) * w) + ox + j) * 3 + c)];
                        cp.raw_data()[size_t(((i * pw) + j) * 3 + c)] =
                            clean.data()[size_t((((oy + i) * w) + ox + j) * 3 + c)];
                    }
            degraded_patches.push_back(dp);
            clean_patches.push_back(cp);
        }
        Tensor<T> batch_in = degraded_patches[0], batch_target = clean_patches[0];
        if (cfg.batch > 1) {
            // stack along the batch axis
            int64_t ph = batch_in.shape()[1], pw = batch_in.shape()[2];
            Tensor<T> bi({int64_t(cfg.batch), ph, pw, 3}), bt({int64_t(cfg.batch), ph, pw, 3});
            for (int b = 0; b < cfg.batch; ++b) {
                std::copy(degraded_patches[size_t(b)].data().begin(), degraded_patches[size_t(b)].data().end(),
                          bi.raw_data().begin() + int64_t(b) * ph * pw * 3);
                std::copy(clean_patches[size_t(b)].data().begin(), clean_patches[size_t(b)].data().end(),
                          bt.raw_data().begin() + int64_t(b) * ph * pw * 3);
            }
            batch_in = bi;
            batch_target = bt;
        }

        double lr = cosine_lr(iter, cfg.iterations, cfg.lr_max, cfg.lr_min);
        Graph<T> graph;
        double loss_val;
        {
            typename Graph<T>::Scope scope(graph);
            Tensor<T> restored = model.forward(batch_in, Mode::Train);
            Tensor<T> loss = restoration_loss(restored, batch_target, T(cfg.lambda_spec));
            loss_val = double(loss.item());
            if (!std::isfinite(loss_val)) throw NumericError("training diverged: non-finite loss");
            graph.backward(loss);
        }
        opt.step(model.params(), T(lr));
        model.params().zero_grads();
        result.losses.push_back(loss_val);

        if ((iter + 1) % cfg.eval_every == 0 || iter + 1 == cfg.iterations)
            evaluate(iter + 1, lr, loss_val);
    }
    if (cfg.iterations == 0) evaluate(0, cfg.lr_max, 0.0);
    result.log = log.str();
    return result;
}

// ---- explicit instantiations ----

#define FPRO_INSTANTIATE_TRAIN(T)                                                                    \
    template Tensor<T> synth_clean_image<T>(int64_t, int64_t, uint64_t);                             \
    template Tensor<T> synth_degrade<T>(const Tensor<T>&, const DegradationSpec&);                   \
    template Tensor<T> restoration_loss<T>(const Tensor<T>&, const Tensor<T>&, T);                   \
    template class AdamW<T>;                                                                         \
    template double psnr<T>(const Tensor<T>&, const Tensor<T>&, MetricSpace);                        \
    template double ssim<T>(const Tensor<T>&, const Tensor<T>&, MetricSpace);                        \
    template TrainResult<T> train_loop<T>(FproModel<T>&, AdamW<T>&,                                  \
                                          const std::vector<std::pair<Tensor<T>, Tensor<T>>>&,      \
                                          const std::vector<std::pair<Tensor<T>, Tensor<T>>>&,      \
                                          const TrainConfig&);

FPRO_INSTANTIATE_TRAIN(float)
FPRO_INSTANTIATE_TRAIN(double)

}  // namespace fpro
