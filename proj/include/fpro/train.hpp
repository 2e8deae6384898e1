#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fpro/model.hpp"

namespace fpro {

// ---- synthetic corpus ----

enum class DegradationKind { RainStreak, RaindropBlob, MoireSinusoid };

const char* degradation_name(DegradationKind kind);
DegradationKind parse_degradation(const std::string& name);

struct DegradationSpec {
    DegradationKind kind = DegradationKind::RainStreak;
    double intensity = 0.5;
    uint64_t seed = 0;
};

// Procedurally generated photographic stand-in: smooth shading, a few soft
// shapes, light texture. Values in [0,1], [H,W,3].
template <typename T>
Tensor<T> synth_clean_image(int64_t h, int64_t w, uint64_t seed);

// degraded = clamp(clean + artifact, 0, 1); the artifact is a pure function
// of the spec.
template <typename T>
Tensor<T> synth_degrade(const Tensor<T>& clean, const DegradationSpec& spec);

// Corpus manifest: one record per line, tab separated:
//   <clean path> <seed> <kind> <intensity>
struct ManifestEntry {
    std::string clean_path;
    uint64_t seed = 0;
    DegradationKind kind = DegradationKind::RainStreak;
    double intensity = 0.5;
};

std::vector<ManifestEntry> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);

// ---- loss ----

// L1 plus lambda * L1 between spectral magnitudes; lambda 0 is plain L1.
template <typename T>
Tensor<T> restoration_loss(const Tensor<T>& restored, const Tensor<T>& target, T lambda_spec);

// ---- optimizer and schedule ----

// iter 0 -> lr_max, iter == total -> lr_min, half-cosine in between.
double cosine_lr(int64_t iter, int64_t total, double lr_max = 3e-4, double lr_min = 1e-6);

template <typename T>
class AdamW {
public:
    struct Hyper {
        T beta1 = T(0.9);
        T beta2 = T(0.999);
        T eps = T(1e-8);
        T weight_decay = T(1e-4);
    };

    explicit AdamW(Hyper hyper = {}) : hyper_(hyper) {}

    void step(ParamSet<T>& params, T lr);
    int64_t steps_taken() const { return step_; }

    NamedVectors<T> export_state() const;
    void import_state(const NamedVectors<T>& state);

private:
    struct Slot {
        std::vector<T> m, v;
    };
    Hyper hyper_;
    int64_t step_ = 0;
    std::vector<std::pair<std::string, Slot>> slots_;  // ordered by first sighting
};

// ---- metrics ----

enum class MetricSpace { Rgb, Luma };

// 10*log10(1 / MSE) on [H,W,3] images in [0,1], capped at 100 dB.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, MetricSpace space = MetricSpace::Rgb);

// Gaussian-window (11x11, sigma 1.5) structural similarity, valid windows,
// averaged over channels (or computed on luma).
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, MetricSpace space = MetricSpace::Rgb);

// ---- training loop ----

struct TrainConfig {
    int64_t iterations = 2000;
    int batch = 4;
    int64_t patch = 64;
    double lr_max = 3e-4;
    double lr_min = 1e-6;
    double lambda_spec = 0.1;
    int64_t eval_every = 100;
    uint64_t seed = 0;
    MetricSpace eval_space = MetricSpace::Luma;
};

template <typename T>
struct TrainResult {
    std::vector<double> losses;   // one per iteration
    std::string log;              // append-only metric records
    double final_psnr = 0;
    double final_ssim = 0;
};

// Pairs are (degraded, clean). Deterministic given cfg.seed; aborts with
// NumericError if the loss goes non-finite.
template <typename T>
TrainResult<T> train_loop(FproModel<T>& model, AdamW<T>& opt,
                          const std::vector<std::pair<Tensor<T>, Tensor<T>>>& train_pairs,
                          const std::vector<std::pair<Tensor<T>, Tensor<T>>>& eval_pairs,
                          const TrainConfig& cfg);

}  // namespace fpro
