#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fpro/prompt.hpp"

namespace fpro {

struct ModelConfig {
    int levels = 3;                       // encoder/decoder levels, one down/up conv each
    std::vector<int> blocks = {2, 3, 6};  // per level
    int base_channels = 48;
    std::vector<int> heads = {2, 4, 8};  // decoder attention heads per level
    int ffn_expansion = 3;
    int window = 8;
    int gdd_groups = 8;
    int gdd_kernel = 3;
    bool use_hpm = true;
    bool use_lpm = true;
    bool single_gdd = true;       // one shared decoupler; else one per prompt block
    int64_t native_patch = 256;   // prompt resolution at construction

    void validate() const;
    bool prompts_enabled() const { return use_hpm || use_lpm; }

    static ModelConfig micro() {
        ModelConfig cfg;
        cfg.base_channels = 8;
        cfg.blocks = {1, 1, 1};
        cfg.heads = {1, 2, 2};
        cfg.native_patch = 64;
        return cfg;
    }
};

// Gated-GELU feed-forward block with depthwise mixing and a residual path.
template <typename T>
class FfnBlock {
public:
    FfnBlock(ParamSet<T>& reg, const std::string& prefix, int channels, int expansion);
    Tensor<T> forward(const Tensor<T>& x) const;

private:
    int channels_, hidden_;
    Tensor<T> ln_g_, ln_b_, in_w_, in_b_, dw_w_, dw_b_, out_w_, out_b_;
};

// Transposed (channel-wise) self-attention with L2-normalized descriptors and
// a learnable per-head temperature, plus a residual path.
template <typename T>
class MsaBlock {
public:
    MsaBlock(ParamSet<T>& reg, const std::string& prefix, int channels, int heads);
    Tensor<T> forward(const Tensor<T>& x) const;

private:
    int channels_, heads_;
    Tensor<T> ln_g_, ln_b_, qkv_w_, qkv_b_, dw_w_, dw_b_, temp_, out_w_, out_b_;
};

// The full restoration network: shallow conv, FFN-only encoder, FFN+MSA
// decoder with prompt fusion, residual reconstruction.
template <typename T>
class FproModel {
public:
    FproModel(ModelConfig cfg, uint64_t seed);

    // image is [B,H,W,3]; output matches the input size (pad-and-crop).
    // Training mode leaves the residual sum unclamped.
    Tensor<T> forward(const Tensor<T>& image, Mode mode);
    Tensor<T> infer(const Tensor<T>& image);  // eval mode, clamped to [0,1]

    // Shallow features and their frequency bands (padded to the working size).
    FrequencyPair<T> decompose_input(const Tensor<T>& image, Mode mode);
    Tensor<T> shallow_features(const Tensor<T>& image);

    const ModelConfig& config() const { return cfg_; }
    uint64_t seed() const { return seed_; }
    ParamSet<T>& params() { return reg_; }
    const ParamSet<T>& params() const { return reg_; }
    int64_t param_count() const { return reg_.param_count(); }

private:
    Tensor<T> run(const Tensor<T>& image, Mode mode, bool clamp);

    ModelConfig cfg_;
    uint64_t seed_;
    ParamSet<T> reg_;

    Tensor<T> shallow_w_, shallow_b_;
    std::vector<Gdd<T>> gdds_;  // one, or one per decoder level
    std::vector<std::vector<FfnBlock<T>>> enc_blocks_;
    std::vector<std::pair<Tensor<T>, Tensor<T>>> down_;  // 1x1 after unshuffle
    std::vector<std::optional<Dpb<T>>> dpbs_;            // per decoder level
    std::vector<std::pair<Tensor<T>, Tensor<T>>> fuse_prompt_;
    std::vector<std::vector<FfnBlock<T>>> dec_ffn_;
    std::vector<std::vector<MsaBlock<T>>> dec_msa_;
    std::vector<std::pair<Tensor<T>, Tensor<T>>> up_;    // 1x1 before shuffle
    std::vector<std::pair<Tensor<T>, Tensor<T>>> skip_;  // 1x1 after concat
    Tensor<T> final_w_, final_b_;
};

// Total learnable elements for a config without keeping the model around.
int64_t param_count(const ModelConfig& cfg);

// Per-prefix breakdown used by the params tool.
std::vector<std::pair<std::string, int64_t>> param_breakdown(const ModelConfig& cfg);

}  // namespace fpro
