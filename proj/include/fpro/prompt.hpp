#pragma once

#include <optional>

#include "fpro/freq.hpp"
#include "fpro/nn.hpp"
#include "fpro/params.hpp"

namespace fpro {

struct AttentionConfig {
    int heads = 1;
    int window = 8;  // M, used by the windowed variant only
};

// Cross-attention over non-overlapping M x M tiles. Queries come from the
// decoder feature, keys/values from the prompt stream. Inputs that are not
// multiples of M are reflect-padded and cropped after the merge.
template <typename T>
class WindowCrossAttention {
public:
    WindowCrossAttention(ParamSet<T>& reg, const std::string& prefix, int q_channels, int kv_channels,
                         AttentionConfig cfg);

    Tensor<T> forward(const Tensor<T>& f_l, const Tensor<T>& kv_source) const;

    // Attention output before the final projection; exposed so locality can
    // be checked window by window.
    Tensor<T> attend(const Tensor<T>& f_l, const Tensor<T>& kv_source) const;

private:
    int q_channels_, kv_channels_;
    AttentionConfig cfg_;
    Tensor<T> q_w_, q_b_, k_w_, k_b_, v_w_, v_b_, out_w_, out_b_;
};

// Single-token cross-attention: the prompt is pooled to 1x1, every spatial
// position of the query attends to that one descriptor, softmax runs over
// the spatial axis.
template <typename T>
class PooledCrossAttention {
public:
    PooledCrossAttention(ParamSet<T>& reg, const std::string& prefix, int q_channels, int kv_channels,
                         int heads);

    Tensor<T> forward(const Tensor<T>& f_l, const Tensor<T>& prompt) const;

private:
    int q_channels_, kv_channels_, heads_;
    Tensor<T> q_w_, q_b_, k_w_, k_b_, v_w_, v_b_, out_w_, out_b_, alpha_;
};

// High-frequency prompt modulator: local gate, learnable spatial prompt,
// depthwise high-pass on the K/V stream, windowed cross-attention.
template <typename T>
class Hpm {
public:
    Hpm(ParamSet<T>& reg, const std::string& prefix, int prompt_channels, int level_channels,
        AttentionConfig cfg, int64_t native_h, int64_t native_w);

    Tensor<T> gate(const Tensor<T>& x) const;    // x (.) GELU(DConv3x3(x))
    Tensor<T> inject(const Tensor<T>& x) const;  // x (.) p_hi at x's resolution
    Tensor<T> forward(const Tensor<T>& f_l, const Tensor<T>& f_hi) const;

    const WindowCrossAttention<T>& attention() const { return attn_; }

private:
    int prompt_channels_;
    Tensor<T> gate_w_, gate_b_;  // depthwise 3x3
    Tensor<T> kv_w_, kv_b_;      // depthwise 3x3 on the injected prompt
    Tensor<T> p_hi_;             // [1, Hn, Wn, C']
    WindowCrossAttention<T> attn_;
};

// Low-frequency prompt modulator: spectral gate, learnable Fourier prompt,
// inverse transform, pooled cross-attention.
template <typename T>
class Lpm {
public:
    Lpm(ParamSet<T>& reg, const std::string& prefix, int prompt_channels, int level_channels, int heads,
        int64_t native_h, int64_t native_w);

    // S (.) GELU(Conv1x1(S)) with S = rfft2(x); packed complex output.
    Tensor<T> spectral_gate(const Tensor<T>& x) const;
    // irfft2(spec (.) p_lo) back to the spatial domain.
    Tensor<T> inject(const Tensor<T>& spec_gated, int64_t h, int64_t w) const;
    Tensor<T> forward(const Tensor<T>& f_l, const Tensor<T>& f_lo) const;

    const Tensor<T>& prompt() const { return p_lo_; }

private:
    int prompt_channels_;
    Tensor<T> gate_w_, gate_b_;  // 1x1 over packed channels
    Tensor<T> p_lo_;             // [1, Hn, Wn/2+1, 2C']
    PooledCrossAttention<T> attn_;
};

// Dual prompt block: one HPM and one LPM attached to a decoder level. Either
// side can be absent (ablations); absent sides yield undefined tensors.
template <typename T>
class Dpb {
public:
    Dpb(ParamSet<T>& reg, const std::string& prefix, int prompt_channels, int level_channels,
        AttentionConfig cfg, int64_t native_h, int64_t native_w, bool use_hpm, bool use_lpm);

    struct Out {
        Tensor<T> hi;  // [B, H, W, level_channels] when present
        Tensor<T> lo;  // [B, H, W, prompt_channels] when present
    };

    // f_l fixes the target resolution; the frequency pair is resized to it.
    Out forward(const Tensor<T>& f_l, const FrequencyPair<T>& bands) const;

    bool has_hpm() const { return hpm_.has_value(); }
    bool has_lpm() const { return lpm_.has_value(); }
    const Hpm<T>& hpm() const { return *hpm_; }
    const Lpm<T>& lpm() const { return *lpm_; }

private:
    std::optional<Hpm<T>> hpm_;
    std::optional<Lpm<T>> lpm_;
};

// Double-precision fixture for the convolution-theorem identity: the gated
// spectral prompt path must match a circular depthwise convolution with the
// kernel irfft2(gate (.) p_lo). Returns the max relative difference.
double lpm_equivalence_error(const Tensor<double>& f_lo, const Tensor<double>& gate_w,
                             const Tensor<double>& gate_b, const Tensor<double>& p_lo);

}  // namespace fpro
