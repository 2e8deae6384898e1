#pragma once

#include "fpro/nn.hpp"
#include "fpro/params.hpp"

namespace fpro {

// One predicted kernel per (image, channel group). Low kernels are softmax
// outputs (nonnegative, sum 1); high kernels are identity minus low.
template <typename T>
struct FilterBank {
    Tensor<T> low;   // [B, g, k, k]
    Tensor<T> high;  // [B, g, k, k]
    int groups = 0;
    int kernel = 0;
};

template <typename T>
struct FrequencyPair {
    Tensor<T> lo;  // [B, H, W, C]
    Tensor<T> hi;  // [B, H, W, C]
};

// Gated dynamic decoupler: predicts a per-image low-pass filter bank from
// globally pooled features, then splits a feature map into complementary
// frequency bands.
template <typename T>
class Gdd {
public:
    Gdd(ParamSet<T>& reg, const std::string& prefix, int channels, int groups, int kernel);

    // GAP -> 1x1 conv -> Hadamard with sigmoid(1x1 conv) -> BatchNorm ->
    // softmax over the k^2 axis per group; the high bank is the complement.
    FilterBank<T> predict_lowpass(const Tensor<T>& f_s, Mode mode);

    FrequencyPair<T> decompose(const Tensor<T>& f_s, Mode mode, Padding padding = Padding::Reflect);

    int channels() const { return channels_; }
    int groups() const { return groups_; }
    int kernel() const { return kernel_; }

private:
    int channels_, groups_, kernel_;
    Tensor<T> expand_w_, expand_b_;  // C -> g*k^2 logits
    Tensor<T> gate_w_, gate_b_;      // g*k^2 -> g*k^2 sigmoid gate
    Tensor<T> bn_gamma_, bn_beta_, bn_mean_, bn_var_;
};

// Depthwise-per-group convolution with one bank kernel per group, boundary by
// reflect or circular padding. kernels is [B, g, k, k].
template <typename T>
Tensor<T> grouped_dynamic_conv(const Tensor<T>& x, const Tensor<T>& kernels, Padding padding);

// The k x k delta kernel (center 1), used for high-pass complements.
template <typename T>
Tensor<T> identity_kernel(int k);

}  // namespace fpro
