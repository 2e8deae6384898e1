#pragma once

#include "fpro/tensor.hpp"

namespace fpro {

// Feature maps are [B, H, W, C] throughout.

enum class Padding { Reflect, Circular };

// Pointwise channel map over the last axis: y = x . w + b.
// w is [Cin, Cout]; b is [Cout] or undefined for no bias.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

// Mirror padding without edge repetition; 1-wide dims fall back to clamping.
template <typename T> Tensor<T> reflect_pad2d(const Tensor<T>& x, int pad);
template <typename T> Tensor<T> circular_pad2d(const Tensor<T>& x, int pad);
template <typename T> Tensor<T> pad2d(const Tensor<T>& x, int pad, Padding mode);
// Rows/cols to add on the bottom/right so H, W become multiples of `m`.
template <typename T> Tensor<T> reflect_pad2d_to(const Tensor<T>& x, int pad_h, int pad_w);
template <typename T> Tensor<T> crop2d(const Tensor<T>& x, int64_t h, int64_t w);

// Dense correlation, no padding. w is [kh, kw, Cin, Cout], b [Cout] or undefined.
template <typename T>
Tensor<T> conv2d_valid(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

// One k x k kernel per channel. w is [kh, kw, C], b [C] or undefined.
template <typename T>
Tensor<T> depthwise_conv2d_valid(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

// One kernel per (batch, channel group), shared by the channels in the
// group: y[b,h,w,c] = sum_{p,q} bank[b, g(c), p, q] * x[b, h+p, w+q, c].
// bank is [B, g, k, k]; C % g == 0; k odd.
template <typename T>
Tensor<T> grouped_filter_conv2d_valid(const Tensor<T>& x, const Tensor<T>& bank);

// Normalization over the last axis, per position.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

// x is [B, C]; batch-axis statistics in training mode, running averages in
// eval mode. Running buffers are updated in place during training.
template <typename T>
Tensor<T> batch_norm_rows(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          Tensor<T>& running_mean, Tensor<T>& running_var, T momentum, T eps,
                          bool training);

// x / sqrt(sum(x^2, axis) + eps), composed from primitives.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, int axis, T eps);

// [B,H,W,C] <-> [B,H/r,W/r,C*r^2]; out channel = c*r^2 + dy*r + dx.
template <typename T> Tensor<T> pixel_unshuffle(const Tensor<T>& x, int r);
template <typename T> Tensor<T> pixel_shuffle(const Tensor<T>& x, int r);

// Separable bilinear interpolation, half-pixel centers. Identity when the
// target matches the source size.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int64_t out_h, int64_t out_w);

// ---- Fourier ops ----
// Half-spectra are packed along the channel axis as [all real | all imag]:
// rfft2 of [B,H,W,C] is [B, H, W/2+1, 2C].

template <typename T> Tensor<T> rfft2(const Tensor<T>& x);
template <typename T> Tensor<T> irfft2(const Tensor<T>& spec, int64_t h, int64_t w);

// Complex Hadamard product / magnitude on packed half-spectra.
template <typename T> Tensor<T> complex_mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> complex_abs(const Tensor<T>& a);

// Power-of-two + Bluestein complex FFT over raw buffers (length n,
// interleaved re/im pairs). Exposed for tests and the spectrum tooling.
void fft_complex(double* re, double* im, int64_t n, bool inverse);

}  // namespace fpro
