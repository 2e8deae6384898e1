#include "fpro/freq.hpp"

namespace fpro {

template <typename T>
Tensor<T> identity_kernel(int k) {
    Tensor<T> id({k, k});
    id.raw_data()[size_t((k / 2) * k + k / 2)] = T(1);
    return id;
}

template <typename T>
Gdd<T>::Gdd(ParamSet<T>& reg, const std::string& prefix, int channels, int groups, int kernel)
    : channels_(channels), groups_(groups), kernel_(kernel) {
    if (groups < 1 || channels % groups != 0)
        throw ConfigError("gdd: channels " + std::to_string(channels) + " not divisible by groups " +
                          std::to_string(groups));
    if (kernel < 1 || kernel % 2 == 0) throw ConfigError("gdd: kernel size must be odd");
    int64_t logits = int64_t(groups) * kernel * kernel;
    expand_w_ = reg.trunc_normal(prefix + ".expand.w", {channels, logits});
    expand_b_ = reg.zeros(prefix + ".expand.b", {logits});
    gate_w_ = reg.trunc_normal(prefix + ".gate.w", {logits, logits});
    gate_b_ = reg.zeros(prefix + ".gate.b", {logits});
    bn_gamma_ = reg.constant(prefix + ".bn.gamma", {logits}, T(1));
    bn_beta_ = reg.zeros(prefix + ".bn.beta", {logits});
    bn_mean_ = reg.buffer(prefix + ".bn.running_mean", {logits}, T(0));
    bn_var_ = reg.buffer(prefix + ".bn.running_var", {logits}, T(1));
}

template <typename T>
FilterBank<T> Gdd<T>::predict_lowpass(const Tensor<T>& f_s, Mode mode) {
    if (f_s.rank() != 4 || f_s.dim(-1) != channels_)
        throw ShapeError("gdd: expected [B,H,W," + std::to_string(channels_) + "], got " +
                         shape_str(f_s.shape()));
    int64_t B = f_s.shape()[0];
    Tensor<T> pooled = reduce_mean(reduce_mean(f_s, 1, false), 1, false);  // [B, C]
    Tensor<T> projected = linear(pooled, expand_w_, expand_b_);            // [B, g*k^2]
    Tensor<T> gated = mul(projected, sigmoid(linear(projected, gate_w_, gate_b_)));
    Tensor<T> normed = batch_norm_rows(gated, bn_gamma_, bn_beta_, bn_mean_, bn_var_, T(0.1), T(1e-5),
                                       mode == Mode::Train);
    Tensor<T> low = softmax(reshape(normed, {B, groups_, int64_t(kernel_) * kernel_}), 2);
    FilterBank<T> bank;
    bank.low = reshape(low, {B, groups_, kernel_, kernel_});
    bank.high = sub(identity_kernel<T>(kernel_), bank.low);
    bank.groups = groups_;
    bank.kernel = kernel_;
    return bank;
}

template <typename T>
FrequencyPair<T> Gdd<T>::decompose(const Tensor<T>& f_s, Mode mode, Padding padding) {
    FilterBank<T> bank = predict_lowpass(f_s, mode);
    FrequencyPair<T> out;
    out.lo = grouped_dynamic_conv(f_s, bank.low, padding);
    out.hi = grouped_dynamic_conv(f_s, bank.high, padding);
    return out;
}

template <typename T>
Tensor<T> grouped_dynamic_conv(const Tensor<T>& x, const Tensor<T>& kernels, Padding padding) {
    if (kernels.rank() != 4) throw ShapeError("grouped_dynamic_conv: kernels must be [B,g,k,k]");
    int k = int(kernels.shape()[3]);
    return grouped_filter_conv2d_valid(pad2d(x, k / 2, padding), kernels);
}

#define FPRO_INSTANTIATE_FREQ(T)                                                             \
    template struct FilterBank<T>;                                                           \
    template struct FrequencyPair<T>;                                                        \
    template class Gdd<T>;                                                                   \
    template Tensor<T> grouped_dynamic_conv<T>(const Tensor<T>&, const Tensor<T>&, Padding); \
    template Tensor<T> identity_kernel<T>(int);

FPRO_INSTANTIATE_FREQ(float)
FPRO_INSTANTIATE_FREQ(double)

}  // namespace fpro
