#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fpro/tensor.hpp"

namespace fpro {

enum class Mode { Train, Eval };

// Name-keyed flat buffers, used for optimizer state and checkpoint extras.
template <typename T>
using NamedVectors = std::vector<std::pair<std::string, std::vector<T>>>;

// Ordered registry of named tensors. Initialization draws come from a stream
// forked by parameter name, so the values of one module never depend on which
// other modules exist (ablated builds stay bit-identical where they overlap).
template <typename T>
class ParamSet {
public:
    explicit ParamSet(uint64_t seed) : seed_(seed) {}

    uint64_t seed() const { return seed_; }

    Tensor<T> trunc_normal(const std::string& name, Shape shape, double stddev = 0.02,
                           double mean = 0.0) {
        Rng rng = Rng::fork(seed_, name);
        Tensor<T> t(std::move(shape));
        for (auto& v : t.raw_data()) v = T(mean + stddev * rng.truncated_normal());
        return add(name, std::move(t));
    }

    Tensor<T> constant(const std::string& name, Shape shape, T value) {
        return add(name, Tensor<T>::full(std::move(shape), value));
    }

    Tensor<T> zeros(const std::string& name, Shape shape) {
        return add(name, Tensor<T>::zeros(std::move(shape)));
    }

    Tensor<T> add(const std::string& name, Tensor<T> t) {
        t.set_requires_grad(true);
        params_.emplace_back(name, t);
        return t;
    }

    // Non-trainable state carried with the model (e.g. running statistics).
    Tensor<T> buffer(const std::string& name, Shape shape, T fill) {
        Tensor<T> t = Tensor<T>::full(std::move(shape), fill);
        buffers_.emplace_back(name, t);
        return t;
    }

    const std::vector<std::pair<std::string, Tensor<T>>>& params() const { return params_; }
    const std::vector<std::pair<std::string, Tensor<T>>>& buffers() const { return buffers_; }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    int64_t param_count(const std::string& prefix) const {
        int64_t n = 0;
        for (const auto& [name, t] : params_)
            if (name.rfind(prefix, 0) == 0) n += t.numel();
        return n;
    }

    void zero_grads() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

private:
    uint64_t seed_;
    std::vector<std::pair<std::string, Tensor<T>>> params_;
    std::vector<std::pair<std::string, Tensor<T>>> buffers_;
};

}  // namespace fpro
