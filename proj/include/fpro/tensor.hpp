#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fpro/rng.hpp"

namespace fpro {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};

template <typename T>
class Graph;

namespace detail {

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // allocated on first accumulation
    bool requires_grad = false;
    Graph<T>* tape = nullptr;  // graph that produced this value, if any

    bool tracked() const { return requires_grad || tape != nullptr; }
    void accumulate(std::span<const T> g);
    void seed_grad_ones();
};

}  // namespace detail

// Value handle over a shared contiguous buffer. Copies are shallow; use
// clone() for an independent buffer.
template <typename T>
class Tensor {
public:
    using Impl = detail::TensorImpl<T>;

    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<T> values);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, T value);
    static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }
    static Tensor scalar(T value) { return Tensor({1}, {value}); }
    static Tensor randn(Shape shape, Rng& rng, T mean = T(0), T stddev = T(1));

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return int(impl_->shape.size()); }
    int64_t numel() const { return int64_t(impl_->data.size()); }
    int64_t dim(int i) const;  // negative indices allowed

    std::span<const T> data() const { return impl_->data; }
    std::span<T> raw_data() { return impl_->data; }  // leaf mutation only
    T item() const;
    T at(std::initializer_list<int64_t> idx) const;

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v = true);
    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    std::span<const T> grad() const;
    std::span<T> grad_mut();
    void zero_grad();

    Tensor clone() const;   // deep copy, detached
    Tensor detach() const;  // shares data, no tape linkage

    Impl* impl() const { return impl_.get(); }
    const std::shared_ptr<Impl>& impl_ptr() const { return impl_; }
    static Tensor wrap(std::shared_ptr<Impl> impl) {
        Tensor t;
        t.impl_ = std::move(impl);
        return t;
    }

private:
    std::shared_ptr<Impl> impl_;
};

// Append-only tape of backward rules, one per recorded primitive, in
// execution order. Ops record here while a Scope for this graph is active
// on the current thread and some input is tracked.
template <typename T>
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    class Scope {
    public:
        explicit Scope(Graph& g);
        ~Scope();
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Graph* prev_;
    };

    static Graph* active();

    void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }
    size_t node_count() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    // Seeds d(loss)/d(loss) = 1 and walks the tape in reverse. Rejects a
    // second call without reset(), non-scalar losses, and losses that were
    // not produced on this tape.
    void backward(const Tensor<T>& loss);
    void reset();

private:
    std::vector<std::function<void()>> nodes_;
    bool consumed_ = false;
};

// ---- elementwise and broadcast ops (trailing-dimension broadcasting) ----

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> neg(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> gelu(const Tensor<T>& a);  // exact erf form
template <typename T> Tensor<T> abs_val(const Tensor<T>& a);
template <typename T> Tensor<T> rsqrt(const Tensor<T>& a);
template <typename T> Tensor<T> square(const Tensor<T>& a);

// ---- reductions ----

template <typename T> Tensor<T> sum_all(const Tensor<T>& a);   // [1]
template <typename T> Tensor<T> mean_all(const Tensor<T>& a);  // [1]
template <typename T> Tensor<T> reduce_sum(const Tensor<T>& a, int axis, bool keepdim);
template <typename T> Tensor<T> reduce_mean(const Tensor<T>& a, int axis, bool keepdim);

// ---- shape ops ----

template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& order);
template <typename T> Tensor<T> concat_last(const std::vector<Tensor<T>>& parts);
template <typename T> Tensor<T> narrow_last(const Tensor<T>& a, int64_t start, int64_t len);

// ---- linear algebra ----

// Batched contraction over the two innermost axes; leading axes broadcast.
// Fixed loop order, bit-reproducible per precision.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// Max-subtracted softmax along `axis`. An all -inf slice is an error.
template <typename T> Tensor<T> softmax(const Tensor<T>& a, int axis);

// ---- helpers ----

int normalize_axis(int axis, int rank);
bool broadcast_shapes(const Shape& a, const Shape& b, Shape& out);

template <typename T>
bool all_finite(const Tensor<T>& a);

}  // namespace fpro
