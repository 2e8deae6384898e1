#include "fpro/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace fpro {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

int normalize_axis(int axis, int rank) {
    int a = axis < 0 ? axis + rank : axis;
    if (a < 0 || a >= rank) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
    return a;
}

bool broadcast_shapes(const Shape& a, const Shape& b, Shape& out) {
    size_t r = std::max(a.size(), b.size());
    out.assign(r, 1);
    for (size_t i = 0; i < r; ++i) {
        int64_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
        int64_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
        if (da != db && da != 1 && db != 1) return false;
        out[r - 1 - i] = std::max(da, db);
    }
    return true;
}

namespace {

// Row-major strides right-aligned to `rank`, zeroed on broadcast dims.
std::vector<int64_t> broadcast_strides(const Shape& s, size_t rank, const Shape& out) {
    std::vector<int64_t> st(rank, 0);
    int64_t acc = 1;
    for (size_t i = 0; i < s.size(); ++i) {
        size_t k = s.size() - 1 - i;
        size_t ko = rank - 1 - i;
        st[ko] = (s[k] == 1 && out[ko] != 1) ? 0 : acc;
        acc *= s[k];
    }
    return st;
}

// Odometer over `shape` that tracks flat offsets for two broadcast inputs.
struct BroadcastIter {
    const Shape& shape;
    std::vector<int64_t> idx, sa, sb;
    int64_t oa = 0, ob = 0;

    BroadcastIter(const Shape& out, const Shape& a, const Shape& b)
        : shape(out), idx(out.size(), 0),
          sa(broadcast_strides(a, out.size(), out)),
          sb(broadcast_strides(b, out.size(), out)) {}

    void advance() {
        for (int k = int(shape.size()) - 1; k >= 0; --k) {
            oa += sa[k];
            ob += sb[k];
            if (++idx[k] < shape[k]) return;
            oa -= sa[k] * shape[k];
            ob -= sb[k] * shape[k];
            idx[k] = 0;
        }
    }
};

template <typename T>
T* ensure_grad(detail::TensorImpl<T>* t) {
    if (t->grad.empty()) t->grad.assign(t->data.size(), T(0));
    return t->grad.data();
}

template <typename T>
Graph<T>* recording_graph(bool any_tracked) {
    Graph<T>* g = Graph<T>::active();
    return (g && any_tracked) ? g : nullptr;
}

template <typename T>
void check_same_tape(const detail::TensorImpl<T>* t, Graph<T>* g, const char* op) {
    if (t->tape && g && t->tape != g)
        throw Error(std::string(op) + ": input belongs to a different graph");
}

}  // namespace

namespace detail {

template <typename T>
void TensorImpl<T>::accumulate(std::span<const T> g) {
    T* dst = grad.empty() ? (grad.assign(data.size(), T(0)), grad.data()) : grad.data();
    for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

template <typename T>
void TensorImpl<T>::seed_grad_ones() {
    grad.assign(data.size(), T(1));
}

}  // namespace detail

// ---- Tensor ----

template <typename T>
Tensor<T>::Tensor(Shape shape) {
    int64_t n = shape_numel(shape);
    if (n < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    impl_ = std::make_shared<Impl>();
    impl_->shape = std::move(shape);
    impl_->data.assign(size_t(n), T(0));
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) {
    if (shape_numel(shape) != int64_t(values.size()))
        throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) + " values");
    impl_ = std::make_shared<Impl>();
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::randn(Shape shape, Rng& rng, T mean, T stddev) {
    Tensor t(std::move(shape));
    for (T& v : t.impl_->data) v = mean + stddev * T(rng.normal());
    return t;
}

template <typename T>
int64_t Tensor<T>::dim(int i) const {
    int r = rank();
    int k = i < 0 ? i + r : i;
    if (k < 0 || k >= r) throw ShapeError("dim index out of range");
    return impl_->shape[k];
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) throw ShapeError("item() requires a single-element tensor, got " + shape_str(shape()));
    return impl_->data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<int64_t> idx) const {
    if (int(idx.size()) != rank()) throw ShapeError("index rank mismatch");
    int64_t off = 0, stride = 1;
    const Shape& s = impl_->shape;
    int k = int(s.size()) - 1;
    std::vector<int64_t> iv(idx);
    for (; k >= 0; --k) {
        off += iv[size_t(k)] * stride;
        stride *= s[size_t(k)];
    }
    return impl_->data[size_t(off)];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool v) {
    if (impl_->tape) throw Error("requires_grad can only be toggled on leaf tensors");
    impl_->requires_grad = v;
    return *this;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
    if (!has_grad()) throw Error("tensor has no gradient");
    return impl_->grad;
}

template <typename T>
std::span<T> Tensor<T>::grad_mut() {
    if (!has_grad()) throw Error("tensor has no gradient");
    return impl_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
    impl_->grad.clear();
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    return t;
}

// ---- Graph ----

namespace {
template <typename T>
Graph<T>*& active_slot() {
    static thread_local Graph<T>* g = nullptr;
    return g;
}
}  // namespace

template <typename T>
Graph<T>::Scope::Scope(Graph& g) {
    prev_ = active_slot<T>();
    active_slot<T>() = &g;
}

template <typename T>
Graph<T>::Scope::~Scope() {
    active_slot<T>() = prev_;
}

template <typename T>
Graph<T>* Graph<T>::active() {
    return active_slot<T>();
}

template <typename T>
void Graph<T>::backward(const Tensor<T>& loss) {
    if (consumed_) throw Error("backward called twice on the same graph; reset() first");
    if (!loss.defined() || loss.numel() != 1)
        throw ShapeError("backward requires a scalar loss");
    if (loss.impl()->tape != this)
        throw Error("loss is detached from this graph");
    loss.impl()->seed_grad_ones();
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    consumed_ = true;
}

template <typename T>
void Graph<T>::reset() {
    nodes_.clear();
    consumed_ = false;
}

// ---- op plumbing ----

namespace {

template <typename T>
Tensor<T> make_result(Shape shape, Graph<T>* g) {
    Tensor<T> out(std::move(shape));
    out.impl()->tape = g;
    return out;
}

// Generic broadcast binary op. FwdFn(a,b)->y; DaFn(a,b,dy)->da; DbFn(a,b,dy)->db.
template <typename T, typename FwdFn, typename DaFn, typename DbFn>
Tensor<T> binary_impl(const Tensor<T>& a, const Tensor<T>& b, const char* name, FwdFn fwd, DaFn da_fn,
                      DbFn db_fn) {
    Shape out_shape;
    if (!broadcast_shapes(a.shape(), b.shape(), out_shape))
        throw ShapeError(std::string(name) + ": shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()) +
                         " are not broadcast-compatible");
    Graph<T>* g = recording_graph<T>(a.impl()->tracked() || b.impl()->tracked());
    check_same_tape(a.impl(), g, name);
    check_same_tape(b.impl(), g, name);
    Tensor<T> out = make_result<T>(out_shape, g);

    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = out.raw_data().data();
    int64_t n = out.numel();

    if (a.shape() == b.shape()) {
        for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
    } else {
        BroadcastIter it(out.shape(), a.shape(), b.shape());
        for (int64_t i = 0; i < n; ++i, it.advance()) po[i] = fwd(pa[it.oa], pb[it.ob]);
    }

    if (g) {
        auto ia = a.impl_ptr(), ib = b.impl_ptr(), io = out.impl_ptr();
        g->record([ia, ib, io, da_fn, db_fn]() {
            if (io->grad.empty()) return;
            const T* dy = io->grad.data();
            const T* pa = ia->data.data();
            const T* pb = ib->data.data();
            int64_t n = int64_t(io->data.size());
            bool ga = ia->tracked(), gb = ib->tracked();
            if (!ga && !gb) return;
            T* da = ga ? ensure_grad(ia.get()) : nullptr;
            T* db = gb ? ensure_grad(ib.get()) : nullptr;
            if (ia->shape == ib->shape) {
                for (int64_t i = 0; i < n; ++i) {
                    if (ga) da[i] += da_fn(pa[i], pb[i], dy[i]);
                    if (gb) db[i] += db_fn(pa[i], pb[i], dy[i]);
                }
            } else {
                BroadcastIter it(io->shape, ia->shape, ib->shape);
                for (int64_t i = 0; i < n; ++i, it.advance()) {
                    if (ga) da[it.oa] += da_fn(pa[it.oa], pb[it.ob], dy[i]);
                    if (gb) db[it.ob] += db_fn(pa[it.oa], pb[it.ob], dy[i]);
                }
            }
        });
    }
    return out;
}

template <typename T, typename FwdFn, typename BwdFn>
Tensor<T> unary_impl(const Tensor<T>& a, const char* name, FwdFn fwd, BwdFn bwd) {
    Graph<T>* g = recording_graph<T>(a.impl()->tracked());
    check_same_tape(a.impl(), g, name);
    Tensor<T> out = make_result<T>(a.shape(), g);
    const T* pa = a.data().data();
    T* po = out.raw_data().data();
    int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
    if (g) {
        auto ia = a.impl_ptr(), io = out.impl_ptr();
        g->record([ia, io, bwd]() {
            if (io->grad.empty() || !ia->tracked()) return;
            const T* dy = io->grad.data();
            const T* px = ia->data.data();
            const T* py = io->data.data();
            T* da = ensure_grad(ia.get());
            int64_t n = int64_t(io->data.size());
            for (int64_t i = 0; i < n; ++i) da[i] += bwd(px[i], py[i]) * dy[i];
        });
    }
    return out;
}

}  // namespace

// ---- elementwise ops ----

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_impl<T>(
        a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T dy) { return dy; },
        [](T, T, T dy) { return dy; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_impl<T>(
        a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T dy) { return dy; },
        [](T, T, T dy) { return -dy; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_impl<T>(
        a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y, T dy) { return dy * y; },
        [](T x, T, T dy) { return dy * x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_impl<T>(
        a, b, "div", [](T x, T y) { return x / y; }, [](T, T y, T dy) { return dy / y; },
        [](T x, T y, T dy) { return -dy * x / (y * y); });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    return unary_impl<T>(
        a, "add_scalar", [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
    return unary_impl<T>(
        a, "mul_scalar", [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
    return mul_scalar(a, T(-1));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    return unary_impl<T>(
        a, "sigmoid",
        [](T x) {
            if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
            T e = std::exp(x);
            return e / (T(1) + e);
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    constexpr T inv_sqrt2 = T(0.7071067811865475244);
    constexpr T inv_sqrt2pi = T(0.3989422804014326779);
    return unary_impl<T>(
        a, "gelu", [=](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
        [=](T x, T) {
            T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
            return cdf + x * inv_sqrt2pi * std::exp(T(-0.5) * x * x);
        });
}

template <typename T>
Tensor<T> abs_val(const Tensor<T>& a) {
    return unary_impl<T>(
        a, "abs", [](T x) { return std::abs(x); },
        [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> rsqrt(const Tensor<T>& a) {
    return unary_impl<T>(
        a, "rsqrt", [](T x) { return T(1) / std::sqrt(x); },
        [](T, T y) { return T(-0.5) * y * y * y; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
    return unary_impl<T>(
        a, "square", [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// ---- reductions ----

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    Graph<T>* g = recording_graph<T>(a.impl()->tracked());
    check_same_tape(a.impl(), g, "sum_all");
    Tensor<T> out = make_result<T>({1}, g);
    const T* pa = a.data().data();
    T acc = T(0);
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) acc += pa[i];
    out.raw_data()[0] = acc;
    if (g) {
        auto ia = a.impl_ptr(), io = out.impl_ptr();
        g->record([ia, io]() {
            if (io->grad.empty() || !ia->tracked()) return;
            T dy = io->grad[0];
            T* da = ensure_grad(ia.get());
            for (size_t i = 0; i < ia->data.size(); ++i) da[i] += dy;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    return mul_scalar(sum_all(a), T(1) / T(a.numel()));
}

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& a, int axis, bool keepdim) {
    int ax = normalize_axis(axis, a.rank());
    const Shape& s = a.shape();
    int64_t outer = 1, inner = 1, n = s[size_t(ax)];
    for (int i = 0; i < ax; ++i) outer *= s[size_t(i)];
    for (int i = ax + 1; i < a.rank(); ++i) inner *= s[size_t(i)];

    Shape out_shape;
    for (int i = 0; i < a.rank(); ++i) {
        if (i == ax) {
            if (keepdim) out_shape.push_back(1);
        } else {
            out_shape.push_back(s[size_t(i)]);
        }
    }
    if (out_shape.empty()) out_shape.push_back(1);

    Graph<T>* g = recording_graph<T>(a.impl()->tracked());
    check_same_tape(a.impl(), g, "reduce_sum");
    Tensor<T> out = make_result<T>(out_shape, g);
    const T* pa = a.data().data();
    T* po = out.raw_data().data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            T acc = T(0);
            for (int64_t k = 0; k < n; ++k) acc += pa[(o * n + k) * inner + i];
            po[o * inner + i] = acc;
        }
    if (g) {
        auto ia = a.impl_ptr(), io = out.impl_ptr();
        g->record([ia, io, outer, inner, n]() {
            if (io->grad.empty() || !ia->tracked()) return;
            const T* dy = io->grad.data();
            T* da = ensure_grad(ia.get());
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t k = 0; k < n; ++k)
                    for (int64_t i = 0; i < inner; ++i) da[(o * n + k) * inner + i] += dy[o * inner + i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& a, int axis, bool keepdim) {
    int ax = normalize_axis(axis, a.rank());
    return mul_scalar(reduce_sum(a, ax, keepdim), T(1) / T(a.shape()[size_t(ax)]));
}

// ---- shape ops ----

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    int64_t known = 1;
    int infer = -1;
    for (size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            if (infer >= 0) throw ShapeError("reshape: more than one -1");
            infer = int(i);
        } else {
            known *= shape[i];
        }
    }
    if (infer >= 0) {
        if (known == 0 || a.numel() % known != 0) throw ShapeError("reshape: cannot infer dimension");
        shape[size_t(infer)] = a.numel() / known;
    }
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes element count");

    Graph<T>* g = recording_graph<T>(a.impl()->tracked());
    check_same_tape(a.impl(), g, "reshape");
    Tensor<T> out = make_result<T>(shape, g);
    std::copy(a.data().begin(), a.data().end(), out.raw_data().begin());
    if (g) {
        auto ia = a.impl_ptr(), io = out.impl_ptr();
        g->record([ia, io]() {
            if (io->grad.empty() || !ia->tracked()) return;
            ia->accumulate(io->grad);
        });
    }
    return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& order) {
    int r = a.rank();
    if (int(order.size()) != r) throw ShapeError("permute: order rank mismatch");
    std::vector<char> seen(size_t(r), 0);
    for (int o : order) {
        if (o < 0 || o >= r || seen[size_t(o)]) throw ShapeError("permute: invalid order");
        seen[size_t(o)] = 1;
    }
    const Shape& s = a.shape();
    Shape out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[size_t(i)] = s[size_t(order[size_t(i)])];

    std::vector<int64_t> in_strides(static_cast<size_t>(r));
    int64_t acc = 1;
    for (int i = r - 1; i >= 0; --i) {
        in_strides[size_t(i)] = acc;
        acc *= s[size_t(i)];
    }
    // stride of out axis i in the input layout
    std::vector<int64_t> strides(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) strides[size_t(i)] = in_strides[size_t(order[size_t(i)])];

    Graph<T>* g = recording_graph<T>(a.impl()->tracked());
    check_same_tape(a.impl(), g, "permute");
    Tensor<T> out = make_result<T>(out_shape, g);
    const T* pa = a.data().data();
    T* po = out.raw_data().data();
    int64_t n = out.numel();
    std::vector<int64_t> idx(size_t(r), 0);
    int64_t off = 0;
    for (int64_t i = 0; i < n; ++i) {
        po[i] = pa[off];
        for (int k = r - 1; k >= 0; --k) {
            off += strides[size_t(k)];
            if (++idx[size_t(k)] < out_shape[size_t(k)]) break;
            off -= strides[size_t(k)] * out_shape[size_t(k)];
            idx[size_t(k)] = 0;
        }
    }
    if (g) {
        auto ia = a.impl_ptr(), io = out.impl_ptr();
        g->record([ia, io, strides, out_shape, r]() {
            if (io->grad.empty() || !ia->tracked()) return;
            const T* dy = io->grad.data();
            T* da = ensure_grad(ia.get());
            int64_t n = int64_t(io->data.size());
            std::vector<int64_t> idx(size_t(r), 0);
            int64_t off = 0;
            for (int64_t i = 0; i < n; ++i) {
                da[off] += dy[i];
                for (int k = r - 1; k >= 0; --k) {
                    off += strides[size_t(k)];
                    if (++idx[size_t(k)] < out_shape[size_t(k)]) break;
                    off -= strides[size_t(k)] * out_shape[size_t(k)];
                    idx[size_t(k)] = 0;
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_last(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_last: no inputs");
    const Shape& s0 = parts[0].shape();
    int r = int(s0.size());
    int64_t total_c = 0;
    bool tracked = false;
    for (const auto& p : parts) {
        if (p.rank() != r) throw ShapeError("concat_last: rank mismatch");
        for (int i = 0; i + 1 < r; ++i)
            if (p.shape()[size_t(i)] != s0[size_t(i)])
                throw ShapeError("concat_last: shapes " + shape_str(s0) + " vs " + shape_str(p.shape()));
        total_c += p.shape()[size_t(r - 1)];
        tracked = tracked || p.impl()->tracked();
    }
    Shape out_shape = s0;
    out_shape[size_t(r - 1)] = total_c;

    Graph<T>* g = recording_graph<T>(tracked);
    for (const auto& p : parts) check_same_tape(p.impl(), g, "concat_last");
    Tensor<T> out = make_result<T>(out_shape, g);
    int64_t rows = out.numel() / total_c;
    T* po = out.raw_data().data();
    int64_t col = 0;
    for (const auto& p : parts) {
        int64_t c = p.shape()[size_t(r - 1)];
        const T* pp = p.data().data();
        for (int64_t row = 0; row < rows; ++row)
            std::copy(pp + row * c, pp + (row + 1) * c, po + row * total_c + col);
        col += c;
    }
    if (g) {
        std::vector<std::shared_ptr<detail::TensorImpl<T>>> impls;
        for (const auto& p : parts) impls.push_back(p.impl_ptr());
        auto io = out.impl_ptr();
        g->record([impls, io, rows, total_c]() {
            if (io->grad.empty()) return;
            const T* dy = io->grad.data();
            int64_t col = 0;
            for (const auto& ip : impls) {
                int64_t c = ip->shape.back();
                if (ip->tracked()) {
                    T* da = ensure_grad(ip.get());
                    for (int64_t row = 0; row < rows; ++row)
                        for (int64_t j = 0; j < c; ++j) da[row * c + j] += dy[row * total_c + col + j];
                }
                col += c;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> narrow_last(const Tensor<T>& a, int64_t start, int64_t len) {
    const Shape& s = a.shape();
    int64_t c = s.back();
    if (start < 0 || len < 0 || start + len > c)
        throw ShapeError("narrow_last: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") exceeds " + std::to_string(c) + " channels");
    Shape out_shape = s;
    out_shape.back() = len;
    Graph<T>* g = recording_graph<T>(a.impl()->tracked());
    check_same_tape(a.impl(), g, "narrow_last");
    Tensor<T> out = make_result<T>(out_shape, g);
    int64_t rows = a.numel() / c;
    const T* pa = a.data().data();
    T* po = out.raw_data().data();
    for (int64_t row = 0; row < rows; ++row)
        std::copy(pa + row * c + start, pa + row * c + start + len, po + row * len);
    if (g) {
        auto ia = a.impl_ptr(), io = out.impl_ptr();
        g->record([ia, io, rows, c, start, len]() {
            if (io->grad.empty() || !ia->tracked()) return;
            const T* dy = io->grad.data();
            T* da = ensure_grad(ia.get());
            for (int64_t row = 0; row < rows; ++row)
                for (int64_t j = 0; j < len; ++j) da[row * c + start + j] += dy[row * len + j];
        });
    }
    return out;
}

// ---- matmul ----

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul requires rank >= 2");
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    int64_t m = sa[sa.size() - 2], ka = sa.back();
    int64_t kb = sb[sb.size() - 2], n = sb.back();
    if (ka != kb)
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(sa) + " vs " + shape_str(sb));
    Shape batch_a(sa.begin(), sa.end() - 2), batch_b(sb.begin(), sb.end() - 2);
    Shape batch;
    if (!broadcast_shapes(batch_a, batch_b, batch))
        throw ShapeError("matmul: batch dims " + shape_str(batch_a) + " vs " + shape_str(batch_b));
    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);

    int64_t nbatch = shape_numel(batch);
    // flat batch strides (in units of matrices) for each operand
    std::vector<int64_t> ba_str = broadcast_strides(batch_a, batch.size(), batch);
    std::vector<int64_t> bb_str = broadcast_strides(batch_b, batch.size(), batch);

    Graph<T>* g = recording_graph<T>(a.impl()->tracked() || b.impl()->tracked());
    check_same_tape(a.impl(), g, "matmul");
    check_same_tape(b.impl(), g, "matmul");
    Tensor<T> out = make_result<T>(out_shape, g);

    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = out.raw_data().data();
    int64_t k = ka;

    auto batch_offsets = [&](int64_t bi, int64_t& oa, int64_t& ob) {
        oa = 0;
        ob = 0;
        int64_t rem = bi;
        for (size_t d = 0; d < batch.size(); ++d) {
            int64_t stride = 1;
            for (size_t e = d + 1; e < batch.size(); ++e) stride *= batch[e];
            int64_t id = rem / stride;
            rem %= stride;
            oa += id * ba_str[d];
            ob += id * bb_str[d];
        }
    };

    for (int64_t bi = 0; bi < nbatch; ++bi) {
        int64_t oa, ob;
        batch_offsets(bi, oa, ob);
        const T* A = pa + oa * m * k;
        const T* B = pb + ob * k * n;
        T* O = po + bi * m * n;
        for (int64_t i = 0; i < m; ++i) {
            T* orow = O + i * n;
            std::fill(orow, orow + n, T(0));
            for (int64_t p = 0; p < k; ++p) {
                T av = A[i * k + p];
                const T* brow = B + p * n;
                for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
    }

    if (g) {
        auto ia = a.impl_ptr(), ib = b.impl_ptr(), io = out.impl_ptr();
        g->record([ia, ib, io, nbatch, m, n, k, batch, ba_str, bb_str]() {
            if (io->grad.empty()) return;
            const T* dy = io->grad.data();
            const T* pa = ia->data.data();
            const T* pb = ib->data.data();
            bool ga = ia->tracked(), gb = ib->tracked();
            if (!ga && !gb) return;
            T* da = ga ? ensure_grad(ia.get()) : nullptr;
            T* db = gb ? ensure_grad(ib.get()) : nullptr;
            for (int64_t bi = 0; bi < nbatch; ++bi) {
                int64_t oa = 0, ob = 0, rem = bi;
                for (size_t d = 0; d < batch.size(); ++d) {
                    int64_t stride = 1;
                    for (size_t e = d + 1; e < batch.size(); ++e) stride *= batch[e];
                    int64_t id = rem / stride;
                    rem %= stride;
                    oa += id * ba_str[d];
                    ob += id * bb_str[d];
                }
                const T* A = pa + oa * m * k;
                const T* B = pb + ob * k * n;
                const T* D = dy + bi * m * n;
                if (ga) {
                    T* DA = da + oa * m * k;
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t p = 0; p < k; ++p) {
                            T acc = T(0);
                            const T* drow = D + i * n;
                            const T* brow = B + p * n;
                            for (int64_t j = 0; j < n; ++j) acc += drow[j] * brow[j];
                            DA[i * k + p] += acc;
                        }
                }
                if (gb) {
                    T* DB = db + ob * k * n;
                    for (int64_t p = 0; p < k; ++p)
                        for (int64_t j = 0; j < n; ++j) {
                            T acc = T(0);
                            for (int64_t i = 0; i < m; ++i) acc += A[i * k + p] * D[i * n + j];
                            DB[p * n + j] += acc;
                        }
                }
            }
        });
    }
    return out;
}

// ---- softmax ----

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
    int ax = normalize_axis(axis, a.rank());
    const Shape& s = a.shape();
    int64_t outer = 1, inner = 1, n = s[size_t(ax)];
    for (int i = 0; i < ax; ++i) outer *= s[size_t(i)];
    for (int i = ax + 1; i < a.rank(); ++i) inner *= s[size_t(i)];

    Graph<T>* g = recording_graph<T>(a.impl()->tracked());
    check_same_tape(a.impl(), g, "softmax");
    Tensor<T> out = make_result<T>(s, g);
    const T* pa = a.data().data();
    T* po = out.raw_data().data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            T mx = -std::numeric_limits<T>::infinity();
            for (int64_t kk = 0; kk < n; ++kk) mx = std::max(mx, pa[(o * n + kk) * inner + i]);
            if (mx == -std::numeric_limits<T>::infinity())
                throw NumericError("softmax: slice is all -inf");
            T sum = T(0);
            for (int64_t kk = 0; kk < n; ++kk) {
                T e = std::exp(pa[(o * n + kk) * inner + i] - mx);
                po[(o * n + kk) * inner + i] = e;
                sum += e;
            }
            T inv = T(1) / sum;
            for (int64_t kk = 0; kk < n; ++kk) po[(o * n + kk) * inner + i] *= inv;
        }
    if (g) {
        auto ia = a.impl_ptr(), io = out.impl_ptr();
        g->record([ia, io, outer, inner, n]() {
            if (io->grad.empty() || !ia->tracked()) return;
            const T* dy = io->grad.data();
            const T* py = io->data.data();
            T* da = ensure_grad(ia.get());
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t i = 0; i < inner; ++i) {
                    T dot = T(0);
                    for (int64_t kk = 0; kk < n; ++kk) {
                        int64_t at = (o * n + kk) * inner + i;
                        dot += dy[at] * py[at];
                    }
                    for (int64_t kk = 0; kk < n; ++kk) {
                        int64_t at = (o * n + kk) * inner + i;
                        da[at] += py[at] * (dy[at] - dot);
                    }
                }
        });
    }
    return out;
}

template <typename T>
bool all_finite(const Tensor<T>& a) {
    for (T v : a.data())
        if (!std::isfinite(v)) return false;
    return true;
}

// ---- explicit instantiations ----

#define FPRO_INSTANTIATE_TENSOR(T)                                                              \
    template struct detail::TensorImpl<T>;                                                      \
    template class Tensor<T>;                                                                   \
    template class Graph<T>;                                                                    \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                              \
    template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                              \
    template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                              \
    template Tensor<T> div<T>(const Tensor<T>&, const Tensor<T>&);                              \
    template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                      \
    template Tensor<T> mul_scalar<T>(const Tensor<T>&, T);                                      \
    template Tensor<T> neg<T>(const Tensor<T>&);                                                \
    template Tensor<T> sigmoid<T>(const Tensor<T>&);                                            \
    template Tensor<T> gelu<T>(const Tensor<T>&);                                               \
    template Tensor<T> abs_val<T>(const Tensor<T>&);                                            \
    template Tensor<T> rsqrt<T>(const Tensor<T>&);                                              \
    template Tensor<T> square<T>(const Tensor<T>&);                                             \
    template Tensor<T> sum_all<T>(const Tensor<T>&);                                            \
    template Tensor<T> mean_all<T>(const Tensor<T>&);                                           \
    template Tensor<T> reduce_sum<T>(const Tensor<T>&, int, bool);                              \
    template Tensor<T> reduce_mean<T>(const Tensor<T>&, int, bool);                             \
    template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                     \
    template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<int>&);                   \
    template Tensor<T> concat_last<T>(const std::vector<Tensor<T>>&);                           \
    template Tensor<T> narrow_last<T>(const Tensor<T>&, int64_t, int64_t);                      \
    template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                           \
    template Tensor<T> softmax<T>(const Tensor<T>&, int);                                       \
    template bool all_finite<T>(const Tensor<T>&);

FPRO_INSTANTIATE_TENSOR(float)
FPRO_INSTANTIATE_TENSOR(double)

}  // namespace fpro
