#include "fpro/nn.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace fpro {

namespace {

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
Tensor<T> make_result(Shape shape, Graph<T>* g) {
    Tensor<T> out(std::move(shape));
    out.impl()->tape = g;
    return out;
}

void check_rank4(const Shape& s, const char* op) {
    if (s.size() != 4) throw ShapeError(std::string(op) + ": expected [B,H,W,C], got " + shape_str(s));
}

int64_t reflect_index(int64_t i, int64_t n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
}

int64_t wrap_index(int64_t i, int64_t n) { return ((i % n) + n) % n; }

}  // namespace

// ---- linear ----

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (w.rank() != 2) throw ShapeError("linear: weight must be [Cin,Cout]");
    int64_t cin = w.shape()[0], cout = w.shape()[1];
    if (x.dim(-1) != cin)
        throw ShapeError("linear: input channels " + std::to_string(x.dim(-1)) + " vs weight " + std::to_string(cin));
    if (b.defined() && (b.rank() != 1 || b.shape()[0] != cout)) throw ShapeError("linear: bad bias shape");

    bool tracked = x.impl()->tracked() || w.impl()->tracked() || (b.defined() && b.impl()->tracked());
    Graph<T>* g = recording_graph<T>(tracked);
    Shape out_shape = x.shape();
    out_shape.back() = cout;
    Tensor<T> out = make_result<T>(out_shape, g);

    int64_t rows = x.numel() / cin;
    const T* px = x.data().data();
    const T* pw = w.data().data();
    const T* pb = b.defined() ? b.data().data() : nullptr;
    T* po = out.raw_data().data();

#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = px + r * cin;
        T* orow = po + r * cout;
        if (pb)
            std::copy(pb, pb + cout, orow);
        else
            std::fill(orow, orow + cout, T(0));
        for (int64_t p = 0; p < cin; ++p) {
            T xv = xr[p];
            const T* wrow = pw + p * cout;
            for (int64_t j = 0; j < cout; ++j) orow[j] += xv * wrow[j];
        }
    }

    if (g) {
        auto ix = x.impl_ptr(), iw = w.impl_ptr(), io = out.impl_ptr();
        auto ib = b.defined() ? b.impl_ptr() : nullptr;
        g->record([ix, iw, ib, io, rows, cin, cout]() {
            if (io->grad.empty()) return;
            const T* dy = io->grad.data();
            const T* px = ix->data.data();
            const T* pw = iw->data.data();
            if (ix->tracked()) {
                T* dx = ensure_grad(ix.get());
#pragma omp parallel for schedule(static)
                for (int64_t r = 0; r < rows; ++r) {
                    const T* dyr = dy + r * cout;
                    T* dxr = dx + r * cin;
                    for (int64_t p = 0; p < cin; ++p) {
                        T acc = T(0);
                        const T* wrow = pw + p * cout;
                        for (int64_t j = 0; j < cout; ++j) acc += dyr[j] * wrow[j];
                        dxr[p] += acc;
                    }
                }
            }
            if (iw->tracked()) {
                T* dw = ensure_grad(iw.get());
#pragma omp parallel for schedule(static)
                for (int64_t j = 0; j < cout; ++j) {
                    for (int64_t r = 0; r < rows; ++r) {
                        T dyv = dy[r * cout + j];
                        const T* xr = px + r * cin;
                        for (int64_t p = 0; p < cin; ++p) dw[p * cout + j] += xr[p] * dyv;
                    }
                }
            }
            if (ib && ib->tracked()) {
                T* db = ensure_grad(ib.get());
                for (int64_t r = 0; r < rows; ++r) {
                    const T* dyr = dy + r * cout;
                    for (int64_t j = 0; j < cout; ++j) db[j] += dyr[j];
                }
            }
        });
    }
    return out;
}

// ---- padding / cropping ----

namespace {

// Shared machinery: pads [B,H,W,C] by explicit amounts with an index map.
template <typename T>
Tensor<T> pad2d_mapped(const Tensor<T>& x, int64_t top, int64_t bottom, int64_t left, int64_t right,
                       int64_t (*map)(int64_t, int64_t), const char* name) {
    check_rank4(x.shape(), name);
    int64_t B = x.shape()[0], H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
    int64_t Ho = H + top + bottom, Wo = W + left + right;
    std::vector<int64_t> rmap(static_cast<size_t>(Ho));
    std::vector<int64_t> cmap(static_cast<size_t>(Wo));
    for (int64_t i = 0; i < Ho; ++i) rmap[size_t(i)] = map(i - top, H);
    for (int64_t j = 0; j < Wo; ++j) cmap[size_t(j)] = map(j - left, W);

    Graph<T>* g = recording_graph<T>(x.impl()->tracked());
    Tensor<T> out = make_result<T>({B, Ho, Wo, C}, g);
    const T* px = x.data().data();
    T* po = out.raw_data().data();
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < Ho; ++i) {
            const T* src_row = px + ((b * H + rmap[size_t(i)]) * W) * C;
            T* dst_row = po + ((b * Ho + i) * Wo) * C;
            for (int64_t j = 0; j < Wo; ++j)
                std::copy(src_row + cmap[size_t(j)] * C, src_row + (cmap[size_t(j)] + 1) * C, dst_row + j * C);
        }
    if (g) {
        auto ix = x.impl_ptr(), io = out.impl_ptr();
        g->record([ix, io, rmap, cmap, B, H, W, C, Ho, Wo]() {
            if (io->grad.empty() || !ix->tracked()) return;
            const T* dy = io->grad.data();
            T* dx = ensure_grad(ix.get());
            for (int64_t b = 0; b < B; ++b)
                for (int64_t i = 0; i < Ho; ++i)
                    for (int64_t j = 0; j < Wo; ++j) {
                        const T* src = dy + ((b * Ho + i) * Wo + j) * C;
                        T* dst = dx + ((b * H + rmap[size_t(i)]) * W + cmap[size_t(j)]) * C;
                        for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
                    }
        });
    }
    return out;
}

}  // namespace

template <typename T>
Tensor<T> reflect_pad2d(const Tensor<T>& x, int pad) {
    return pad2d_mapped<T>(x, pad, pad, pad, pad, &reflect_index, "reflect_pad2d");
}

template <typename T>
Tensor<T> circular_pad2d(const Tensor<T>& x, int pad) {
    return pad2d_mapped<T>(x, pad, pad, pad, pad, &wrap_index, "circular_pad2d");
}

template <typename T>
Tensor<T> pad2d(const Tensor<T>& x, int pad, Padding mode) {
    return mode == Padding::Reflect ? reflect_pad2d(x, pad) : circular_pad2d(x, pad);
}

template <typename T>
Tensor<T> reflect_pad2d_to(const Tensor<T>& x, int pad_h, int pad_w) {
    if (pad_h == 0 && pad_w == 0) return x;
    return pad2d_mapped<T>(x, 0, pad_h, 0, pad_w, &reflect_index, "reflect_pad2d_to");
}

template <typename T>
Tensor<T> crop2d(const Tensor<T>& x, int64_t h, int64_t w) {
    check_rank4(x.shape(), "crop2d");
    int64_t B = x.shape()[0], H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
    if (h > H || w > W) throw ShapeError("crop2d: target larger than input");
    if (h == H && w == W) return x;
    Graph<T>* g = recording_graph<T>(x.impl()->tracked());
    Tensor<T> out = make_result<T>({B, h, w, C}, g);
    const T* px = x.data().data();
    T* po = out.raw_data().data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < h; ++i)
            std::copy(px + ((b * H + i) * W) * C, px + ((b * H + i) * W + w) * C, po + ((b * h + i) * w) * C);
    if (g) {
        auto ix = x.impl_ptr(), io = out.impl_ptr();
        g->record([ix, io, B, H, W, C, h, w]() {
            if (io->grad.empty() || !ix->tracked()) return;
            const T* dy = io->grad.data();
            T* dx = ensure_grad(ix.get());
            for (int64_t b = 0; b < B; ++b)
                for (int64_t i = 0; i < h; ++i)
                    for (int64_t j = 0; j < w; ++j)
                        for (int64_t c = 0; c < C; ++c)
                            dx[((b * H + i) * W + j) * C + c] += dy[((b * h + i) * w + j) * C + c];
        });
    }
    return out;
}

// ---- convolutions ----

template <typename T>
Tensor<T> conv2d_valid(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    check_rank4(x.shape(), "conv2d_valid");
    if (w.rank() != 4) throw ShapeError("conv2d_valid: weight must be [kh,kw,Cin,Cout]");
    int64_t B = x.shape()[0], H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
    int64_t kh = w.shape()[0], kw = w.shape()[1], cin = w.shape()[2], cout = w.shape()[3];
    if (cin != C) throw ShapeError("conv2d_valid: channel mismatch");
    int64_t Ho = H - kh + 1, Wo = W - kw + 1;
    if (Ho < 1 || Wo < 1) throw ShapeError("conv2d_valid: kernel larger than input");

    bool tracked = x.impl()->tracked() || w.impl()->tracked() || (b.defined() && b.impl()->tracked());
    Graph<T>* g = recording_graph<T>(tracked);
    Tensor<T> out = make_result<T>({B, Ho, Wo, cout}, g);
    const T* px = x.data().data();
    const T* pw = w.data().data();
    const T* pb = b.defined() ? b.data().data() : nullptr;
    T* po = out.raw_data().data();

#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t bb = 0; bb < B; ++bb)
        for (int64_t i = 0; i < Ho; ++i)
            for (int64_t j = 0; j < Wo; ++j) {
                T* orow = po + ((bb * Ho + i) * Wo + j) * cout;
                if (pb)
                    std::copy(pb, pb + cout, orow);
                else
                    std::fill(orow, orow + cout, T(0));
                for (int64_t p = 0; p < kh; ++p)
                    for (int64_t q = 0; q < kw; ++q) {
                        const T* xr = px + ((bb * H + i + p) * W + j + q) * C;
                        const T* wr = pw + (p * kw + q) * C * cout;
                        for (int64_t c = 0; c < C; ++c) {
                            T xv = xr[c];
                            const T* wc = wr + c * cout;
                            for (int64_t o = 0; o < cout; ++o) orow[o] += xv * wc[o];
                        }
                    }
            }

    if (g) {
        auto ix = x.impl_ptr(), iw = w.impl_ptr(), io = out.impl_ptr();
        auto ib = b.defined() ? b.impl_ptr() : nullptr;
        g->record([ix, iw, ib, io, B, H, W, C, kh, kw, cout, Ho, Wo]() {
            if (io->grad.empty()) return;
            const T* dy = io->grad.data();
            const T* px = ix->data.data();
            const T* pw = iw->data.data();
            if (ix->tracked()) {
                T* dx = ensure_grad(ix.get());
#pragma omp parallel for collapse(2) schedule(static)
                for (int64_t bb = 0; bb < B; ++bb)
                    for (int64_t i = 0; i < H; ++i)
                        for (int64_t j = 0; j < W; ++j) {
                            T* dxr = dx + ((bb * H + i) * W + j) * C;
                            for (int64_t p = 0; p < kh; ++p) {
                                int64_t oi = i - p;
                                if (oi < 0 || oi >= Ho) continue;
                                for (int64_t q = 0; q < kw; ++q) {
                                    int64_t oj = j - q;
                                    if (oj < 0 || oj >= Wo) continue;
                                    const T* dyr = dy + ((bb * Ho + oi) * Wo + oj) * cout;
                                    const T* wr = pw + (p * kw + q) * C * cout;
                                    for (int64_t c = 0; c < C; ++c) {
                                        T acc = T(0);
                                        const T* wc = wr + c * cout;
                                        for (int64_t o = 0; o < cout; ++o) acc += dyr[o] * wc[o];
                                        dxr[c] += acc;
                                    }
                                }
                            }
                        }
            }
            if (iw->tracked()) {
                T* dw = ensure_grad(iw.get());
                for (int64_t bb = 0; bb < B; ++bb)
                    for (int64_t i = 0; i < Ho; ++i)
                        for (int64_t j = 0; j < Wo; ++j) {
                            const T* dyr = dy + ((bb * Ho + i) * Wo + j) * cout;
                            for (int64_t p = 0; p < kh; ++p)
                                for (int64_t q = 0; q < kw; ++q) {
                                    const T* xr = px + ((bb * H + i + p) * W + j + q) * C;
                                    T* wr = dw + (p * kw + q) * C * cout;
                                    for (int64_t c = 0; c < C; ++c) {
                                        T xv = xr[c];
                                        T* wc = wr + c * cout;
                                        for (int64_t o = 0; o < cout; ++o) wc[o] += xv * dyr[o];
                                    }
                                }
                        }
            }
            if (ib && ib->tracked()) {
                T* db = ensure_grad(ib.get());
                int64_t pixels = B * Ho * Wo;
                for (int64_t r = 0; r < pixels; ++r)
                    for (int64_t o = 0; o < cout; ++o) db[o] += dy[r * cout + o];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> depthwise_conv2d_valid(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    check_rank4(x.shape(), "depthwise_conv2d_valid");
    if (w.rank() != 3) throw ShapeError("depthwise_conv2d_valid: weight must be [kh,kw,C]");
    int64_t B = x.shape()[0], H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
    int64_t kh = w.shape()[0], kw = w.shape()[1];
    if (w.shape()[2] != C) throw ShapeError("depthwise_conv2d_valid: channel mismatch");
    int64_t Ho = H - kh + 1, Wo = W - kw + 1;
    if (Ho < 1 || Wo < 1) throw ShapeError("depthwise_conv2d_valid: kernel larger than input");

    bool tracked = x.impl()->tracked() || w.impl()->tracked() || (b.defined() && b.impl()->tracked());
    Graph<T>* g = recording_graph<T>(tracked);
    Tensor<T> out = make_result<T>({B, Ho, Wo, C}, g);
    const T* px = x.data().data();
    const T* pw = w.data().data();
    const T* pb = b.defined() ? b.data().data() : nullptr;
    T* po = out.raw_data().data();

#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t bb = 0; bb < B; ++bb)
        for (int64_t i = 0; i < Ho; ++i)
            for (int64_t j = 0; j < Wo; ++j) {
                T* orow = po + ((bb * Ho + i) * Wo + j) * C;
                if (pb)
                    std::copy(pb, pb + C, orow);
                else
                    std::fill(orow, orow + C, T(0));
                for (int64_t p = 0; p < kh; ++p)
                    for (int64_t q = 0; q < kw; ++q) {
                        const T* xr = px + ((bb * H + i + p) * W + j + q) * C;
                        const T* wr = pw + (p * kw + q) * C;
                        for (int64_t c = 0; c < C; ++c) orow[c] += xr[c] * wr[c];
                    }
            }

    if (g) {
        auto ix = x.impl_ptr(), iw = w.impl_ptr(), io = out.impl_ptr();
        auto ib = b.defined() ? b.impl_ptr() : nullptr;
        g->record([ix, iw, ib, io, B, H, W, C, kh, kw, Ho, Wo]() {
            if (io->grad.empty()) return;
            const T* dy = io->grad.data();
            const T* px = ix->data.data();
            const T* pw = iw->data.data();
            if (ix->tracked()) {
                T* dx = ensure_grad(ix.get());
#pragma omp parallel for collapse(2) schedule(static)
                for (int64_t bb = 0; bb < B; ++bb)
                    for (int64_t i = 0; i < H; ++i)
                        for (int64_t j = 0; j < W; ++j) {
                            T* dxr = dx + ((bb * H + i) * W + j) * C;
                            for (int64_t p = 0; p < kh; ++p) {
                                int64_t oi = i - p;
                                if (oi < 0 || oi >= Ho) continue;
                                for (int64_t q = 0; q < kw; ++q) {
                                    int64_t oj = j - q;
                                    if (oj < 0 || oj >= Wo) continue;
                                    const T* dyr = dy + ((bb * Ho + oi) * Wo + oj) * C;
                                    const T* wr = pw + (p * kw + q) * C;
                                    for (int64_t c = 0; c < C; ++c) dxr[c] += dyr[c] * wr[c];
                                }
                            }
                        }
            }
            if (iw->tracked()) {
                T* dw = ensure_grad(iw.get());
                for (int64_t bb = 0; bb < B; ++bb)
                    for (int64_t i = 0; i < Ho; ++i)
                        for (int64_t j = 0; j < Wo; ++j) {
                            const T* dyr = dy + ((bb * Ho + i) * Wo + j) * C;
                            for (int64_t p = 0; p < kh; ++p)
                                for (int64_t q = 0; q < kw; ++q) {
                                    const T* xr = px + ((bb * H + i + p) * W + j + q) * C;
                                    T* wr = dw + (p * kw + q) * C;
                                    for (int64_t c = 0; c < C; ++c) wr[c] += xr[c] * dyr[c];
                                }
                        }
            }
            if (ib && ib->tracked()) {
                T* db = ensure_grad(ib.get());
                int64_t pixels = B * Ho * Wo;
                for (int64_t r = 0; r < pixels; ++r)
                    for (int64_t c = 0; c < C; ++c) db[c] += dy[r * C + c];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> grouped_filter_conv2d_valid(const Tensor<T>& x, const Tensor<T>& bank) {
    check_rank4(x.shape(), "grouped_filter_conv2d_valid");
    if (bank.rank() != 4) throw ShapeError("grouped_filter_conv2d_valid: bank must be [B,g,k,k]");
    int64_t B = x.shape()[0], H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
    int64_t gB = bank.shape()[0], G = bank.shape()[1], kh = bank.shape()[2], kw = bank.shape()[3];
    if (gB != B) throw ShapeError("grouped_filter_conv2d_valid: bank batch mismatch");
    if (kh != kw || kh % 2 == 0) throw ShapeError("grouped_filter_conv2d_valid: kernel must be odd square");
    if (C % G != 0)
        throw ShapeError("grouped_filter_conv2d_valid: channels " + std::to_string(C) + " not divisible by " +
                         std::to_string(G) + " groups");
    int64_t Ho = H - kh + 1, Wo = W - kw + 1;
    if (Ho < 1 || Wo < 1) throw ShapeError("grouped_filter_conv2d_valid: kernel larger than input");
    int64_t cg = C / G;

    bool tracked = x.impl()->tracked() || bank.impl()->tracked();
    Graph<T>* g = recording_graph<T>(tracked);
    Tensor<T> out = make_result<T>({B, Ho, Wo, C}, g);
    const T* px = x.data().data();
    const T* pk = bank.data().data();
    T* po = out.raw_data().data();

#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t bb = 0; bb < B; ++bb)
        for (int64_t i = 0; i < Ho; ++i)
            for (int64_t j = 0; j < Wo; ++j) {
                T* orow = po + ((bb * Ho + i) * Wo + j) * C;
                std::fill(orow, orow + C, T(0));
                for (int64_t p = 0; p < kh; ++p)
                    for (int64_t q = 0; q < kw; ++q) {
                        const T* xr = px + ((bb * H + i + p) * W + j + q) * C;
                        const T* kr = pk + (bb * G * kh * kw) + p * kw + q;
                        for (int64_t c = 0; c < C; ++c) orow[c] += kr[(c / cg) * kh * kw] * xr[c];
                    }
            }

    if (g) {
        auto ix = x.impl_ptr(), ik = bank.impl_ptr(), io = out.impl_ptr();
        g->record([ix, ik, io, B, H, W, C, G, kh, kw, cg, Ho, Wo]() {
            if (io->grad.empty()) return;
            const T* dy = io->grad.data();
            const T* px = ix->data.data();
            const T* pk = ik->data.data();
            if (ix->tracked()) {
                T* dx = ensure_grad(ix.get());
#pragma omp parallel for collapse(2) schedule(static)
                for (int64_t bb = 0; bb < B; ++bb)
                    for (int64_t i = 0; i < H; ++i)
                        for (int64_t j = 0; j < W; ++j) {
                            T* dxr = dx + ((bb * H + i) * W + j) * C;
                            for (int64_t p = 0; p < kh; ++p) {
                                int64_t oi = i - p;
                                if (oi < 0 || oi >= Ho) continue;
                                for (int64_t q = 0; q < kw; ++q) {
                                    int64_t oj = j - q;
                                    if (oj < 0 || oj >= Wo) continue;
                                    const T* dyr = dy + ((bb * Ho + oi) * Wo + oj) * C;
                                    const T* kr = pk + (bb * G * kh * kw) + p * kw + q;
                                    for (int64_t c = 0; c < C; ++c) dxr[c] += kr[(c / cg) * kh * kw] * dyr[c];
                                }
                            }
                        }
            }
            if (ik->tracked()) {
                T* dk = ensure_grad(ik.get());
                for (int64_t bb = 0; bb < B; ++bb)
                    for (int64_t i = 0; i < Ho; ++i)
                        for (int64_t j = 0; j < Wo; ++j) {
                            const T* dyr = dy + ((bb * Ho + i) * Wo + j) * C;
                            for (int64_t p = 0; p < kh; ++p)
                                for (int64_t q = 0; q < kw; ++q) {
                                    const T* xr = px + ((bb * H + i + p) * W + j + q) * C;
                                    T* kr = dk + (bb * G * kh * kw) + p * kw + q;
                                    for (int64_t c = 0; c < C; ++c) kr[(c / cg) * kh * kw] += xr[c] * dyr[c];
                                }
                        }
            }
        });
    }
    return out;
}

// ---- normalization ----

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    int64_t C = x.dim(-1);
    if (gamma.numel() != C || beta.numel() != C) throw ShapeError("layer_norm: scale/shift must be [C]");
    int64_t rows = x.numel() / C;

    bool tracked = x.impl()->tracked() || gamma.impl()->tracked() || beta.impl()->tracked();
    Graph<T>* g = recording_graph<T>(tracked);
    Tensor<T> out = make_result<T>(x.shape(), g);
    auto xhat = std::make_shared<std::vector<T>>(size_t(rows * C));
    auto inv_std = std::make_shared<std::vector<T>>(size_t(rows));

    const T* px = x.data().data();
    const T* pg = gamma.data().data();
    const T* pbta = beta.data().data();
    T* po = out.raw_data().data();
    T* ph = xhat->data();
    T* pis = inv_std->data();

#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = px + r * C;
        T mu = T(0);
        for (int64_t c = 0; c < C; ++c) mu += xr[c];
        mu /= T(C);
        T var = T(0);
        for (int64_t c = 0; c < C; ++c) {
            T d = xr[c] - mu;
            var += d * d;
        }
        var /= T(C);
        T is = T(1) / std::sqrt(var + eps);
        pis[r] = is;
        for (int64_t c = 0; c < C; ++c) {
            T h = (xr[c] - mu) * is;
            ph[r * C + c] = h;
            po[r * C + c] = h * pg[c] + pbta[c];
        }
    }

    if (g) {
        auto ix = x.impl_ptr(), ig = gamma.impl_ptr(), ib = beta.impl_ptr(), io = out.impl_ptr();
        g->record([ix, ig, ib, io, xhat, inv_std, rows, C]() {
            if (io->grad.empty()) return;
            const T* dy = io->grad.data();
            const T* pg = ig->data.data();
            const T* ph = xhat->data();
            const T* pis = inv_std->data();
            if (ix->tracked()) {
                T* dx = ensure_grad(ix.get());
#pragma omp parallel for schedule(static)
                for (int64_t r = 0; r < rows; ++r) {
                    T mean_dh = T(0), mean_dh_h = T(0);
                    for (int64_t c = 0; c < C; ++c) {
                        T dh = dy[r * C + c] * pg[c];
                        mean_dh += dh;
                        mean_dh_h += dh * ph[r * C + c];
                    }
                    mean_dh /= T(C);
                    mean_dh_h /= T(C);
                    for (int64_t c = 0; c < C; ++c) {
                        T dh = dy[r * C + c] * pg[c];
                        dx[r * C + c] += pis[r] * (dh - mean_dh - ph[r * C + c] * mean_dh_h);
                    }
                }
            }
            if (ig->tracked()) {
                T* dg = ensure_grad(ig.get());
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < C; ++c) dg[c] += dy[r * C + c] * ph[r * C + c];
            }
            if (ib->tracked()) {
                T* db = ensure_grad(ib.get());
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < C; ++c) db[c] += dy[r * C + c];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> batch_norm_rows(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          Tensor<T>& running_mean, Tensor<T>& running_var, T momentum, T eps,
                          bool training) {
    if (x.rank() != 2) throw ShapeError("batch_norm_rows: expected [B,C]");
    int64_t B = x.shape()[0], C = x.shape()[1];
    if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C || running_var.numel() != C)
        throw ShapeError("batch_norm_rows: parameter size mismatch");

    bool tracked = x.impl()->tracked() || gamma.impl()->tracked() || beta.impl()->tracked();
    Graph<T>* g = recording_graph<T>(tracked);
    Tensor<T> out = make_result<T>(x.shape(), g);
    const T* px = x.data().data();
    const T* pg = gamma.data().data();
    const T* pbta = beta.data().data();
    T* po = out.raw_data().data();

    if (training) {
        auto xhat = std::make_shared<std::vector<T>>(size_t(B * C));
        auto inv_std = std::make_shared<std::vector<T>>(size_t(C));
        T* rm = running_mean.raw_data().data();
        T* rv = running_var.raw_data().data();
        for (int64_t c = 0; c < C; ++c) {
            T mu = T(0);
            for (int64_t b = 0; b < B; ++b) mu += px[b * C + c];
            mu /= T(B);
            T var = T(0);
            for (int64_t b = 0; b < B; ++b) {
                T d = px[b * C + c] - mu;
                var += d * d;
            }
            var /= T(B);
            T is = T(1) / std::sqrt(var + eps);
            (*inv_std)[size_t(c)] = is;
            // unbiased variance for the running estimate when possible
            T rvar = B > 1 ? var * T(B) / T(B - 1) : var;
            rm[c] = (T(1) - momentum) * rm[c] + momentum * mu;
            rv[c] = (T(1) - momentum) * rv[c] + momentum * rvar;
            for (int64_t b = 0; b < B; ++b) {
                T h = (px[b * C + c] - mu) * is;
                (*xhat)[size_t(b * C + c)] = h;
                po[b * C + c] = h * pg[c] + pbta[c];
            }
        }
        if (g) {
            auto ix = x.impl_ptr(), ig = gamma.impl_ptr(), ib = beta.impl_ptr(), io = out.impl_ptr();
            g->record([ix, ig, ib, io, xhat, inv_std, B, C]() {
                if (io->grad.empty()) return;
                const T* dy = io->grad.data();
                const T* pg = ig->data.data();
                const T* ph = xhat->data();
                if (ix->tracked()) {
                    T* dx = ensure_grad(ix.get());
                    for (int64_t c = 0; c < C; ++c) {
                        T sum_dh = T(0), sum_dh_h = T(0);
                        for (int64_t b = 0; b < B; ++b) {
                            T dh = dy[b * C + c] * pg[c];
                            sum_dh += dh;
                            sum_dh_h += dh * ph[b * C + c];
                        }
                        T is = (*inv_std)[size_t(c)];
                        for (int64_t b = 0; b < B; ++b) {
                            T dh = dy[b * C + c] * pg[c];
                            dx[b * C + c] += is * (dh - sum_dh / T(B) - ph[b * C + c] * sum_dh_h / T(B));
                        }
                    }
                }
                if (ig->tracked()) {
                    T* dg = ensure_grad(ig.get());
                    for (int64_t b = 0; b < B; ++b)
                        for (int64_t c = 0; c < C; ++c) dg[c] += dy[b * C + c] * ph[b * C + c];
                }
                if (ib->tracked()) {
                    T* db = ensure_grad(ib.get());
                    for (int64_t b = 0; b < B; ++b)
                        for (int64_t c = 0; c < C; ++c) db[c] += dy[b * C + c];
                }
            });
        }
    } else {
        const T* rm = running_mean.data().data();
        const T* rv = running_var.data().data();
        auto xhat = std::make_shared<std::vector<T>>(size_t(B * C));
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c) {
                T h = (px[b * C + c] - rm[c]) / std::sqrt(rv[c] + eps);
                (*xhat)[size_t(b * C + c)] = h;
                po[b * C + c] = h * pg[c] + pbta[c];
            }
        if (g) {
            auto ix = x.impl_ptr(), ig = gamma.impl_ptr(), ib = beta.impl_ptr(), io = out.impl_ptr();
            auto irv = running_var.impl_ptr();
            T eps_c = eps;
            g->record([ix, ig, ib, io, irv, xhat, B, C, eps_c]() {
                if (io->grad.empty()) return;
                const T* dy = io->grad.data();
                const T* pg = ig->data.data();
                const T* rv = irv->data.data();
                const T* ph = xhat->data();
                if (ix->tracked()) {
                    T* dx = ensure_grad(ix.get());
                    for (int64_t b = 0; b < B; ++b)
                        for (int64_t c = 0; c < C; ++c)
                            dx[b * C + c] += dy[b * C + c] * pg[c] / std::sqrt(rv[c] + eps_c);
                }
                if (ig->tracked()) {
                    T* dg = ensure_grad(ig.get());
                    for (int64_t b = 0; b < B; ++b)
                        for (int64_t c = 0; c < C; ++c) dg[c] += dy[b * C + c] * ph[b * C + c];
                }
                if (ib->tracked()) {
                    T* db = ensure_grad(ib.get());
                    for (int64_t b = 0; b < B; ++b)
                        for (int64_t c = 0; c < C; ++c) db[c] += dy[b * C + c];
                }
            });
        }
    }
    return out;
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, int axis, T eps) {
    Tensor<T> ss = reduce_sum(square(x), axis, /*keepdim=*/true);
    return mul(x, rsqrt(add_scalar(ss, eps)));
}

// ---- pixel shuffle ----

template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, int r) {
    check_rank4(x.shape(), "pixel_unshuffle");
    int64_t B = x.shape()[0], H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
    if (r < 1 || H % r != 0 || W % r != 0)
        throw ShapeError("pixel_unshuffle: spatial size " + std::to_string(H) + "x" + std::to_string(W) +
                         " not divisible by " + std::to_string(r));
    int64_t Ho = H / r, Wo = W / r, Co = C * r * r;
    Graph<T>* g = recording_graph<T>(x.impl()->tracked());
    Tensor<T> out = make_result<T>({B, Ho, Wo, Co}, g);
    const T* px = x.data().data();
    T* po = out.raw_data().data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < Ho; ++i)
            for (int64_t j = 0; j < Wo; ++j)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t dy = 0; dy < r; ++dy)
                        for (int64_t dx = 0; dx < r; ++dx)
                            po[((b * Ho + i) * Wo + j) * Co + c * r * r + dy * r + dx] =
                                px[((b * H + i * r + dy) * W + j * r + dx) * C + c];
    if (g) {
        auto ix = x.impl_ptr(), io = out.impl_ptr();
        int64_t rr = r;
        g->record([ix, io, B, H, W, C, Ho, Wo, Co, rr]() {
            if (io->grad.empty() || !ix->tracked()) return;
            const T* dyp = io->grad.data();
            T* dxp = ensure_grad(ix.get());
            for (int64_t b = 0; b < B; ++b)
                for (int64_t i = 0; i < Ho; ++i)
                    for (int64_t j = 0; j < Wo; ++j)
                        for (int64_t c = 0; c < C; ++c)
                            for (int64_t dy = 0; dy < rr; ++dy)
                                for (int64_t dx = 0; dx < rr; ++dx)
                                    dxp[((b * H + i * rr + dy) * W + j * rr + dx) * C + c] +=
                                        dyp[((b * Ho + i) * Wo + j) * Co + c * rr * rr + dy * rr + dx];
        });
    }
    return out;
}

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int r) {
    check_rank4(x.shape(), "pixel_shuffle");
    int64_t B = x.shape()[0], H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
    if (r < 1 || C % (int64_t(r) * r) != 0)
        throw ShapeError("pixel_shuffle: channels " + std::to_string(C) + " not divisible by r^2");
    int64_t Co = C / (int64_t(r) * r), Ho = H * r, Wo = W * r;
    Graph<T>* g = recording_graph<T>(x.impl()->tracked());
    Tensor<T> out = make_result<T>({B, Ho, Wo, Co}, g);
    const T* px = x.data().data();
    T* po = out.raw_data().data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < H; ++i)
            for (int64_t j = 0; j < W; ++j)
                for (int64_t c = 0; c < Co; ++c)
                    for (int64_t dy = 0; dy < r; ++dy)
                        for (int64_t dx = 0; dx < r; ++dx)
                            po[((b * Ho + i * r + dy) * Wo + j * r + dx) * Co + c] =
                                px[((b * H + i) * W + j) * C + c * r * r + dy * r + dx];
    if (g) {
        auto ix = x.impl_ptr(), io = out.impl_ptr();
        int64_t rr = r;
        g->record([ix, io, B, H, W, C, Ho, Wo, Co, rr]() {
            if (io->grad.empty() || !ix->tracked()) return;
            const T* dyp = io->grad.data();
            T* dxp = ensure_grad(ix.get());
            for (int64_t b = 0; b < B; ++b)
                for (int64_t i = 0; i < H; ++i)
                    for (int64_t j = 0; j < W; ++j)
                        for (int64_t c = 0; c < Co; ++c)
                            for (int64_t dy = 0; dy < rr; ++dy)
                                for (int64_t dx = 0; dx < rr; ++dx)
                                    dxp[((b * H + i) * W + j) * C + c * rr * rr + dy * rr + dx] +=
                                        dyp[((b * Ho + i * rr + dy) * Wo + j * rr + dx) * Co + c];
        });
    }
    return out;
}

// ---- resize ----

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int64_t out_h, int64_t out_w) {
    check_rank4(x.shape(), "resize_bilinear");
    if (out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear: target must be >= 1");
    int64_t B = x.shape()[0], H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
    if (out_h == H && out_w == W) return reshape(x, x.shape());  // bit-exact no-op

    struct Tap {
        int64_t i0, i1;
        T w1;  // weight of i1; i0 gets 1-w1
    };
    auto make_taps = [](int64_t n_in, int64_t n_out) {
        std::vector<Tap> taps(static_cast<size_t>(n_out));
        double scale = double(n_in) / double(n_out);
        for (int64_t i = 0; i < n_out; ++i) {
            double s = (double(i) + 0.5) * scale - 0.5;
            s = std::min(std::max(s, 0.0), double(n_in - 1));
            int64_t i0 = int64_t(std::floor(s));
            int64_t i1 = std::min(i0 + 1, n_in - 1);
            taps[size_t(i)] = {i0, i1, T(s - double(i0))};
        }
        return taps;
    };
    std::vector<Tap> ty = make_taps(H, out_h), tx = make_taps(W, out_w);

    Graph<T>* g = recording_graph<T>(x.impl()->tracked());
    Tensor<T> out = make_result<T>({B, out_h, out_w, C}, g);
    const T* px = x.data().data();
    T* po = out.raw_data().data();
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < out_h; ++i) {
            const Tap& a = ty[size_t(i)];
            for (int64_t j = 0; j < out_w; ++j) {
                const Tap& bb = tx[size_t(j)];
                const T* r00 = px + ((b * H + a.i0) * W + bb.i0) * C;
                const T* r01 = px + ((b * H + a.i0) * W + bb.i1) * C;
                const T* r10 = px + ((b * H + a.i1) * W + bb.i0) * C;
                const T* r11 = px + ((b * H + a.i1) * W + bb.i1) * C;
                T* orow = po + ((b * out_h + i) * out_w + j) * C;
                T wy = a.w1, wx = bb.w1;
                for (int64_t c = 0; c < C; ++c)
                    orow[c] = (T(1) - wy) * ((T(1) - wx) * r00[c] + wx * r01[c]) +
                              wy * ((T(1) - wx) * r10[c] + wx * r11[c]);
            }
        }
    if (g) {
        auto ix = x.impl_ptr(), io = out.impl_ptr();
        g->record([ix, io, ty, tx, B, H, W, C, out_h, out_w]() {
            if (io->grad.empty() || !ix->tracked()) return;
            const T* dy = io->grad.data();
            T* dx = ensure_grad(ix.get());
            for (int64_t b = 0; b < B; ++b)
                for (int64_t i = 0; i < out_h; ++i) {
                    const Tap& a = ty[size_t(i)];
                    for (int64_t j = 0; j < out_w; ++j) {
                        const Tap& bb = tx[size_t(j)];
                        const T* dyr = dy + ((b * out_h + i) * out_w + j) * C;
                        T wy = a.w1, wx = bb.w1;
                        T* d00 = dx + ((b * H + a.i0) * W + bb.i0) * C;
                        T* d01 = dx + ((b * H + a.i0) * W + bb.i1) * C;
                        T* d10 = dx + ((b * H + a.i1) * W + bb.i0) * C;
                        T* d11 = dx + ((b * H + a.i1) * W + bb.i1) * C;
                        for (int64_t c = 0; c < C; ++c) {
                            T v = dyr[c];
                            d00[c] += (T(1) - wy) * (T(1) - wx) * v;
                            d01[c] += (T(1) - wy) * wx * v;
                            d10[c] += wy * (T(1) - wx) * v;
                            d11[c] += wy * wx * v;
                        }
                    }
                }
        });
    }
    return out;
}

// ---- explicit instantiations ----

#define FPRO_INSTANTIATE_NN(T)                                                                       \
    template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
    template Tensor<T> reflect_pad2d<T>(const Tensor<T>&, int);                                     \
    template Tensor<T> circular_pad2d<T>(const Tensor<T>&, int);                                    \
    template Tensor<T> pad2d<T>(const Tensor<T>&, int, Padding);                                    \
    template Tensor<T> reflect_pad2d_to<T>(const Tensor<T>&, int, int);                             \
    template Tensor<T> crop2d<T>(const Tensor<T>&, int64_t, int64_t);                               \
    template Tensor<T> conv2d_valid<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);       \
    template Tensor<T> depthwise_conv2d_valid<T>(const Tensor<T>&, const Tensor<T>&,                \
                                                 const Tensor<T>&);                                 \
    template Tensor<T> grouped_filter_conv2d_valid<T>(const Tensor<T>&, const Tensor<T>&);          \
    template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);      \
    template Tensor<T> batch_norm_rows<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                          Tensor<T>&, Tensor<T>&, T, T, bool);                      \
    template Tensor<T> l2_normalize<T>(const Tensor<T>&, int, T);                                   \
    template Tensor<T> pixel_unshuffle<T>(const Tensor<T>&, int);                                   \
    template Tensor<T> pixel_shuffle<T>(const Tensor<T>&, int);                                     \
    template Tensor<T> resize_bilinear<T>(const Tensor<T>&, int64_t, int64_t);

FPRO_INSTANTIATE_NN(float)
FPRO_INSTANTIATE_NN(double)

}  // namespace fpro
