#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <vector>

#include "fpro/nn.hpp"

namespace fpro {

namespace {

using cplx = std::complex<double>;
constexpr double kPi = std::numbers::pi;

bool is_pow2(int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

// In-place iterative radix-2 Cooley-Tukey, forward (e^{-i...}), unscaled.
void fft_pow2(std::vector<cplx>& a) {
    int64_t n = int64_t(a.size());
    for (int64_t i = 1, j = 0; i < n; ++i) {
        int64_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[size_t(i)], a[size_t(j)]);
    }
    for (int64_t len = 2; len <= n; len <<= 1) {
        double ang = -2.0 * kPi / double(len);
        cplx wl(std::cos(ang), std::sin(ang));
        for (int64_t i = 0; i < n; i += len) {
            cplx w(1.0, 0.0);
            for (int64_t k = 0; k < len / 2; ++k) {
                cplx u = a[size_t(i + k)];
                cplx v = a[size_t(i + k + len / 2)] * w;
                a[size_t(i + k)] = u + v;
                a[size_t(i + k + len / 2)] = u - v;
                w *= wl;
            }
        }
    }
}

// Bluestein chirp-z for arbitrary n, forward, unscaled.
void fft_bluestein(std::vector<cplx>& a) {
    int64_t n = int64_t(a.size());
    int64_t m = 1;
    while (m < 2 * n - 1) m <<= 1;
    std::vector<cplx> chirp(static_cast<size_t>(n));
    for (int64_t k = 0; k < n; ++k) {
        // phase uses k^2 mod 2n to avoid precision loss for large k
        double ang = -kPi * double((k * k) % (2 * n)) / double(n);
        chirp[size_t(k)] = cplx(std::cos(ang), std::sin(ang));
    }
    std::vector<cplx> fa(size_t(m), cplx(0, 0)), fb(size_t(m), cplx(0, 0));
    for (int64_t k = 0; k < n; ++k) fa[size_t(k)] = a[size_t(k)] * chirp[size_t(k)];
    for (int64_t k = 0; k < n; ++k) {
        cplx c = std::conj(chirp[size_t(k)]);
        fb[size_t(k)] = c;
        if (k != 0) fb[size_t(m - k)] = c;
    }
    fft_pow2(fa);
    fft_pow2(fb);
    for (int64_t k = 0; k < m; ++k) fa[size_t(k)] *= fb[size_t(k)];
    // inverse pow2 fft via conjugation
    for (auto& v : fa) v = std::conj(v);
    fft_pow2(fa);
    double inv_m = 1.0 / double(m);
    for (int64_t k = 0; k < n; ++k) a[size_t(k)] = std::conj(fa[size_t(k)]) * inv_m * chirp[size_t(k)];
}

void fft_1d(std::vector<cplx>& a, bool inverse) {
    int64_t n = int64_t(a.size());
    if (n == 1) return;
    if (inverse) {
        for (auto& v : a) v = std::conj(v);
        fft_1d(a, false);
        double inv_n = 1.0 / double(n);
        for (auto& v : a) v = std::conj(v) * inv_n;
        return;
    }
    if (is_pow2(n))
        fft_pow2(a);
    else
        fft_bluestein(a);
}

// Full 2-D transform of an H x W complex grid, rows then columns.
void fft_2d(std::vector<cplx>& grid, int64_t h, int64_t w, bool inverse) {
    std::vector<cplx> buf;
    buf.resize(size_t(std::max(h, w)));
    for (int64_t i = 0; i < h; ++i) {
        buf.assign(grid.begin() + i * w, grid.begin() + (i + 1) * w);
        fft_1d(buf, inverse);
        std::copy(buf.begin(), buf.end(), grid.begin() + i * w);
    }
    for (int64_t j = 0; j < w; ++j) {
        buf.resize(size_t(h));
        for (int64_t i = 0; i < h; ++i) buf[size_t(i)] = grid[size_t(i * w + j)];
        fft_1d(buf, inverse);
        for (int64_t i = 0; i < h; ++i) grid[size_t(i * w + j)] = buf[size_t(i)];
    }
}

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

}  // namespace

void fft_complex(double* re, double* im, int64_t n, bool inverse) {
    std::vector<cplx> a(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) a[size_t(i)] = cplx(re[i], im[i]);
    fft_1d(a, inverse);
    for (int64_t i = 0; i < n; ++i) {
        re[i] = a[size_t(i)].real();
        im[i] = a[size_t(i)].imag();
    }
}

// rfft2: [B,H,W,C] -> [B,H,W/2+1,2C], channels packed [all real | all imag].
template <typename T>
Tensor<T> rfft2(const Tensor<T>& x) {
    if (x.rank() != 4) throw ShapeError("rfft2: expected [B,H,W,C], got " + shape_str(x.shape()));
    int64_t B = x.shape()[0], H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
    if (H < 1 || W < 1) throw ShapeError("rfft2: empty spatial dims");
    int64_t Wh = W / 2 + 1;

    Graph<T>* g = recording_graph<T>(x.impl()->tracked());
    Tensor<T> out = make_result<T>({B, H, Wh, 2 * C}, g);
    const T* px = x.data().data();
    T* po = out.raw_data().data();

#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            std::vector<cplx> grid(size_t(H * W));
            for (int64_t i = 0; i < H; ++i)
                for (int64_t j = 0; j < W; ++j)
                    grid[size_t(i * W + j)] = cplx(double(px[((b * H + i) * W + j) * C + c]), 0.0);
            fft_2d(grid, H, W, false);
            for (int64_t u = 0; u < H; ++u)
                for (int64_t v = 0; v < Wh; ++v) {
                    po[((b * H + u) * Wh + v) * 2 * C + c] = T(grid[size_t(u * W + v)].real());
                    po[((b * H + u) * Wh + v) * 2 * C + C + c] = T(grid[size_t(u * W + v)].imag());
                }
        }

    if (g) {
        auto ix = x.impl_ptr(), io = out.impl_ptr();
        g->record([ix, io, B, H, W, C, Wh]() {
            if (io->grad.empty() || !ix->tracked()) return;
            const T* dy = io->grad.data();
            T* dx = ensure_grad(ix.get());
            // adjoint: embed the half-spectrum cotangent as-is (no Hermitian
            // mirror), unnormalized inverse transform, keep the real part
#pragma omp parallel for collapse(2) schedule(static)
            for (int64_t b = 0; b < B; ++b)
                for (int64_t c = 0; c < C; ++c) {
                    std::vector<cplx> grid(size_t(H * W), cplx(0, 0));
                    for (int64_t u = 0; u < H; ++u)
                        for (int64_t v = 0; v < Wh; ++v)
                            grid[size_t(u * W + v)] = cplx(double(dy[((b * H + u) * Wh + v) * 2 * C + c]),
                                                           double(dy[((b * H + u) * Wh + v) * 2 * C + C + c]));
                    fft_2d(grid, H, W, true);
                    double scale = double(H) * double(W);
                    for (int64_t i = 0; i < H; ++i)
                        for (int64_t j = 0; j < W; ++j)
                            dx[((b * H + i) * W + j) * C + c] += T(grid[size_t(i * W + j)].real() * scale);
                }
        });
    }
    return out;
}

// irfft2: [B,H,W/2+1,2C] -> [B,H,W,C]; Hermitian extension then inverse
// transform, imaginary residue discarded.
template <typename T>
Tensor<T> irfft2(const Tensor<T>& spec, int64_t h, int64_t w) {
    if (spec.rank() != 4) throw ShapeError("irfft2: expected [B,H,Wh,2C], got " + shape_str(spec.shape()));
    int64_t B = spec.shape()[0], Hs = spec.shape()[1], Wh = spec.shape()[2], C2 = spec.shape()[3];
    if (C2 % 2 != 0) throw ShapeError("irfft2: packed channel count must be even");
    int64_t C = C2 / 2;
    if (Hs != h || Wh != w / 2 + 1)
        throw ShapeError("irfft2: spectrum " + shape_str(spec.shape()) + " does not match target " +
                         std::to_string(h) + "x" + std::to_string(w));

    Graph<T>* g = recording_graph<T>(spec.impl()->tracked());
    Tensor<T> out = make_result<T>({B, h, w, C}, g);
    const T* ps = spec.data().data();
    T* po = out.raw_data().data();

#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            std::vector<cplx> grid(size_t(h * w));
            for (int64_t u = 0; u < h; ++u) {
                for (int64_t v = 0; v < Wh; ++v)
                    grid[size_t(u * w + v)] = cplx(double(ps[((b * h + u) * Wh + v) * C2 + c]),
                                                   double(ps[((b * h + u) * Wh + v) * C2 + C + c]));
                for (int64_t v = Wh; v < w; ++v) {
                    int64_t mu = (h - u) % h, mv = w - v;
                    grid[size_t(u * w + v)] = std::conj(cplx(double(ps[((b * h + mu) * Wh + mv) * C2 + c]),
                                                             double(ps[((b * h + mu) * Wh + mv) * C2 + C + c])));
                }
            }
            fft_2d(grid, h, w, true);
            for (int64_t i = 0; i < h; ++i)
                for (int64_t j = 0; j < w; ++j) po[((b * h + i) * w + j) * C + c] = T(grid[size_t(i * w + j)].real());
        }

    if (g) {
        auto is = spec.impl_ptr(), io = out.impl_ptr();
        g->record([is, io, B, h, w, C, C2, Wh]() {
            if (io->grad.empty() || !is->tracked()) return;
            const T* dy = io->grad.data();
            T* ds = ensure_grad(is.get());
            // adjoint: forward transform of the cotangent; bins whose mirror
            // fell in the extended half pick up a factor of two
#pragma omp parallel for collapse(2) schedule(static)
            for (int64_t b = 0; b < B; ++b)
                for (int64_t c = 0; c < C; ++c) {
                    std::vector<cplx> grid(size_t(h * w));
                    for (int64_t i = 0; i < h; ++i)
                        for (int64_t j = 0; j < w; ++j)
                            grid[size_t(i * w + j)] = cplx(double(dy[((b * h + i) * w + j) * C + c]), 0.0);
                    fft_2d(grid, h, w, false);
                    double inv_hw = 1.0 / (double(h) * double(w));
                    for (int64_t u = 0; u < h; ++u)
                        for (int64_t v = 0; v < Wh; ++v) {
                            bool mirrored = v >= 1 && w - v >= Wh;
                            double scale = inv_hw * (mirrored ? 2.0 : 1.0);
                            ds[((b * h + u) * Wh + v) * C2 + c] += T(grid[size_t(u * w + v)].real() * scale);
                            ds[((b * h + u) * Wh + v) * C2 + C + c] += T(grid[size_t(u * w + v)].imag() * scale);
                        }
                }
        });
    }
    return out;
}

// Complex Hadamard on packed spectra, composed from broadcastable primitives.
template <typename T>
Tensor<T> complex_mul(const Tensor<T>& a, const Tensor<T>& b) {
    int64_t ca = a.dim(-1), cb = b.dim(-1);
    if (ca % 2 != 0 || cb % 2 != 0) throw ShapeError("complex_mul: packed channel count must be even");
    if (ca != cb) throw ShapeError("complex_mul: channel mismatch");
    int64_t C = ca / 2;
    Tensor<T> ar = narrow_last(a, 0, C), ai = narrow_last(a, C, C);
    Tensor<T> br = narrow_last(b, 0, C), bi = narrow_last(b, C, C);
    Tensor<T> yr = sub(mul(ar, br), mul(ai, bi));
    Tensor<T> yi = add(mul(ar, bi), mul(ai, br));
    return concat_last<T>({yr, yi});
}

template <typename T>
Tensor<T> complex_abs(const Tensor<T>& a) {
    int64_t c2 = a.dim(-1);
    if (c2 % 2 != 0) throw ShapeError("complex_abs: packed channel count must be even");
    int64_t C = c2 / 2;
    Shape out_shape = a.shape();
    out_shape.back() = C;
    Graph<T>* g = recording_graph<T>(a.impl()->tracked());
    Tensor<T> out = make_result<T>(out_shape, g);
    int64_t rows = a.numel() / c2;
    const T* pa = a.data().data();
    T* po = out.raw_data().data();
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < C; ++c) {
            T re = pa[r * c2 + c], im = pa[r * c2 + C + c];
            po[r * C + c] = std::sqrt(re * re + im * im);
        }
    if (g) {
        auto ia = a.impl_ptr(), io = out.impl_ptr();
        g->record([ia, io, rows, C, c2]() {
            if (io->grad.empty() || !ia->tracked()) return;
            const T* dy = io->grad.data();
            const T* pa = ia->data.data();
            const T* py = io->data.data();
            T* da = ensure_grad(ia.get());
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t c = 0; c < C; ++c) {
                    T mag = std::max(py[r * C + c], std::numeric_limits<T>::min());
                    T s = dy[r * C + c] / mag;
                    da[r * c2 + c] += s * pa[r * c2 + c];
                    da[r * c2 + C + c] += s * pa[r * c2 + C + c];
                }
        });
    }
    return out;
}

#define FPRO_INSTANTIATE_FFT(T)                                           \
    template Tensor<T> rfft2<T>(const Tensor<T>&);                        \
    template Tensor<T> irfft2<T>(const Tensor<T>&, int64_t, int64_t);     \
    template Tensor<T> complex_mul<T>(const Tensor<T>&, const Tensor<T>&); \
    template Tensor<T> complex_abs<T>(const Tensor<T>&);

FPRO_INSTANTIATE_FFT(float)
FPRO_INSTANTIATE_FFT(double)

}  // namespace fpro
