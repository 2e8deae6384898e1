#pragma once

// Independent reference implementations used only by tests. Everything here
// is written as straight loops over the mathematical definitions and must
// stay decoupled from the library's execution paths.

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "fpro/tensor.hpp"

namespace oracle {

using fpro::Shape;
using fpro::Tensor;

// C = A.B with a plain triple loop. A is [m,k], B is [k,n].
inline std::vector<double> matmul3(const std::vector<double>& a, const std::vector<double>& b, int m,
                                   int k, int n) {
    std::vector<double> c(size_t(m) * size_t(n), 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += a[size_t(i * k + p)] * b[size_t(p * n + j)];
            c[size_t(i * n + j)] = acc;
        }
    return c;
}

// Elementwise binary op under trailing-dimension broadcasting, one scalar at
// a time via explicit multi-indices.
template <typename Fn>
std::vector<double> broadcast_binary(const Shape& sa, const std::vector<double>& a, const Shape& sb,
                                     const std::vector<double>& b, const Shape& so, Fn fn) {
    size_t r = so.size();
    std::vector<double> out(size_t(fpro::shape_numel(so)));
    std::vector<int64_t> idx(r, 0);
    auto offset_of = [&](const Shape& s) {
        int64_t off = 0, stride = 1;
        for (int k = int(s.size()) - 1, ko = int(r) - 1; k >= 0; --k, --ko) {
            int64_t id = s[size_t(k)] == 1 ? 0 : idx[size_t(ko)];
            off += id * stride;
            stride *= s[size_t(k)];
        }
        return off;
    };
    for (size_t flat = 0; flat < out.size(); ++flat) {
        out[flat] = fn(a[size_t(offset_of(sa))], b[size_t(offset_of(sb))]);
        for (int k = int(r) - 1; k >= 0; --k) {
            if (++idx[size_t(k)] < so[size_t(k)]) break;
            idx[size_t(k)] = 0;
        }
    }
    return out;
}

// softmax along the last axis by the direct exp / sum formula (double).
inline std::vector<double> softmax_direct(const std::vector<double>& x, int64_t n) {
    std::vector<double> y(x.size());
    for (size_t row = 0; row * size_t(n) < x.size(); ++row) {
        const double* xr = x.data() + row * size_t(n);
        double* yr = y.data() + row * size_t(n);
        double sum = 0.0;
        for (int64_t i = 0; i < n; ++i) sum += std::exp(xr[i]);
        for (int64_t i = 0; i < n; ++i) yr[i] = std::exp(xr[i]) / sum;
    }
    return y;
}

// Direct O(N^2) 2-D DFT of one real channel plane, full spectrum.
inline std::vector<std::complex<double>> dft2_direct(const std::vector<double>& x, int64_t h, int64_t w) {
    std::vector<std::complex<double>> out(size_t(h * w));
    for (int64_t u = 0; u < h; ++u)
        for (int64_t v = 0; v < w; ++v) {
            std::complex<double> acc(0, 0);
            for (int64_t i = 0; i < h; ++i)
                for (int64_t j = 0; j < w; ++j) {
                    double ang = -2.0 * std::numbers::pi *
                                 (double(u * i) / double(h) + double(v * j) / double(w));
                    acc += x[size_t(i * w + j)] * std::complex<double>(std::cos(ang), std::sin(ang));
                }
            out[size_t(u * w + v)] = acc;
        }
    return out;
}

// Inverse of dft2_direct (1/(h*w) scaling), returning the real part.
inline std::vector<double> idft2_direct_real(const std::vector<std::complex<double>>& s, int64_t h,
                                             int64_t w) {
    std::vector<double> out(size_t(h * w));
    for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j) {
            std::complex<double> acc(0, 0);
            for (int64_t u = 0; u < h; ++u)
                for (int64_t v = 0; v < w; ++v) {
                    double ang = 2.0 * std::numbers::pi *
                                 (double(u * i) / double(h) + double(v * j) / double(w));
                    acc += s[size_t(u * w + v)] * std::complex<double>(std::cos(ang), std::sin(ang));
                }
            out[size_t(i * w + j)] = acc.real() / (double(h) * double(w));
        }
    return out;
}

// Grouped dynamic convolution by explicit summation. x is [H,W,C] (single
// image), bank [g,k,k], pad taken from a caller-supplied index function.
template <typename PadFn>
std::vector<double> grouped_conv_direct(const std::vector<double>& x, int64_t H, int64_t W, int64_t C,
                                        const std::vector<double>& bank, int64_t g, int64_t k,
                                        PadFn pad_index) {
    std::vector<double> out(size_t(H * W * C), 0.0);
    int64_t cg = C / g;
    int64_t r = k / 2;
    for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w)
            for (int64_t c = 0; c < C; ++c) {
                double acc = 0.0;
                int64_t gi = c / cg;
                for (int64_t p = -r; p <= r; ++p)
                    for (int64_t q = -r; q <= r; ++q) {
                        int64_t hh = pad_index(h + p, H);
                        int64_t ww = pad_index(w + q, W);
                        acc += bank[size_t((gi * k + (p + r)) * k + (q + r))] *
                               x[size_t((hh * W + ww) * C + c)];
                    }
                out[size_t((h * W + w) * C + c)] = acc;
            }
    return out;
}

inline int64_t pad_reflect(int64_t i, int64_t n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
}

inline int64_t pad_circular(int64_t i, int64_t n) { return ((i % n) + n) % n; }

}  // namespace oracle
