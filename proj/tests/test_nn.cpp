#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "fpro/gradcheck.hpp"
#include "fpro/nn.hpp"
#include "fpro/rng.hpp"
#include "oracles.hpp"

using namespace fpro;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor<double> t(shape);
    for (auto& v : t.raw_data()) v = scale * rng.normal();
    return t;
}

}  // namespace

TEST_CASE("linear matches per-pixel matmul") {
    Rng rng(1);
    Tensor<double> x = random_tensor({1, 2, 3, 4}, rng);
    Tensor<double> w = random_tensor({4, 5}, rng);
    Tensor<double> b = random_tensor({5}, rng);
    auto y = linear(x, w, b);
    REQUIRE(y.shape() == Shape{1, 2, 3, 5});
    std::vector<double> vx(x.data().begin(), x.data().end());
    std::vector<double> vw(w.data().begin(), w.data().end());
    auto want = oracle::matmul3(vx, vw, 6, 4, 5);
    for (int64_t r = 0; r < 6; ++r)
        for (int64_t j = 0; j < 5; ++j)
            CHECK(y.data()[size_t(r * 5 + j)] ==
                  doctest::Approx(want[size_t(r * 5 + j)] + b.data()[size_t(j)]).epsilon(1e-12));
}

TEST_CASE("reflect padding mirrors without repeating the edge") {
    Tensor<double> x({1, 1, 3, 1}, {1, 2, 3});
    auto p = reflect_pad2d(x, 1);
    REQUIRE(p.shape() == Shape{1, 3, 5, 1});
    // middle row: [2, 1, 2, 3, 2]
    CHECK(p.at({0, 1, 0, 0}) == 2);
    CHECK(p.at({0, 1, 1, 0}) == 1);
    CHECK(p.at({0, 1, 4, 0}) == 2);
}

TEST_CASE("circular padding wraps") {
    Tensor<double> x({1, 1, 3, 1}, {1, 2, 3});
    auto p = circular_pad2d(x, 1);
    CHECK(p.at({0, 1, 0, 0}) == 3);
    CHECK(p.at({0, 1, 4, 0}) == 1);
}

TEST_CASE("conv2d identity kernel reproduces the interior") {
    Rng rng(2);
    Tensor<double> x = random_tensor({1, 5, 5, 2}, rng);
    Tensor<double> w({3, 3, 2, 2});
    // center tap = identity channel map
    w.raw_data()[(1 * 3 + 1) * 4 + 0] = 1.0;  // cin0 -> cout0
    w.raw_data()[(1 * 3 + 1) * 4 + 3] = 1.0;  // cin1 -> cout1
    auto y = conv2d_valid(x, w, Tensor<double>());
    REQUIRE(y.shape() == Shape{1, 3, 3, 2});
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 3; ++j)
            for (int64_t c = 0; c < 2; ++c) CHECK(y.at({0, i, j, c}) == x.at({0, i + 1, j + 1, c}));
}

TEST_CASE("grouped filter conv matches the naive summation oracle") {
    Rng rng(4);
    int64_t H = 5, W = 5, C = 4, G = 2, k = 3;
    Tensor<double> x = random_tensor({1, H, W, C}, rng);
    Tensor<double> bank = random_tensor({1, G, k, k}, rng);
    for (auto pad : {Padding::Reflect, Padding::Circular}) {
        auto padded = pad2d(x, 1, pad);
        auto y = grouped_filter_conv2d_valid(padded, bank);
        std::vector<double> vx(x.data().begin(), x.data().end());
        std::vector<double> vb(bank.data().begin(), bank.data().end());
        auto want = pad == Padding::Reflect
                        ? oracle::grouped_conv_direct(vx, H, W, C, vb, G, k, oracle::pad_reflect)
                        : oracle::grouped_conv_direct(vx, H, W, C, vb, G, k, oracle::pad_circular);
        for (int64_t i = 0; i < y.numel(); ++i)
            CHECK(y.data()[size_t(i)] == doctest::Approx(want[size_t(i)]).epsilon(1e-12));
    }
}

TEST_CASE("grouped filter conv rejects bad group counts and even kernels") {
    Tensor<double> x({1, 5, 5, 3});
    Tensor<double> bank({1, 2, 3, 3});
    CHECK_THROWS_AS(grouped_filter_conv2d_valid(x, bank), ShapeError);  // 3 % 2 != 0
    Tensor<double> bank2({1, 3, 2, 2});
    CHECK_THROWS_AS(grouped_filter_conv2d_valid(x, bank2), ShapeError);  // even kernel
}

TEST_CASE("convolution gradients, several seeds") {
    for (uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        Tensor<double> x = random_tensor({1, 4, 4, 2}, rng);
        Tensor<double> w = random_tensor({3, 3, 2, 3}, rng, 0.5);
        Tensor<double> b = random_tensor({3}, rng, 0.1);
        Tensor<double> dw = random_tensor({3, 3, 2}, rng, 0.5);
        Tensor<double> bank = random_tensor({1, 2, 3, 3}, rng, 0.5);

        CHECK(finite_diff_check([&]() { return sum_all(square(conv2d_valid(reflect_pad2d(x, 1), w, b))); },
                                x) < 1e-4);
        CHECK(finite_diff_check([&]() { return sum_all(square(conv2d_valid(reflect_pad2d(x, 1), w, b))); },
                                w) < 1e-4);
        CHECK(finite_diff_check([&]() { return sum_all(square(conv2d_valid(reflect_pad2d(x, 1), w, b))); },
                                b) < 1e-4);
        CHECK(finite_diff_check(
                  [&]() {
                      return sum_all(square(depthwise_conv2d_valid(circular_pad2d(x, 1), dw, Tensor<double>())));
                  },
                  dw) < 1e-4);
        CHECK(finite_diff_check(
                  [&]() { return sum_all(square(grouped_filter_conv2d_valid(reflect_pad2d(x, 1), bank))); },
                  bank) < 1e-4);
        CHECK(finite_diff_check(
                  [&]() { return sum_all(square(grouped_filter_conv2d_valid(circular_pad2d(x, 1), bank))); },
                  x) < 1e-4);
    }
}

TEST_CASE("layer_norm centers and scales, and differentiates") {
    Rng rng(6);
    Tensor<double> x = random_tensor({2, 3, 5}, rng, 2.0);
    Tensor<double> gamma = Tensor<double>::ones({5});
    Tensor<double> beta = Tensor<double>::zeros({5});
    auto y = layer_norm(x, gamma, beta, 1e-6);
    for (int64_t r = 0; r < 6; ++r) {
        double mu = 0, var = 0;
        for (int64_t c = 0; c < 5; ++c) mu += y.data()[size_t(r * 5 + c)];
        mu /= 5;
        for (int64_t c = 0; c < 5; ++c) {
            double d = y.data()[size_t(r * 5 + c)] - mu;
            var += d * d;
        }
        CHECK(std::abs(mu) < 1e-10);
        CHECK(var / 5 == doctest::Approx(1.0).epsilon(1e-4));
    }
    CHECK(finite_diff_check([&]() { return sum_all(square(layer_norm(x, gamma, beta, 1e-6))); }, x) < 1e-4);
    CHECK(finite_diff_check([&]() { return sum_all(square(layer_norm(x, gamma, beta, 1e-6))); }, gamma) <
          1e-4);

    // zero input stays finite through the epsilon
    Tensor<double> z = Tensor<double>::zeros({1, 2, 5});
    auto yz = layer_norm(z, gamma, beta, 1e-6);
    CHECK(all_finite(yz));
}

TEST_CASE("batch_norm_rows: train stats, eval running averages, gradients") {
    Rng rng(8);
    Tensor<double> x = random_tensor({4, 3}, rng, 2.0);
    Tensor<double> gamma = Tensor<double>::ones({3});
    Tensor<double> beta = Tensor<double>::zeros({3});
    Tensor<double> rm = Tensor<double>::zeros({3});
    Tensor<double> rv = Tensor<double>::ones({3});

    auto y = batch_norm_rows(x, gamma, beta, rm, rv, 0.1, 1e-5, true);
    for (int64_t c = 0; c < 3; ++c) {
        double mu = 0;
        for (int64_t b = 0; b < 4; ++b) mu += y.at({b, c});
        CHECK(std::abs(mu / 4) < 1e-10);
    }
    // running mean moved toward the batch mean
    CHECK(rm.data()[0] != 0.0);

    CHECK(finite_diff_check(
              [&]() {
                  return sum_all(square(batch_norm_rows(x, gamma, beta, rm, rv, 0.1, 1e-5, true)));
              },
              x) < 1e-4);
    CHECK(finite_diff_check(
              [&]() {
                  return sum_all(square(batch_norm_rows(x, gamma, beta, rm, rv, 0.1, 1e-5, false)));
              },
              x) < 1e-4);
    CHECK(finite_diff_check(
              [&]() {
                  return sum_all(square(batch_norm_rows(x, gamma, beta, rm, rv, 0.1, 1e-5, true)));
              },
              gamma) < 1e-4);
}

TEST_CASE("pixel unshuffle layout and bijection") {
    Tensor<double> x({1, 2, 2, 1}, {1, 2, 3, 4});
    auto u = pixel_unshuffle(x, 2);
    REQUIRE(u.shape() == Shape{1, 1, 1, 4});
    CHECK(u.data()[0] == 1);
    CHECK(u.data()[1] == 2);
    CHECK(u.data()[2] == 3);
    CHECK(u.data()[3] == 4);

    Rng rng(10);
    Tensor<double> big = random_tensor({2, 8, 8, 3}, rng);
    auto round = pixel_shuffle(pixel_unshuffle(big, 2), 2);
    CHECK(std::memcmp(round.data().data(), big.data().data(), size_t(big.numel()) * sizeof(double)) == 0);

    auto c = Tensor<double>::full({1, 4, 4, 1}, 3.25);
    auto uc = pixel_unshuffle(c, 2);
    for (double v : uc.data()) CHECK(v == 3.25);

    Tensor<double> odd({1, 3, 3, 1});
    CHECK_THROWS_AS(pixel_unshuffle(odd, 2), ShapeError);

    CHECK(finite_diff_check([&]() { return sum_all(square(pixel_unshuffle(big, 2))); }, big) < 1e-4);
    CHECK(finite_diff_check([&]() { return sum_all(square(pixel_shuffle(pixel_unshuffle(big, 2), 2))); },
                            big) < 1e-4);
}

TEST_CASE("resize_bilinear identity, constants, and the half-pixel law") {
    Rng rng(12);
    Tensor<double> x = random_tensor({1, 5, 7, 2}, rng);
    auto same = resize_bilinear(x, 5, 7);
    CHECK(std::memcmp(same.data().data(), x.data().data(), size_t(x.numel()) * sizeof(double)) == 0);

    auto c = Tensor<double>::full({1, 3, 3, 1}, 0.4);
    auto cr = resize_bilinear(c, 7, 5);
    for (double v : cr.data()) CHECK(v == doctest::Approx(0.4).epsilon(1e-12));

    Tensor<double> seg({1, 1, 2, 1}, {0, 1});
    auto up = resize_bilinear(seg, 1, 4);
    CHECK(up.at({0, 0, 0, 0}) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(up.at({0, 0, 1, 0}) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(up.at({0, 0, 2, 0}) == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(up.at({0, 0, 3, 0}) == doctest::Approx(1.0).epsilon(1e-12));

    CHECK(finite_diff_check([&]() { return sum_all(square(resize_bilinear(x, 3, 9))); }, x) < 1e-4);
    CHECK(finite_diff_check([&]() { return sum_all(square(resize_bilinear(x, 11, 4))); }, x) < 1e-4);
}

TEST_CASE("l2_normalize produces unit rows") {
    Rng rng(14);
    Tensor<double> x = random_tensor({3, 6}, rng);
    auto y = l2_normalize(x, 1, 1e-12);
    for (int64_t r = 0; r < 3; ++r) {
        double s = 0;
        for (int64_t c = 0; c < 6; ++c) s += y.at({r, c}) * y.at({r, c});
        CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }
    CHECK(finite_diff_check([&]() { return sum_all(mul(l2_normalize(x, 1, 1e-12), x)); }, x) < 1e-4);
}

TEST_CASE("pad-to and crop are inverse on the kept region") {
    Rng rng(16);
    Tensor<double> x = random_tensor({1, 5, 6, 2}, rng);
    auto padded = reflect_pad2d_to(x, 3, 2);
    REQUIRE(padded.shape() == Shape{1, 8, 8, 2});
    auto back = crop2d(padded, 5, 6);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(back.data()[size_t(i)] == x.data()[size_t(i)]);
    CHECK(finite_diff_check([&]() { return sum_all(square(crop2d(reflect_pad2d_to(x, 3, 2), 5, 6))); }, x) <
          1e-4);
}
