#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>

#include "fpro/train.hpp"
#include "oracles.hpp"

using namespace fpro;

TEST_CASE("synthetic degradation: null case, determinism, non-null artifact") {
    auto clean = synth_clean_image<double>(48, 48, 77);
    for (double v : clean.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }

    DegradationSpec null_spec{DegradationKind::RainStreak, 0.0, 5};
    auto same = synth_degrade(clean, null_spec);
    CHECK(std::memcmp(same.data().data(), clean.data().data(), size_t(clean.numel()) * sizeof(double)) == 0);

    for (auto kind :
         {DegradationKind::RainStreak, DegradationKind::RaindropBlob, DegradationKind::MoireSinusoid}) {
        DegradationSpec spec{kind, 0.6, 42};
        auto a = synth_degrade(clean, spec);
        auto b = synth_degrade(clean, spec);
        CHECK(std::memcmp(a.data().data(), b.data().data(), size_t(a.numel()) * sizeof(double)) == 0);
        double mean_abs = 0;
        for (int64_t i = 0; i < a.numel(); ++i) mean_abs += std::abs(a.data()[size_t(i)] - clean.data()[size_t(i)]);
        mean_abs /= double(a.numel());
        CHECK(mean_abs > 0.0);
        for (double v : a.data()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("manifest round trip") {
    std::vector<ManifestEntry> entries = {
        {"img/a.png", 3, DegradationKind::RainStreak, 0.5},
        {"img/b.png", 9, DegradationKind::MoireSinusoid, 0.25},
    };
    write_manifest("manifest_test.tsv", entries);
    auto back = read_manifest("manifest_test.tsv");
    REQUIRE(back.size() == 2);
    CHECK(back[0].clean_path == "img/a.png");
    CHECK(back[0].seed == 3);
    CHECK(back[1].kind == DegradationKind::MoireSinusoid);
    CHECK(back[1].intensity == doctest::Approx(0.25));
    CHECK_THROWS_AS(parse_degradation("sepia"), ConfigError);
    std::remove("manifest_test.tsv");
}

TEST_CASE("loss: coincidence, plain L1, and the spectral term") {
    Rng rng(1);
    Tensor<double> t({1, 8, 8, 3});
    for (auto& v : t.raw_data()) v = rng.uniform();
    CHECK(restoration_loss(t, t, 0.1).item() == 0.0);

    auto zeros = Tensor<double>::zeros({1, 8, 8, 3});
    auto c = Tensor<double>::full({1, 8, 8, 3}, 0.37);
    CHECK(restoration_loss(c, zeros, 0.0).item() == doctest::Approx(0.37).epsilon(1e-12));

    // random pair against a from-scratch evaluation
    Tensor<double> r({1, 4, 4, 1}), g({1, 4, 4, 1});
    for (auto& v : r.raw_data()) v = rng.uniform();
    for (auto& v : g.raw_data()) v = rng.uniform();
    double l1 = 0;
    for (int64_t i = 0; i < r.numel(); ++i) l1 += std::abs(r.data()[size_t(i)] - g.data()[size_t(i)]);
    l1 /= double(r.numel());
    std::vector<double> pr(r.data().begin(), r.data().end());
    std::vector<double> pg(g.data().begin(), g.data().end());
    auto fr = oracle::dft2_direct(pr, 4, 4);
    auto fg = oracle::dft2_direct(pg, 4, 4);
    double lspec = 0;
    int64_t bins = 0;
    for (int64_t u = 0; u < 4; ++u)
        for (int64_t v = 0; v < 3; ++v) {  // stored half-spectrum bins only
            lspec += std::abs(std::abs(fr[size_t(u * 4 + v)]) - std::abs(fg[size_t(u * 4 + v)]));
            ++bins;
        }
    lspec /= double(bins);
    double want = l1 + 0.1 * lspec;
    CHECK(restoration_loss(r, g, 0.1).item() == doctest::Approx(want).epsilon(1e-9));

    Tensor<double> wrong({1, 4, 5, 1});
    CHECK_THROWS_AS(restoration_loss(r, wrong, 0.1), ShapeError);
}

TEST_CASE("adamw: fixed point, first step size, decoupled decay") {
    // zero grads, zero weight decay: parameters unchanged
    ParamSet<double> reg(0);
    Tensor<double> p = reg.constant("p", {2}, 1.0);
    AdamW<double>::Hyper h;
    h.weight_decay = 0.0;
    AdamW<double> opt(h);
    opt.step(reg, 0.1);
    CHECK(p.data()[0] == 1.0);

    // single step on p=1, g=1, lr=0.1: moves by about lr
    ParamSet<double> reg2(0);
    Tensor<double> q = reg2.constant("q", {1}, 1.0);
    {
        Graph<double> graph;
        Graph<double>::Scope scope(graph);
        graph.backward(sum_all(q));  // d(sum)/dq = 1
    }
    AdamW<double> opt2(h);
    opt2.step(reg2, 0.1);
    CHECK(q.data()[0] == doctest::Approx(0.9).epsilon(1e-7));

    // weight decay alone shrinks the magnitude monotonically
    ParamSet<double> reg3(0);
    Tensor<double> w = reg3.constant("w", {1}, -2.0);
    AdamW<double> opt3;  // default wd 1e-4
    double prev = std::abs(w.data()[0]);
    for (int i = 0; i < 5; ++i) {
        opt3.step(reg3, 0.5);
        double cur = std::abs(w.data()[0]);
        CHECK(cur < prev);
        prev = cur;
    }
}

TEST_CASE("adamw state export/import round trip") {
    ParamSet<double> reg(0);
    Tensor<double> p = reg.constant("p", {3}, 1.0);
    AdamW<double> opt;
    for (int it = 0; it < 3; ++it) {
        Graph<double> graph;
        {
            Graph<double>::Scope scope(graph);
            graph.backward(sum_all(mul(p, p)));
        }
        opt.step(reg, 0.05);
        reg.zero_grads();
    }
    auto state = opt.export_state();
    AdamW<double> opt2;
    opt2.import_state(state);
    CHECK(opt2.steps_taken() == opt.steps_taken());
    auto s2 = opt2.export_state();
    REQUIRE(s2.size() == state.size());
    for (size_t i = 0; i < state.size(); ++i) {
        CHECK(s2[i].first == state[i].first);
        CHECK(s2[i].second == state[i].second);
    }
}

TEST_CASE("cosine schedule endpoints and shape") {
    CHECK(cosine_lr(0, 1000) == doctest::Approx(3e-4).epsilon(1e-15));
    CHECK(cosine_lr(1000, 1000) == doctest::Approx(1e-6).epsilon(1e-12));
    CHECK(cosine_lr(500, 1000) == doctest::Approx((3e-4 + 1e-6) / 2).epsilon(1e-12));
    CHECK_THROWS_AS(cosine_lr(1001, 1000), Error);
    double prev = cosine_lr(0, 200);
    for (int64_t i = 1; i <= 200; ++i) {
        double cur = cosine_lr(i, 200);
        CHECK(cur <= prev);
        prev = cur;
    }
}

TEST_CASE("psnr: cap, closed form, error contracts") {
    auto a = Tensor<double>::zeros({16, 16, 3});
    CHECK(psnr(a, a) == 100.0);
    auto b = Tensor<double>::full({16, 16, 3}, 0.1);
    CHECK(psnr(a, b, MetricSpace::Rgb) == doctest::Approx(20.0).epsilon(1e-6));
    Tensor<double> c({8, 8, 3});
    CHECK_THROWS_AS(psnr(a, c), ShapeError);
}

namespace {

// Fresh SSIM evaluation written directly from the definition.
double ssim_naive(const Tensor<double>& a, const Tensor<double>& b) {
    int64_t H = a.shape()[0], W = a.shape()[1];
    const int win = 11;
    const double sigma = 1.5, c1 = 1e-4, c2 = 9e-4;
    std::vector<double> k(win * win);
    double s = 0;
    for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
            double di = i - 5, dj = j - 5;
            k[size_t(i * win + j)] = std::exp(-(di * di + dj * dj) / (2 * sigma * sigma));
            s += k[size_t(i * win + j)];
        }
    for (double& v : k) v /= s;
    double chan_total = 0;
    for (int64_t c = 0; c < 3; ++c) {
        double acc = 0;
        int64_t n = 0;
        for (int64_t i = 0; i + win <= H; ++i)
            for (int64_t j = 0; j + win <= W; ++j) {
                double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
                for (int u = 0; u < win; ++u)
                    for (int v = 0; v < win; ++v) {
                        double wv = k[size_t(u * win + v)];
                        double xv = a.at({i + u, j + v, c});
                        double yv = b.at({i + u, j + v, c});
                        mx += wv * xv;
                        my += wv * yv;
                        xx += wv * xv * xv;
                        yy += wv * yv * yv;
                        xy += wv * xv * yv;
                    }
                double vx = xx - mx * mx, vy = yy - my * my, cov = xy - mx * my;
                acc += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                ++n;
            }
        chan_total += acc / double(n);
    }
    return chan_total / 3.0;
}

}  // namespace

TEST_CASE("ssim: identity and agreement with the naive oracle") {
    auto img = synth_clean_image<double>(24, 24, 9);
    CHECK(ssim(img, img) == doctest::Approx(1.0).epsilon(1e-12));

    Rng rng(10);
    for (int trial = 0; trial < 10; ++trial) {
        auto a = synth_clean_image<double>(20, 20, uint64_t(100 + trial));
        auto b = synth_degrade(a, {DegradationKind::RainStreak, 0.5, uint64_t(trial)});
        double got = ssim(a, b, MetricSpace::Rgb);
        double want = ssim_naive(a, b);
        CHECK(std::abs(got - want) < 1e-8);
    }
}

TEST_CASE("training: zero iterations leave the model untouched") {
    FproModel<float> model(ModelConfig::micro(), 3);
    std::vector<float> before;
    for (const auto& [name, t] : model.params().params())
        before.insert(before.end(), t.data().begin(), t.data().end());

    auto clean = synth_clean_image<float>(32, 32, 1);
    auto degraded = synth_degrade(clean, {DegradationKind::RainStreak, 0.5, 2});
    std::vector<std::pair<Tensor<float>, Tensor<float>>> pairs{{degraded, clean}};
    AdamW<float> opt;
    TrainConfig cfg;
    cfg.iterations = 0;
    cfg.patch = 32;
    auto result = train_loop(model, opt, pairs, {}, cfg);
    CHECK(result.losses.empty());

    std::vector<float> after;
    for (const auto& [name, t] : model.params().params())
        after.insert(after.end(), t.data().begin(), t.data().end());
    CHECK(before == after);
}

TEST_CASE("training: single-image overfit trends down across windows") {
    FproModel<float> model(ModelConfig::micro(), 5);
    auto clean = synth_clean_image<float>(32, 32, 11);
    auto degraded = synth_degrade(clean, {DegradationKind::RainStreak, 0.6, 12});
    std::vector<std::pair<Tensor<float>, Tensor<float>>> pairs{{degraded, clean}};
    AdamW<float> opt;
    TrainConfig cfg;
    cfg.iterations = 200;
    cfg.batch = 2;
    cfg.patch = 32;
    cfg.eval_every = 100;
    cfg.seed = 0;
    auto result = train_loop(model, opt, pairs, pairs, cfg);
    REQUIRE(result.losses.size() == 200);

    double prev_mean = 1e30;
    for (int w = 0; w < 4; ++w) {
        double mean = 0;
        for (int i = 0; i < 50; ++i) mean += result.losses[size_t(w * 50 + i)];
        mean /= 50;
        CHECK(mean < prev_mean);
        prev_mean = mean;
    }
}

TEST_CASE("training: identical seeds give byte-identical logs") {
    auto run = []() {
        FproModel<float> model(ModelConfig::micro(), 8);
        auto clean = synth_clean_image<float>(32, 32, 21);
        auto degraded = synth_degrade(clean, {DegradationKind::RainStreak, 0.5, 22});
        std::vector<std::pair<Tensor<float>, Tensor<float>>> pairs{{degraded, clean}};
        AdamW<float> opt;
        TrainConfig cfg;
        cfg.iterations = 24;
        cfg.batch = 2;
        cfg.patch = 32;
        cfg.eval_every = 8;
        auto r = train_loop(model, opt, pairs, pairs, cfg);
        return r.log;
    };
    auto a = run();
    auto b = run();
    CHECK(a == b);
    CHECK(a.find("# iter") == 0);
}
