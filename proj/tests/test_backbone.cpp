#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "cadapt/backbone.hpp"
#include "cadapt/errors.hpp"

using namespace cadapt;
namespace fs = std::filesystem;

namespace {

BackboneConfig small_config() {
    BackboneConfig c;
    c.lookback = 32;
    c.horizon = 8;
    c.patch_len = 8;
    c.repr_dim = 6;
    c.seed = 4;
    return c;
}

WindowBatch synthetic_windows(std::size_t n, std::uint64_t seed, const BackboneConfig& c) {
    const auto s = generate_synthetic(planted_structure(Regime::Heterogeneous, n, 64), 600, 1.0, seed);
    return make_windows(s.series, {1.0, 0.0, 0.0, 1.0, 3}, c.lookback, c.horizon).train;
}

}  // namespace

TEST_CASE("constant corpus forecasts its constant") {
    const auto c = small_config();
    WindowBatch w{1, c.lookback, c.horizon};
    for (int i = 0; i < 5; ++i) {
        const double level = 2.0 + i;
        w.push(std::vector<double>(c.lookback, level), std::vector<double>(c.horizon, level), i);
    }
    const auto state = pretrain_backbone(w, c);
    CHECK(state.train_mse == 0.0);
    const auto out = backbone_forward(state, w);
    const auto y = out.yhat_raw();
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t h = 0; h < c.horizon; ++h) CHECK(y[i * c.horizon + h] == 2.0 + i);
    CHECK(out.stats.flat[0]);
}

TEST_CASE("linear trends are learned better than the mean predictor") {
    const auto c = small_config();
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> slope(-2, 2), icpt(-5, 5);
    const auto make = [&](std::size_t count) {
        WindowBatch w{1, c.lookback, c.horizon};
        for (std::size_t k = 0; k < count; ++k) {
            const double a = slope(rng), b = icpt(rng);
            std::vector<double> x(c.lookback), y(c.horizon);
            for (std::size_t t = 0; t < c.lookback; ++t) x[t] = a * t + b;
            for (std::size_t t = 0; t < c.horizon; ++t) y[t] = a * (c.lookback + t) + b;
            w.push(x, y, k);
        }
        return w;
    };
    const auto train = make(64), test = make(32);
    const auto state = pretrain_backbone(train, c);
    const auto pred = backbone_forward(state, test).yhat_raw();
    double mse = 0, mean = 0, var = 0;
    for (const double v : test.targets) mean += v;
    mean /= test.targets.size();
    for (std::size_t i = 0; i < pred.size(); ++i) {
        mse += (pred[i] - test.targets[i]) * (pred[i] - test.targets[i]);
        var += (test.targets[i] - mean) * (test.targets[i] - mean);
    }
    CHECK(mse < var);
    CHECK(mse / pred.size() < 1e-6);
}

TEST_CASE("pretraining is deterministic") {
    const auto c = small_config();
    const auto w = synthetic_windows(3, 1, c);
    const auto a = pretrain_backbone(w, c), b = pretrain_backbone(w, c);
    CHECK(a.embedding == b.embedding);
    CHECK(a.head == b.head);
    CHECK(a.train_mse == b.train_mse);
}

TEST_CASE("repr_dim above patch_len pads with seeded columns") {
    auto c = small_config();
    c.repr_dim = 12;
    const auto w = synthetic_windows(2, 2, c);
    const auto s = pretrain_backbone(w, c);
    CHECK(s.embedding.size() == c.patch_len * c.repr_dim);
    const auto out = backbone_forward(s, w);
    for (const double v : out.repr.data()) CHECK(std::isfinite(v));
}

TEST_CASE("flat channel forecasts its level") {
    const auto c = small_config();
    const auto state = pretrain_backbone(synthetic_windows(2, 3, c), c);
    WindowBatch w{2, c.lookback, c.horizon};
    std::vector<double> x(2 * c.lookback);
    for (std::size_t t = 0; t < c.lookback; ++t) {
        x[t] = 7.25;
        x[c.lookback + t] = std::sin(0.3 * t);
    }
    w.push(x, std::vector<double>(2 * c.horizon, 0.0), 0);
    const auto out = backbone_forward(state, w);
    const auto y = out.yhat_raw();
    for (std::size_t h = 0; h < c.horizon; ++h) CHECK(y[h] == 7.25);
    CHECK(out.stats.flat[0]);
    CHECK_FALSE(out.stats.flat[1]);
}

TEST_CASE("batch independence") {
    const auto c = small_config();
    const auto w = synthetic_windows(3, 4, c);
    const auto state = pretrain_backbone(w, c);
    const std::vector<std::size_t> one{5}, two{5, 9};
    const auto a = backbone_forward(state, w.subset(one)), b = backbone_forward(state, w.subset(two));
    const std::size_t ry = a.yhat_norm.numel(), rr = a.repr.numel();
    CHECK(std::equal(a.yhat_norm.data().begin(), a.yhat_norm.data().end(), b.yhat_norm.data().begin()));
    CHECK(std::equal(a.repr.data().begin(), a.repr.data().end(), b.repr.data().begin()));
    CHECK(b.yhat_norm.numel() == 2 * ry);
    CHECK(b.repr.numel() == 2 * rr);
}

TEST_CASE("forward matches a direct dense-algebra oracle") {
    const auto c = small_config();
    const auto w = synthetic_windows(3, 5, c);
    const auto state = pretrain_backbone(w, c);
    const auto out = backbone_forward(state, w);
    const std::size_t n = 3, l = c.patch_len, d = c.repr_dim, p = c.patches(), f = c.horizon;
    for (std::size_t k = 0; k < 4; ++k)
        for (std::size_t ch = 0; ch < n; ++ch) {
            const auto x = w.input(k).subspan(ch * c.lookback, c.lookback);
            double mu = 0, var = 0;
            for (const double v : x) mu += v;
            mu /= x.size();
            for (const double v : x) var += (v - mu) * (v - mu);
            const double sd = std::sqrt(var / x.size());
            std::vector<double> feat(p * d, 0.0);
            for (std::size_t q = 0; q < p; ++q)
                for (std::size_t j = 0; j < d; ++j) {
                    for (std::size_t i = 0; i < l; ++i) feat[q * d + j] += (x[q * l + i] - mu) / sd * state.embedding[i * d + j];
                    CHECK(out.repr.at({k, q, ch, j}) == doctest::Approx(feat[q * d + j]).epsilon(1e-12));
                }
            for (std::size_t h = 0; h < f; ++h) {
                double y = 0;
                for (std::size_t r = 0; r < p * d; ++r) y += feat[r] * state.head[r * f + h];
                CHECK(out.yhat_norm.at({k, ch, h}) == doctest::Approx(y).epsilon(1e-11));
            }
        }
}

TEST_CASE("channel permutation permutes outputs") {
    const auto c = small_config();
    const auto w = synthetic_windows(3, 6, c);
    const auto state = pretrain_backbone(w, c);
    const std::size_t perm[3] = {2, 0, 1};
    WindowBatch pw{3, c.lookback, c.horizon};
    for (std::size_t k = 0; k < w.size(); ++k) {
        std::vector<double> x, y;
        for (const auto ch : perm) {
            const auto xi = w.input(k).subspan(ch * c.lookback, c.lookback);
            const auto yi = w.target(k).subspan(ch * c.horizon, c.horizon);
            x.insert(x.end(), xi.begin(), xi.end());
            y.insert(y.end(), yi.begin(), yi.end());
        }
        pw.push(x, y, w.starts[k]);
    }
    const auto a = backbone_forward(state, w), b = backbone_forward(state, pw);
    for (std::size_t k = 0; k < w.size(); k += 7)
        for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t h = 0; h < c.horizon; ++h) CHECK(b.yhat_norm.at({k, i, h}) == a.yhat_norm.at({k, perm[i], h}));
            for (std::size_t q = 0; q < c.patches(); ++q) CHECK(b.repr.at({k, q, i, 0}) == a.repr.at({k, q, perm[i], 0}));
        }
}

TEST_CASE("identity head round-trips through normalization") {
    BackboneState s;
    s.config = {16, 16, 4, 4, 0};
    s.embedding.assign(16, 0.0);
    for (std::size_t i = 0; i < 4; ++i) s.embedding[i * 4 + i] = 1.0;
    s.head.assign(16 * 16, 0.0);
    for (std::size_t i = 0; i < 16; ++i) s.head[i * 16 + i] = 1.0;
    WindowBatch w{2, 16, 16};
    std::mt19937_64 rng(1);
    std::normal_distribution<double> nd(3.0, 2.0);
    std::vector<double> x(32);
    for (auto& v : x) v = nd(rng);
    w.push(x, std::vector<double>(32, 0.0), 0);
    const auto y = backbone_forward(s, w).yhat_raw();
    for (std::size_t i = 0; i < 32; ++i) CHECK(y[i] == doctest::Approx(x[i]).epsilon(1e-13));
}

TEST_CASE("normalize_targets inverts denormalize") {
    const auto c = small_config();
    const auto w = synthetic_windows(2, 7, c);
    const auto state = pretrain_backbone(w, c);
    const auto out = backbone_forward(state, w);
    const auto back = denormalize(normalize_targets(w, out.stats), out.stats, c.horizon);
    for (std::size_t i = 0; i < back.size(); ++i) CHECK(back[i] == doctest::Approx(w.targets[i]).epsilon(1e-12));
}

TEST_CASE("shape and config errors") {
    auto c = small_config();
    const auto w = synthetic_windows(2, 8, c);
    auto bad = c;
    bad.patch_len = 5;
    CHECK_THROWS_AS(pretrain_backbone(w, bad), ConfigError);
    bad = c;
    bad.repr_dim = 1;
    CHECK_THROWS_AS(pretrain_backbone(w, bad), ConfigError);
    bad = c;
    bad.lookback = 16;
    CHECK_THROWS_AS(pretrain_backbone(w, bad), ShapeError);
    CHECK_THROWS_AS(pretrain_backbone(WindowBatch{2, c.lookback, c.horizon}, c), DataError);
    const auto state = pretrain_backbone(w, c);
    WindowBatch other{2, 16, c.horizon};
    CHECK_THROWS_AS(backbone_forward(state, other), ShapeError);
}

TEST_CASE("checkpoint round trip and corruption") {
    const auto c = small_config();
    const auto state = pretrain_backbone(synthetic_windows(2, 9, c), c);
    const auto dir = fs::temp_directory_path() / "cadapt_test_backbone";
    fs::create_directories(dir);
    const auto p = dir / "bb.bin";
    save_backbone(state, p);
    const auto back = load_backbone(p);
    CHECK(back.embedding == state.embedding);
    CHECK(back.head == state.head);
    CHECK(back.config.repr_dim == c.repr_dim);
    CHECK(back.ridge == state.ridge);
    CHECK(fs::file_size(p) == 8 + 4 + 4 + 5 * 8 + 2 * 8 + 8 * (state.embedding.size() + state.head.size()));

    fs::resize_file(p, fs::file_size(p) - 3);
    CHECK_THROWS_AS(load_backbone(p), DataError);
    std::ofstream(p, std::ios::binary) << "NOTABACKBONEFILE";
    CHECK_THROWS_AS(load_backbone(p), DataError);
}
