#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "cadapt/grad_check.hpp"
#include "cadapt/projection.hpp"
#include "test_util.hpp"

using namespace cadapt;
using cadapt::test::random_tensor;

namespace {

// Moves every parameter off its init so each path carries signal.
void perturb(NamedParams<double> params, std::mt19937_64& rng, double sd = 0.3) {
    std::normal_distribution<double> nd(0.0, sd);
    for (auto& [name, t] : params)
        for (auto& v : t->mutable_data()) v += nd(rng);
}

bool same_values(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace

TEST_CASE("a freshly initialized layer is the identity") {
    Rng rng(1);
    const auto layer = ProjectionLayer<double>::init(3, 4, rng);
    std::mt19937_64 data(2);
    const auto x = random_tensor({2, 3, 5, 4}, data);
    CHECK(same_values(channel_aware_project(layer, x), x));

    auto hd = HdParams<double>::init(3, 3, 4, true, rng);
    const auto [pos, neg] = divide(hd, x);
    CHECK(same_values(pos, x));
    CHECK(same_values(neg, x));
}

TEST_CASE("channel weights are a softmax over channels") {
    Rng rng(3);
    auto layer = ProjectionLayer<double>::init(2, 3, rng);
    NamedParams<double> params;
    layer.append_parameters(params, "l");
    std::mt19937_64 data(4);
    perturb(params, data);
    const auto x = random_tensor({3, 2, 6, 3}, data);
    Tensor w;
    const auto y = channel_aware_project(layer, x, &w);
    CHECK(y.shape() == x.shape());
    REQUIRE(w.shape() == Shape{3, 6});
    for (std::size_t b = 0; b < 3; ++b) {
        double s = 0;
        for (std::size_t n = 0; n < 6; ++n) {
            CHECK(w.at({b, n}) > 0.0);
            s += w.at({b, n});
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
    }
}

TEST_CASE("layer output matches a scalar re-derivation") {
    Rng rng(5);
    auto layer = ProjectionLayer<double>::init(2, 3, rng);
    NamedParams<double> params;
    layer.append_parameters(params, "l");
    std::mt19937_64 data(6);
    perturb(params, data);
    const std::size_t p = 2, n = 4, d = 3;
    const auto x = random_tensor({1, p, n, d}, data);
    const auto y = channel_aware_project(layer, x);

    const auto lin = [](const std::vector<double>& in, const Tensor& w, const Tensor& b) {
        std::vector<double> out(w.dim(1));
        for (std::size_t j = 0; j < out.size(); ++j) {
            out[j] = b.data()[j];
            for (std::size_t i = 0; i < in.size(); ++i) out[j] += in[i] * w.at({i, j});
        }
        return out;
    };
    const auto relu = [](std::vector<double> v) {
        for (auto& e : v) e = std::max(e, 0.0);
        return v;
    };
    std::vector<std::vector<double>> normed(p * n);
    for (std::size_t t = 0; t < p; ++t)
        for (std::size_t c = 0; c < n; ++c) {
            double mu = 0, var = 0;
            for (std::size_t k = 0; k < d; ++k) mu += x.at({0, t, c, k});
            mu /= d;
            for (std::size_t k = 0; k < d; ++k) var += std::pow(x.at({0, t, c, k}) - mu, 2);
            var /= d;
            auto& row = normed[t * n + c];
            for (std::size_t k = 0; k < d; ++k)
                row.push_back((x.at({0, t, c, k}) - mu) / std::sqrt(var + 1e-5) * layer.ln_gamma.data()[k] +
                              layer.ln_beta.data()[k]);
        }
    std::vector<double> logits(n);
    for (std::size_t c = 0; c < n; ++c) {
        std::vector<double> flat;
        for (std::size_t t = 0; t < p; ++t) flat.insert(flat.end(), normed[t * n + c].begin(), normed[t * n + c].end());
        logits[c] = lin(relu(lin(flat, layer.w2a, layer.b2a)), layer.w2b, layer.b2b)[0];
    }
    double z = 0;
    for (const double l : logits) z += std::exp(l);
    for (std::size_t t = 0; t < p; ++t)
        for (std::size_t c = 0; c < n; ++c) {
            const auto proj = lin(relu(lin(normed[t * n + c], layer.w1a, layer.b1a)), layer.w1b, layer.b1b);
            for (std::size_t k = 0; k < d; ++k)
                CHECK(y.at({0, t, c, k}) ==
                      doctest::Approx(x.at({0, t, c, k}) + proj[k] * std::exp(logits[c]) / z).epsilon(1e-12));
        }
}

TEST_CASE("single-branch mode shares one stack") {
    Rng rng(7);
    auto hd = HdParams<double>::init(2, 2, 3, false, rng);
    CHECK_FALSE(hd.dual());
    CHECK(hd.parameters().size() == 20);
    std::mt19937_64 data(8);
    perturb(hd.parameters(), data);
    const auto x = random_tensor({2, 2, 4, 3}, data);
    const auto [pos, neg] = divide(hd, x);
    CHECK(same_values(pos, neg));

    auto dual = HdParams<double>::init(2, 2, 3, true, rng);
    CHECK(dual.parameters().size() == 40);
    perturb(dual.parameters(), data);
    const auto [a, b] = divide(dual, x);
    CHECK_FALSE(same_values(a, b));
}

TEST_CASE("shape errors") {
    Rng rng(9);
    const auto layer = ProjectionLayer<double>::init(2, 3, rng);
    std::mt19937_64 data(10);
    CHECK_THROWS_AS(channel_aware_project(layer, random_tensor({2, 2, 4, 5}, data)), ShapeError);
    CHECK_THROWS_AS(channel_aware_project(layer, random_tensor({2, 3, 4, 3}, data)), ShapeError);
    CHECK_THROWS_AS(channel_aware_project(layer, random_tensor({2, 4, 3}, data)), ShapeError);
}

TEST_CASE("stack gradients match finite differences") {
    Rng rng(11);
    auto hd = HdParams<double>::init(2, 2, 3, true, rng);
    std::mt19937_64 data(12);
    perturb(hd.parameters(), data);
    const auto x = random_tensor({2, 2, 4, 3}, data);
    const auto wp = random_tensor({2, 2, 4, 3}, data), wn = random_tensor({2, 2, 4, 3}, data);
    const auto f = [&] {
        const auto [pos, neg] = divide(hd, x);
        return ops::add(ops::sum_all(ops::mul(pos, wp)), ops::sum_all(ops::mul(neg, wn)));
    };
    const auto report = grad_check(f, hd.parameters(), 1e-5, 1e-4);
    CHECK(report.pass);
    for (const auto& pc : report.params) {
        INFO(pc.name);
        CHECK(pc.max_rel_error < 1e-4);
    }
}
