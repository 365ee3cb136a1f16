#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "cadapt/fusion.hpp"
#include "cadapt/grad_check.hpp"
#include "test_util.hpp"

using namespace cadapt;
using cadapt::test::random_tensor;

namespace {

FusionParams<double> make(bool dual, double beta_logit, std::uint64_t seed = 1) {
    Rng rng(seed);
    return FusionParams<double>::init(1, 2, 3, 4, 5, dual, beta_logit, rng);
}

void perturb(NamedParams<double> params, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, 0.3);
    for (auto& [name, t] : params)
        for (auto& v : t->mutable_data()) v += nd(rng);
}

}  // namespace

TEST_CASE("zero gate returns the backbone forecast exactly") {
    auto f = make(true, 0.0);
    std::mt19937_64 rng(2);
    perturb(f.parameters(), rng);
    for (auto& v : f.beta_logits.mutable_data()) v = -800.0;  // sigmoid underflows to 0
    const auto xp = random_tensor({2, 2, 4, 3}, rng), xn = random_tensor({2, 2, 4, 3}, rng);
    const auto yhat = random_tensor({2, 4, 5}, rng);
    const auto out = fuse_predict(f, xp, xn, yhat);
    for (std::size_t i = 0; i < yhat.numel(); ++i) CHECK(out.ystar.data()[i] == yhat.data()[i]);
}

TEST_CASE("the head starts at zero") {
    const auto f = make(true, -5.0);
    std::mt19937_64 rng(3);
    const auto yhat = random_tensor({2, 4, 5}, rng);
    const auto out = fuse_predict(f, random_tensor({2, 2, 4, 3}, rng), random_tensor({2, 2, 4, 3}, rng), yhat);
    for (const double v : out.head_out.data()) CHECK(v == 0.0);
    const double keep = 1.0 - 1.0 / (1.0 + std::exp(5.0));
    for (std::size_t i = 0; i < yhat.numel(); ++i)
        CHECK(out.ystar.data()[i] == doctest::Approx(keep * yhat.data()[i]).epsilon(1e-15));
}

TEST_CASE("gate blends per channel") {
    auto f = make(false, 0.0);
    std::mt19937_64 rng(4);
    perturb(f.parameters(), rng);
    const std::vector<double> logits{-1.0, 0.0, 2.0, 0.5};
    std::copy(logits.begin(), logits.end(), f.beta_logits.mutable_data().begin());
    const auto xp = random_tensor({1, 2, 4, 3}, rng), xn = random_tensor({1, 2, 4, 3}, rng);
    const auto yhat = random_tensor({1, 4, 5}, rng);
    const auto out = fuse_predict(f, xp, xn, yhat);
    for (std::size_t n = 0; n < 4; ++n) {
        const double beta = 1.0 / (1.0 + std::exp(-logits[n]));
        for (std::size_t h = 0; h < 5; ++h)
            CHECK(out.ystar.at({0, n, h}) ==
                  doctest::Approx(beta * out.head_out.at({0, n, h}) + (1 - beta) * yhat.at({0, n, h})).epsilon(1e-13));
    }
}

TEST_CASE("head reads the merged spaces per channel") {
    // No post layers: head(x_pos + x_neg) with the channel's P x d features flattened patch-major.
    Rng init(5);
    auto f = FusionParams<double>::init(0, 2, 3, 4, 5, true, 0.0, init);
    std::mt19937_64 rng(6);
    perturb(f.parameters(), rng);
    const auto xp = random_tensor({1, 2, 4, 3}, rng), xn = random_tensor({1, 2, 4, 3}, rng);
    const auto out = fuse_predict(f, xp, xn, random_tensor({1, 4, 5}, rng));
    for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t h = 0; h < 5; ++h) {
            double s = f.head_b.data()[h];
            for (std::size_t t = 0; t < 2; ++t)
                for (std::size_t k = 0; k < 3; ++k)
                    s += (xp.at({0, t, n, k}) + xn.at({0, t, n, k})) * f.head_w.at({t * 3 + k, h});
            CHECK(out.head_out.at({0, n, h}) == doctest::Approx(s).epsilon(1e-13));
        }
}

TEST_CASE("shape errors") {
    const auto f = make(true, -5.0);
    std::mt19937_64 rng(7);
    const auto x = random_tensor({1, 2, 4, 3}, rng);
    CHECK_THROWS_AS(fuse_predict(f, x, random_tensor({1, 2, 4, 2}, rng), random_tensor({1, 4, 5}, rng)), ShapeError);
    CHECK_THROWS_AS(fuse_predict(f, x, x, random_tensor({1, 4, 6}, rng)), ShapeError);
    CHECK_THROWS_AS(fuse_predict(f, random_tensor({1, 2, 3, 3}, rng), random_tensor({1, 2, 3, 3}, rng),
                                 random_tensor({1, 3, 5}, rng)),
                    ShapeError);
}

TEST_CASE("fusion gradients match finite differences") {
    auto f = make(true, 0.0);
    std::mt19937_64 rng(8);
    perturb(f.parameters(), rng);
    auto xp = random_tensor({2, 2, 4, 3}, rng, -1, 1, true), xn = random_tensor({2, 2, 4, 3}, rng, -1, 1, true);
    const auto yhat = random_tensor({2, 4, 5}, rng), target = random_tensor({2, 4, 5}, rng);
    auto params = f.parameters();
    params.push_back({"x_pos", &xp});
    params.push_back({"x_neg", &xn});
    const auto report = grad_check([&] { return ops::mse(fuse_predict(f, xp, xn, yhat).ystar, target); }, params, 1e-5, 1e-4);
    CHECK(report.pass);
}
