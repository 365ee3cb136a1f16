// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
// Usage: acceptance [criterion numbers...]  (default: all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cadapt/grad_check.hpp"
#include "cadapt/harness.hpp"

using namespace cadapt;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string format(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

Tensor uniform(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = u(rng);
    return Tensor(std::move(shape), std::move(v));
}

// ---------------------------------------------------------------------------
// 1. Gradient suite over random configurations.

Outcome gradient_suite() {
    std::mt19937_64 rng(101);
    std::uniform_int_distribution<std::size_t> dn(2, 6), dp(1, 3), dd(2, 8), dk(0, 3), dl(1, 2), coin(0, 1);
    double worst = 0.0;
    std::size_t excluded = 0, checked = 0;
    for (int cfg_i = 0; cfg_i < 20; ++cfg_i) {
        const std::size_t n = dn(rng), p = dp(rng), d = dd(rng), f = 3, b = 2;
        AdapterConfig cfg;
        cfg.dce.degree = dk(rng);
        cfg.dce.expansion = 3;
        cfg.hd_depth = dl(rng);
        cfg.fusion_depth = dl(rng);
        cfg.dual = coin(rng) == 1;
        cfg.hpcl.soft_gate = cfg_i % 4 == 3;
        cfg.seed = rng();
        auto state = AdapterState<double>::init(cfg, n, p, d, f);
        std::normal_distribution<double> nd(0.0, 0.2);
        for (auto& [name, t] : state.all_parameters())
            for (auto& v : t->mutable_data()) v += nd(rng);
        const auto repr = uniform({b, p, n, d}, rng), yhat = uniform({b, n, f}, rng), target = uniform({b, n, f}, rng);
        const auto pearson = uniform({b, n, n}, rng);
        const auto loss = [&] {
            const auto out = adapter_forward_train(state, repr, pearson, yhat);
            return ops::add(ops::mse(out.ystar, target), out.l_aux);
        };
        const auto report = grad_check(loss, state.trainable_parameters(), 1e-5, 1e-4);
        worst = std::max(worst, report.max_rel_error);
        excluded += report.excluded;
        for (const auto& pc : report.params) checked += pc.checked;
    }
    return {worst < 1e-4, format("max rel error %.3e over %zu entries (%zu gate-crossing excluded)", worst, checked, excluded)};
}

// ---------------------------------------------------------------------------
// 2. Decomposition identity.

Outcome decomposition() {
    std::mt19937_64 rng(102);
    std::uniform_int_distribution<std::size_t> dn(2, 12);
    std::normal_distribution<double> nd;
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const std::size_t n = dn(rng);
        const std::size_t m = std::uniform_int_distribution<std::size_t>(1, n - 1)(rng);
        std::vector<double> qb(n * m), qt(n * m), v(m * m);
        for (auto* vec : {&qb, &qt, &v})
            for (auto& x : *vec) x = nd(rng);
        worst = std::max(worst, verify_decomposition(qb, qt, v, n, m).residual);
    }
    return {worst < 1e-10, format("max residual %.3e over 1000 instances", worst)};
}

// ---------------------------------------------------------------------------
// 3. Polynomial approximation curve.

Outcome poly_fit() {
    const auto curve = verify_poly_fit([](double x) { return std::exp(x); }, 4, -1.0, 1.0);
    bool monotone = true;
    std::string errs;
    for (std::size_t k = 0; k < curve.size(); ++k) {
        if (k > 0 && curve[k].max_error > curve[k - 1].max_error + 1e-12) monotone = false;
        errs += format("%s%.2e", k ? " " : "", curve[k].max_error);
    }
    const double last = curve.back().max_error;
    return {monotone && last < 1e-2, "errors K=0..4: " + errs};
}

// ---------------------------------------------------------------------------
// 4. Contrastive loss against a scalar double loop.

double loss_oracle(const Tensor& x, const Tensor& mask, double tau) {
    const std::size_t b = x.dim(0), n = x.dim(1), dim = x.dim(2);
    double total = 0.0;
    std::size_t windows = 0;
    for (std::size_t s = 0; s < b; ++s) {
        const auto xi = [&](std::size_t i, std::size_t k) { return x.at({s, i, k}); };
        double window = 0.0;
        std::size_t rows = 0;
        for (std::size_t i = 0; i < n; ++i) {
            double num = 0.0, den = 0.0;
            bool any = false;
            for (std::size_t j = 0; j < n; ++j) {
                double dot = 0, ni = 0, nj = 0;
                for (std::size_t k = 0; k < dim; ++k) {
                    dot += xi(i, k) * xi(j, k);
                    ni += xi(i, k) * xi(i, k);
                    nj += xi(j, k) * xi(j, k);
                }
                const double e = std::exp(dot / std::sqrt(ni * nj) / tau);
                const double w = mask.at({s, i, j});
                num += w * e;
                den += e;
                any = any || w != 0.0;
            }
            if (!any) continue;
            window -= std::log(num / den);
            ++rows;
        }
        if (rows) {
            total += window / rows;
            ++windows;
        }
    }
    return windows ? total / windows : 0.0;
}

Outcome loss_oracle_check() {
    std::mt19937_64 rng(104);
    double worst = 0.0;
    std::size_t instances = 0;
    for (std::size_t n = 1; n <= 8; ++n)
        for (int i = 0; i < 100; ++i) {
            const auto xp = uniform({2, n, 6}, rng), xn = uniform({2, n, 6}, rng);
            const auto corr = uniform({2, n, n}, rng, -1.2, 1.2);
            HpclConfig cfg;
            const auto masks = threshold_masks(corr, Tensor::scalar(0.3), cfg);
            const auto aux = aux_loss(xp, xn, masks, cfg.tau);
            const auto neg_abs = ops::abs(masks.neg);
            worst = std::max(worst, std::abs(aux.pos.item() - loss_oracle(xp, masks.pos, cfg.tau)));
            worst = std::max(worst, std::abs(aux.neg.item() - loss_oracle(xn, neg_abs, cfg.tau)));
            ++instances;
        }
    return {worst < 1e-10, format("max |vectorized - loop| %.3e over %zu instances (N=1..8)", worst, instances)};
}

// ---------------------------------------------------------------------------
// 5. Pearson against a two-pass loop.

Outcome pearson_check() {
    std::mt19937_64 rng(105);
    std::normal_distribution<double> nd;
    std::uniform_int_distribution<std::size_t> dn(2, 10), dl(8, 96);
    double worst = 0.0;
    bool props = true;
    for (int w = 0; w < 100; ++w) {
        const std::size_t n = dn(rng), l = dl(rng);
        std::vector<double> x(n * l);
        for (auto& v : x) v = 3.0 * nd(rng) + 1.5;
        const auto r = pearson_matrix(x, n, l);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double* a = &x[i * l];
                const double* c = &x[j * l];
                double ma = 0, mc = 0;
                for (std::size_t t = 0; t < l; ++t) ma += a[t], mc += c[t];
                ma /= l;
                mc /= l;
                double sac = 0, saa = 0, scc = 0;
                for (std::size_t t = 0; t < l; ++t) {
                    sac += (a[t] - ma) * (c[t] - mc);
                    saa += (a[t] - ma) * (a[t] - ma);
                    scc += (c[t] - mc) * (c[t] - mc);
                }
                const double v = r[i * n + j];
                worst = std::max(worst, std::abs(v - sac / std::sqrt(saa * scc)));
                if (v != r[j * n + i] || std::abs(v) > 1.0 || (i == j && v != 1.0)) props = false;
            }
    }
    return {worst < 1e-10 && props, format("max |r - oracle| %.3e; symmetric, unit diagonal, in [-1,1]: %s", worst,
                                           props ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// Shared synthetic setup for 6, 7, 9 and 10.

constexpr std::size_t kChannels = 8, kSteps = 8192, kSegment = 512, kLookback = 96, kHorizon = 96;

const BackboneState& shared_backbone() {
    // Pretraining corpus: independent channels through a different filter
    // than the target series, so the adapter has something to correct.
    static const BackboneState bb = [] {
        const FilterConfig corpus_filter{0.9, 0.7, 17};
        const auto corpus =
            generate_synthetic(planted_structure(Regime::Independent, kChannels, kSegment), kSteps, 1.0, 1000, corpus_filter);
        BackboneConfig bc;
        bc.lookback = kLookback;
        bc.horizon = kHorizon;
        bc.repr_dim = 16;
        return pretrain_backbone(make_windows(corpus.series, {0.7, 0.1, 0.2, 1.0, 4}, kLookback, kHorizon).train, bc);
    }();
    return bb;
}

struct Task {
    SyntheticSeries data;
    Splits splits;
};

const Task& task(Regime regime, std::uint64_t seed) {
    static std::map<std::pair<int, std::uint64_t>, Task> cache;
    const auto key = std::make_pair(static_cast<int>(regime), seed);
    if (auto it = cache.find(key); it != cache.end()) return it->second;
    Task t;
    t.data = generate_synthetic(planted_structure(regime, kChannels, kSegment), kSteps, 1.0, 100 + seed);
    t.splits = make_windows(t.data.series, {0.7, 0.1, 0.2, 0.05, 1}, kLookback, kHorizon);
    return cache.emplace(key, std::move(t)).first->second;
}

TrainConfig train_config() {
    TrainConfig c;  // lr 1e-3, 50 epochs, patience 10, batch 32, warmup 5
    c.adapter.hd_depth = c.adapter.fusion_depth = 1;
    return c;
}

// Fitted full models, reused by criterion 7.
std::map<std::pair<int, std::uint64_t>, AdapterState<double>> full_models;

const AdapterState<double>& full_model(Regime regime, std::uint64_t seed) {
    const auto key = std::make_pair(static_cast<int>(regime), seed);
    if (auto it = full_models.find(key); it != full_models.end()) return it->second;
    auto cfg = train_config();
    cfg.seed = seed;
    set_ablation_row(cfg, 5);
    return full_models.emplace(key, fit(cfg, task(regime, seed).splits, shared_backbone()).adapter).first->second;
}

// ---------------------------------------------------------------------------
// 6. End-to-end gain and ablation ordering.

Outcome end_to_end() {
    const auto& bb = shared_backbone();
    bool pass = true;
    std::string detail;
    for (const auto regime : {Regime::Dynamic, Regime::Heterogeneous, Regime::Partial}) {
        std::map<int, double> mean;
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            const auto& t = task(regime, seed);
            mean[1] += evaluate_backbone(prepare(bb, t.splits.test, false)).mse / 3;
            for (int row = 2; row <= 5; ++row) {
                auto cfg = train_config();
                cfg.seed = seed;
                set_ablation_row(cfg, row);
                auto res = fit(cfg, t.splits, bb);
                mean[row] += res.report.test.mse / 3;
                if (row == 5) full_models.emplace(std::make_pair(static_cast<int>(regime), seed), std::move(res.adapter));
            }
        }
        const double gain = 1.0 - mean[5] / mean[1];
        const double best_middle = std::min({mean[2], mean[3], mean[4]});
        const bool row5_best = mean[5] <= best_middle * 1.01;
        bool between = true;
        for (int row = 2; row <= 4; ++row) between = between && mean[row] <= mean[1] * 1.01 && mean[row] >= mean[5] * 0.99;
        const bool ok = gain >= 0.05 && row5_best && between;
        pass = pass && ok;
        detail += format("\n      %-13s rows 1-5 mse %.4f %.4f %.4f %.4f %.4f; gain %.1f%%; row5 best(1%%): %s; 2-4 between: %s",
                         regime_name(regime).c_str(), mean[1], mean[2], mean[3], mean[4], mean[5], 100 * gain,
                         row5_best ? "yes" : "no", between ? "yes" : "no");
    }
    return {pass, detail};
}

// ---------------------------------------------------------------------------
// 7. Sign recovery of the planted heterogeneous structure.

Outcome correlation_recovery() {
    const auto& bb = shared_backbone();
    double total = 0.0, pearson_total = 0.0;
    std::string per_seed;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        std::size_t pearson_agree = 0;
        const auto& t = task(Regime::Heterogeneous, seed);
        const auto& model = full_model(Regime::Heterogeneous, seed);
        const auto data = prepare(bb, t.splits.test, true);
        std::vector<std::size_t> all(data.size);
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        const auto est = correlation_estimates(model, data, all);
        const auto r = data.pearson.data();
        std::size_t agree = 0, counted = 0;
        for (std::size_t w = 0; w < all.size(); ++w) {
            const auto& c = t.data.truth.matrices[t.data.truth.segment_of(t.splits.test.starts[w] + kLookback - 1)];
            for (std::size_t i = 0; i < kChannels; ++i)
                for (std::size_t j = 0; j < kChannels; ++j) {
                    const double truth = c[i * kChannels + j];
                    if (i == j || std::abs(truth) <= 0.5) continue;
                    ++counted;
                    agree += (est[w][i * kChannels + j] > 0) == (truth > 0);
                    pearson_agree += (r[(w * kChannels + i) * kChannels + j] > 0) == (truth > 0);
                }
        }
        const double rate = static_cast<double>(agree) / static_cast<double>(counted);
        per_seed += format("%s%.1f%%", seed ? " " : "", 100 * rate);
        total += rate / 3;
        pearson_total += static_cast<double>(pearson_agree) / static_cast<double>(counted) / 3;
    }
    // The Pearson figure is context only; the criterion is on the learned estimate.
    return {total >= 0.8, format("sign agreement %.1f%% (seeds: %s; Pearson input alone %.1f%%)", 100 * total,
                                 per_seed.c_str(), 100 * pearson_total)};
}

// ---------------------------------------------------------------------------
// 8. Scaling of training and inference cost with N.

Outcome complexity() {
    const std::vector<std::size_t> sizes{8, 32, 128, 512};
    BenchConfig c;  // L = F = 96, patch 16, d = 32, depth 3
    c.reps = 20;
    const auto infer = bench(sizes, BenchMode::Inference, c);
    const auto train = bench(sizes, BenchMode::TrainStep, c);
    const bool ok = infer.slope >= 0.7 && infer.slope <= 1.3 && train.slope >= 1.5 && train.slope <= 2.3;
    std::string times;
    for (std::size_t i = 0; i < sizes.size(); ++i)
        times += format("%s%zu:%.2e/%.2e", i ? " " : "", sizes[i], infer.points[i].median_seconds,
                        train.points[i].median_seconds);
    return {ok, format("inference slope %.3f, train-step slope %.3f (N: infer/train s %s)", infer.slope, train.slope,
                       times.c_str())};
}

// ---------------------------------------------------------------------------
// 9. Identity at initialization.

Outcome identity_at_init() {
    const auto& bb = shared_backbone();
    double worst = 0.0;
    for (const auto regime : {Regime::Dynamic, Regime::Heterogeneous, Regime::Partial}) {
        const auto& t = task(regime, 0);
        const auto test = prepare(bb, t.splits.test, false);
        auto cfg = train_config().adapter;
        const auto state = AdapterState<double>::init(cfg, kChannels, bb.config.patches(), bb.config.repr_dim, kHorizon);
        const double base = evaluate_backbone(test).mse, init = evaluate(state, test).mse;
        worst = std::max(worst, std::abs(init - base) / base);
    }
    return {worst <= 0.02, format("max relative test-MSE difference %.3f%% over three regimes", 100 * worst)};
}

// ---------------------------------------------------------------------------
// 10. Determinism of the metrics file.

Outcome determinism() {
    const auto& bb = shared_backbone();
    const auto& t = task(Regime::Partial, 0);
    const auto dir = fs::temp_directory_path() / "cadapt_acceptance";
    fs::create_directories(dir);
    auto cfg = train_config();
    cfg.epochs = 10;
    const auto run = [&](const std::string& name) {
        save_metrics_csv(fit(cfg, t.splits, bb).report, dir / name);
        std::ifstream in(dir / name, std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    const auto a = run("run_a.csv"), b = run("run_b.csv");
    const auto lines = std::count(a.begin(), a.end(), '\n');
    return {a == b && lines > 1, format("%s (%ld lines, %zu bytes)", a == b ? "bit-identical" : "differ", lines, a.size())};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient suite (20 random configs, tol 1e-4)", gradient_suite},
        {"decomposition identity (1000 instances)", decomposition},
        {"polynomial fit of exp on [-1,1], K=0..4", poly_fit},
        {"contrastive loss vs double-loop oracle", loss_oracle_check},
        {"Pearson vs two-pass oracle", pearson_check},
        {"end-to-end gain and ablation ordering", end_to_end},
        {"correlation sign recovery (heterogeneous)", correlation_recovery},
        {"train O(N^2) / inference O(N) scaling", complexity},
        {"identity at init (within 2%)", identity_at_init},
        {"bit-identical metrics CSV", determinism},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!selected.empty() && !selected.count(id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("[%s] %2d. %s (%.1fs): %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), secs,
                    o.detail.c_str());
        std::fflush(stdout);
        failed += !o.pass;
    }
    std::printf("%d criteria failed\n", failed);
    return failed == 0 ? 0 : 1;
}
