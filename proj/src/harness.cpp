#include "cadapt/harness.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

#include "cadapt/dce.hpp"
#include "cadapt/errors.hpp"
#include "cadapt/io.hpp"
#include "cadapt/optim.hpp"

namespace cadapt {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out))
        throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
    return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        throw ConfigError("'" + key + "' expects a nonnegative integer, got '" + v + "'");
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw ConfigError("'" + key + "' expects true/false, got '" + v + "'");
}

std::string fmt(double v) {
    char buf[32];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
    return std::string(buf, p);
}

// Rows `idx` of a tensor along axis 0, as a constant.
Tensor take(const Tensor& x, std::span<const std::size_t> idx) {
    Shape shape = x.shape();
    const std::size_t row = x.numel() / shape[0];
    std::vector<double> out(idx.size() * row);
    const auto src = x.data();
    for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(src.begin() + idx[i] * row, row, out.begin() + i * row);
    shape[0] = idx.size();
    return Tensor(std::move(shape), std::move(out));
}

std::vector<std::size_t> iota(std::size_t begin, std::size_t end) {
    std::vector<std::size_t> v(end - begin);
    std::iota(v.begin(), v.end(), begin);
    return v;
}

std::size_t backbone_param_count(const BackboneState& b) { return b.embedding.size() + b.head.size(); }

}  // namespace

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (batch == 0) throw ConfigError("batch must be positive");
    if (adapter.hd_depth == 0 || adapter.fusion_depth == 0) throw ConfigError("l1 and l2 must be positive");
    if (adapter.dce.expansion == 0) throw ConfigError("expansion must be positive");
    adapter.hpcl.validate();
}

void apply_setting(TrainConfig& cfg, const std::string& key, const std::string& value) {
    auto& a = cfg.adapter;
    if (key == "lr") cfg.lr = parse_double(key, value);
    else if (key == "epochs") cfg.epochs = parse_uint(key, value);
    else if (key == "patience") cfg.patience = parse_uint(key, value);
    else if (key == "batch") cfg.batch = parse_uint(key, value);
    else if (key == "warmup") cfg.warmup = parse_uint(key, value);
    else if (key == "seed") cfg.seed = a.seed = parse_uint(key, value);
    else if (key == "lambda_aux") a.hpcl.lambda_aux = parse_double(key, value);
    else if (key == "tau") a.hpcl.tau = parse_double(key, value);
    else if (key == "epsilon_init") a.hpcl.epsilon_init = parse_double(key, value);
    else if (key == "soft_gate") a.hpcl.soft_gate = parse_bool(key, value);
    else if (key == "soft_width") a.hpcl.soft_width = parse_double(key, value);
    else if (key == "binarize") a.hpcl.binarize = parse_bool(key, value);
    else if (key == "learn_epsilon") a.hpcl.learn_epsilon = parse_bool(key, value);
    else if (key == "degree") a.dce.degree = parse_uint(key, value);
    else if (key == "rank") a.dce.rank = parse_uint(key, value);
    else if (key == "expansion") a.dce.expansion = parse_uint(key, value);
    else if (key == "symmetrize") a.dce.symmetrize = parse_bool(key, value);
    else if (key == "l1") a.hd_depth = parse_uint(key, value);
    else if (key == "l2") a.fusion_depth = parse_uint(key, value);
    else if (key == "beta_logit_init") a.beta_logit_init = parse_double(key, value);
    else if (key == "dce") {
        if (value == "full") a.dce_mode = DceMode::Full;
        else if (value == "pearson-only") a.dce_mode = DceMode::PearsonOnly;
        else throw ConfigError("'dce' expects full|pearson-only, got '" + value + "'");
    } else if (key == "hd") {
        if (value == "dual") a.dual = true;
        else if (value == "single") a.dual = false;
        else throw ConfigError("'hd' expects dual|single, got '" + value + "'");
    } else if (key == "hpcl") {
        a.hpcl_on = parse_bool(key, value);
    } else {
        throw ConfigError("unknown config key '" + key + "'");
    }
}

TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
        try {
            apply_setting(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    base.validate();
    return base;
}

std::string format_train_config(const TrainConfig& cfg) {
    const auto& a = cfg.adapter;
    const auto b = [](bool v) { return v ? "true" : "false"; };
    std::ostringstream o;
    o << "lr = " << fmt(cfg.lr) << "\nepochs = " << cfg.epochs << "\npatience = " << cfg.patience
      << "\nbatch = " << cfg.batch << "\nwarmup = " << cfg.warmup << "\nseed = " << cfg.seed
      << "\nlambda_aux = " << fmt(a.hpcl.lambda_aux) << "\ntau = " << fmt(a.hpcl.tau)
      << "\nepsilon_init = " << fmt(a.hpcl.epsilon_init) << "\nsoft_gate = " << b(a.hpcl.soft_gate)
      << "\nsoft_width = " << fmt(a.hpcl.soft_width) << "\nbinarize = " << b(a.hpcl.binarize)
      << "\nlearn_epsilon = " << b(a.hpcl.learn_epsilon) << "\ndegree = " << a.dce.degree << "\nrank = " << a.dce.rank
      << "\nexpansion = " << a.dce.expansion << "\nsymmetrize = " << b(a.dce.symmetrize) << "\nl1 = " << a.hd_depth
      << "\nl2 = " << a.fusion_depth << "\nbeta_logit_init = " << fmt(a.beta_logit_init)
      << "\ndce = " << (a.dce_mode == DceMode::Full ? "full" : "pearson-only") << "\nhd = " << (a.dual ? "dual" : "single")
      << "\nhpcl = " << b(a.hpcl_on) << "\n";
    return o.str();
}

Prepared prepare(const BackboneState& backbone, const WindowBatch& windows, bool with_pearson) {
    auto out = backbone_forward(backbone, windows);
    Prepared p;
    p.size = windows.size();
    p.repr = std::move(out.repr);
    p.yhat_norm = std::move(out.yhat_norm);
    p.target_norm = Tensor(p.yhat_norm.shape(), normalize_targets(windows, out.stats));
    p.stats = std::move(out.stats);
    p.target_raw = windows.targets;
    if (with_pearson) {
        const std::size_t n = windows.channels;
        std::vector<double> r;
        r.reserve(p.size * n * n);
        for (std::size_t w = 0; w < p.size; ++w) {
            const auto m = pearson_matrix(windows.input(w), n, windows.lookback);
            r.insert(r.end(), m.begin(), m.end());
        }
        p.pearson = Tensor({p.size, n, n}, std::move(r));
    }
    return p;
}

EvalMetrics error_metrics(std::span<const double> pred, std::span<const double> truth) {
    if (pred.size() != truth.size() || pred.empty()) throw ShapeError("metric inputs must be equal-sized and nonempty");
    double se = 0.0, ae = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double e = pred[i] - truth[i];
        se += e * e;
        ae += std::abs(e);
    }
    return {se / static_cast<double>(pred.size()), ae / static_cast<double>(pred.size()), 0};
}

EvalMetrics evaluate(const AdapterState<double>& adapter, const Prepared& data, std::size_t batch) {
    if (data.size == 0) throw DataError("evaluation set is empty");
    if (data.repr.dim(2) != adapter.channels || data.repr.dim(1) != adapter.patches || data.repr.dim(3) != adapter.dim ||
        data.yhat_norm.dim(2) != adapter.horizon)
        throw ShapeError("adapter was built for N=" + std::to_string(adapter.channels) + ", P=" +
                         std::to_string(adapter.patches) + ", d=" + std::to_string(adapter.dim) + ", F=" +
                         std::to_string(adapter.horizon) + " but data is " + shape_str(data.repr.shape()));
    NoGradGuard guard;
    const std::uint64_t before = correlation_matrices_built();
    std::vector<double> pred;
    pred.reserve(data.yhat_norm.numel());
    for (std::size_t s = 0; s < data.size; s += batch) {
        const auto idx = iota(s, std::min(data.size, s + batch));
        const auto y = adapter_forward_infer(adapter, take(data.repr, idx), take(data.yhat_norm, idx));
        pred.insert(pred.end(), y.data().begin(), y.data().end());
    }
    auto m = error_metrics(denormalize(pred, data.stats, adapter.horizon), data.target_raw);
    m.corr_built = correlation_matrices_built() - before;
    return m;
}

EvalMetrics evaluate(const AdapterState<double>& adapter, const BackboneState& backbone, const WindowBatch& windows) {
    return evaluate(adapter, prepare(backbone, windows, false));
}

EvalMetrics evaluate_backbone(const Prepared& data) {
    return error_metrics(denormalize(data.yhat_norm.data(), data.stats, data.yhat_norm.dim(2)), data.target_raw);
}

FitResult fit(const TrainConfig& cfg, const Splits& splits, const BackboneState& backbone) {
    cfg.validate();
    if (splits.train.empty()) throw DataError("training split is empty");
    if (splits.val.empty()) throw DataError("validation split is empty");
    const auto train = prepare(backbone, splits.train, cfg.adapter.hpcl_on);
    const auto val = prepare(backbone, splits.val, false);

    AdapterConfig acfg = cfg.adapter;
    acfg.seed = cfg.seed;
    FitResult res{AdapterState<double>::init(acfg, splits.train.channels, backbone.config.patches(),
                                             backbone.config.repr_dim, backbone.config.horizon),
                  {}};
    auto& state = res.adapter;
    auto& rep = res.report;
    rep.backbone_params = backbone_param_count(backbone);
    rep.adapter_params = state.trainable_count();

    Adam<double> opt(state.trainable_parameters(), {cfg.lr});
    Rng shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> order = iota(0, train.size);

    rep.initial_val_mse = rep.best_val_mse = evaluate(state, val).mse;
    auto best = state.snapshot();
    std::size_t since_best = 0;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double lambda = epoch <= cfg.warmup ? 0.0 : cfg.adapter.hpcl.lambda_aux;
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        EpochMetrics em{epoch};
        auto last_good = state.snapshot();
        try {
            for (std::size_t s = 0; s < train.size; s += cfg.batch) {
                const std::span<const std::size_t> idx(order.data() + s, std::min(cfg.batch, train.size - s));
                const double w = static_cast<double>(idx.size()) / static_cast<double>(train.size);
                const auto out = adapter_forward_train(state, take(train.repr, idx),
                                                       cfg.adapter.hpcl_on ? take(train.pearson, idx) : Tensor(),
                                                       take(train.yhat_norm, idx));
                const auto mse = ops::mse(out.ystar, take(train.target_norm, idx));
                const auto loss = lambda > 0.0 ? ops::add(mse, ops::scale(out.l_aux, lambda)) : mse;
                opt.zero_grad();
                backward(loss);
                opt.step();
                em.train_mse += w * mse.item();
                em.l_pos += w * out.l_pos.item();
                em.l_neg += w * out.l_neg.item();
                em.l_aux += w * out.l_aux.item();
            }
            em.val_mse = evaluate(state, val).mse;
            if (!std::isfinite(em.val_mse)) throw NumericalError("validation MSE is not finite");
        } catch (const NumericalError&) {
            state.restore(last_good);
            rep.diverged = true;
            break;
        }
        em.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        rep.epochs.push_back(em);
        if (em.val_mse < rep.best_val_mse) {
            rep.best_val_mse = em.val_mse;
            rep.best_epoch = epoch;
            best = state.snapshot();
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    state.restore(best);
    if (!splits.test.empty()) rep.test = evaluate(state, backbone, splits.test);
    return res;
}

void save_metrics_csv(const MetricsReport& report, const std::filesystem::path& path) {
    std::string out = "epoch,train_mse,l_pos,l_neg,l_aux,val_mse\n";
    for (const auto& e : report.epochs)
        out += std::to_string(e.epoch) + "," + fmt(e.train_mse) + "," + fmt(e.l_pos) + "," + fmt(e.l_neg) + "," +
               fmt(e.l_aux) + "," + fmt(e.val_mse) + "\n";
    write_file_atomic(path, out);
}

void set_ablation_row(TrainConfig& cfg, int row) {
    auto& a = cfg.adapter;
    switch (row) {
        case 2: a.hpcl_on = true, a.dce_mode = DceMode::PearsonOnly, a.dual = false; break;
        case 3: a.hpcl_on = true, a.dce_mode = DceMode::PearsonOnly, a.dual = true; break;
        case 4: a.hpcl_on = true, a.dce_mode = DceMode::Full, a.dual = false; break;
        case 5: a.hpcl_on = true, a.dce_mode = DceMode::Full, a.dual = true; break;
        default: throw ConfigError("ablation row must be 2..5 (row 1 has no adapter)");
    }
}

std::vector<AblationRow> ablate(const TrainConfig& base, const Splits& splits, const BackboneState& backbone,
                                const std::vector<std::uint64_t>& seeds) {
    static const char* labels[] = {"", "backbone", "pearson+single", "pearson+dual", "dce+single", "full"};
    std::vector<AblationRow> rows;
    const auto backbone_only = evaluate_backbone(prepare(backbone, splits.test, false));
    for (const auto seed : seeds) {
        rows.push_back({1, labels[1], seed, backbone_only.mse, backbone_only.mae});
        for (int r = 2; r <= 5; ++r) {
            TrainConfig cfg = base;
            cfg.seed = seed;
            set_ablation_row(cfg, r);
            const auto res = fit(cfg, splits, backbone);
            rows.push_back({r, labels[r], seed, res.report.test.mse, res.report.test.mae});
        }
    }
    return rows;
}

std::map<int, double> ablation_means(const std::vector<AblationRow>& rows) {
    std::map<int, std::pair<double, std::size_t>> acc;
    for (const auto& r : rows) {
        acc[r.row].first += r.mse;
        ++acc[r.row].second;
    }
    std::map<int, double> out;
    for (const auto& [row, v] : acc) out[row] = v.first / static_cast<double>(v.second);
    return out;
}

void save_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path) {
    std::string out = "row,label,seed,mse,mae\n";
    for (const auto& r : rows)
        out += std::to_string(r.row) + "," + r.label + "," + std::to_string(r.seed) + "," + fmt(r.mse) + "," + fmt(r.mae) + "\n";
    write_file_atomic(path, out);
}

double loglog_slope(const std::vector<BenchPoint>& points) {
    if (points.size() < 2) throw ConfigError("slope needs at least two points");
    double mx = 0.0, my = 0.0;
    for (const auto& p : points) {
        mx += std::log(static_cast<double>(p.channels));
        my += std::log(p.median_seconds);
    }
    mx /= static_cast<double>(points.size());
    my /= static_cast<double>(points.size());
    double sxy = 0.0, sxx = 0.0;
    for (const auto& p : points) {
        const double dx = std::log(static_cast<double>(p.channels)) - mx;
        sxy += dx * (std::log(p.median_seconds) - my);
        sxx += dx * dx;
    }
    return sxy / sxx;
}

namespace {

template <typename T>
double bench_one(std::size_t n, BenchMode mode, const BenchConfig& cfg) {
    const std::size_t p = cfg.lookback / cfg.patch_len, d = cfg.repr_dim, f = cfg.horizon, b = cfg.batch;
    Rng rng(cfg.seed + n);
    AdapterConfig acfg;
    acfg.hd_depth = acfg.fusion_depth = cfg.depth;
    acfg.seed = cfg.seed;
    auto state = AdapterState<T>::init(acfg, n, p, d, f);
    // Open the gate and the zero-initialized layers so every path does work.
    for (auto& [name, t] : state.all_parameters()) {
        std::normal_distribution<double> nd(0.0, 0.05);
        for (auto& v : t->mutable_data()) v = static_cast<T>(v + nd(rng));
    }
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<double> raw(b * n * cfg.lookback);
    for (auto& v : raw) v = nd(rng);
    std::vector<T> repr(b * p * n * d), yhat(b * n * f), target(b * n * f);
    for (auto& v : repr) v = static_cast<T>(nd(rng));
    for (auto& v : yhat) v = static_cast<T>(nd(rng));
    for (auto& v : target) v = static_cast<T>(nd(rng));
    const BasicTensor<T> repr_t({b, p, n, d}, repr), yhat_t({b, n, f}, yhat), target_t({b, n, f}, target);
    Adam<T> opt(state.trainable_parameters(), {1e-4});

    std::vector<double> times;
    for (std::size_t rep = 0; rep < cfg.reps + 1; ++rep) {
        const auto t0 = std::chrono::steady_clock::now();
        if (mode == BenchMode::Inference) {
            NoGradGuard guard;
            const auto y = adapter_forward_infer(state, repr_t, yhat_t);
            (void)y;
        } else {
            std::vector<double> r;
            r.reserve(b * n * n);
            for (std::size_t w = 0; w < b; ++w) {
                const auto m = pearson_matrix(std::span<const double>(raw).subspan(w * n * cfg.lookback, n * cfg.lookback), n,
                                              cfg.lookback);
                r.insert(r.end(), m.begin(), m.end());
            }
            const auto pearson = constant_from<T>({b, n, n}, r);
            const auto out = adapter_forward_train(state, repr_t, pearson, yhat_t);
            const auto loss = ops::add(ops::mse(out.ystar, target_t), out.l_aux);
            opt.zero_grad();
            backward(loss);
            opt.step();
        }
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (rep > 0) times.push_back(s);  // first repetition warms caches and allocators
    }
    std::nth_element(times.begin(), times.begin() + times.size() / 2, times.end());
    return times[times.size() / 2];
}

}  // namespace

BenchResult bench(const std::vector<std::size_t>& channels, BenchMode mode, const BenchConfig& cfg) {
    if (channels.size() < 4 || std::adjacent_find(channels.begin(), channels.end(), std::greater_equal<>()) != channels.end() ||
        channels.front() < 2)
        throw ConfigError("bench needs an ascending channel list of at least four entries >= 2");
    if (cfg.reps == 0 || cfg.lookback % cfg.patch_len != 0) throw ConfigError("invalid bench config");
    BenchResult res;
    for (const auto n : channels)
        res.points.push_back({n, cfg.single_precision ? bench_one<float>(n, mode, cfg) : bench_one<double>(n, mode, cfg)});
    res.slope = loglog_slope(res.points);
    return res;
}

std::vector<std::array<std::vector<double>, 2>> similarity_matrices(const AdapterState<double>& adapter,
                                                                    const Prepared& data,
                                                                    const std::vector<std::size_t>& windows) {
    for (const auto w : windows)
        if (w >= data.size) throw DataError("window index " + std::to_string(w) + " out of range (" + std::to_string(data.size) + " windows)");
    NoGradGuard guard;
    const auto repr = take(data.repr, windows);
    const auto [x_pos, x_neg] = divide(adapter.hd, repr);
    const std::size_t b = windows.size(), p = adapter.patches, n = adapter.channels, d = adapter.dim;
    const auto flat = [&](const Tensor& x) {
        return ops::cosine_similarity(ops::reshape(ops::permute(x, {0, 2, 1, 3}), {b, n, p * d}));
    };
    const auto sp = flat(x_pos), sn = flat(x_neg);
    std::vector<std::array<std::vector<double>, 2>> out(b);
    for (std::size_t i = 0; i < b; ++i) {
        out[i][0].assign(sp.data().begin() + i * n * n, sp.data().begin() + (i + 1) * n * n);
        out[i][1].assign(sn.data().begin() + i * n * n, sn.data().begin() + (i + 1) * n * n);
    }
    return out;
}

std::vector<std::vector<double>> correlation_estimates(const AdapterState<double>& adapter, const Prepared& data,
                                                       const std::vector<std::size_t>& windows) {
    if (data.pearson.rank() != 3) throw ConfigError("correlation estimates need Pearson matrices");
    for (const auto w : windows)
        if (w >= data.size) throw DataError("window index " + std::to_string(w) + " out of range (" + std::to_string(data.size) + " windows)");
    NoGradGuard guard;
    const auto pearson = take(data.pearson, windows);
    const auto corr = adapter.config.dce_mode == DceMode::Full
                          ? estimate_correlation(pearson, take(data.repr, windows), adapter.dce, adapter.config.dce)
                          : pearson;
    const std::size_t n = adapter.channels;
    std::vector<std::vector<double>> out(windows.size());
    for (std::size_t i = 0; i < windows.size(); ++i)
        out[i].assign(corr.data().begin() + i * n * n, corr.data().begin() + (i + 1) * n * n);
    return out;
}

std::vector<std::filesystem::path> export_similarity(const AdapterState<double>& adapter, const BackboneState& backbone,
                                                     const WindowBatch& windows, const std::vector<std::size_t>& selected,
                                                     const std::vector<std::string>& channel_names,
                                                     const std::filesystem::path& dir) {
    if (windows.empty() || selected.empty()) throw DataError("no windows selected for export");
    const std::size_t n = windows.channels;
    if (channel_names.size() != n) throw ShapeError("expected " + std::to_string(n) + " channel names");
    const auto data = prepare(backbone, windows, true);
    const auto sims = similarity_matrices(adapter, data, selected);
    const auto corr = correlation_estimates(adapter, data, selected);
    std::filesystem::create_directories(dir);
    std::string header = "channel";
    for (const auto& c : channel_names) header += "," + c;
    header += "\n";
    std::vector<std::filesystem::path> written;
    const auto write = [&](const std::vector<double>& m, const std::string& name) {
        std::string body = header;
        for (std::size_t r = 0; r < n; ++r) {
            body += channel_names[r];
            for (std::size_t c = 0; c < n; ++c) body += "," + fmt(m[r * n + c]);
            body += "\n";
        }
        const auto path = dir / name;
        write_file_atomic(path, body);
        written.push_back(path);
    };
    for (std::size_t i = 0; i < selected.size(); ++i) {
        const std::string stem = "window_" + std::to_string(selected[i]);
        write(sims[i][0], stem + "_pos.csv");
        write(sims[i][1], stem + "_neg.csv");
        write(corr[i], stem + "_corr.csv");
    }
    return written;
}

}  // namespace cadapt
