// Command-line driver: synth, pretrain, fit, eval, ablate, bench, export-sim.
// Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical divergence.

#include <CLI11.hpp>

#include <cstdio>
#include <string>
#include <vector>

#include "cadapt/errors.hpp"
#include "cadapt/harness.hpp"
#include "cadapt/io.hpp"

using namespace cadapt;

namespace {

constexpr int kConfigExit = 2;
constexpr int kDataExit = 3;
constexpr int kDivergedExit = 4;

struct SplitOpts {
    double train = 0.7, val = 0.1, test = 0.2, few_shot = 1.0;
    std::size_t stride = 1;

    void add(CLI::App* app) {
        app->add_option("--train", train, "Train fraction")->capture_default_str();
        app->add_option("--val", val, "Validation fraction")->capture_default_str();
        app->add_option("--test", test, "Test fraction")->capture_default_str();
        app->add_option("--few-shot", few_shot, "Fraction of train windows kept (latest first)")->capture_default_str();
        app->add_option("--stride", stride, "Window stride")->capture_default_str();
    }
    SplitSpec spec() const { return {train, val, test, few_shot, stride}; }
};

struct TrainOpts {
    std::string config;
    std::vector<std::string> sets;

    void add(CLI::App* app) {
        app->add_option("--config", config, "key = value config file")->check(CLI::ExistingFile);
        app->add_option("--set", sets, "Override one setting, key=value (repeatable)");
    }
    TrainConfig load() const {
        TrainConfig cfg = config.empty() ? TrainConfig{} : load_train_config(config);
        for (const auto& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
            apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
        }
        cfg.validate();
        return cfg;
    }
};

std::vector<std::size_t> parse_list(const std::string& text, const char* what) {
    std::vector<std::size_t> out;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto comma = text.find(',', pos);
        const auto item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        try {
            std::size_t used = 0;
            const auto v = std::stoull(item, &used);
            if (used != item.size()) throw std::invalid_argument(item);
            out.push_back(v);
        } catch (const std::exception&) {
            throw ConfigError(std::string(what) + ": '" + item + "' is not a nonnegative integer");
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return out;
}

Splits load_splits(const std::string& data, const BackboneState& bb, const SplitOpts& split) {
    const auto series = load_csv(data, {}, bb.config.lookback + bb.config.horizon);
    return make_windows(series, split.spec(), bb.config.lookback, bb.config.horizon);
}

void print_eval(const char* label, const EvalMetrics& m) {
    std::printf("%-9s mse=%.10g mae=%.10g\n", label, m.mse, m.mae);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Correlation-aware adapter for frozen forecasting backbones"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a planted-correlation series and its truth sidecar");
    std::string regime = "heterogeneous", out_csv, out_truth;
    std::size_t channels = 8, length = 8192, segment = 512;
    double noise = 1.0;
    std::uint64_t seed = 0;
    FilterConfig filter;
    synth->add_option("--regime", regime, "dynamic|heterogeneous|partial|independent")->capture_default_str();
    synth->add_option("--channels", channels)->capture_default_str();
    synth->add_option("--length", length, "Total steps")->capture_default_str();
    synth->add_option("--segment", segment, "Steps per correlation segment")->capture_default_str();
    synth->add_option("--noise", noise, "Innovation standard deviation")->capture_default_str();
    synth->add_option("--seed", seed)->capture_default_str();
    synth->add_option("--ar", filter.ar)->capture_default_str();
    synth->add_option("--seasonal", filter.seasonal)->capture_default_str();
    synth->add_option("--period", filter.period)->capture_default_str();
    synth->add_option("--out", out_csv, "Series CSV")->required();
    synth->add_option("--truth", out_truth, "Truth JSON (default: <out>.truth.json)");

    // pretrain
    auto* pretrain = app.add_subcommand("pretrain", "Fit the frozen backbone on a corpus CSV");
    std::string data, backbone_path, out_bin;
    BackboneConfig bcfg;
    double ridge = 1e-4;
    SplitOpts pre_split;
    pre_split.val = 0.0;
    pre_split.test = 0.0;
    pre_split.train = 1.0;
    pretrain->add_option("--data", data)->required()->check(CLI::ExistingFile);
    pretrain->add_option("--lookback", bcfg.lookback)->capture_default_str();
    pretrain->add_option("--horizon", bcfg.horizon)->capture_default_str();
    pretrain->add_option("--patch", bcfg.patch_len)->capture_default_str();
    pretrain->add_option("--dim", bcfg.repr_dim)->capture_default_str();
    pretrain->add_option("--seed", bcfg.seed)->capture_default_str();
    pretrain->add_option("--ridge", ridge)->capture_default_str();
    pre_split.add(pretrain);
    pretrain->add_option("--out", out_bin, "Backbone checkpoint")->required();

    // fit
    auto* fit_cmd = app.add_subcommand("fit", "Train the adapter on a frozen backbone");
    SplitOpts split;
    TrainOpts topts;
    std::string metrics_csv, save_config;
    fit_cmd->add_option("--data", data)->required()->check(CLI::ExistingFile);
    fit_cmd->add_option("--backbone", backbone_path)->required()->check(CLI::ExistingFile);
    split.add(fit_cmd);
    topts.add(fit_cmd);
    fit_cmd->add_option("--out", out_bin, "Adapter checkpoint")->required();
    fit_cmd->add_option("--metrics", metrics_csv, "Per-epoch metrics CSV");
    fit_cmd->add_option("--save-config", save_config, "Write the effective config");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "Test-split metrics of the backbone and an adapter");
    std::string adapter_path;
    eval_cmd->add_option("--data", data)->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--backbone", backbone_path)->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--adapter", adapter_path)->check(CLI::ExistingFile);
    split.add(eval_cmd);
    topts.add(eval_cmd);

    // ablate
    auto* ablate_cmd = app.add_subcommand("ablate", "Five-row module ablation over seeds");
    std::string seeds_text = "0,1,2", out_path;
    ablate_cmd->add_option("--data", data)->required()->check(CLI::ExistingFile);
    ablate_cmd->add_option("--backbone", backbone_path)->required()->check(CLI::ExistingFile);
    ablate_cmd->add_option("--seeds", seeds_text, "Comma-separated seeds")->capture_default_str();
    split.add(ablate_cmd);
    topts.add(ablate_cmd);
    ablate_cmd->add_option("--out", out_path, "Ablation CSV")->required();

    // bench
    auto* bench_cmd = app.add_subcommand("bench", "Time a training step or inference against channel count");
    std::string mode = "inference", sizes = "8,32,128,512";
    BenchConfig bench_cfg;
    bench_cmd->add_option("--mode", mode, "train-step|inference")->capture_default_str();
    bench_cmd->add_option("--channels", sizes, "Ascending channel counts")->capture_default_str();
    bench_cmd->add_option("--lookback", bench_cfg.lookback)->capture_default_str();
    bench_cmd->add_option("--horizon", bench_cfg.horizon)->capture_default_str();
    bench_cmd->add_option("--patch", bench_cfg.patch_len)->capture_default_str();
    bench_cmd->add_option("--dim", bench_cfg.repr_dim)->capture_default_str();
    bench_cmd->add_option("--depth", bench_cfg.depth, "l1 = l2")->capture_default_str();
    bench_cmd->add_option("--batch", bench_cfg.batch)->capture_default_str();
    bench_cmd->add_option("--reps", bench_cfg.reps)->capture_default_str();
    bench_cmd->add_flag("--float", bench_cfg.single_precision, "Single precision");
    bench_cmd->add_option("--seed", bench_cfg.seed)->capture_default_str();
    bench_cmd->add_option("--out", out_path, "Timing CSV");

    // export-sim
    auto* export_cmd = app.add_subcommand("export-sim", "Write per-window similarity and correlation CSVs");
    std::string windows_text = "0", which = "test";
    export_cmd->add_option("--data", data)->required()->check(CLI::ExistingFile);
    export_cmd->add_option("--backbone", backbone_path)->required()->check(CLI::ExistingFile);
    export_cmd->add_option("--adapter", adapter_path)->required()->check(CLI::ExistingFile);
    export_cmd->add_option("--windows", windows_text, "Comma-separated window indices")->capture_default_str();
    export_cmd->add_option("--split", which, "train|val|test")->capture_default_str();
    split.add(export_cmd);
    topts.add(export_cmd);
    export_cmd->add_option("--out", out_path, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kConfigExit;
    }

    try {
        if (*synth) {
            const auto s = generate_synthetic(planted_structure(parse_regime(regime), channels, segment), length, noise, seed,
                                              filter);
            save_csv(s.series, out_csv);
            save_truth_json(s.truth, out_truth.empty() ? out_csv + ".truth.json" : out_truth);
            const auto check = verify_regime(s.series, segment, 0.3);
            std::printf("planted  dynamic=%d heterogeneous=%d partial=%d\n", s.truth.dynamic, s.truth.heterogeneous,
                        s.truth.partial);
            std::printf("measured dynamic=%d heterogeneous=%d partial=%d\n", check.dynamic, check.heterogeneous,
                        check.partial);
        } else if (*pretrain) {
            const auto series = load_csv(data, {}, bcfg.lookback + bcfg.horizon);
            const auto s = make_windows(series, pre_split.spec(), bcfg.lookback, bcfg.horizon);
            const auto state = pretrain_backbone(s.train, bcfg, ridge);
            save_backbone(state, out_bin);
            std::printf("backbone train_mse=%.10g ridge=%g windows=%zu\n", state.train_mse, state.ridge, s.train.size());
        } else if (*fit_cmd) {
            const auto cfg = topts.load();
            const auto bb = load_backbone(backbone_path);
            const auto splits = load_splits(data, bb, split);
            auto res = fit(cfg, splits, bb);
            save_adapter(res.adapter, out_bin);
            if (!metrics_csv.empty()) save_metrics_csv(res.report, metrics_csv);
            if (!save_config.empty()) write_file_atomic(save_config, format_train_config(cfg));
            const auto& r = res.report;
            for (const auto& e : r.epochs)
                std::printf("epoch %3zu train_mse=%.6g l_aux=%.6g val_mse=%.6g (%.2fs)\n", e.epoch, e.train_mse, e.l_aux,
                            e.val_mse, e.seconds);
            std::printf("params backbone=%zu adapter=%zu best_epoch=%zu\n", r.backbone_params, r.adapter_params,
                        r.best_epoch);
            if (!splits.test.empty()) {
                print_eval("backbone", evaluate_backbone(prepare(bb, splits.test, false)));
                print_eval("adapter", r.test);
            }
            if (r.diverged) {
                std::fprintf(stderr, "training diverged; saved the last finite checkpoint\n");
                return kDivergedExit;
            }
        } else if (*eval_cmd) {
            const auto bb = load_backbone(backbone_path);
            const auto splits = load_splits(data, bb, split);
            if (splits.test.empty()) throw DataError("test split is empty");
            const auto data_test = prepare(bb, splits.test, false);
            print_eval("backbone", evaluate_backbone(data_test));
            if (!adapter_path.empty()) {
                const auto cfg = topts.load();
                auto acfg = cfg.adapter;
                acfg.seed = cfg.seed;
                print_eval("adapter", evaluate(load_adapter(adapter_path, acfg), data_test));
            }
        } else if (*ablate_cmd) {
            const auto cfg = topts.load();
            const auto bb = load_backbone(backbone_path);
            const auto splits = load_splits(data, bb, split);
            const auto seeds = parse_list(seeds_text, "--seeds");
            const auto rows = ablate(cfg, splits, bb, {seeds.begin(), seeds.end()});
            save_ablation_csv(rows, out_path);
            for (const auto& [row, mse] : ablation_means(rows)) std::printf("row %d mean_mse=%.10g\n", row, mse);
        } else if (*bench_cmd) {
            BenchMode m;
            if (mode == "inference") m = BenchMode::Inference;
            else if (mode == "train-step") m = BenchMode::TrainStep;
            else throw ConfigError("--mode expects train-step|inference, got '" + mode + "'");
            const auto res = bench(parse_list(sizes, "--channels"), m, bench_cfg);
            std::string csv = "channels,median_seconds\n";
            for (const auto& p : res.points) {
                std::printf("N=%-5zu median=%.6g s\n", p.channels, p.median_seconds);
                csv += std::to_string(p.channels) + "," + std::to_string(p.median_seconds) + "\n";
            }
            std::printf("loglog slope=%.4f\n", res.slope);
            if (!out_path.empty()) write_file_atomic(out_path, csv);
        } else if (*export_cmd) {
            const auto cfg = topts.load();
            auto acfg = cfg.adapter;
            acfg.seed = cfg.seed;
            const auto bb = load_backbone(backbone_path);
            const auto series = load_csv(data, {}, bb.config.lookback + bb.config.horizon);
            const auto splits = make_windows(series, split.spec(), bb.config.lookback, bb.config.horizon);
            const WindowBatch* w = nullptr;
            if (which == "train") w = &splits.train;
            else if (which == "val") w = &splits.val;
            else if (which == "test") w = &splits.test;
            else throw ConfigError("--split expects train|val|test, got '" + which + "'");
            const auto files = export_similarity(load_adapter(adapter_path, acfg), bb, *w,
                                                 parse_list(windows_text, "--windows"), series.names, out_path);
            for (const auto& f : files) std::printf("%s\n", f.string().c_str());
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kConfigExit;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kDataExit;
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kDataExit;
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "numerical error: %s\n", e.what());
        return kDivergedExit;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
