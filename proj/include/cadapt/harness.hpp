#pragma once

// Training, evaluation, ablation, timing and similarity export on top of a
// frozen backbone.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cadapt/adapter.hpp"
#include "cadapt/backbone.hpp"
#include "cadapt/data.hpp"

namespace cadapt {

struct TrainConfig {
    double lr = 1e-3;
    std::size_t epochs = 50;
    std::size_t patience = 10;
    std::size_t batch = 32;
    std::size_t warmup = 5;  // epochs trained with lambda_aux = 0
    std::uint64_t seed = 0;
    AdapterConfig adapter;   // module hyperparameters, ablation switches, lambda_aux

    void validate() const;
};

/// Applies one `key = value` setting. Throws ConfigError on unknown keys or
/// malformed values.
void apply_setting(TrainConfig& cfg, const std::string& key, const std::string& value);
/// Reads a config file: one `key = value` per line, `#` starts a comment.
TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base = {});
/// Serializes every field in the same format load_train_config reads.
std::string format_train_config(const TrainConfig& cfg);

/// Frozen-backbone outputs for a window set, computed once and reused.
struct Prepared {
    std::size_t size = 0;
    Tensor repr;         // [B, P, N, d]
    Tensor yhat_norm;    // [B, N, F]
    Tensor target_norm;  // [B, N, F]
    Tensor pearson;      // [B, N, N]; empty unless requested
    InstanceStats stats;
    std::vector<double> target_raw;
};

Prepared prepare(const BackboneState& backbone, const WindowBatch& windows, bool with_pearson);

struct EpochMetrics {
    std::size_t epoch = 0;
    double train_mse = 0.0;  // normalized space, mean over the epoch's batches
    double l_pos = 0.0;
    double l_neg = 0.0;
    double l_aux = 0.0;
    double val_mse = 0.0;    // raw space
    double seconds = 0.0;    // wall clock; not written to the metrics CSV
};

struct EvalMetrics {
    double mse = 0.0;
    double mae = 0.0;
    std::uint64_t corr_built = 0;  // correlation matrices built during evaluation
};

struct MetricsReport {
    std::vector<EpochMetrics> epochs;
    double initial_val_mse = 0.0;
    double best_val_mse = 0.0;
    std::size_t best_epoch = 0;  // 0: the initial state was never beaten
    bool diverged = false;
    std::size_t backbone_params = 0;
    std::size_t adapter_params = 0;
    EvalMetrics test;
};

struct FitResult {
    AdapterState<double> adapter;
    MetricsReport report;
};

/// Adam on mse(ystar, Y) + lambda_aux * L_aux in normalized space. Returns the
/// best-validation checkpoint. On a non-finite value training stops and the
/// last finite checkpoint is returned with report.diverged set.
FitResult fit(const TrainConfig& cfg, const Splits& splits, const BackboneState& backbone);

/// Raw-space metrics through the inference path (HD + fusion only).
EvalMetrics evaluate(const AdapterState<double>& adapter, const Prepared& data, std::size_t batch = 256);
EvalMetrics evaluate(const AdapterState<double>& adapter, const BackboneState& backbone, const WindowBatch& windows);
/// Metrics of the frozen backbone alone.
EvalMetrics evaluate_backbone(const Prepared& data);
/// Mean squared and absolute error of two equally sized arrays.
EvalMetrics error_metrics(std::span<const double> pred, std::span<const double> truth);

/// Writes epoch,train_mse,l_pos,l_neg,l_aux,val_mse with 17 significant digits.
void save_metrics_csv(const MetricsReport& report, const std::filesystem::path& path);

struct AblationRow {
    int row = 0;  // 1..5
    std::string label;
    std::uint64_t seed = 0;
    double mse = 0.0;
    double mae = 0.0;
};

/// The five-row ablation: (1) backbone only, (2) Pearson-only + single branch,
/// (3) Pearson-only + dual, (4) full DCE + single branch, (5) everything.
/// Switches in `base` other than those three are kept.
std::vector<AblationRow> ablate(const TrainConfig& base, const Splits& splits, const BackboneState& backbone,
                                const std::vector<std::uint64_t>& seeds);
/// Applies the switches of ablation row 2..5 to cfg.
void set_ablation_row(TrainConfig& cfg, int row);
std::map<int, double> ablation_means(const std::vector<AblationRow>& rows);
void save_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path);

enum class BenchMode { TrainStep, Inference };

struct BenchConfig {
    std::size_t lookback = 96;
    std::size_t horizon = 96;
    std::size_t patch_len = 16;
    std::size_t repr_dim = 32;
    std::size_t depth = 3;  // l1 = l2
    std::size_t batch = 1;
    std::size_t reps = 20;
    bool single_precision = false;
    std::uint64_t seed = 0;
};

struct BenchPoint {
    std::size_t channels = 0;
    double median_seconds = 0.0;
};

struct BenchResult {
    std::vector<BenchPoint> points;
    double slope = 0.0;  // least-squares slope of log(time) on log(N)
};

BenchResult bench(const std::vector<std::size_t>& channels, BenchMode mode, const BenchConfig& cfg);
double loglog_slope(const std::vector<BenchPoint>& points);

/// Per-window N x N cosine similarity of channel representations in the
/// positive and negative spaces: [windows][2][N*N].
std::vector<std::array<std::vector<double>, 2>> similarity_matrices(const AdapterState<double>& adapter,
                                                                    const Prepared& data,
                                                                    const std::vector<std::size_t>& windows);

/// Per-window N x N correlation estimate (Pearson prior plus the learned
/// term, or Pearson alone in pearson-only mode). `data` needs Pearson.
std::vector<std::vector<double>> correlation_estimates(const AdapterState<double>& adapter, const Prepared& data,
                                                       const std::vector<std::size_t>& windows);

/// Writes window_<i>_pos.csv, window_<i>_neg.csv and window_<i>_corr.csv
/// into `dir`, headed by the channel names.
std::vector<std::filesystem::path> export_similarity(const AdapterState<double>& adapter, const BackboneState& backbone,
                                                     const WindowBatch& windows, const std::vector<std::size_t>& selected,
                                                     const std::vector<std::string>& channel_names,
                                                     const std::filesystem::path& dir);

}  // namespace cadapt
