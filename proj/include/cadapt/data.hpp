#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace cadapt {

/// N channels x T steps, row-major by channel.
struct MultivariateSeries {
    std::size_t channels = 0;
    std::size_t length = 0;
    std::vector<double> values;
    std::vector<std::string> names;
    std::vector<std::string> timestamps;  // optional; empty means integer index
    std::string frequency;

    std::span<const double> channel(std::size_t n) const { return {values.data() + n * length, length}; }
    double at(std::size_t n, std::size_t t) const { return values[n * length + t]; }
};

/// Per-window inputs (N x L) and targets (N x F), stored contiguously.
struct WindowBatch {
    std::size_t channels = 0;
    std::size_t lookback = 0;
    std::size_t horizon = 0;
    std::vector<double> inputs;
    std::vector<double> targets;
    std::vector<std::size_t> starts;  // series index of each window's first input step

    std::size_t size() const { return starts.size(); }
    bool empty() const { return starts.empty(); }
    std::span<const double> input(std::size_t i) const { return {inputs.data() + i * channels * lookback, channels * lookback}; }
    std::span<const double> target(std::size_t i) const { return {targets.data() + i * channels * horizon, channels * horizon}; }
    void push(std::span<const double> x, std::span<const double> y, std::size_t start);
    WindowBatch subset(std::span<const std::size_t> indices) const;
    WindowBatch range(std::size_t begin, std::size_t end) const;
};

/// Ground-truth correlation regimes laid out as repeating segments of
/// segment_len steps; segment k uses matrices[k % matrices.size()].
struct PlantedStructure {
    std::size_t channels = 0;
    std::size_t segment_len = 0;
    std::vector<std::vector<double>> matrices;
    bool dynamic = false;
    bool heterogeneous = false;
    bool partial = false;

    std::size_t segment_of(std::size_t t) const { return (t / segment_len) % matrices.size(); }
};

/// Shared per-channel filter applied to the correlated innovations:
/// (1 - ar B)(1 - seasonal B^period) x_t = e_t.
struct FilterConfig {
    double ar = 0.7;
    double seasonal = 0.7;
    std::size_t period = 24;
};

struct SyntheticSeries {
    MultivariateSeries series;
    PlantedStructure truth;
};

enum class Regime { Dynamic, Heterogeneous, Partial, Independent };

Regime parse_regime(const std::string& name);
std::string regime_name(Regime r);

/// Canonical planted structures used by the harness and tests.
PlantedStructure planted_structure(Regime regime, std::size_t channels, std::size_t segment_len);

/// Tags the matrices against the literal definitions (no noise margin).
void tag_regimes(PlantedStructure& structure, double eps);

SyntheticSeries generate_synthetic(const PlantedStructure& structure, std::size_t total_steps, double noise_std,
                                   std::uint64_t seed, const FilterConfig& filter = {});

struct CsvSchema {
    std::string date_column = "date";
    std::vector<std::string> channels;  // empty: every column except the date column
};

MultivariateSeries load_csv(const std::filesystem::path& path, const CsvSchema& schema = {}, std::size_t min_rows = 0);
/// Writes with 17 significant digits so values round-trip exactly.
void save_csv(const MultivariateSeries& series, const std::filesystem::path& path);

void save_truth_json(const PlantedStructure& truth, const std::filesystem::path& path);
PlantedStructure load_truth_json(const std::filesystem::path& path);

struct SplitSpec {
    double train = 0.7;
    double val = 0.1;
    double test = 0.2;
    double few_shot = 1.0;  // fraction of train windows kept (chronologically last)
    std::size_t stride = 1;

    void validate() const;
};

struct Splits {
    WindowBatch train, val, test;
};

/// Number of windows of length L+F that fit in `region` steps at `stride`.
std::size_t window_count(std::size_t region, std::size_t lookback, std::size_t horizon, std::size_t stride);

Splits make_windows(const MultivariateSeries& series, const SplitSpec& spec, std::size_t lookback, std::size_t horizon);

struct RegimeReport {
    bool dynamic = false;
    bool heterogeneous = false;
    bool partial = false;
    std::vector<std::vector<double>> segment_corr;
};

RegimeReport verify_regime(const MultivariateSeries& series, std::size_t segment_len, double eps);

}  // namespace cadapt
