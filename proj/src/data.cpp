#include "cadapt/data.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "cadapt/dce.hpp"
#include "cadapt/errors.hpp"
#include "cadapt/io.hpp"

namespace cadapt {

void WindowBatch::push(std::span<const double> x, std::span<const double> y, std::size_t start) {
    if (x.size() != channels * lookback || y.size() != channels * horizon) throw ShapeError("window shape mismatch");
    inputs.insert(inputs.end(), x.begin(), x.end());
    targets.insert(targets.end(), y.begin(), y.end());
    starts.push_back(start);
}

WindowBatch WindowBatch::subset(std::span<const std::size_t> indices) const {
    WindowBatch out{channels, lookback, horizon, {}, {}, {}};
    out.inputs.reserve(indices.size() * channels * lookback);
    out.targets.reserve(indices.size() * channels * horizon);
    for (const std::size_t i : indices) {
        if (i >= size()) throw ShapeError("window index out of range");
        out.push(input(i), target(i), starts[i]);
    }
    return out;
}

WindowBatch WindowBatch::range(std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = begin; i < std::min(end, size()); ++i) idx.push_back(i);
    return subset(idx);
}

Regime parse_regime(const std::string& name) {
    if (name == "dynamic") return Regime::Dynamic;
    if (name == "heterogeneous") return Regime::Heterogeneous;
    if (name == "partial") return Regime::Partial;
    if (name == "independent") return Regime::Independent;
    throw ConfigError("unknown regime '" + name + "'");
}

std::string regime_name(Regime r) {
    switch (r) {
        case Regime::Dynamic: return "dynamic";
        case Regime::Heterogeneous: return "heterogeneous";
        case Regime::Partial: return "partial";
        case Regime::Independent: return "independent";
    }
    return "?";
}

namespace {

std::vector<double> equicorrelation(std::size_t n, double rho) {
    std::vector<double> c(n * n, rho);
    for (std::size_t i = 0; i < n; ++i) c[i * n + i] = 1.0;
    return c;
}

}  // namespace

PlantedStructure planted_structure(Regime regime, std::size_t n, std::size_t segment_len) {
    PlantedStructure s;
    s.channels = n;
    s.segment_len = segment_len;
    switch (regime) {
        case Regime::Dynamic:
            s.matrices = {equicorrelation(n, 0.8), equicorrelation(n, 0.6)};
            break;
        case Regime::Heterogeneous: {
            // Two groups: strongly positive within, negative across.
            std::vector<double> c(n * n);
            const std::size_t half = n / 2;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    c[i * n + j] = i == j ? 1.0 : ((i < half) == (j < half) ? 0.7 : -0.6);
            s.matrices = {c};
            break;
        }
        case Regime::Partial: {
            // Correlated first half, independent second half.
            std::vector<double> c(n * n, 0.0);
            const std::size_t half = n / 2;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    c[i * n + j] = i == j ? 1.0 : (i < half && j < half ? 0.8 : 0.0);
            s.matrices = {c};
            break;
        }
        case Regime::Independent:
            s.matrices = {equicorrelation(n, 0.0)};
            break;
    }
    tag_regimes(s, 0.2);
    return s;
}

void tag_regimes(PlantedStructure& s, double eps) {
    const std::size_t n = s.channels;
    s.dynamic = s.heterogeneous = s.partial = false;
    for (std::size_t a = 0; a < s.matrices.size(); ++a)
        for (std::size_t b = a + 1; b < s.matrices.size(); ++b)
            if (s.matrices[a] != s.matrices[b]) s.dynamic = true;
    for (const auto& c : s.matrices)
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t b = 0; b < n; ++b) {
                if (a == b) continue;
                if (std::abs(c[a * n + b]) < eps) s.partial = true;
                for (std::size_t d = 0; d < n; ++d)
                    if (d != a && d != b && c[a * n + b] * c[a * n + d] < 0) s.heterogeneous = true;
            }
}

SyntheticSeries generate_synthetic(const PlantedStructure& structure, std::size_t total_steps, double noise_std,
                                   std::uint64_t seed, const FilterConfig& filter) {
    const std::size_t n = structure.channels;
    if (n == 0 || structure.matrices.empty()) throw DataError("planted structure has no channels or matrices");
    if (structure.segment_len < 8 * n)
        throw DataError("segment length " + std::to_string(structure.segment_len) + " < 8*N; too short to estimate an N x N correlation");
    if (!(noise_std > 0)) throw DataError("noise_std must be positive");

    // Square-root factors via eigendecomposition, negative eigenvalues clipped.
    std::vector<Eigen::MatrixXd> factors;
    for (const auto& c : structure.matrices) {
        if (c.size() != n * n) throw DataError("correlation matrix size mismatch");
        Eigen::MatrixXd m = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(c.data(), n, n);
        if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-9) throw DataError("correlation matrix is not symmetric");
        for (std::size_t i = 0; i < n; ++i)
            if (std::abs(m(i, i) - 1.0) > 1e-9) throw DataError("correlation matrix diagonal must be 1");
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
        if (eig.eigenvalues().minCoeff() < -1e-8) throw DataError("correlation matrix is not positive semidefinite");
        const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
        factors.push_back(eig.eigenvectors() * root.asDiagonal());
    }

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::size_t s = filter.period;
    const std::size_t burn = 20 * (s + 1);
    const std::size_t total = burn + total_steps;
    std::vector<double> x(n * total, 0.0);
    Eigen::VectorXd z(n);
    for (std::size_t t = 0; t < total; ++t) {
        const std::size_t k = t < burn ? 0 : structure.segment_of(t - burn);
        for (std::size_t i = 0; i < n; ++i) z(i) = normal(rng);
        const Eigen::VectorXd e = noise_std * (factors[k] * z);
        for (std::size_t i = 0; i < n; ++i) {
            double* xi = x.data() + i * total;
            double v = e(i);
            if (t >= 1) v += filter.ar * xi[t - 1];
            if (t >= s) v += filter.seasonal * xi[t - s];
            if (t >= s + 1) v -= filter.ar * filter.seasonal * xi[t - s - 1];
            xi[t] = v;
        }
    }

    SyntheticSeries out;
    out.truth = structure;
    auto& series = out.series;
    series.channels = n;
    series.length = total_steps;
    series.values.resize(n * total_steps);
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(x.data() + i * total + burn, total_steps, series.values.data() + i * total_steps);
        series.names.push_back("ch" + std::to_string(i));
    }
    series.frequency = "synthetic";
    return out;
}

// ------------------------------------------------------------------------ CSV

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
        std::size_t b = 0;
        while (b < cell.size() && cell[b] == ' ') ++b;
        cells.push_back(cell.substr(b));
    }
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

}  // namespace

MultivariateSeries load_csv(const std::filesystem::path& path, const CsvSchema& schema, std::size_t min_rows) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw DataError(path.string() + ": missing header row");
    if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);  // UTF-8 BOM
    const auto header = split_csv_line(line);

    std::ptrdiff_t date_col = -1;
    for (std::size_t c = 0; c < header.size(); ++c)
        if (header[c] == schema.date_column) date_col = static_cast<std::ptrdiff_t>(c);
    if (date_col < 0) throw DataError(path.string() + ": missing date column '" + schema.date_column + "'");

    std::vector<std::size_t> cols;
    std::vector<std::string> names;
    if (schema.channels.empty()) {
        for (std::size_t c = 0; c < header.size(); ++c)
            if (static_cast<std::ptrdiff_t>(c) != date_col) {
                cols.push_back(c);
                names.push_back(header[c]);
            }
    } else {
        for (const auto& want : schema.channels) {
            auto it = std::find(header.begin(), header.end(), want);
            if (it == header.end()) throw DataError(path.string() + ": missing column '" + want + "'");
            cols.push_back(static_cast<std::size_t>(it - header.begin()));
            names.push_back(want);
        }
    }
    if (cols.empty()) throw DataError(path.string() + ": no channel columns");

    std::vector<std::vector<double>> per_channel(cols.size());
    std::vector<std::string> stamps;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") continue;
        ++row;
        const auto cells = split_csv_line(line);
        for (std::size_t k = 0; k < cols.size(); ++k) {
            const std::size_t c = cols[k];
            if (c >= cells.size())
                throw DataError(path.string() + ": row " + std::to_string(row) + " is missing column '" + names[k] + "'");
            const std::string& cell = cells[c];
            double v = 0.0;
            const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
            if (ec != std::errc() || ptr != cell.data() + cell.size() || !std::isfinite(v))
                throw DataError(path.string() + ": row " + std::to_string(row) + ", column '" + names[k] +
                                "': cannot parse '" + cell + "' as a finite number");
            per_channel[k].push_back(v);
        }
        stamps.push_back(static_cast<std::size_t>(date_col) < cells.size() ? cells[static_cast<std::size_t>(date_col)] : "");
    }
    if (row < min_rows)
        throw DataError(path.string() + ": " + std::to_string(row) + " rows, need at least " + std::to_string(min_rows));

    MultivariateSeries s;
    s.channels = cols.size();
    s.length = row;
    s.names = std::move(names);
    s.timestamps = std::move(stamps);
    s.values.reserve(s.channels * s.length);
    for (const auto& ch : per_channel) s.values.insert(s.values.end(), ch.begin(), ch.end());
    return s;
}

void save_csv(const MultivariateSeries& series, const std::filesystem::path& path) {
    std::ostringstream os;
    os << "date";
    for (std::size_t n = 0; n < series.channels; ++n)
        os << ',' << (n < series.names.size() ? series.names[n] : "ch" + std::to_string(n));
    os << '\n';
    char buf[64];
    for (std::size_t t = 0; t < series.length; ++t) {
        if (t < series.timestamps.size() && !series.timestamps[t].empty()) os << series.timestamps[t];
        else os << t;
        for (std::size_t n = 0; n < series.channels; ++n) {
            const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, series.at(n, t), std::chars_format::general, 17);
            os << ',' << std::string_view(buf, static_cast<std::size_t>(ptr - buf));
        }
        os << '\n';
    }
    write_file_atomic(path, os.str());
}

void save_truth_json(const PlantedStructure& truth, const std::filesystem::path& path) {
    nlohmann::json j;
    j["channels"] = truth.channels;
    j["segment_len"] = truth.segment_len;
    j["matrices"] = truth.matrices;
    j["tags"] = {{"dynamic", truth.dynamic}, {"heterogeneous", truth.heterogeneous}, {"partial", truth.partial}};
    write_file_atomic(path, j.dump(2) + "\n");
}

PlantedStructure load_truth_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    try {
        const auto j = nlohmann::json::parse(in);
        PlantedStructure s;
        s.channels = j.at("channels").get<std::size_t>();
        s.segment_len = j.at("segment_len").get<std::size_t>();
        s.matrices = j.at("matrices").get<std::vector<std::vector<double>>>();
        s.dynamic = j.at("tags").at("dynamic").get<bool>();
        s.heterogeneous = j.at("tags").at("heterogeneous").get<bool>();
        s.partial = j.at("tags").at("partial").get<bool>();
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

// -------------------------------------------------------------------- windows

void SplitSpec::validate() const {
    if (train < 0 || val < 0 || test < 0 || std::abs(train + val + test - 1.0) > 1e-9)
        throw ConfigError("split fractions must be nonnegative and sum to 1");
    if (!(few_shot > 0.0 && few_shot <= 1.0)) throw ConfigError("few-shot fraction must lie in (0, 1]");
    if (stride == 0) throw ConfigError("stride must be positive");
}

std::size_t window_count(std::size_t region, std::size_t lookback, std::size_t horizon, std::size_t stride) {
    if (region < lookback + horizon) return 0;
    return (region - lookback - horizon) / stride + 1;
}

Splits make_windows(const MultivariateSeries& series, const SplitSpec& spec, std::size_t lookback, std::size_t horizon) {
    spec.validate();
    const std::size_t total = series.length;
    const auto train_end = static_cast<std::size_t>(std::floor(spec.train * static_cast<double>(total) + 1e-9));
    const auto val_end = static_cast<std::size_t>(std::floor((spec.train + spec.val) * static_cast<double>(total) + 1e-9));
    const std::size_t bounds[4] = {0, train_end, val_end, total};
    const double fracs[3] = {spec.train, spec.val, spec.test};

    Splits out;
    WindowBatch* targets[3] = {&out.train, &out.val, &out.test};
    std::vector<double> x(series.channels * lookback), y(series.channels * horizon);
    for (int s = 0; s < 3; ++s) {
        WindowBatch& wb = *targets[s];
        wb.channels = series.channels;
        wb.lookback = lookback;
        wb.horizon = horizon;
        if (fracs[s] <= 0.0) continue;
        const std::size_t begin = bounds[s];
        const std::size_t count = window_count(bounds[s + 1] - begin, lookback, horizon, spec.stride);
        if (count == 0)
            throw DataError("series of length " + std::to_string(total) + " too short for one window in split " + std::to_string(s));
        std::size_t first = 0;
        if (s == 0 && spec.few_shot < 1.0) {
            const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(spec.few_shot * static_cast<double>(count) + 1e-9)));
            first = count - keep;
        }
        for (std::size_t w = first; w < count; ++w) {
            const std::size_t start = begin + w * spec.stride;
            for (std::size_t n = 0; n < series.channels; ++n) {
                const auto ch = series.channel(n);
                std::copy_n(ch.data() + start, lookback, x.data() + n * lookback);
                std::copy_n(ch.data() + start + lookback, horizon, y.data() + n * horizon);
            }
            wb.push(x, y, start);
        }
    }
    return out;
}

// --------------------------------------------------------------------- regime

namespace {

// Lag autocorrelations of one channel segment, lags 1..max_lag.
std::vector<double> autocorr(std::span<const double> x, std::size_t max_lag) {
    const std::size_t t = x.size();
    double mu = 0.0;
    for (const double v : x) mu += v;
    mu /= static_cast<double>(t);
    double c0 = 0.0;
    for (const double v : x) c0 += (v - mu) * (v - mu);
    std::vector<double> r(max_lag, 0.0);
    if (c0 <= 0.0) return r;
    for (std::size_t k = 1; k <= max_lag; ++k) {
        double ck = 0.0;
        for (std::size_t i = k; i < t; ++i) ck += (x[i] - mu) * (x[i - k] - mu);
        r[k - 1] = ck / c0;
    }
    return r;
}

}  // namespace

RegimeReport verify_regime(const MultivariateSeries& series, std::size_t segment_len, double eps) {
    const std::size_t n = series.channels;
    if (segment_len < 8 * n) throw DataError("segment length must be at least 8*N");
    RegimeReport report;
    if (n < 2) return report;
    const std::size_t segments = series.length / segment_len;
    const std::size_t max_lag = segment_len / 8;

    // Per segment: Pearson matrix and Bartlett standard errors per pair.
    std::vector<std::vector<double>> se(segments);
    std::vector<double> window(n * segment_len);
    for (std::size_t k = 0; k < segments; ++k) {
        for (std::size_t c = 0; c < n; ++c)
            std::copy_n(series.channel(c).data() + k * segment_len, segment_len, window.data() + c * segment_len);
        report.segment_corr.push_back(pearson_matrix(window, n, segment_len));
        std::vector<std::vector<double>> ac(n);
        for (std::size_t c = 0; c < n; ++c) ac[c] = autocorr({window.data() + c * segment_len, segment_len}, max_lag);
        se[k].assign(n * n, 0.0);
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t b = 0; b < n; ++b) {
                double s = 1.0;
                for (std::size_t l = 0; l < max_lag; ++l) s += 2.0 * ac[a][l] * ac[b][l];
                s = std::max(s, 1.0);
                const double r = report.segment_corr[k][a * n + b];
                se[k][a * n + b] = (1.0 - r * r) * std::sqrt(s / static_cast<double>(segment_len));
            }
    }

    for (std::size_t m = 0; m < segments; ++m)
        for (std::size_t q = m + 1; q < segments; ++q) {
            double diff2 = 0.0, noise2 = 0.0;
            for (std::size_t a = 0; a < n; ++a)
                for (std::size_t b = a + 1; b < n; ++b) {
                    const double d = report.segment_corr[m][a * n + b] - report.segment_corr[q][a * n + b];
                    diff2 += d * d;
                    noise2 += se[m][a * n + b] * se[m][a * n + b] + se[q][a * n + b] * se[q][a * n + b];
                }
            if (std::sqrt(diff2) > 2.0 * std::sqrt(noise2)) report.dynamic = true;
        }

    for (std::size_t k = 0; k < segments; ++k) {
        const auto& c = report.segment_corr[k];
        // Entries inside the eps band count as absent, not as a sign.
        auto significant = [&](std::size_t a, std::size_t b) {
            const double v = std::abs(c[a * n + b]);
            return v >= eps && v > 2.0 * se[k][a * n + b];
        };
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t b = 0; b < n; ++b) {
                if (a == b) continue;
                if (std::abs(c[a * n + b]) < eps) report.partial = true;
                if (!significant(a, b)) continue;
                for (std::size_t d = 0; d < n; ++d)
                    if (d != a && d != b && significant(a, d) && c[a * n + b] * c[a * n + d] < 0) report.heterogeneous = true;
            }
    }
    return report;
}

}  // namespace cadapt
