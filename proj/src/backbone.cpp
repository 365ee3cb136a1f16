#include "cadapt/backbone.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <random>

#include "cadapt/errors.hpp"
#include "cadapt/io.hpp"

namespace cadapt {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr char kMagic[8] = {'C', 'A', 'D', 'P', 'B', 'K', 'B', '1'};
constexpr std::uint32_t kVersion = 1;

// Normalizes one channel of one window; returns (mean, stdev, flat).
std::tuple<double, double, bool> normalize_into(std::span<const double> x, std::span<double> out) {
    double mu = 0.0;
    for (const double v : x) mu += v;
    mu /= static_cast<double>(x.size());
    double var = 0.0;
    for (const double v : x) var += (v - mu) * (v - mu);
    var /= static_cast<double>(x.size());
    const double sd = std::sqrt(var);
    const bool flat = sd < kNormFloor;
    const double used = flat ? kNormFloor : sd;
    for (std::size_t t = 0; t < x.size(); ++t) out[t] = flat ? 0.0 : (x[t] - mu) / used;
    return {mu, used, flat};
}

void check_windows(const BackboneConfig& cfg, const WindowBatch& w) {
    if (w.lookback != cfg.lookback || w.horizon != cfg.horizon)
        throw ShapeError("windows are L=" + std::to_string(w.lookback) + ", F=" + std::to_string(w.horizon) +
                         " but backbone expects L=" + std::to_string(cfg.lookback) + ", F=" + std::to_string(cfg.horizon));
}

}  // namespace

void BackboneConfig::validate() const {
    if (patch_len == 0 || lookback == 0 || lookback % patch_len != 0)
        throw ConfigError("lookback must be a positive multiple of patch_len");
    if (repr_dim < 2) throw ConfigError("repr_dim must be at least 2");
    if (horizon == 0) throw ConfigError("horizon must be positive");
}

BackboneState pretrain_backbone(const WindowBatch& corpus, const BackboneConfig& cfg, double ridge) {
    cfg.validate();
    check_windows(cfg, corpus);
    if (corpus.empty()) throw DataError("pretraining corpus is empty");
    const std::size_t l = cfg.patch_len, d = cfg.repr_dim, p = cfg.patches(), f = cfg.horizon, n = corpus.channels;
    const std::size_t rows = corpus.size() * n;

    // Normalized inputs and targets, one row per (window, channel).
    RowMat x(rows, cfg.lookback), y(rows, f);
    std::vector<double> buf(cfg.lookback);
    for (std::size_t w = 0; w < corpus.size(); ++w)
        for (std::size_t c = 0; c < n; ++c) {
            const std::size_t r = w * n + c;
            const auto [mu, sd, flat] = normalize_into(corpus.input(w).subspan(c * cfg.lookback, cfg.lookback), buf);
            std::copy(buf.begin(), buf.end(), x.row(static_cast<Eigen::Index>(r)).data());
            const auto tgt = corpus.target(w).subspan(c * f, f);
            for (std::size_t h = 0; h < f; ++h) y(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(h)) = flat ? 0.0 : (tgt[h] - mu) / sd;
        }

    // Embedding: principal directions of the patches; extra columns (d > l)
    // are seeded random combinations.
    const Eigen::Map<const RowMat> patches(x.data(), static_cast<Eigen::Index>(rows * p), static_cast<Eigen::Index>(l));
    const Eigen::MatrixXd second_moment = patches.transpose() * patches / static_cast<double>(rows * p);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(second_moment);
    RowMat emb(l, d);
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(l)));
    for (std::size_t j = 0; j < d; ++j) {
        if (j < l) emb.col(static_cast<Eigen::Index>(j)) = eig.eigenvectors().col(static_cast<Eigen::Index>(l - 1 - j));
        else
            for (std::size_t i = 0; i < l; ++i) emb(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = normal(rng);
    }

    RowMat feats(rows, p * d);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t q = 0; q < p; ++q)
            feats.row(static_cast<Eigen::Index>(r)).segment(static_cast<Eigen::Index>(q * d), static_cast<Eigen::Index>(d)) =
                x.row(static_cast<Eigen::Index>(r)).segment(static_cast<Eigen::Index>(q * l), static_cast<Eigen::Index>(l)) * emb;

    const Eigen::MatrixXd gram = feats.transpose() * feats / static_cast<double>(rows);
    const Eigen::MatrixXd rhs = feats.transpose() * y / static_cast<double>(rows);
    const double scale = std::max(gram.diagonal().mean(), 1e-12);
    BackboneState state;
    state.config = cfg;
    state.ridge = ridge;
    Eigen::MatrixXd head;
    for (;; ++state.ridge_escalations) {
        const Eigen::MatrixXd a = gram + state.ridge * scale * Eigen::MatrixXd::Identity(gram.rows(), gram.cols());
        Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
        if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
            head = ldlt.solve(rhs);
            if (head.allFinite() && (a * head - rhs).norm() <= 1e-6 * std::max(1.0, rhs.norm())) break;
        }
        if (state.ridge_escalations >= 10) throw NumericalError("backbone normal equations stayed singular");
        state.ridge *= 10.0;
    }

    state.embedding.assign(emb.data(), emb.data() + l * d);
    RowMat head_rm = head;
    state.head.assign(head_rm.data(), head_rm.data() + p * d * f);
    state.train_mse = (feats * head_rm - y).squaredNorm() / static_cast<double>(rows * f);
    return state;
}

BackboneOutput backbone_forward(const BackboneState& state, const WindowBatch& windows) {
    const auto& cfg = state.config;
    check_windows(cfg, windows);
    const std::size_t b = windows.size(), n = windows.channels, l = cfg.patch_len, d = cfg.repr_dim, p = cfg.patches(),
                      f = cfg.horizon;
    const Eigen::Map<const RowMat> emb(state.embedding.data(), static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(d));
    const Eigen::Map<const RowMat> head(state.head.data(), static_cast<Eigen::Index>(p * d), static_cast<Eigen::Index>(f));

    std::vector<double> repr(b * p * n * d), yhat(b * n * f);
    BackboneOutput out;
    out.stats.mean.resize(b * n);
    out.stats.stdev.resize(b * n);
    out.stats.flat.resize(b * n);
    std::vector<double> xn(cfg.lookback);
    Eigen::RowVectorXd flat_repr(static_cast<Eigen::Index>(p * d));
    for (std::size_t w = 0; w < b; ++w)
        for (std::size_t c = 0; c < n; ++c) {
            const auto [mu, sd, is_flat] = normalize_into(windows.input(w).subspan(c * cfg.lookback, cfg.lookback), xn);
            out.stats.mean[w * n + c] = mu;
            out.stats.stdev[w * n + c] = sd;
            out.stats.flat[w * n + c] = is_flat;
            for (std::size_t q = 0; q < p; ++q) {
                const Eigen::Map<const Eigen::RowVectorXd> patch(xn.data() + q * l, static_cast<Eigen::Index>(l));
                const Eigen::RowVectorXd e = patch * emb;
                flat_repr.segment(static_cast<Eigen::Index>(q * d), static_cast<Eigen::Index>(d)) = e;
                std::copy_n(e.data(), d, repr.data() + ((w * p + q) * n + c) * d);
            }
            Eigen::Map<Eigen::RowVectorXd>(yhat.data() + (w * n + c) * f, static_cast<Eigen::Index>(f)) = flat_repr * head;
        }
    out.repr = Tensor({b, p, n, d}, std::move(repr));
    out.yhat_norm = Tensor({b, n, f}, std::move(yhat));
    return out;
}

std::vector<double> denormalize(std::span<const double> normalized, const InstanceStats& stats, std::size_t horizon) {
    if (normalized.size() != stats.mean.size() * horizon) throw ShapeError("denormalize size mismatch");
    std::vector<double> out(normalized.size());
    for (std::size_t k = 0; k < stats.mean.size(); ++k)
        for (std::size_t h = 0; h < horizon; ++h)
            out[k * horizon + h] = normalized[k * horizon + h] * stats.stdev[k] + stats.mean[k];
    return out;
}

std::vector<double> normalize_targets(const WindowBatch& windows, const InstanceStats& stats) {
    const std::size_t f = windows.horizon;
    std::vector<double> out(windows.targets.size());
    for (std::size_t k = 0; k < stats.mean.size(); ++k)
        for (std::size_t h = 0; h < f; ++h)
            // Flat inputs carry no scale; their targets are pinned to the level.
            out[k * f + h] = stats.flat[k] ? 0.0 : (windows.targets[k * f + h] - stats.mean[k]) / stats.stdev[k];
    return out;
}

std::vector<double> BackboneOutput::yhat_raw() const {
    return denormalize(yhat_norm.data(), stats, yhat_norm.dim(-1));
}

void save_backbone(const BackboneState& s, const std::filesystem::path& path) {
    BinaryWriter w;
    w.bytes(std::string_view(kMagic, sizeof kMagic));
    w.u32(kVersion);
    w.u32(0);
    w.u64(s.config.lookback);
    w.u64(s.config.horizon);
    w.u64(s.config.patch_len);
    w.u64(s.config.repr_dim);
    w.u64(s.config.seed);
    w.f64(s.ridge);
    w.f64(s.train_mse);
    w.f64s(s.embedding);
    w.f64s(s.head);
    write_file_atomic(path, w.buffer());
}

BackboneState load_backbone(const std::filesystem::path& path) {
    BinaryReader r(path);
    if (r.bytes(sizeof kMagic) != std::string_view(kMagic, sizeof kMagic)) throw DataError(path.string() + ": not a backbone file");
    if (const auto v = r.u32(); v != kVersion) throw DataError(path.string() + ": unsupported version " + std::to_string(v));
    r.u32();
    BackboneState s;
    s.config.lookback = r.u64();
    s.config.horizon = r.u64();
    s.config.patch_len = r.u64();
    s.config.repr_dim = r.u64();
    s.config.seed = r.u64();
    s.config.validate();
    s.ridge = r.f64();
    s.train_mse = r.f64();
    s.embedding = r.f64s(s.config.patch_len * s.config.repr_dim);
    s.head = r.f64s(s.config.patches() * s.config.repr_dim * s.config.horizon);
    if (!r.at_end()) throw DataError(path.string() + ": trailing bytes");
    return s;
}

}  // namespace cadapt
