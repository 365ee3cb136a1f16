#include "cadapt/dce.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>

namespace cadapt {

namespace {
std::atomic<std::uint64_t> g_corr_built{0};

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
}  // namespace

std::uint64_t correlation_matrices_built() { return g_corr_built.load(); }

std::vector<double> pearson_matrix(std::span<const double> window, std::size_t n, std::size_t len,
                                   std::vector<bool>* flat) {
    if (window.size() != n * len) throw ShapeError("pearson window size mismatch");
    if (len < 2) throw ShapeError("pearson needs at least two samples");
    ++g_corr_built;
    std::vector<double> dev(n * len);
    std::vector<double> norm(n);
    std::vector<bool> is_flat(n, false);
    for (std::size_t i = 0; i < n; ++i) {
        const double* x = window.data() + i * len;
        double mu = 0.0;
        for (std::size_t t = 0; t < len; ++t) mu += x[t];
        mu /= static_cast<double>(len);
        double ss = 0.0;
        for (std::size_t t = 0; t < len; ++t) {
            dev[i * len + t] = x[t] - mu;
            ss += dev[i * len + t] * dev[i * len + t];
        }
        norm[i] = std::sqrt(ss);
        is_flat[i] = norm[i] <= 1e-12 * std::max(1.0, std::abs(mu)) * std::sqrt(static_cast<double>(len));
    }
    std::vector<double> r(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        r[i * n + i] = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            double v = 0.0;
            if (!is_flat[i] && !is_flat[j]) {
                double s = 0.0;
                for (std::size_t t = 0; t < len; ++t) s += dev[i * len + t] * dev[j * len + t];
                v = std::clamp(s / (norm[i] * norm[j]), -1.0, 1.0);
            }
            r[i * n + j] = r[j * n + i] = v;
        }
    }
    if (flat) *flat = std::move(is_flat);
    return r;
}

std::size_t default_rank(std::size_t channels) {
    const std::size_t quarter = (channels + 3) / 4;
    const std::size_t m = std::min<std::size_t>(std::max<std::size_t>(2, quarter), 16);
    return std::max<std::size_t>(1, std::min(m, channels - (channels > 1)));
}

std::size_t DceConfig::rank_for(std::size_t channels) const { return rank ? rank : default_rank(channels); }

template <typename T>
DceParams<T> DceParams<T>::init(std::size_t channels, std::size_t repr_dim, const DceConfig& cfg, Rng& rng) {
    const std::size_t m = cfg.rank_for(channels);
    if (channels > 1 && m >= channels)
        throw ConfigError("DCE rank " + std::to_string(m) + " must be below the channel count " + std::to_string(channels));
    if (cfg.expansion == 0) throw ConfigError("DCE expansion must be positive");
    DceParams p;
    p.degree = cfg.degree;
    p.basis = uniform_param<T>({channels, m}, -0.5, 0.5, rng);
    p.coef_w = normal_param<T>({repr_dim, cfg.degree + 1}, 1.0 / std::sqrt(static_cast<double>(repr_dim)), rng);
    p.coef_b = const_param<T>({cfg.degree + 1}, 0.0);
    p.e1 = normal_param<T>({m, cfg.expansion}, 0.1, rng);
    p.e2 = normal_param<T>({m, cfg.expansion}, 0.1, rng);
    return p;
}

template <typename T>
NamedParams<T> DceParams<T>::parameters() {
    return {{"dce.basis", &basis}, {"dce.coef_w", &coef_w}, {"dce.coef_b", &coef_b}, {"dce.e1", &e1}, {"dce.e2", &e2}};
}

template <typename T>
BasicTensor<T> polynomial_coefficients(const BasicTensor<T>& repr, const DceParams<T>& params) {
    if (repr.rank() != 4) throw ShapeError("repr must be [B, P, N, d], got " + shape_str(repr.shape()));
    if (repr.dim(-1) != params.coef_w.dim(0)) throw ShapeError("repr dim does not match coefficient net");
    const auto pooled = ops::mean(repr, 1);  // [B, N, d]
    return ops::tanh(ops::linear(pooled, params.coef_w, params.coef_b));
}

template <typename T>
BasicTensor<T> polynomial_basis_sum(const BasicTensor<T>& coef, const BasicTensor<T>& basis) {
    if (coef.rank() != 3 || coef.dim(1) != basis.dim(0))
        throw ShapeError("coefficients " + shape_str(coef.shape()) + " do not match basis " + shape_str(basis.shape()));
    const std::size_t terms = coef.dim(2);
    BasicTensor<T> q = ops::expand(ops::slice(coef, -1, 0, 1), {coef.dim(0), basis.dim(0), basis.dim(1)});
    for (std::size_t i = 1; i < terms; ++i) {
        const auto power = i == 1 ? basis : ops::pow(basis, static_cast<int>(i));
        q = ops::add(q, ops::mul(ops::slice(coef, -1, i, i + 1), power));
    }
    return q;
}

template <typename T>
BasicTensor<T> time_varying_component(const BasicTensor<T>& repr, const DceParams<T>& params) {
    if (repr.rank() != 4 || repr.dim(2) != params.basis.dim(0))
        throw ShapeError("repr " + shape_str(repr.shape()) + " does not match basis " + shape_str(params.basis.shape()));
    return polynomial_basis_sum(polynomial_coefficients(repr, params), params.basis);
}

template <typename T>
BasicTensor<T> time_invariant_component(const DceParams<T>& params) {
    return ops::sigmoid(ops::relu(ops::matmul(params.e1, ops::transpose_last(params.e2))));
}

template <typename T>
BasicTensor<T> compose_correlation(const BasicTensor<T>& pearson, const BasicTensor<T>& q, const BasicTensor<T>& v,
                                   bool symmetrize) {
    if (q.rank() != 3 || pearson.rank() != 3 || pearson.dim(0) != q.dim(0) || pearson.dim(1) != q.dim(1) ||
        pearson.dim(2) != q.dim(1) || v.rank() != 2 || v.dim(0) != q.dim(2) || v.dim(1) != q.dim(2))
        throw ShapeError("compose_correlation shapes R " + shape_str(pearson.shape()) + ", Q " + shape_str(q.shape()) +
                         ", V " + shape_str(v.shape()));
    g_corr_built += q.dim(0);
    auto learned = ops::matmul(ops::matmul(q, v), ops::transpose_last(q));
    if (symmetrize) learned = ops::scale(ops::add(learned, ops::transpose_last(learned)), T(0.5));
    return ops::add(pearson, learned);
}

template <typename T>
BasicTensor<T> estimate_correlation(const BasicTensor<T>& pearson, const BasicTensor<T>& repr, const DceParams<T>& params,
                                    const DceConfig& cfg) {
    return compose_correlation(pearson, time_varying_component(repr, params), time_invariant_component(params), cfg.symmetrize);
}

DecompositionCheck verify_decomposition(std::span<const double> qbar, std::span<const double> qtilde, std::span<const double> v,
                              std::size_t n, std::size_t m) {
    if (qbar.size() != n * m || qtilde.size() != n * m || v.size() != m * m) throw ShapeError("verify_decomposition shapes");
    const Eigen::Map<const RowMat> qb(qbar.data(), n, m), qt(qtilde.data(), n, m), vv(v.data(), m, m);
    const RowMat mi = qb * vv * qb.transpose();
    const RowMat mv = qb * vv * qt.transpose() + qt * vv * qb.transpose() + qt * vv * qt.transpose();
    const RowMat q = qb + qt;
    const RowMat full = q * vv * q.transpose();
    DecompositionCheck out;
    out.invariant_part.assign(mi.data(), mi.data() + n * n);
    out.varying_part.assign(mv.data(), mv.data() + n * n);
    out.residual = (full - mi - mv).cwiseAbs().maxCoeff();
    return out;
}

std::vector<PolyFitPoint> verify_poly_fit(const std::function<double(double)>& target, std::size_t max_degree, double lo,
                                          double hi, std::size_t grid) {
    if (grid < max_degree + 2 || !(hi > lo)) throw ShapeError("verify_poly_fit needs a grid finer than the degree");
    Eigen::VectorXd x(static_cast<Eigen::Index>(grid)), y(static_cast<Eigen::Index>(grid));
    for (std::size_t g = 0; g < grid; ++g) {
        x(static_cast<Eigen::Index>(g)) = lo + (hi - lo) * static_cast<double>(g) / static_cast<double>(grid - 1);
        y(static_cast<Eigen::Index>(g)) = target(x(static_cast<Eigen::Index>(g)));
    }
    std::vector<PolyFitPoint> curve;
    for (std::size_t k = 0; k <= max_degree; ++k) {
        Eigen::MatrixXd a(static_cast<Eigen::Index>(grid), static_cast<Eigen::Index>(k + 1));
        for (Eigen::Index g = 0; g < a.rows(); ++g) {
            double p = 1.0;
            for (Eigen::Index i = 0; i <= static_cast<Eigen::Index>(k); ++i) {
                a(g, i) = p;
                p *= x(g);
            }
        }
        const Eigen::VectorXd c = a.colPivHouseholderQr().solve(y);
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
        const auto& sv = svd.singularValues();
        PolyFitPoint pt;
        pt.degree = k;
        pt.max_error = (a * c - y).cwiseAbs().maxCoeff();
        pt.condition = sv(0) / sv(sv.size() - 1);
        curve.push_back(pt);
    }
    return curve;
}

#define CADAPT_DCE_INSTANTIATE(T)                                                                                    \
    template struct DceParams<T>;                                                                                  \
    template BasicTensor<T> polynomial_coefficients(const BasicTensor<T>&, const DceParams<T>&);                   \
    template BasicTensor<T> polynomial_basis_sum(const BasicTensor<T>&, const BasicTensor<T>&);                    \
    template BasicTensor<T> time_varying_component(const BasicTensor<T>&, const DceParams<T>&);                    \
    template BasicTensor<T> time_invariant_component(const DceParams<T>&);                                         \
    template BasicTensor<T> compose_correlation(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, \
                                                bool);                                                             \
    template BasicTensor<T> estimate_correlation(const BasicTensor<T>&, const BasicTensor<T>&, const DceParams<T>&, \
                                                 const DceConfig&);

CADAPT_DCE_INSTANTIATE(double)
CADAPT_DCE_INSTANTIATE(float)

}  // namespace cadapt
