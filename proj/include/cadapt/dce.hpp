#pragma once

// Dynamic correlation estimation: Pearson prior R plus the low-rank learned
// term Q_t V Q_t^T, where Q_t is a per-window polynomial over a shared basis
// and V is a global (time-invariant) M x M mixing matrix.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "cadapt/init.hpp"
#include "cadapt/tensor.hpp"

namespace cadapt {

/// Counts every N x N correlation matrix materialized (Pearson or composed).
std::uint64_t correlation_matrices_built();

/// Pearson correlation of the rows of an N x L window (two-pass). Rows with
/// zero variance get 0 off the diagonal and are reported in `flat`.
std::vector<double> pearson_matrix(std::span<const double> window, std::size_t channels, std::size_t length,
                                   std::vector<bool>* flat = nullptr);

struct DceConfig {
    std::size_t degree = 3;     // K
    std::size_t rank = 0;       // M; 0 selects default_rank(N)
    std::size_t expansion = 8;  // d_e
    bool symmetrize = false;

    std::size_t rank_for(std::size_t channels) const;
};

std::size_t default_rank(std::size_t channels);

template <typename T>
struct DceParams {
    BasicTensor<T> basis;   // q: N x M
    BasicTensor<T> coef_w;  // d x (K+1)
    BasicTensor<T> coef_b;  // K+1
    BasicTensor<T> e1;      // M x d_e
    BasicTensor<T> e2;      // M x d_e
    std::size_t degree = 0;

    static DceParams init(std::size_t channels, std::size_t repr_dim, const DceConfig& cfg, Rng& rng);
    NamedParams<T> parameters();
};

/// Per-window polynomial coefficients tanh(mean_P(repr) W + b): [B, N, K+1].
template <typename T>
BasicTensor<T> polynomial_coefficients(const BasicTensor<T>& repr, const DceParams<T>& params);

/// Q[b,n,m] = sum_i coef[b,n,i] * q[n,m]^i with q^0 = 1.
template <typename T>
BasicTensor<T> polynomial_basis_sum(const BasicTensor<T>& coef, const BasicTensor<T>& basis);

/// repr [B, P, N, d] -> Q_t [B, N, M].
template <typename T>
BasicTensor<T> time_varying_component(const BasicTensor<T>& repr, const DceParams<T>& params);

/// V = sigmoid(relu(E1 E2^T)): [M, M].
template <typename T>
BasicTensor<T> time_invariant_component(const DceParams<T>& params);

/// R + Q V Q^T for R [B,N,N], Q [B,N,M], V [M,M].
template <typename T>
BasicTensor<T> compose_correlation(const BasicTensor<T>& pearson, const BasicTensor<T>& q, const BasicTensor<T>& v,
                                   bool symmetrize = false);

/// Full estimate for a batch: [B, N, N].
template <typename T>
BasicTensor<T> estimate_correlation(const BasicTensor<T>& pearson, const BasicTensor<T>& repr, const DceParams<T>& params,
                                    const DceConfig& cfg);

struct DecompositionCheck {
    std::vector<double> invariant_part;  // Qbar V Qbar^T
    std::vector<double> varying_part;    // cross terms + Qtilde V Qtilde^T
    double residual = 0.0;
};

/// Splits Q = Qbar + Qtilde and checks (Q V Q^T) = M_i + M_v entrywise.
DecompositionCheck verify_decomposition(std::span<const double> qbar, std::span<const double> qtilde, std::span<const double> v,
                              std::size_t channels, std::size_t rank);

struct PolyFitPoint {
    std::size_t degree = 0;
    double max_error = 0.0;
    double condition = 0.0;  // 2-norm condition number of the design matrix
};

/// Least-squares monomial fits of degree 0..max_degree on a uniform grid.
std::vector<PolyFitPoint> verify_poly_fit(const std::function<double(double)>& target, std::size_t max_degree, double lo,
                                          double hi, std::size_t grid = 401);

}  // namespace cadapt
