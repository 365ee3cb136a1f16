#pragma once

#include <cstddef>

#include "cadapt/projection.hpp"

namespace cadapt {

/// Post-division projections, shared linear head and per-channel gate.
template <typename T>
struct FusionParams {
    ProjectionStack<T> post_pos;
    ProjectionStack<T> post_neg;  // empty in single-branch mode
    BasicTensor<T> head_w;        // [P*d, F], zero at init
    BasicTensor<T> head_b;        // [F]
    BasicTensor<T> beta_logits;   // [N]; beta = sigmoid(beta_logits)

    static FusionParams init(std::size_t depth, std::size_t patches, std::size_t dim, std::size_t channels,
                             std::size_t horizon, bool dual, double beta_logit_init, Rng& rng);
    NamedParams<T> parameters();
};

template <typename T>
struct FusionOutput {
    BasicTensor<T> ystar;     // [B, N, F]
    BasicTensor<T> head_out;  // [B, N, F]
};

/// ystar[n] = beta[n] * head(x_pos' + x_neg')[n] + (1 - beta[n]) * yhat[n].
template <typename T>
FusionOutput<T> fuse_predict(const FusionParams<T>& params, const BasicTensor<T>& x_pos, const BasicTensor<T>& x_neg,
                             const BasicTensor<T>& yhat);

}  // namespace cadapt
