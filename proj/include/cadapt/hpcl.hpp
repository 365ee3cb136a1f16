#pragma once

// Heterogeneous partial-correlation contrastive learning: threshold the
// estimated correlation into positive/negative masks and score each latent
// space with a mask-weighted InfoNCE over channels of the same window.

#include "cadapt/init.hpp"
#include "cadapt/tensor.hpp"

namespace cadapt {

struct HpclConfig {
    double epsilon_init = 0.3;
    double tau = 0.5;
    double lambda_aux = 1.0;
    bool soft_gate = false;     // sigmoid((m - eps)/soft_width) instead of the hard indicator
    double soft_width = 0.05;
    bool binarize = false;      // 0/1 pair weights instead of retained correlation values
    bool learn_epsilon = true;  // only has an effect with soft_gate

    void validate() const;
};

template <typename T>
struct HpclParams {
    BasicTensor<T> epsilon_raw;  // epsilon = softplus(epsilon_raw)

    static HpclParams init(const HpclConfig& cfg);
    BasicTensor<T> epsilon() const;
    NamedParams<T> parameters();
};

/// Masks over [B, N, N]. `pos` keeps values > eps, `neg` keeps values < -eps
/// (stored with their negative sign).
template <typename T>
struct MaskPair {
    BasicTensor<T> pos;
    BasicTensor<T> neg;
};

template <typename T>
MaskPair<T> threshold_masks(const BasicTensor<T>& corr, const BasicTensor<T>& epsilon, const HpclConfig& cfg);

/// Mask-weighted contrastive loss. x is [B, P, N, d] (flattened per channel)
/// or [B, N, D]; mask is [B, N, N] with nonnegative weights. Rows whose mask
/// is all zero are skipped; the result is the mean over windows that have at
/// least one nonempty row.
template <typename T>
BasicTensor<T> contrastive_loss(const BasicTensor<T>& x, const BasicTensor<T>& mask, double tau);

template <typename T>
struct AuxLoss {
    BasicTensor<T> pos;
    BasicTensor<T> neg;
    BasicTensor<T> total;
};

template <typename T>
AuxLoss<T> aux_loss(const BasicTensor<T>& x_pos, const BasicTensor<T>& x_neg, const MaskPair<T>& masks, double tau);

}  // namespace cadapt
