#include "cadapt/hpcl.hpp"

#include <cmath>

#include "cadapt/errors.hpp"

namespace cadapt {

void HpclConfig::validate() const {
    if (!(epsilon_init >= 0.0)) throw ConfigError("epsilon must be nonnegative");
    if (!(tau > 0.0)) throw ConfigError("tau must be positive");
    if (!(lambda_aux >= 0.0)) throw ConfigError("lambda_aux must be nonnegative");
    if (!(soft_width > 0.0)) throw ConfigError("soft gate width must be positive");
}

template <typename T>
HpclParams<T> HpclParams<T>::init(const HpclConfig& cfg) {
    // Inverse softplus; a zero threshold maps to a very negative raw value.
    const double e = cfg.epsilon_init;
    const double raw = e > 0 ? (e > 20 ? e : std::log(std::expm1(e))) : -30.0;
    HpclParams p;
    p.epsilon_raw = BasicTensor<T>::scalar(static_cast<T>(raw), cfg.soft_gate && cfg.learn_epsilon);
    return p;
}

template <typename T>
BasicTensor<T> HpclParams<T>::epsilon() const {
    return ops::softplus(epsilon_raw);
}

template <typename T>
NamedParams<T> HpclParams<T>::parameters() {
    return {{"hpcl.epsilon_raw", &epsilon_raw}};
}

template <typename T>
MaskPair<T> threshold_masks(const BasicTensor<T>& corr, const BasicTensor<T>& epsilon, const HpclConfig& cfg) {
    if (corr.rank() != 3 || corr.dim(1) != corr.dim(2)) throw ShapeError("correlation must be [B, N, N]");
    if (!cfg.soft_gate) {
        const T eps = epsilon.item();
        const auto on_pos = ops::step_mask(corr, eps, false);
        const auto on_neg = ops::step_mask(corr, eps, true);
        if (cfg.binarize) return {on_pos, ops::scale(on_neg, T(-1))};
        return {ops::mul(corr, on_pos), ops::mul(corr, on_neg)};
    }
    const T inv_w = static_cast<T>(1.0 / cfg.soft_width);
    const auto gate_pos = ops::sigmoid(ops::scale(ops::sub(corr, epsilon), inv_w));
    const auto gate_neg = ops::sigmoid(ops::scale(ops::sub(ops::scale(corr, T(-1)), epsilon), inv_w));
    if (cfg.binarize) return {gate_pos, ops::scale(gate_neg, T(-1))};
    const auto pos_part = ops::relu(corr);
    const auto neg_part = ops::relu(ops::scale(corr, T(-1)));
    return {ops::mul(pos_part, gate_pos), ops::scale(ops::mul(neg_part, gate_neg), T(-1))};
}

template <typename T>
BasicTensor<T> contrastive_loss(const BasicTensor<T>& x, const BasicTensor<T>& mask, double tau) {
    BasicTensor<T> reps = x;
    if (x.rank() == 4) {
        const std::size_t b = x.dim(0), p = x.dim(1), n = x.dim(2), d = x.dim(3);
        reps = ops::reshape(ops::permute(x, {0, 2, 1, 3}), {b, n, p * d});
    }
    if (reps.rank() != 3) throw ShapeError("contrastive input must be [B, P, N, d] or [B, N, D]");
    const std::size_t b = reps.dim(0), n = reps.dim(1);
    if (mask.shape() != Shape{b, n, n}) throw ShapeError("mask " + shape_str(mask.shape()) + " does not match " + shape_str(reps.shape()));

    // Row weights: 1/(nonempty rows in window * windows with any nonempty row).
    const auto mv = mask.data();
    std::vector<T> valid(b * n, T(0)), row_weight(b * n, T(0));
    std::vector<std::size_t> rows_per_window(b, 0);
    std::size_t active_windows = 0;
    for (std::size_t s = 0; s < b; ++s) {
        for (std::size_t i = 0; i < n; ++i) {
            bool any = false;
            for (std::size_t j = 0; j < n; ++j) {
                const T m = mv[(s * n + i) * n + j];
                if (m < 0) throw ShapeError("contrastive mask weights must be nonnegative");
                any = any || m != T(0);
            }
            valid[s * n + i] = any ? T(1) : T(0);
            rows_per_window[s] += any;
        }
        active_windows += rows_per_window[s] > 0;
    }
    if (active_windows == 0) return BasicTensor<T>::scalar(T(0));
    for (std::size_t s = 0; s < b; ++s)
        for (std::size_t i = 0; i < n; ++i)
            if (valid[s * n + i] != T(0))
                row_weight[s * n + i] = T(1) / static_cast<T>(rows_per_window[s] * active_windows);

    const auto sim = ops::cosine_similarity(reps);                       // [B, N, N]
    const auto e = ops::exp(ops::scale(sim, static_cast<T>(1.0 / tau)));  // [B, N, N]
    const auto num = ops::sum(ops::mul(mask, e), -1);                     // [B, N]
    const auto den = ops::sum(e, -1);                                     // [B, N]
    std::vector<T> pad(b * n);
    for (std::size_t k = 0; k < pad.size(); ++k) pad[k] = T(1) - valid[k];
    const auto padded = ops::add(num, BasicTensor<T>({b, n}, std::move(pad)));
    const auto log_ratio = ops::sub(ops::log(padded), ops::log(den));
    return ops::scale(ops::sum_all(ops::mul(log_ratio, BasicTensor<T>({b, n}, std::move(row_weight)))), T(-1));
}

template <typename T>
AuxLoss<T> aux_loss(const BasicTensor<T>& x_pos, const BasicTensor<T>& x_neg, const MaskPair<T>& masks, double tau) {
    auto l_pos = contrastive_loss(x_pos, masks.pos, tau);
    auto l_neg = contrastive_loss(x_neg, ops::abs(masks.neg), tau);
    auto total = ops::add(l_pos, l_neg);
    return {std::move(l_pos), std::move(l_neg), std::move(total)};
}

#define CADAPT_HPCL_INSTANTIATE(T)                                                                                 \
    template struct HpclParams<T>;                                                                               \
    template MaskPair<T> threshold_masks(const BasicTensor<T>&, const BasicTensor<T>&, const HpclConfig&);        \
    template BasicTensor<T> contrastive_loss(const BasicTensor<T>&, const BasicTensor<T>&, double);               \
    template AuxLoss<T> aux_loss(const BasicTensor<T>&, const BasicTensor<T>&, const MaskPair<T>&, double);

CADAPT_HPCL_INSTANTIATE(double)
CADAPT_HPCL_INSTANTIATE(float)

}  // namespace cadapt
