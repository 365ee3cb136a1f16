#include "cadapt/fusion.hpp"

namespace cadapt {

template <typename T>
FusionParams<T> FusionParams<T>::init(std::size_t depth, std::size_t patches, std::size_t dim, std::size_t channels,
                                      std::size_t horizon, bool dual, double beta_logit_init, Rng& rng) {
    FusionParams f;
    f.post_pos = make_stack<T>(depth, patches, dim, rng);
    if (dual) f.post_neg = make_stack<T>(depth, patches, dim, rng);
    f.head_w = const_param<T>({patches * dim, horizon}, 0.0);
    f.head_b = const_param<T>({horizon}, 0.0);
    f.beta_logits = const_param<T>({channels}, beta_logit_init);
    return f;
}

template <typename T>
NamedParams<T> FusionParams<T>::parameters() {
    NamedParams<T> out;
    for (std::size_t i = 0; i < post_pos.size(); ++i) post_pos[i].append_parameters(out, "fusion.pos." + std::to_string(i));
    for (std::size_t i = 0; i < post_neg.size(); ++i) post_neg[i].append_parameters(out, "fusion.neg." + std::to_string(i));
    out.insert(out.end(), {{"fusion.head_w", &head_w}, {"fusion.head_b", &head_b}, {"fusion.beta_logits", &beta_logits}});
    return out;
}

template <typename T>
FusionOutput<T> fuse_predict(const FusionParams<T>& params, const BasicTensor<T>& x_pos, const BasicTensor<T>& x_neg,
                             const BasicTensor<T>& yhat) {
    if (x_pos.rank() != 4 || x_pos.shape() != x_neg.shape()) throw ShapeError("fusion inputs must be matching [B, P, N, d]");
    const std::size_t b = x_pos.dim(0), p = x_pos.dim(1), n = x_pos.dim(2), d = x_pos.dim(3);
    const std::size_t f = params.head_w.dim(1);
    if (params.head_w.dim(0) != p * d || params.beta_logits.dim(0) != n || yhat.shape() != Shape{b, n, f})
        throw ShapeError("fusion parameters do not match inputs " + shape_str(x_pos.shape()) + " / " + shape_str(yhat.shape()));

    const auto pos = apply_stack(params.post_pos, x_pos);
    const auto neg = apply_stack(params.post_neg.empty() ? params.post_pos : params.post_neg, x_neg);
    const auto merged = ops::reshape(ops::permute(ops::add(pos, neg), {0, 2, 1, 3}), {b, n, p * d});
    auto head_out = ops::linear(merged, params.head_w, params.head_b);  // [B, N, F]
    const auto beta = ops::reshape(ops::sigmoid(params.beta_logits), {n, 1});
    const auto one_minus = ops::add_scalar(ops::scale(beta, T(-1)), T(1));
    auto ystar = ops::add(ops::mul(beta, head_out), ops::mul(one_minus, yhat));
    return {std::move(ystar), std::move(head_out)};
}

template struct FusionParams<double>;
template struct FusionParams<float>;
template FusionOutput<double> fuse_predict(const FusionParams<double>&, const Tensor&, const Tensor&, const Tensor&);
template FusionOutput<float> fuse_predict(const FusionParams<float>&, const TensorF&, const TensorF&, const TensorF&);

}  // namespace cadapt
