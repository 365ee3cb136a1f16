#include "cadapt/projection.hpp"

#include <cmath>

namespace cadapt {

template <typename T>
ProjectionLayer<T> ProjectionLayer<T>::init(std::size_t patches, std::size_t d, Rng& rng) {
    ProjectionLayer l;
    l.ln_gamma = const_param<T>({d}, 1.0);
    l.ln_beta = const_param<T>({d}, 0.0);
    l.w1a = normal_param<T>({d, d}, std::sqrt(2.0 / static_cast<double>(d)), rng);
    l.b1a = const_param<T>({d}, 0.0);
    l.w1b = const_param<T>({d, d}, 0.0);
    l.b1b = const_param<T>({d}, 0.0);
    l.w2a = normal_param<T>({patches * d, d}, std::sqrt(2.0 / static_cast<double>(patches * d)), rng);
    l.b2a = const_param<T>({d}, 0.0);
    l.w2b = const_param<T>({d, 1}, 0.0);
    l.b2b = const_param<T>({1}, 0.0);
    return l;
}

template <typename T>
void ProjectionLayer<T>::append_parameters(NamedParams<T>& out, const std::string& prefix) {
    out.insert(out.end(), {{prefix + ".ln_gamma", &ln_gamma}, {prefix + ".ln_beta", &ln_beta},
                           {prefix + ".mlp1.w_in", &w1a}, {prefix + ".mlp1.b_in", &b1a},
                           {prefix + ".mlp1.w_out", &w1b}, {prefix + ".mlp1.b_out", &b1b},
                           {prefix + ".mlp2.w_in", &w2a}, {prefix + ".mlp2.b_in", &b2a},
                           {prefix + ".mlp2.w_out", &w2b}, {prefix + ".mlp2.b_out", &b2b}});
}

template <typename T>
ProjectionStack<T> make_stack(std::size_t depth, std::size_t patches, std::size_t dim, Rng& rng) {
    ProjectionStack<T> s;
    for (std::size_t i = 0; i < depth; ++i) s.push_back(ProjectionLayer<T>::init(patches, dim, rng));
    return s;
}

template <typename T>
BasicTensor<T> channel_aware_project(const ProjectionLayer<T>& layer, const BasicTensor<T>& x,
                                     BasicTensor<T>* channel_weights) {
    if (x.rank() != 4) throw ShapeError("projection input must be [B, P, N, d], got " + shape_str(x.shape()));
    const std::size_t b = x.dim(0), p = x.dim(1), n = x.dim(2), d = x.dim(3);
    if (layer.ln_gamma.dim(0) != d || layer.w2a.dim(0) != p * d)
        throw ShapeError("projection layer does not match input " + shape_str(x.shape()));

    const auto normed = ops::add(ops::mul(ops::layernorm(x), layer.ln_gamma), layer.ln_beta);
    const auto proj = ops::linear(ops::relu(ops::linear(normed, layer.w1a, layer.b1a)), layer.w1b, layer.b1b);

    // Squeeze: each channel's P x d context -> one logit; excite across channels.
    const auto per_channel = ops::reshape(ops::permute(normed, {0, 2, 1, 3}), {b, n, p * d});
    const auto logits = ops::linear(ops::relu(ops::linear(per_channel, layer.w2a, layer.b2a)), layer.w2b, layer.b2b);
    const auto weights = ops::softmax(logits, 1);  // [B, N, 1]
    if (channel_weights) *channel_weights = ops::reshape(weights, {b, n});

    return ops::add(x, ops::mul(proj, ops::reshape(weights, {b, 1, n, 1})));
}

template <typename T>
BasicTensor<T> apply_stack(const ProjectionStack<T>& stack, const BasicTensor<T>& x) {
    BasicTensor<T> h = x;
    for (const auto& layer : stack) h = channel_aware_project(layer, h);
    return h;
}

template <typename T>
HdParams<T> HdParams<T>::init(std::size_t depth, std::size_t patches, std::size_t dim, bool dual, Rng& rng) {
    HdParams h;
    h.pos = make_stack<T>(depth, patches, dim, rng);
    if (dual) h.neg = make_stack<T>(depth, patches, dim, rng);
    return h;
}

template <typename T>
NamedParams<T> HdParams<T>::parameters() {
    NamedParams<T> out;
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i].append_parameters(out, "hd.pos." + std::to_string(i));
    for (std::size_t i = 0; i < neg.size(); ++i) neg[i].append_parameters(out, "hd.neg." + std::to_string(i));
    return out;
}

template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> divide(const HdParams<T>& params, const BasicTensor<T>& repr) {
    auto pos = apply_stack(params.pos, repr);
    if (!params.dual()) return {pos, pos};
    return {pos, apply_stack(params.neg, repr)};
}

#define CADAPT_HD_INSTANTIATE(T)                                                                                      \
    template struct ProjectionLayer<T>;                                                                             \
    template struct HdParams<T>;                                                                                    \
    template ProjectionStack<T> make_stack<T>(std::size_t, std::size_t, std::size_t, Rng&);                         \
    template BasicTensor<T> channel_aware_project(const ProjectionLayer<T>&, const BasicTensor<T>&, BasicTensor<T>*); \
    template BasicTensor<T> apply_stack(const ProjectionStack<T>&, const BasicTensor<T>&);                          \
    template std::pair<BasicTensor<T>, BasicTensor<T>> divide(const HdParams<T>&, const BasicTensor<T>&);

CADAPT_HD_INSTANTIATE(double)
CADAPT_HD_INSTANTIATE(float)

}  // namespace cadapt
