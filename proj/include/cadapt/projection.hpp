#pragma once

// Channel-aware SE-style projection layers and the dual (positive/negative)
// projection stacks that divide backbone representations into two spaces.

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "cadapt/init.hpp"
#include "cadapt/tensor.hpp"

namespace cadapt {

template <typename T>
struct ProjectionLayer {
    BasicTensor<T> ln_gamma, ln_beta;  // [d]
    BasicTensor<T> w1a, b1a, w1b, b1b;  // MLP1: d -> d -> d
    BasicTensor<T> w2a, b2a, w2b, b2b;  // MLP2: P*d -> d -> 1

    /// Final affine layers start at zero so the layer is the identity map.
    static ProjectionLayer init(std::size_t patches, std::size_t dim, Rng& rng);
    void append_parameters(NamedParams<T>& out, const std::string& prefix);
};

template <typename T>
using ProjectionStack = std::vector<ProjectionLayer<T>>;

template <typename T>
ProjectionStack<T> make_stack(std::size_t depth, std::size_t patches, std::size_t dim, Rng& rng);

/// x [B, P, N, d] -> x + MLP1(LN(x)) * expand(softmax_N(MLP2(LN(x)))).
/// When `channel_weights` is given it receives W as [B, N].
template <typename T>
BasicTensor<T> channel_aware_project(const ProjectionLayer<T>& layer, const BasicTensor<T>& x,
                                     BasicTensor<T>* channel_weights = nullptr);

template <typename T>
BasicTensor<T> apply_stack(const ProjectionStack<T>& stack, const BasicTensor<T>& x);

template <typename T>
struct HdParams {
    ProjectionStack<T> pos;
    ProjectionStack<T> neg;  // empty in single-branch mode: both spaces share `pos`

    static HdParams init(std::size_t depth, std::size_t patches, std::size_t dim, bool dual, Rng& rng);
    bool dual() const { return !neg.empty(); }
    NamedParams<T> parameters();
};

template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> divide(const HdParams<T>& params, const BasicTensor<T>& repr);

}  // namespace cadapt
