#pragma once

// Dense row-major tensors with a reverse-mode tape.
//
// Every op that sees at least one input with requires_grad records a node
// holding its parents and a backward closure. backward() walks the recorded
// nodes once in reverse topological order and then releases the closures, so
// a graph can be differentiated exactly once.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cadapt/errors.hpp"

namespace cadapt {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    bool consumed = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }
    void accumulate(std::span<const T> g);
    std::span<T> grad_slot();
};

template <typename T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor();
    BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false);

    static BasicTensor zeros(Shape shape, bool requires_grad = false);
    static BasicTensor full(Shape shape, T value, bool requires_grad = false);
    static BasicTensor scalar(T value, bool requires_grad = false);

    const Shape& shape() const { return node_->shape; }
    std::size_t dim(int axis) const;
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<const T> data() const { return node_->value; }
    /// Mutable access; only legal on leaves (parameters, inputs).
    std::span<T> mutable_data();
    T item() const;
    T at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const { return node_->requires_grad; }
    BasicTensor& set_requires_grad(bool on);
    bool is_leaf() const { return node_->is_leaf(); }

    /// Gradient accumulated by backward(); zeros if the tensor never took part.
    std::span<const T> grad() const;
    void zero_grad();

    BasicTensor detach() const;
    BasicTensor clone() const;

    const std::shared_ptr<TensorNode<T>>& node() const { return node_; }
    explicit BasicTensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<TensorNode<T>> node_;
};

using Tensor = BasicTensor<double>;
using TensorF = BasicTensor<float>;

/// Runs reverse accumulation from a scalar loss into every reachable leaf.
template <typename T>
void backward(const BasicTensor<T>& loss);

/// Disables graph recording on this thread while alive (inference mode).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_recording_enabled();

/// Records the on/off pattern of every hard gate (relu, threshold masks)
/// evaluated on this thread while enabled. The gradient checker uses it to
/// exclude perturbations that cross a kink.
class GateLog {
public:
    static void enable(bool on);
    static bool enabled();
    static void clear();
    static void record(bool bit);
    static const std::vector<std::uint8_t>& bits();
};

namespace ops {

// Elementwise binary ops broadcast numpy-style (trailing axes aligned).
template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T> BasicTensor<T> scale(const BasicTensor<T>& x, T factor);
template <typename T> BasicTensor<T> add_scalar(const BasicTensor<T>& x, T offset);
template <typename T> BasicTensor<T> expand(const BasicTensor<T>& x, const Shape& shape);

/// a[..., m, k] x b[k, n] (b shared) or a[..., m, k] x b[..., k, n] (same batch).
template <typename T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> transpose_last(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<std::size_t>& perm);
template <typename T> BasicTensor<T> reshape(const BasicTensor<T>& x, const Shape& shape);

template <typename T> BasicTensor<T> sum(const BasicTensor<T>& x, int axis, bool keepdim = false);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& x, int axis, bool keepdim = false);
template <typename T> BasicTensor<T> sum_all(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> mean_all(const BasicTensor<T>& x);

template <typename T> BasicTensor<T> softmax(const BasicTensor<T>& x, int axis);
template <typename T> BasicTensor<T> sigmoid(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> relu(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> tanh(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> softplus(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> exp(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> log(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> abs(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> pow(const BasicTensor<T>& x, int exponent);

inline constexpr double kLayerNormEps = 1e-5;
/// Normalizes over the last axis; no affine parameters.
template <typename T> BasicTensor<T> layernorm(const BasicTensor<T>& x);
/// Scales each vector along the last axis to unit L2 norm.
template <typename T> BasicTensor<T> l2_normalize(const BasicTensor<T>& x);
/// x[..., n, k] -> [..., n, n] pairwise cosine similarity of the rows.
template <typename T> BasicTensor<T> cosine_similarity(const BasicTensor<T>& x);

template <typename T> BasicTensor<T> concat(const std::vector<BasicTensor<T>>& xs, int axis);
template <typename T> BasicTensor<T> slice(const BasicTensor<T>& x, int axis, std::size_t begin, std::size_t end);

/// Constant 0/1 tensor: 1 where x > threshold (or x < -threshold when
/// below is set). Carries no gradient; multiply it in to gate values.
template <typename T> BasicTensor<T> step_mask(const BasicTensor<T>& x, T threshold, bool below);

template <typename T> BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> mse(const BasicTensor<T>& pred, const BasicTensor<T>& target);

}  // namespace ops
}  // namespace cadapt
