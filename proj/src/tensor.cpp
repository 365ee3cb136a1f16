#include "cadapt/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace cadapt {

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace {

thread_local bool t_recording = true;
thread_local bool t_gate_log_on = false;
thread_local std::vector<std::uint8_t> t_gate_bits;

std::size_t norm_axis(int axis, std::size_t rank) {
    const int r = static_cast<int>(rank);
    if (axis < -r || axis >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
    return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

struct AxisSplit {
    std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.len = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Flat source index for every output element; empty when in == out.
std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
    if (in == out) return {};
    const std::size_t n = shape_numel(out);
    std::vector<std::size_t> idx(n);
    const std::size_t in_n = shape_numel(in);
    if (in_n == 1) return std::vector<std::size_t>(n, 0);
    // Suffix broadcast: in equals the trailing axes of out.
    if (in.size() <= out.size() && std::equal(in.begin(), in.end(), out.end() - static_cast<std::ptrdiff_t>(in.size()))) {
        for (std::size_t i = 0; i < n; ++i) idx[i] = i % in_n;
        return idx;
    }
    const std::size_t r = out.size();
    std::vector<std::size_t> stride(r, 0);
    std::size_t s = 1;
    for (std::size_t i = r; i-- > 0;) {
        const std::size_t ii = i + in.size();
        if (ii >= r) {
            const std::size_t d = in[ii - r];
            stride[i] = d == 1 ? 0 : s;
            s *= d;
        }
    }
    std::vector<std::size_t> counter(r, 0);
    std::size_t src = 0;
    for (std::size_t i = 0; i < n; ++i) {
        idx[i] = src;
        for (std::size_t ax = r; ax-- > 0;) {
            ++counter[ax];
            src += stride[ax];
            if (counter[ax] < out[ax]) break;
            src -= stride[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    return idx;
}

template <typename T>
void check_finite(const std::vector<T>& v, const char* op) {
    for (const T x : v)
        if (!std::isfinite(x)) throw NumericalError(std::string("non-finite output in ") + op);
}

template <typename T>
using Node = TensorNode<T>;

template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> value,
                           std::initializer_list<const BasicTensor<T>*> inputs,
                           std::function<void(Node<T>&)> fn, const char* op) {
    check_finite(value, op);
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool needs = false;
    if (t_recording)
        for (const auto* in : inputs) needs = needs || in->requires_grad();
    if (needs) {
        node->requires_grad = true;
        for (const auto* in : inputs) {
            if (in->node()->consumed) throw GraphError(std::string(op) + ": input belongs to a consumed graph");
            node->parents.push_back(in->node());
        }
        node->backward_fn = std::move(fn);
    }
    return BasicTensor<T>(std::move(node));
}

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

template <typename T, typename Fwd, typename Bwd>
BasicTensor<T> unary(const BasicTensor<T>& x, Fwd fwd, Bwd dfdx, const char* op) {
    const auto xs = x.data();
    std::vector<T> out(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) out[i] = fwd(xs[i]);
    return make_result<T>(
        x.shape(), std::move(out), {&x},
        [dfdx](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.requires_grad) return;
            auto g = p.grad_slot();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * dfdx(p.value[i], self.value[i]);
        },
        op);
}

enum class BinKind { Add, Sub, Mul, Div };

template <typename T>
BasicTensor<T> binary(const BasicTensor<T>& a, const BasicTensor<T>& b, BinKind kind, const char* op) {
    Shape out_shape = broadcast_shape(a.shape(), b.shape());
    auto ia = std::make_shared<std::vector<std::size_t>>(broadcast_index(a.shape(), out_shape));
    auto ib = std::make_shared<std::vector<std::size_t>>(broadcast_index(b.shape(), out_shape));
    const std::size_t n = shape_numel(out_shape);
    const auto av = a.data();
    const auto bv = b.data();
    std::vector<T> out(n);
    auto ai = [&](std::size_t i) { return ia->empty() ? i : (*ia)[i]; };
    auto bi = [&](std::size_t i) { return ib->empty() ? i : (*ib)[i]; };
    switch (kind) {
        case BinKind::Add: for (std::size_t i = 0; i < n; ++i) out[i] = av[ai(i)] + bv[bi(i)]; break;
        case BinKind::Sub: for (std::size_t i = 0; i < n; ++i) out[i] = av[ai(i)] - bv[bi(i)]; break;
        case BinKind::Mul: for (std::size_t i = 0; i < n; ++i) out[i] = av[ai(i)] * bv[bi(i)]; break;
        case BinKind::Div: for (std::size_t i = 0; i < n; ++i) out[i] = av[ai(i)] / bv[bi(i)]; break;
    }
    return make_result<T>(
        std::move(out_shape), std::move(out), {&a, &b},
        [ia, ib, kind](Node<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            const std::size_t n = self.grad.size();
            auto fa = [&](std::size_t i) { return ia->empty() ? i : (*ia)[i]; };
            auto fb = [&](std::size_t i) { return ib->empty() ? i : (*ib)[i]; };
            if (pa.requires_grad) {
                auto g = pa.grad_slot();
                for (std::size_t i = 0; i < n; ++i) {
                    const T gi = self.grad[i];
                    switch (kind) {
                        case BinKind::Add:
                        case BinKind::Sub: g[fa(i)] += gi; break;
                        case BinKind::Mul: g[fa(i)] += gi * pb.value[fb(i)]; break;
                        case BinKind::Div: g[fa(i)] += gi / pb.value[fb(i)]; break;
                    }
                }
            }
            if (pb.requires_grad) {
                auto g = pb.grad_slot();
                for (std::size_t i = 0; i < n; ++i) {
                    const T gi = self.grad[i];
                    switch (kind) {
                        case BinKind::Add: g[fb(i)] += gi; break;
                        case BinKind::Sub: g[fb(i)] -= gi; break;
                        case BinKind::Mul: g[fb(i)] += gi * pa.value[fa(i)]; break;
                        case BinKind::Div: {
                            const T d = pb.value[fb(i)];
                            g[fb(i)] -= gi * pa.value[fa(i)] / (d * d);
                            break;
                        }
                    }
                }
            }
        },
        op);
}

}  // namespace

// ---------------------------------------------------------------- node/tensor

template <typename T>
void TensorNode<T>::accumulate(std::span<const T> g) {
    auto slot = grad_slot();
    for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += g[i];
}

template <typename T>
std::span<T> TensorNode<T>::grad_slot() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
}

template <typename T>
BasicTensor<T>::BasicTensor() : BasicTensor(Shape{}, std::vector<T>{T(0)}) {}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data, bool requires_grad) : node_(std::make_shared<Node<T>>()) {
    if (shape_numel(shape) != data.size())
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return BasicTensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
    return BasicTensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
std::size_t BasicTensor<T>::dim(int axis) const {
    return node_->shape[norm_axis(axis, rank())];
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_data() {
    if (!is_leaf()) throw GraphError("mutable_data on a non-leaf tensor");
    return node_->value;
}

template <typename T>
T BasicTensor<T>::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
}

template <typename T>
T BasicTensor<T>::at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw ShapeError("index rank mismatch");
    std::size_t flat = 0;
    std::size_t i = 0;
    for (const std::size_t v : index) {
        if (v >= node_->shape[i]) throw ShapeError("index out of range");
        flat = flat * node_->shape[i] + v;
        ++i;
    }
    return node_->value[flat];
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool on) {
    if (!is_leaf()) throw GraphError("requires_grad can only be set on leaves");
    node_->requires_grad = on;
    return *this;
}

template <typename T>
std::span<const T> BasicTensor<T>::grad() const {
    return node_->grad_slot();
}

template <typename T>
void BasicTensor<T>::zero_grad() {
    node_->grad.assign(node_->value.size(), T(0));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
    return BasicTensor(node_->shape, node_->value, false);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
    return BasicTensor(node_->shape, node_->value, node_->requires_grad && is_leaf());
}

template <typename T>
void backward(const BasicTensor<T>& loss) {
    if (loss.numel() != 1) throw GraphError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    const auto& root = loss.node();
    if (root->consumed) throw GraphError("backward called twice on the same graph");
    if (!root->requires_grad) throw GraphError("loss is detached from any parameter");
    if (root->is_leaf()) {
        root->grad_slot()[0] += T(1);
        return;
    }
    // Iterative post-order DFS over recorded (non-leaf) nodes.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->consumed) throw GraphError("graph reaches a consumed node");
            if (p->requires_grad && !p->is_leaf() && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (Node<T>* n : order) n->grad.assign(n->value.size(), T(0));
    root->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) (*it)->backward_fn(**it);
    for (Node<T>* n : order) {
        n->consumed = true;
        n->backward_fn = nullptr;
        n->parents.clear();
        n->grad.clear();
        n->grad.shrink_to_fit();
    }
}

NoGradGuard::NoGradGuard() : previous_(t_recording) { t_recording = false; }
NoGradGuard::~NoGradGuard() { t_recording = previous_; }
bool grad_recording_enabled() { return t_recording; }

void GateLog::enable(bool on) { t_gate_log_on = on; }
bool GateLog::enabled() { return t_gate_log_on; }
void GateLog::clear() { t_gate_bits.clear(); }
void GateLog::record(bool bit) { t_gate_bits.push_back(bit ? 1 : 0); }
const std::vector<std::uint8_t>& GateLog::bits() { return t_gate_bits; }

// ------------------------------------------------------------------------ ops

namespace ops {

template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) { return binary(a, b, BinKind::Add, "add"); }
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) { return binary(a, b, BinKind::Sub, "sub"); }
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) { return binary(a, b, BinKind::Mul, "hadamard"); }
template <typename T> BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b) { return binary(a, b, BinKind::Div, "div"); }

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
    return unary(x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; }, "scale");
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T offset) {
    return unary(x, [offset](T v) { return v + offset; }, [](T, T) { return T(1); }, "add_scalar");
}

template <typename T>
BasicTensor<T> expand(const BasicTensor<T>& x, const Shape& shape) {
    if (broadcast_shape(x.shape(), shape) != shape)
        throw ShapeError("cannot expand " + shape_str(x.shape()) + " to " + shape_str(shape));
    auto idx = std::make_shared<std::vector<std::size_t>>(broadcast_index(x.shape(), shape));
    const auto xv = x.data();
    std::vector<T> out(shape_numel(shape));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[idx->empty() ? i : (*idx)[i]];
    return make_result<T>(
        shape, std::move(out), {&x},
        [idx](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.requires_grad) return;
            auto g = p.grad_slot();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[idx->empty() ? i : (*idx)[i]] += self.grad[i];
        },
        "broadcast-expand");
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul needs rank >= 2 operands");
    const std::size_t m = a.dim(-2), k = a.dim(-1);
    const std::size_t kb = b.dim(-2), n = b.dim(-1);
    if (k != kb) throw ShapeError("matmul inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Shape out_shape = a.shape();
    out_shape.back() = n;
    if (b.rank() == 2) {
        const std::size_t rows = a.numel() / k;
        std::vector<T> out(rows * n);
        EMap<T>(out.data(), rows, n).noalias() = ECMap<T>(a.data().data(), rows, k) * ECMap<T>(b.data().data(), k, n);
        return make_result<T>(
            std::move(out_shape), std::move(out), {&a, &b},
            [rows, k, n](Node<T>& self) {
                auto& pa = *self.parents[0];
                auto& pb = *self.parents[1];
                ECMap<T> g(self.grad.data(), rows, n);
                if (pa.requires_grad)
                    EMap<T>(pa.grad_slot().data(), rows, k).noalias() += g * ECMap<T>(pb.value.data(), k, n).transpose();
                if (pb.requires_grad)
                    EMap<T>(pb.grad_slot().data(), k, n).noalias() += ECMap<T>(pa.value.data(), rows, k).transpose() * g;
            },
            "matmul");
    }
    if (a.rank() != b.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
        throw ShapeError("batched matmul batch dims differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t batch = a.numel() / (m * k);
    std::vector<T> out(batch * m * n);
    for (std::size_t s = 0; s < batch; ++s)
        EMap<T>(out.data() + s * m * n, m, n).noalias() =
            ECMap<T>(a.data().data() + s * m * k, m, k) * ECMap<T>(b.data().data() + s * k * n, k, n);
    return make_result<T>(
        std::move(out_shape), std::move(out), {&a, &b},
        [batch, m, k, n](Node<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            for (std::size_t s = 0; s < batch; ++s) {
                ECMap<T> g(self.grad.data() + s * m * n, m, n);
                if (pa.requires_grad)
                    EMap<T>(pa.grad_slot().data() + s * m * k, m, k).noalias() +=
                        g * ECMap<T>(pb.value.data() + s * k * n, k, n).transpose();
                if (pb.requires_grad)
                    EMap<T>(pb.grad_slot().data() + s * k * n, k, n).noalias() +=
                        ECMap<T>(pa.value.data() + s * m * k, m, k).transpose() * g;
            }
        },
        "matmul");
}

template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<std::size_t>& perm) {
    const std::size_t r = x.rank();
    if (perm.size() != r) throw ShapeError("permute rank mismatch");
    std::vector<bool> used(r, false);
    for (const std::size_t p : perm) {
        if (p >= r || used[p]) throw ShapeError("invalid permutation");
        used[p] = true;
    }
    const Shape& in = x.shape();
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = in[perm[i]];
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
    const std::size_t n = x.numel();
    auto src = std::make_shared<std::vector<std::size_t>>(n);
    std::vector<std::size_t> counter(r, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < n; ++i) {
        (*src)[i] = off;
        for (std::size_t ax = r; ax-- > 0;) {
            ++counter[ax];
            off += in_stride[perm[ax]];
            if (counter[ax] < out_shape[ax]) break;
            off -= in_stride[perm[ax]] * counter[ax];
            counter[ax] = 0;
        }
    }
    const auto xv = x.data();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = xv[(*src)[i]];
    return make_result<T>(
        std::move(out_shape), std::move(out), {&x},
        [src](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.requires_grad) return;
            auto g = p.grad_slot();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[(*src)[i]] += self.grad[i];
        },
        "permute");
}

template <typename T>
BasicTensor<T> transpose_last(const BasicTensor<T>& x) {
    if (x.rank() < 2) throw ShapeError("transpose needs rank >= 2");
    std::vector<std::size_t> perm(x.rank());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
    return permute(x, perm);
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, const Shape& shape) {
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
    std::vector<T> out(x.data().begin(), x.data().end());
    return make_result<T>(
        shape, std::move(out), {&x},
        [](Node<T>& self) {
            auto& p = *self.parents[0];
            if (p.requires_grad) p.accumulate(self.grad);
        },
        "reshape");
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x, int axis, bool keepdim) {
    const std::size_t ax = norm_axis(axis, x.rank());
    const AxisSplit s = split_at(x.shape(), ax);
    Shape out_shape = x.shape();
    if (keepdim) out_shape[ax] = 1;
    else out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
    const auto xv = x.data();
    std::vector<T> out(s.outer * s.inner, T(0));
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t l = 0; l < s.len; ++l)
            for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += xv[(o * s.len + l) * s.inner + i];
    return make_result<T>(
        std::move(out_shape), std::move(out), {&x},
        [s](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.requires_grad) return;
            auto g = p.grad_slot();
            for (std::size_t o = 0; o < s.outer; ++o)
                for (std::size_t l = 0; l < s.len; ++l)
                    for (std::size_t i = 0; i < s.inner; ++i) g[(o * s.len + l) * s.inner + i] += self.grad[o * s.inner + i];
        },
        "sum");
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x, int axis, bool keepdim) {
    const std::size_t len = x.shape()[norm_axis(axis, x.rank())];
    if (len == 0) throw ShapeError("mean over empty axis");
    return scale(sum(x, axis, keepdim), T(1) / static_cast<T>(len));
}

template <typename T>
BasicTensor<T> sum_all(const BasicTensor<T>& x) {
    T acc = T(0);
    for (const T v : x.data()) acc += v;
    return make_result<T>(
        Shape{}, std::vector<T>{acc}, {&x},
        [](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.requires_grad) return;
            for (T& g : p.grad_slot()) g += self.grad[0];
        },
        "sum_all");
}

template <typename T>
BasicTensor<T> mean_all(const BasicTensor<T>& x) {
    if (x.numel() == 0) throw ShapeError("mean of empty tensor");
    return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, int axis) {
    const std::size_t ax = norm_axis(axis, x.rank());
    const AxisSplit s = split_at(x.shape(), ax);
    const auto xv = x.data();
    std::vector<T> out(x.numel());
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.len * s.inner + i;
            T mx = xv[base];
            for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, xv[base + l * s.inner]);
            T z = T(0);
            for (std::size_t l = 0; l < s.len; ++l) z += out[base + l * s.inner] = std::exp(xv[base + l * s.inner] - mx);
            for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] /= z;
        }
    return make_result<T>(
        x.shape(), std::move(out), {&x},
        [s](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.requires_grad) return;
            auto g = p.grad_slot();
            const auto& y = self.value;
            for (std::size_t o = 0; o < s.outer; ++o)
                for (std::size_t i = 0; i < s.inner; ++i) {
                    const std::size_t base = o * s.len * s.inner + i;
                    T dot = T(0);
                    for (std::size_t l = 0; l < s.len; ++l) dot += self.grad[base + l * s.inner] * y[base + l * s.inner];
                    for (std::size_t l = 0; l < s.len; ++l) {
                        const std::size_t j = base + l * s.inner;
                        g[j] += y[j] * (self.grad[j] - dot);
                    }
                }
        },
        "softmax");
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
    return unary(
        x,
        [](T v) { return v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v)); },
        [](T, T y) { return y * (T(1) - y); }, "sigmoid");
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
    if (GateLog::enabled())
        for (const T v : x.data()) GateLog::record(v > 0);
    return unary(x, [](T v) { return v > 0 ? v : T(0); }, [](T v, T) { return v > 0 ? T(1) : T(0); }, "relu");
}

template <typename T>
BasicTensor<T> tanh(const BasicTensor<T>& x) {
    return unary(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; }, "tanh");
}

template <typename T>
BasicTensor<T> softplus(const BasicTensor<T>& x) {
    return unary(
        x, [](T v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
        [](T v, T) { return v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v)); }, "softplus");
}

template <typename T>
BasicTensor<T> exp(const BasicTensor<T>& x) {
    return unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; }, "exp");
}

template <typename T>
BasicTensor<T> log(const BasicTensor<T>& x) {
    return unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; }, "log");
}

template <typename T>
BasicTensor<T> abs(const BasicTensor<T>& x) {
    return unary(x, [](T v) { return std::abs(v); }, [](T v, T) { return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)); }, "abs");
}

template <typename T>
BasicTensor<T> pow(const BasicTensor<T>& x, int exponent) {
    if (exponent < 0) throw ShapeError("pow supports nonnegative integer exponents");
    auto ipow = [](T v, int e) {
        T r = T(1);
        for (int i = 0; i < e; ++i) r *= v;
        return r;
    };
    return unary(
        x, [=](T v) { return ipow(v, exponent); },
        [=](T v, T) { return exponent == 0 ? T(0) : static_cast<T>(exponent) * ipow(v, exponent - 1); },
        "power-elementwise");
}

template <typename T>
BasicTensor<T> layernorm(const BasicTensor<T>& x) {
    const std::size_t d = x.dim(-1);
    const std::size_t rows = x.numel() / d;
    const auto xv = x.data();
    std::vector<T> out(x.numel());
    auto inv_std = std::make_shared<std::vector<T>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * d;
        T mu = T(0);
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<T>(d);
        T var = T(0);
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<T>(d);
        const T is = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (row[j] - mu) * is;
    }
    return make_result<T>(
        x.shape(), std::move(out), {&x},
        [inv_std, d, rows](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.requires_grad) return;
            auto g = p.grad_slot();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* gy = self.grad.data() + r * d;
                const T* y = self.value.data() + r * d;
                T mg = T(0), mgy = T(0);
                for (std::size_t j = 0; j < d; ++j) {
                    mg += gy[j];
                    mgy += gy[j] * y[j];
                }
                mg /= static_cast<T>(d);
                mgy /= static_cast<T>(d);
                for (std::size_t j = 0; j < d; ++j) g[r * d + j] += (*inv_std)[r] * (gy[j] - mg - y[j] * mgy);
            }
        },
        "layernorm");
}

template <typename T>
BasicTensor<T> l2_normalize(const BasicTensor<T>& x) {
    constexpr T kFloor = T(1e-12);
    const std::size_t d = x.dim(-1);
    const std::size_t rows = x.numel() / d;
    const auto xv = x.data();
    std::vector<T> out(x.numel());
    auto norms = std::make_shared<std::vector<T>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        T ss = T(0);
        for (std::size_t j = 0; j < d; ++j) ss += xv[r * d + j] * xv[r * d + j];
        const T nrm = std::max(std::sqrt(ss), kFloor);
        (*norms)[r] = nrm;
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] / nrm;
    }
    return make_result<T>(
        x.shape(), std::move(out), {&x},
        [norms, d, rows](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.requires_grad) return;
            auto g = p.grad_slot();
            for (std::size_t r = 0; r < rows; ++r) {
                const T nrm = (*norms)[r];
                const T* gy = self.grad.data() + r * d;
                const T* y = self.value.data() + r * d;
                T dot = T(0);
                if (nrm > kFloor)
                    for (std::size_t j = 0; j < d; ++j) dot += gy[j] * y[j];
                for (std::size_t j = 0; j < d; ++j) g[r * d + j] += (gy[j] - y[j] * dot) / nrm;
            }
        },
        "l2_normalize");
}

template <typename T>
BasicTensor<T> cosine_similarity(const BasicTensor<T>& x) {
    const auto y = l2_normalize(x);
    return matmul(y, transpose_last(y));
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& xs, int axis) {
    if (xs.empty()) throw ShapeError("concat of nothing");
    const std::size_t ax = norm_axis(axis, xs.front().rank());
    Shape out_shape = xs.front().shape();
    out_shape[ax] = 0;
    for (const auto& x : xs) {
        Shape a = x.shape(), b = xs.front().shape();
        if (a.size() != b.size()) throw ShapeError("concat rank mismatch");
        a[ax] = b[ax] = 0;
        if (a != b) throw ShapeError("concat shape mismatch " + shape_str(x.shape()));
        out_shape[ax] += x.shape()[ax];
    }
    const AxisSplit so = split_at(out_shape, ax);
    std::vector<T> out(shape_numel(out_shape));
    auto offsets = std::make_shared<std::vector<std::size_t>>();
    std::size_t off = 0;
    for (const auto& x : xs) {
        offsets->push_back(off);
        const std::size_t len = x.shape()[ax];
        const auto xv = x.data();
        for (std::size_t o = 0; o < so.outer; ++o)
            std::copy_n(xv.data() + o * len * so.inner, len * so.inner, out.data() + (o * so.len + off) * so.inner);
        off += len;
    }
    // Parents beyond the initializer-list arity are attached by hand.
    auto result = make_result<T>(std::move(out_shape), std::move(out), {&xs.front()}, nullptr, "concat");
    bool needs = false;
    for (const auto& x : xs) needs = needs || x.requires_grad();
    if (grad_recording_enabled() && needs) {
        auto& node = *result.node();
        node.requires_grad = true;
        node.parents.clear();
        for (const auto& x : xs) node.parents.push_back(x.node());
        node.backward_fn = [offsets, so](Node<T>& self) {
            for (std::size_t k = 0; k < self.parents.size(); ++k) {
                auto& p = *self.parents[k];
                if (!p.requires_grad) continue;
                const std::size_t len = p.value.size() / (so.outer * so.inner);
                auto g = p.grad_slot();
                for (std::size_t o = 0; o < so.outer; ++o)
                    for (std::size_t e = 0; e < len * so.inner; ++e)
                        g[o * len * so.inner + e] += self.grad[(o * so.len + (*offsets)[k]) * so.inner + e];
            }
        };
    }
    return result;
}

template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, int axis, std::size_t begin, std::size_t end) {
    const std::size_t ax = norm_axis(axis, x.rank());
    if (begin > end || end > x.shape()[ax]) throw ShapeError("slice out of range");
    const AxisSplit s = split_at(x.shape(), ax);
    Shape out_shape = x.shape();
    out_shape[ax] = end - begin;
    const std::size_t len = end - begin;
    const auto xv = x.data();
    std::vector<T> out(s.outer * len * s.inner);
    for (std::size_t o = 0; o < s.outer; ++o)
        std::copy_n(xv.data() + (o * s.len + begin) * s.inner, len * s.inner, out.data() + o * len * s.inner);
    return make_result<T>(
        std::move(out_shape), std::move(out), {&x},
        [s, begin, len](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.requires_grad) return;
            auto g = p.grad_slot();
            for (std::size_t o = 0; o < s.outer; ++o)
                for (std::size_t e = 0; e < len * s.inner; ++e)
                    g[(o * s.len + begin) * s.inner + e] += self.grad[o * len * s.inner + e];
        },
        "slice");
}

template <typename T>
BasicTensor<T> step_mask(const BasicTensor<T>& x, T threshold, bool below) {
    std::vector<T> out(x.numel());
    const auto xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const bool on = below ? xv[i] < -threshold : xv[i] > threshold;
        out[i] = on ? T(1) : T(0);
        if (GateLog::enabled()) GateLog::record(on);
    }
    return BasicTensor<T>(x.shape(), std::move(out), false);
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
    return add(matmul(x, w), b);
}

template <typename T>
BasicTensor<T> mse(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
    if (pred.shape() != target.shape()) throw ShapeError("mse shape mismatch");
    const auto d = sub(pred, target);
    return mean_all(mul(d, d));
}

}  // namespace ops

#define CADAPT_INSTANTIATE(T)                                                                                  \
    template struct TensorNode<T>;                                                                           \
    template class BasicTensor<T>;                                                                           \
    template void backward<T>(const BasicTensor<T>&);                                                        \
    namespace ops {                                                                                          \
    template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                               \
    template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                               \
    template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                               \
    template BasicTensor<T> div(const BasicTensor<T>&, const BasicTensor<T>&);                               \
    template BasicTensor<T> scale(const BasicTensor<T>&, T);                                                 \
    template BasicTensor<T> add_scalar(const BasicTensor<T>&, T);                                            \
    template BasicTensor<T> expand(const BasicTensor<T>&, const Shape&);                                     \
    template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                            \
    template BasicTensor<T> transpose_last(const BasicTensor<T>&);                                           \
    template BasicTensor<T> permute(const BasicTensor<T>&, const std::vector<std::size_t>&);                 \
    template BasicTensor<T> reshape(const BasicTensor<T>&, const Shape&);                                    \
    template BasicTensor<T> sum(const BasicTensor<T>&, int, bool);                                           \
    template BasicTensor<T> mean(const BasicTensor<T>&, int, bool);                                          \
    template BasicTensor<T> sum_all(const BasicTensor<T>&);                                                  \
    template BasicTensor<T> mean_all(const BasicTensor<T>&);                                                 \
    template BasicTensor<T> softmax(const BasicTensor<T>&, int);                                             \
    template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                                  \
    template BasicTensor<T> relu(const BasicTensor<T>&);                                                     \
    template BasicTensor<T> tanh(const BasicTensor<T>&);                                                     \
    template BasicTensor<T> softplus(const BasicTensor<T>&);                                                 \
    template BasicTensor<T> exp(const BasicTensor<T>&);                                                      \
    template BasicTensor<T> log(const BasicTensor<T>&);                                                      \
    template BasicTensor<T> abs(const BasicTensor<T>&);                                                      \
    template BasicTensor<T> pow(const BasicTensor<T>&, int);                                                 \
    template BasicTensor<T> layernorm(const BasicTensor<T>&);                                                \
    template BasicTensor<T> l2_normalize(const BasicTensor<T>&);                                             \
    template BasicTensor<T> cosine_similarity(const BasicTensor<T>&);                                        \
    template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, int);                                 \
    template BasicTensor<T> slice(const BasicTensor<T>&, int, std::size_t, std::size_t);                     \
    template BasicTensor<T> step_mask(const BasicTensor<T>&, T, bool);                                       \
    template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);     \
    template BasicTensor<T> mse(const BasicTensor<T>&, const BasicTensor<T>&);                               \
    }

CADAPT_INSTANTIATE(double)
CADAPT_INSTANTIATE(float)

#undef CADAPT_INSTANTIATE

}  // namespace cadapt
