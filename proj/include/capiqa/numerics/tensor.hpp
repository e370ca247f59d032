#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "capiqa/core/error.hpp"

namespace capiqa {

using Shape = std::vector<std::size_t>;

// Eigen picks its vectorized traversal from buffer addresses, so a product
// over unaligned storage can round differently depending on where the heap
// placed it. Tensor storage is always aligned to the widest packet.
template <class T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

template <class T>
struct Node {
    Shape shape;
    Buffer<T> data;
    Buffer<T> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this node's grad and accumulates into the inputs' grads.
    std::function<void(Node&)> backward;

    bool is_leaf() const { return !backward; }

    Buffer<T>& grad_buffer() {
        if (grad.size() != data.size()) grad.assign(data.size(), T{});
        return grad;
    }
};

}  // namespace detail

/// True while operations record a backward graph on this thread.
inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Dense row-major array with an optional gradient buffer. Copies share
/// storage, like a reference-counted handle; use clone() for a deep copy.
template <class T>
class Tensor {
public:
    using value_type = T;
    using NodeType = detail::Node<T>;

    Tensor() = default;

    Tensor(Shape shape, const std::vector<T>& values, bool requires_grad = false)
        : Tensor(adopt(std::move(shape), Buffer<T>(values.begin(), values.end()), requires_grad)) {}

    Tensor(Shape shape, std::initializer_list<T> values, bool requires_grad = false)
        : Tensor(adopt(std::move(shape), Buffer<T>(values), requires_grad)) {}

    /// Takes ownership of already aligned storage.
    static Tensor adopt(Shape shape, Buffer<T> values, bool requires_grad = false) {
        for (auto d : shape) {
            if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
        }
        if (capiqa::numel(shape) != values.size()) {
            throw DimensionError("tensor of shape " + to_string(shape) + " needs " +
                                 std::to_string(capiqa::numel(shape)) + " values, got " +
                                 std::to_string(values.size()));
        }
        Tensor t;
        t.node_ = std::make_shared<NodeType>();
        t.node_->shape = std::move(shape);
        t.node_->data = std::move(values);
        t.set_requires_grad(requires_grad);
        return t;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = capiqa::numel(shape);
        return adopt(std::move(shape), Buffer<T>(n, T{}), requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        const auto n = capiqa::numel(shape);
        return adopt(std::move(shape), Buffer<T>(n, value), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) { return Tensor({1}, {value}, requires_grad); }

    static Tensor from_node(std::shared_ptr<NodeType> node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

    bool defined() const { return static_cast<bool>(node_); }
    explicit operator bool() const { return defined(); }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const T> data() const { return node_->data; }
    std::span<T> mutable_data() { return node_->data; }
    std::vector<T> values() const { return {node_->data.begin(), node_->data.end()}; }

    T item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
        return node_->data[0];
    }

    T operator[](std::size_t i) const { return node_->data[i]; }

    /// Multi-index read, row-major.
    T at(std::initializer_list<std::size_t> index) const {
        if (index.size() != rank()) throw DimensionError("index rank mismatch for shape " + to_string(shape()));
        std::size_t flat = 0;
        std::size_t axis = 0;
        for (auto i : index) {
            if (i >= node_->shape[axis]) throw DimensionError("index out of range for shape " + to_string(shape()));
            flat = flat * node_->shape[axis] + i;
            ++axis;
        }
        return node_->data[flat];
    }

    bool requires_grad() const { return node_->requires_grad; }

    void set_requires_grad(bool value) {
        node_->requires_grad = value;
        if (value && node_->is_leaf()) node_->grad_buffer();
    }

    bool has_grad() const { return node_->grad.size() == node_->data.size(); }

    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->grad_buffer(); }

    void zero_grad() {
        if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), T{});
    }

    bool is_leaf() const { return node_->is_leaf(); }
    const char* op_name() const { return node_->op; }

    /// Deep copy of values only; the result is a fresh leaf.
    Tensor clone(bool requires_grad = false) const { return adopt(shape(), node_->data, requires_grad); }

    /// Copy of the values without history.
    Tensor detach() const { return adopt(shape(), node_->data, false); }

    bool same_storage(const Tensor& other) const { return node_ == other.node_; }

    const std::shared_ptr<NodeType>& node() const { return node_; }

private:
    std::shared_ptr<NodeType> node_;
};

/// Named trainable tensor.
template <class T>
struct Parameter {
    std::string name;
    Tensor<T> tensor;
};

namespace detail {

template <class T>
void check_finite(const Buffer<T>& values, const char* op) {
    for (const T v : values) {
        if (!std::isfinite(v)) throw NumericalError(std::string("non-finite value produced by ") + op);
    }
}

/// Wraps freshly computed values as an op result. The backward closure is only
/// recorded when grad mode is on and some input requires a gradient.
template <class T>
Tensor<T> make_result(const char* op, Shape shape, Buffer<T> values,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward) {
    check_finite(values, op);
    auto out = Tensor<T>::adopt(std::move(shape), std::move(values));
    auto& node = *out.node();
    node.op = op;
    bool needs = false;
    if (grad_enabled()) {
        for (const auto* in : inputs) needs = needs || (in && in->defined() && in->requires_grad());
    }
    if (needs) {
        node.requires_grad = true;
        for (const auto* in : inputs) {
            if (in && in->defined()) node.inputs.push_back(in->node());
        }
        node.backward = std::move(backward);
    }
    return out;
}

template <class T>
Tensor<T> make_result(const char* op, Shape shape, Buffer<T> values,
                      const std::vector<Tensor<T>>& inputs, std::function<void(Node<T>&)> backward) {
    check_finite(values, op);
    auto out = Tensor<T>::adopt(std::move(shape), std::move(values));
    auto& node = *out.node();
    node.op = op;
    bool needs = false;
    if (grad_enabled()) {
        for (const auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
    }
    if (needs) {
        node.requires_grad = true;
        for (const auto& in : inputs) node.inputs.push_back(in.node());
        node.backward = std::move(backward);
    }
    return out;
}

/// Gradient buffer of an input node if it participates in differentiation.
template <class T>
Buffer<T>* grad_target(const std::shared_ptr<Node<T>>& node) {
    return node && node->requires_grad ? &node->grad_buffer() : nullptr;
}

}  // namespace detail

/// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls;
/// intermediate gradients are released after use so the same graph can be
/// swept again.
template <class T>
void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward() requires a scalar loss, got shape " +
                            (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
    }
    using NodeT = detail::Node<T>;
    const auto& root = loss.node();
    if (!root->requires_grad) return;
    if (root->is_leaf()) {
        root->grad_buffer()[0] += T{1};
        return;
    }

    std::vector<NodeT*> order;
    std::unordered_set<NodeT*> visited;
    std::vector<std::pair<NodeT*, std::size_t>> stack{{root.get(), 0}};
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            NodeT* child = node->inputs[next++].get();
            if (child->requires_grad && !child->is_leaf() && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->grad.assign(1, T{1});
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT* node = *it;
        if (node->grad.size() != node->data.size()) continue;
        node->backward(*node);
        node->grad.clear();
        node->grad.shrink_to_fit();
    }
}

}  // namespace capiqa
