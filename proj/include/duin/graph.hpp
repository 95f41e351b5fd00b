#pragma once

#include "duin/tensor.hpp"

#include <cstdlib>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace duin {

enum class Mode { train, infer };

/// When enabled (DUIN_NAN_CHECK=1 or set_nan_check), every op asserts its
/// output is finite and throws naming the op otherwise.
inline bool& nan_check_flag() {
    static bool flag = [] {
        const char* env = std::getenv("DUIN_NAN_CHECK");
        return env != nullptr && env[0] == '1';
    }();
    return flag;
}

inline void set_nan_check(bool on) { nan_check_flag() = on; }

template <typename T>
struct Node;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated on first accumulation; kept allocated for leaves
    bool requires_grad = false;
    std::vector<NodePtr<T>> parents;
    std::function<void(Node<T>&)> backward_fn;

    Tensor<T>& grad_buffer() {
        if (grad.empty()) grad = Tensor<T>::zeros(value.dims());
        return grad;
    }

    void accumulate(const Tensor<T>& g) {
        Tensor<T>& buf = grad_buffer();
        buf.vec() += g.vec();
    }
};

/// Handle to a node in the dynamic reverse-mode graph. Ops on Vars build the
/// graph; ops whose inputs all have requires_grad == false skip it entirely,
/// which is also what makes detach() final.
template <typename T>
class Var {
public:
    Var() = default;

    explicit Var(Tensor<T> value, bool requires_grad = false)
        : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
        if (requires_grad) node_->grad = Tensor<T>::zeros(node_->value.dims());
    }

    bool defined() const { return node_ != nullptr; }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& value() { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    Tensor<T>& grad() { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    NodePtr<T> node() const { return node_; }

    void zero_grad() {
        if (node_ && !node_->grad.empty()) node_->grad.set_zero();
    }

private:
    template <typename U>
    friend Var<U> make_op(const char* name, Tensor<U> value, std::vector<Var<U>> parents,
                          std::function<void(Node<U>&)> backward);

    NodePtr<T> node_;
};

template <typename T>
Var<T> make_op(const char* name, Tensor<T> value, std::vector<Var<T>> parents,
               std::function<void(Node<T>&)> backward) {
    if (nan_check_flag() && !value.all_finite()) {
        throw std::runtime_error(std::string("non-finite values out of op ") + name);
    }
    bool needs = false;
    for (const Var<T>& p : parents) {
        if (p.requires_grad()) {
            needs = true;
            break;
        }
    }
    Var<T> out;
    out.node_ = std::make_shared<Node<T>>();
    out.node_->value = std::move(value);
    out.node_->requires_grad = needs;
    if (needs) {
        out.node_->parents.reserve(parents.size());
        for (const Var<T>& p : parents) out.node_->parents.push_back(p.node());
        out.node_->backward_fn = std::move(backward);
    }
    return out;
}

/// Reverse-mode sweep from a scalar loss. Every trainable leaf reachable from
/// the loss accumulates dLoss/dLeaf into its grad tensor.
template <typename T>
void backward(const Var<T>& loss) {
    if (!loss.defined()) throw std::invalid_argument("backward: undefined loss");
    if (loss.value().size() != 1) {
        throw std::invalid_argument("backward: loss must be scalar, got " +
                                    shape_str(loss.value().dims()));
    }
    if (!loss.requires_grad()) {
        throw std::invalid_argument("backward: loss does not depend on any trainable parameter");
    }

    // Iterative DFS; reverse post-order is a topological order from the loss.
    std::vector<Node<T>*> order;
    std::unordered_map<Node<T>*, int> state;  // 0 new, 1 in progress, 2 done
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    state[loss.node().get()] = 1;
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* parent = node->parents[next++].get();
            if (!parent->requires_grad) continue;
            int& s = state[parent];
            if (s == 1) throw std::runtime_error("backward: cycle in graph");
            if (s == 0) {
                s = 1;
                stack.emplace_back(parent, 0);
            }
        } else {
            state[node] = 2;
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (node->backward_fn) node->backward_fn(*node);
    }
}

}  // namespace duin
