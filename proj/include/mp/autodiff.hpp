#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mp/error.hpp"
#include "mp/tensor.hpp"

namespace mp {

/// One record of the computation graph: the forward result, its adjoint and
/// the closure that pushes the adjoint into the parents.
struct Node {
  Tensor value;
  Tensor grad;
  bool grad_allocated = false;
  bool requires_grad = false;
  std::uint64_t sequence = 0;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor& ensure_grad() {
    if (!grad_allocated) {
      grad = Tensor::zeros(value.shape());
      grad_allocated = true;
    }
    return grad;
  }

  bool is_leaf() const { return !backward; }
};

namespace detail {

inline std::uint64_t next_sequence() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Shared handle to a graph node. Copies alias the same node.
class Value {
 public:
  Value() = default;

  static Value parameter(Tensor t) { return leaf(std::move(t), true); }
  static Value constant(Tensor t) { return leaf(std::move(t), false); }

  /// Records an operation result. Inputs that do not require gradients are
  /// not retained, so constant subgraphs are freed eagerly.
  static Value from_op(std::string_view op, Tensor value, std::vector<Value> inputs,
                       std::function<void(Node&)> backward) {
    if (!value.all_finite()) {
      throw NumericError(std::string(op) + " produced a non-finite value");
    }
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->op = op;
    node->sequence = detail::next_sequence();
    if (detail::grad_mode_flag()) {
      for (const Value& in : inputs) node->requires_grad = node->requires_grad || in.requires_grad();
    }
    if (node->requires_grad) {
      node->parents.reserve(inputs.size());
      for (Value& in : inputs) node->parents.push_back(std::move(in.node_));
      node->backward = std::move(backward);
    }
    return Value(std::move(node));
  }

  explicit operator bool() const { return static_cast<bool>(node_); }

  const Tensor& data() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  double item() const {
    if (size() != 1) throw UsageError("item() on a tensor of shape " + shape_string(shape()));
    return node_->value[0];
  }

  /// In-place access for optimizers. Only leaves may be mutated.
  Tensor& mutable_data() {
    if (!node_->is_leaf()) throw UsageError("only leaf values may be updated in place");
    return node_->value;
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_->grad_allocated; }

  /// The accumulated adjoint, or zeros when nothing has reached this node.
  Tensor grad() const {
    return node_->grad_allocated ? node_->grad : Tensor::zeros(node_->value.shape());
  }

  void zero_grad() {
    node_->grad = Tensor();
    node_->grad_allocated = false;
  }

  std::string_view op() const { return node_->op; }
  std::uint64_t sequence() const { return node_->sequence; }
  Node* node() const { return node_.get(); }

 private:
  explicit Value(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Value leaf(Tensor t, bool requires_grad) {
    if (!t.all_finite()) throw NumericError("leaf value contains a non-finite element");
    auto node = std::make_shared<Node>();
    node->value = std::move(t);
    node->requires_grad = requires_grad;
    node->sequence = detail::next_sequence();
    return Value(std::move(node));
  }

  std::shared_ptr<Node> node_;
};

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

/// Gradient-carrying records reachable from a root, in forward execution order.
class Tape {
 public:
  static Tape record(const Value& root) {
    Tape tape;
    if (!root.requires_grad()) return tape;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root.node()};
    seen.insert(root.node());
    while (!stack.empty()) {
      Node* n = stack.back();
      stack.pop_back();
      tape.records_.push_back(n);
      for (const auto& p : n->parents) {
        if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
      }
    }
    std::sort(tape.records_.begin(), tape.records_.end(),
              [](const Node* a, const Node* b) { return a->sequence < b->sequence; });
    return tape;
  }

  std::span<Node* const> records() const { return records_; }
  std::size_t size() const { return records_.size(); }

  /// Reverse sweep. Interior adjoints are rebuilt from scratch; leaf adjoints
  /// accumulate across sweeps.
  void run(Node& root) const {
    for (Node* n : records_) {
      if (n->is_leaf()) {
        n->ensure_grad();
      } else {
        n->grad = Tensor::zeros(n->value.shape());
        n->grad_allocated = true;
      }
    }
    root.grad[0] += 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      Node* n = *it;
      if (!n->is_leaf()) n->backward(*n);
    }
  }

 private:
  std::vector<Node*> records_;
};

/// Accumulates d(loss)/d(x) into every gradient-requiring ancestor of a scalar loss.
inline void backward(const Value& loss) {
  if (loss.size() != 1) {
    throw UsageError("backward requires a scalar loss, got shape " + shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  Tape::record(loss).run(*loss.node());
}

/// Helper for backward closures: the parent's adjoint buffer, or nullptr when
/// that parent does not take gradients.
inline Tensor* grad_of(Node& self, std::size_t parent) {
  Node& p = *self.parents[parent];
  return p.requires_grad ? &p.ensure_grad() : nullptr;
}

inline const Tensor& value_of(Node& self, std::size_t parent) {
  return self.parents[parent]->value;
}

}  // namespace mp
