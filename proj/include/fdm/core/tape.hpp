#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <vector>

#include "fdm/core/tensor.hpp"

namespace fdm {

// Handle to a value recorded on a Tape.
struct Var {
  std::uint32_t id = 0;
};

// Reverse-mode recorder. Nodes are appended in evaluation order, so the node
// list is always topologically sorted and backward is a single reverse sweep.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, Var self)>;

  Tape() = default;
  // A tape built with grad_enabled = false records values only.
  explicit Tape(bool grad_enabled) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Value that never receives gradient.
  Var constant(Tensor<T> value) {
    Node n;
    n.owned = std::move(value);
    return push(std::move(n));
  }

  // Trainable leaf. Gradient is accumulated into param.grad() by backward()
  // when param.requires_grad() is set; frozen tensors behave as constants.
  Var parameter(Tensor<T>& param) {
    Node n;
    n.external = &param;
    const bool on = grad_enabled_ && param.requires_grad();
    n.leaf = on ? &param : nullptr;
    n.needs_grad = on;
    return push(std::move(n));
  }

  // Non-leaf result of an operation.
  Var record(Tensor<T> value, bool needs_grad, BackwardFn fn) {
    Node n;
    n.owned = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.backward = std::move(fn);
    return push(std::move(n));
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.external ? *n.external : n.owned;
  }
  const Shape& shape(Var v) const { return value(v).shape(); }
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }

  // Gradient buffer of a node, allocated on first use.
  std::span<T> grad(Var v) {
    Node& n = nodes_.at(v.id);
    const std::size_t len = value(v).size();
    if (n.grad.size() != len) n.grad.assign(len, T{0});
    return n.grad;
  }
  bool has_grad(Var v) const { return !nodes_.at(v.id).grad.empty(); }

  std::size_t size() const { return nodes_.size(); }

  // Propagates dLoss/dNode to every node; leaf parameters accumulate into
  // their own grad buffers. Intermediate buffers are released as visited.
  void backward(Var loss) {
    if (value(loss).size() != 1)
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(value(loss).shape()));
    if (nodes_.empty()) throw ContractError("backward: empty tape");
    if (!nodes_.at(loss.id).needs_grad) return;
    grad(loss)[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backward) {
        n.backward(*this, Var{static_cast<std::uint32_t>(i)});
      } else if (n.leaf) {
        auto g = n.leaf->grad();
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
      }
      if (!n.leaf) {
        nodes_[i].grad.clear();
        nodes_[i].grad.shrink_to_fit();
      }
      ++visited_;
    }
  }

  std::size_t visited_count() const { return visited_; }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    Tensor<T>* leaf = nullptr;
    std::vector<T> grad;
    bool needs_grad = false;
    BackwardFn backward;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  bool grad_enabled_ = true;
  std::deque<Node> nodes_;  // stable references across push_back
  std::size_t visited_ = 0;
};

}  // namespace fdm
