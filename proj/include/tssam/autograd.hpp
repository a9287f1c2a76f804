#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "tssam/tensor.hpp"

namespace tssam {

template <class T>
class Tape;

/// Handle to a value recorded on a Tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return tape->value(*this).shape(); }
  std::size_t dim(std::size_t i) const { return shape().at(i); }
};

/// Reverse-mode recorder. Nodes are appended in evaluation order, so reverse
/// insertion order is a valid topological order for backpropagation.
///
/// Ops with non-differentiable points (ReLU at 0, max-pool ties) fold their
/// discrete branch decisions into `decision_signature()` when kink tracking is
/// on; the gradient checker uses it to detect finite-difference steps that
/// cross a kink.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad && grad_enabled_, {}});
    return Var<T>{this, nodes_.size() - 1};
  }
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Append an op result. `fn` is kept only if some parent needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn) {
    bool rg = false;
    if (grad_enabled_)
      for (const auto& p : parents) rg = rg || nodes_[p.id].requires_grad;
    nodes_.push_back(Node{std::move(value), {}, rg, rg ? std::move(fn) : BackwardFn{}});
    return Var<T>{this, nodes_.size() - 1};
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_[v.id].value; }
  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of a node; zero-initialised on first access.
  Tensor<T>& grad(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty() && n.value.numel() > 0) n.grad = Tensor<T>(n.value.shape());
    else if (n.grad.shape() != n.value.shape()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }
  Tensor<T>& grad(Var<T> v) { return grad(v.id); }

  /// Seed d(root)/d(root) = 1 for a single-element root and propagate.
  void backward(Var<T> root) {
    if (nodes_[root.id].value.numel() != 1)
      throw ShapeError("backward: root must hold exactly one element, has shape " + to_string(root.shape()));
    grad(root).fill(T{1});
    backward_from(root.id);
  }

  /// Propagate from a root whose gradient buffer has already been seeded.
  void backward_from(std::size_t root_id) {
    for (std::size_t i = root_id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
  }

  void set_track_kinks(bool on) noexcept { track_kinks_ = on; }
  bool track_kinks() const noexcept { return track_kinks_; }
  void note_decision(std::uint64_t bits) noexcept {
    signature_ ^= bits + 0x9e3779b97f4a7c15ULL + (signature_ << 6) + (signature_ >> 2);
  }
  std::uint64_t decision_signature() const noexcept { return signature_; }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
  bool track_kinks_ = false;
  std::uint64_t signature_ = 0;
};

}  // namespace tssam
