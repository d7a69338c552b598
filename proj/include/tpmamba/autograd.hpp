#pragma once

#include "tpmamba/tensor.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace tpmamba {

template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;  // empty until something flows into it
  bool requires_grad = false;

  bool has_grad() const { return grad.size() != 0; }

  Tensor<Scalar>& grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor<Scalar>(value.shape());
    return grad;
  }
};

/// Handle to a value in the computation graph. Copies share the node.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<Scalar> value, bool requires_grad = false)
      : node_(std::make_shared<Node<Scalar>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<Scalar>& value() const { return node_->value; }
  Tensor<Scalar>& value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  Index dim(int axis) const { return node_->value.dim(axis); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_ && node_->has_grad(); }
  const Tensor<Scalar>& grad() const { return node_->grad; }
  void clear_grad() { node_->grad = Tensor<Scalar>(); }

  const std::shared_ptr<Node<Scalar>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<Scalar>> node_;
};

/// Ordered record of primitive applications. Replaying the recorded backward
/// rules in reverse order propagates gradients from the loss to every leaf
/// that requires them.
template <typename Scalar>
class Tape {
 public:
  void record(std::function<void()> backward) { entries_.push_back(std::move(backward)); }

  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// Seeds d(loss)/d(loss) = 1; `loss` must hold one element.
  void backward(const Var<Scalar>& loss) {
    if (loss.value().size() != 1) {
      throw DimensionError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    backward(loss, Tensor<Scalar>(loss.shape(), Scalar(1)));
  }

  void backward(const Var<Scalar>& out, const Tensor<Scalar>& seed) {
    if (seed.shape() != out.shape()) {
      throw DimensionError("backward seed " + shape_str(seed.shape()) + " vs output " +
                           shape_str(out.shape()));
    }
    out.node()->grad_buffer().array() += seed.array();
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> entries_;
};

namespace detail {
template <typename Scalar>
Tape<Scalar>*& active_tape_slot() {
  thread_local Tape<Scalar>* tape = nullptr;
  return tape;
}
}  // namespace detail

template <typename Scalar>
Tape<Scalar>* active_tape() {
  return detail::active_tape_slot<Scalar>();
}

/// Makes `tape` the recording context of this thread for its lifetime.
template <typename Scalar>
class TapeScope {
 public:
  explicit TapeScope(Tape<Scalar>& tape) : previous_(detail::active_tape_slot<Scalar>()) {
    detail::active_tape_slot<Scalar>() = &tape;
  }
  ~TapeScope() { detail::active_tape_slot<Scalar>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<Scalar>* previous_;
};

/// Disables recording for its lifetime.
template <typename Scalar>
class NoGradScope {
 public:
  NoGradScope() : previous_(detail::active_tape_slot<Scalar>()) {
    detail::active_tape_slot<Scalar>() = nullptr;
  }
  ~NoGradScope() { detail::active_tape_slot<Scalar>() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<Scalar>* previous_;
};

/// Returns the active tape when any input participates in differentiation.
template <typename Scalar>
Tape<Scalar>* recording(std::initializer_list<const Var<Scalar>*> inputs) {
  Tape<Scalar>* tape = active_tape<Scalar>();
  if (!tape) return nullptr;
  for (const Var<Scalar>* v : inputs) {
    if (v && v->requires_grad()) return tape;
  }
  return nullptr;
}

template <typename Scalar>
Var<Scalar> constant(Tensor<Scalar> value) {
  return Var<Scalar>(std::move(value), false);
}

/// A named tensor owned by a model. Frozen parameters never allocate a
/// gradient and are skipped by optimizers.
template <typename Scalar>
struct Parameter {
  std::string name;
  Var<Scalar> var;
  bool trainable = false;

  Parameter() = default;
  Parameter(std::string n, Tensor<Scalar> value, bool train)
      : name(std::move(n)), var(std::move(value), train), trainable(train) {}

  const Tensor<Scalar>& value() const { return var.value(); }
  Tensor<Scalar>& value() { return var.value(); }
  void set_trainable(bool on) {
    trainable = on;
    var.set_requires_grad(on);
    if (!on) var.clear_grad();
  }
};

template <typename Scalar>
using ParameterList = std::vector<Parameter<Scalar>*>;

template <typename Scalar>
void zero_grad(const ParameterList<Scalar>& params) {
  for (Parameter<Scalar>* p : params) p->var.clear_grad();
}

}  // namespace tpmamba
