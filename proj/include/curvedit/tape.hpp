#pragma once

#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "curvedit/tensor.hpp"

namespace curvedit {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  inline const Tensor& value() const;
  inline const Shape& shape() const;
  inline bool requires_grad() const;
  std::size_t dim(std::size_t i) const { return shape().at(i); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// What a backward function sees for one recorded node.
class BackwardContext {
 public:
  BackwardContext(Tape& tape, std::size_t node) : tape_(tape), node_(node) {}

  inline const Tensor& grad_out() const;
  inline const Tensor& out() const;
  inline const Tensor& input(std::size_t i) const;
  /// Adjoint buffer of input i, or nullptr when that input needs no gradient.
  inline Tensor* grad_in(std::size_t i);

 private:
  Tape& tape_;
  std::size_t node_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

/// Reverse-mode gradient tape. Records operations eagerly in execution order.
/// Each tape is independent; no state is shared between tapes.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, {}, {}, requires_grad, false});
    return Var(this, nodes_.size() - 1);
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records an operation. The backward fn is dropped when no input needs a gradient.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
    if (consumed_) throw std::logic_error("tape already consumed by backward pass");
    bool needs = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const Var& v : inputs) {
      if (&v.tape() != this) throw std::logic_error("operands recorded on different tapes");
      ids.push_back(v.id());
      needs = needs || nodes_[v.id()].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), std::move(ids),
                          needs ? std::move(backward) : BackwardFn{}, {}, needs, false});
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

  /// d(loss)/d(param) for each param. An entry is empty when the param does not
  /// influence the loss through recorded operations. Consumes the tape.
  std::vector<std::optional<Tensor>> gradients(Var loss, std::span<const Var> params) {
    return backward(loss, params, nullptr);
  }

  /// Vector-Jacobian product: seeds the output adjoint with `seed` instead of 1.
  std::vector<std::optional<Tensor>> vjp(Var output, const Tensor& seed,
                                         std::span<const Var> params) {
    return backward(output, params, &seed);
  }

 private:
  friend class BackwardContext;

  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
  };

  std::vector<std::optional<Tensor>> backward(Var out, std::span<const Var> params,
                                              const Tensor* seed) {
    if (consumed_) throw std::logic_error("tape already consumed by backward pass");
    if (&out.tape() != this) throw std::logic_error("output belongs to another tape");
    const std::size_t root = out.id();
    if (!seed && nodes_[root].value.size() != 1)
      throw ShapeError("gradient requires a scalar loss, got shape " +
                       shape_string(nodes_[root].value.shape()));
    consumed_ = true;

    std::vector<char> reach(nodes_.size(), 0);
    reach[root] = 1;
    for (std::size_t i = root + 1; i-- > 0;) {
      if (!reach[i]) continue;
      for (std::size_t in : nodes_[i].inputs)
        if (nodes_[in].requires_grad) reach[in] = 1;
    }

    Node& r = nodes_[root];
    if (r.requires_grad) {
      if (seed) {
        r.value.check_same(*seed, "vjp seed");
        r.grad = *seed;
      } else {
        r.grad = Tensor(r.value.shape(), 1.0);
      }
      r.has_grad = true;
    }
    for (std::size_t i = root + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!reach[i] || !n.has_grad || !n.backward) continue;
      BackwardContext ctx(*this, i);
      n.backward(ctx);
    }

    std::vector<std::optional<Tensor>> result;
    result.reserve(params.size());
    for (const Var& p : params) {
      if (&p.tape() != this) throw std::logic_error("parameter belongs to another tape");
      Node& n = nodes_[p.id()];
      if (reach[p.id()] && n.has_grad && r.requires_grad)
        result.emplace_back(n.grad);
      else
        result.emplace_back(std::nullopt);
    }
    return result;
  }

  Tensor* grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape(), 0.0);
      n.has_grad = true;
    }
    return &n.grad;
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Shape& Var::shape() const { return tape_->value(id_).shape(); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

inline const Tensor& BackwardContext::grad_out() const { return tape_.nodes_[node_].grad; }
inline const Tensor& BackwardContext::out() const { return tape_.nodes_[node_].value; }
inline const Tensor& BackwardContext::input(std::size_t i) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs[i]].value;
}
inline Tensor* BackwardContext::grad_in(std::size_t i) {
  return tape_.grad_buffer(tape_.nodes_[node_].inputs[i]);
}

}  // namespace curvedit
