#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "emoanti/tensor.hpp"

namespace emoanti {

/// A learnable tensor together with the gradient accumulated into it by
/// `Tape::backward`.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros_like(value)) {}

  void zero_grad() { grad = Tensor::zeros_like(value); }
};

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Records primitive applications in order so that adjoints can be replayed
/// in exact reverse order. A tape may be replayed once; `reset` clears it for
/// the next step.
class Tape {
 public:
  /// Receives the output adjoint and scatters into input adjoints via
  /// `Tape::grad_of`.
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Non-differentiable input.
  Var constant(Tensor value);
  /// Differentiable leaf whose gradient is accumulated into `param.grad`.
  Var param(Parameter& param);
  /// Differentiable leaf without a parameter sink; read its gradient with
  /// `grad` after `backward`.
  Var variable(Tensor value);

  /// Records an op output. `backward` is dropped when no input requires a
  /// gradient.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;

  /// Gradient buffer of `v` during replay (zero-initialized on first touch).
  Tensor& grad_of(Var v);
  /// Gradient after `backward`; zeros for values the loss does not depend on.
  Tensor grad(Var v) const;

  /// Seeds d(loss)/d(loss) = 1 and replays all adjoints in reverse order,
  /// then accumulates leaf gradients into their parameters.
  void backward(Var loss);

  void reset();
  std::size_t size() const { return nodes_.size(); }
  bool replayed() const { return replayed_; }

  /// Order in which the last `backward` visited recorded ops.
  const std::vector<std::size_t>& replay_order() const { return replay_order_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* sink = nullptr;
    BackwardFn backward;
  };

  Node& node(Var v);
  const Node& node(Var v) const;

  // deque: references handed out by value() survive later records.
  std::deque<Node> nodes_;
  std::vector<std::size_t> replay_order_;
  bool replayed_ = false;
};

}  // namespace emoanti
