#include "emoanti/autograd.hpp"

#include <cmath>

#include "emoanti/errors.hpp"

namespace emoanti {

const Tensor& Var::value() const {
  if (tape == nullptr) throw StateError("variable is not attached to a tape");
  return tape->value(*this);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, nullptr, {}});
  return Var{this, nodes_.size() - 1};
}

Var Tape::param(Parameter& param) {
  if (param.grad.shape() != param.value.shape()) param.zero_grad();
  nodes_.push_back(Node{param.value, {}, true, &param, {}});
  return Var{this, nodes_.size() - 1};
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, true, nullptr, {}});
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  if (replayed_) throw StateError("cannot record on a tape that was already replayed; call reset()");
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.tape != this) throw StateError("op input belongs to a different tape");
    needs = needs || nodes_[in.id].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs, nullptr, needs ? std::move(backward) : BackwardFn{}});
  return Var{this, nodes_.size() - 1};
}

Tape::Node& Tape::node(Var v) {
  if (v.tape != this || v.id >= nodes_.size()) throw StateError("variable does not belong to this tape");
  return nodes_[v.id];
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape != this || v.id >= nodes_.size()) throw StateError("variable does not belong to this tape");
  return nodes_[v.id];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }
bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Tensor& Tape::grad_of(Var v) {
  Node& n = node(v);
  if (n.grad.empty()) n.grad = Tensor::zeros_like(n.value);
  return n.grad;
}

Tensor Tape::grad(Var v) const {
  const Node& n = node(v);
  return n.grad.empty() ? Tensor::zeros_like(n.value) : n.grad;
}

void Tape::backward(Var loss) {
  if (replayed_) throw StateError("tape was already replayed; call reset() before another backward pass");
  Node& out = node(loss);
  if (out.value.size() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + shape_to_string(out.value.shape()));
  }
  if (!std::isfinite(out.value[0])) throw NonFiniteError("loss is not finite");
  replayed_ = true;
  replay_order_.clear();
  grad_of(loss)[0] = 1.0;

  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) {
      // nodes_ cannot grow once replayed_ is set, so n stays valid.
      replay_order_.push_back(i);
      n.backward(*this, n.grad);
    }
  }

  for (Node& n : nodes_) {
    if (n.sink == nullptr || n.grad.empty()) continue;
    auto dst = n.sink->grad.data();
    auto src = n.grad.data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
  }
}

void Tape::reset() {
  nodes_.clear();
  replay_order_.clear();
  replayed_ = false;
}

}  // namespace emoanti
