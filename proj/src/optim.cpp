#include "emoanti/optim.hpp"

#include <cmath>

#include "emoanti/errors.hpp"

namespace emoanti {

AdamState AdamState::for_parameters(std::span<Parameter* const> params) {
  AdamState s;
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (const Parameter* p : params) {
    s.m.push_back(Tensor::zeros_like(p->value));
    s.v.push_back(Tensor::zeros_like(p->value));
  }
  return s;
}

void AdamState::check_compatible(std::span<Parameter* const> params) const {
  if (m.size() != params.size() || v.size() != params.size()) {
    throw ShapeError("Adam state tracks " + std::to_string(m.size()) + " tensors, model has " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (m[i].shape() != params[i]->value.shape() || v[i].shape() != params[i]->value.shape()) {
      throw ShapeError("Adam moments for '" + params[i]->name + "' have shape " + shape_to_string(m[i].shape()) +
                       ", parameter is " + shape_to_string(params[i]->value.shape()));
    }
  }
}

void adam_step(std::span<Parameter* const> params, AdamState& state, double lr, double weight_decay) {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw InvalidArgument("learning rate must be positive and finite");
  state.check_compatible(params);
  for (const Parameter* p : params) {
    if (p->grad.shape() != p->value.shape()) {
      throw ShapeError("gradient of '" + p->name + "' has shape " + shape_to_string(p->grad.shape()));
    }
    if (!p->grad.all_finite()) throw NonFiniteError("non-finite gradient in '" + p->name + "'");
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    double* w = p.value.raw();
    const double* g = p.grad.raw();
    double* m = state.m[i].raw();
    double* v = state.v[i].raw();
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double gk = g[k] + weight_decay * w[k];
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * gk;
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * gk * gk;
      w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + state.eps);
    }
  }
}

}  // namespace emoanti
