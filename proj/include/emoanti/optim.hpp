#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "emoanti/autograd.hpp"

namespace emoanti {

/// Adam moments for a fixed, ordered parameter list.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  /// Zero moments shaped like `params`.
  static AdamState for_parameters(std::span<Parameter* const> params);

  /// Moments exist for every parameter with matching shapes.
  void check_compatible(std::span<Parameter* const> params) const;
};

/// One bias-corrected Adam update using each parameter's `grad`. Throws
/// NonFiniteError (leaving parameters and state untouched) if any gradient
/// entry is NaN or infinite.
void adam_step(std::span<Parameter* const> params, AdamState& state, double lr, double weight_decay = 0.0);

}  // namespace emoanti
