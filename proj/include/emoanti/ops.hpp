#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "emoanti/autograd.hpp"

namespace emoanti {

enum class Mode { train, eval };

/// Running statistics of one BatchNorm1d layer.
struct BatchNormStats {
  Tensor mean;
  Tensor var;
  bool initialized = false;

  /// mean 0, var 1 for `channels` channels.
  static BatchNormStats fresh(std::size_t channels);
};

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.1;

  friend bool operator==(const BatchNormOptions&, const BatchNormOptions&) = default;
};

namespace ops {

/// 1-D convolution over [C_in x T] or [B x C_in x T] with zero padding.
/// weight is [C_out x C_in x k] with k in {1, 3}; padding in {0, 1}.
Var conv1d(Var x, Var weight, Var bias, std::size_t padding);

/// BatchNorm1d over [B x C x T] (or [C x T] as a batch of one). Train mode
/// normalizes with biased batch variance and updates `running`; eval mode
/// reads `running` only. With a [B x T] mask the statistics cover real frames
/// only and padded frames output exactly 0.
Var batchnorm1d(Var x, Var gamma, Var beta, Mode mode, BatchNormStats& running,
                const BatchNormOptions& options = {}, std::span<const std::uint8_t> mask = {});

/// Zeroes padded frames of [C x T] or [B x C x T]; mask is [B x T].
Var mask_frames(Var x, std::span<const std::uint8_t> mask);

/// y = x * weight^T + bias over the trailing axis of x.
Var affine(Var x, Var weight, Var bias);

Var relu(Var x);

/// Inverted dropout: survivors are scaled by 1/(1-p) in train mode; eval
/// mode returns `x` unchanged. The keep mask is a pure function of `seed`.
Var dropout(Var x, double p, Mode mode, std::uint64_t seed);

/// Softmax along the last axis of [T] or [B x T] scores. Entries whose mask
/// byte is zero get weight exactly 0. An empty mask means all frames valid.
Var softmax_over_time(Var scores, std::span<const std::uint8_t> mask = {});

/// Mean over the batch of -log softmax(logits)[label]; logits are [B x K].
Var cross_entropy(Var logits, std::span<const int> labels);

Var add(Var a, Var b);
Var mul(Var a, Var b);
/// Sum of all entries as a one-element tensor.
Var sum(Var x);

Var reshape(Var x, Shape shape);
/// Swaps the last two axes of a rank-2 or rank-3 tensor.
Var transpose_last2(Var x);

/// pooled[b, d] = sum_t alpha[b, t] * f[b, t, d]; alpha [B x T], f [B x T x D].
Var weighted_time_sum(Var alpha, Var f);

/// Concatenates [B x D_i] (or [D_i]) parts along the last axis, in order.
Var concat_last(std::span<const Var> parts);

}  // namespace ops
}  // namespace emoanti
