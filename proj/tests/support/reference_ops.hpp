#pragma once

// Naive loop implementations used as oracles for the library's layers. They
// share no code with src/ and favour obviousness over speed.

#include <cmath>
#include <cstddef>
#include <vector>

#include "emoanti/model.hpp"

namespace emoanti::testing::ref {

// x [C_in x T], w [C_out x C_in x k] -> [C_out x T_out]
inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t pad) {
  const std::size_t cin = x.dim(0), T = x.dim(1), cout = w.dim(0), k = w.dim(2);
  const std::size_t tout = T + 2 * pad - k + 1;
  Tensor y({cout, tout});
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t t = 0; t < tout; ++t) {
      double acc = b[o];
      for (std::size_t i = 0; i < cin; ++i)
        for (std::size_t kk = 0; kk < k; ++kk) {
          const long src = static_cast<long>(t + kk) - static_cast<long>(pad);
          if (src >= 0 && src < static_cast<long>(T)) acc += w.at(o, i, kk) * x.at(i, static_cast<std::size_t>(src));
        }
      y.at(o, t) = acc;
    }
  return y;
}

// Single-utterance batchnorm on [C x T].
inline Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, const BatchNormStats& stats,
                        Mode mode, double eps = 1e-5) {
  const std::size_t C = x.dim(0), T = x.dim(1);
  Tensor y(x.shape());
  for (std::size_t c = 0; c < C; ++c) {
    double mean = stats.mean[c], var = stats.var[c];
    if (mode == Mode::train) {
      mean = 0.0;
      for (std::size_t t = 0; t < T; ++t) mean += x.at(c, t) / static_cast<double>(T);
      var = 0.0;
      for (std::size_t t = 0; t < T; ++t) var += (x.at(c, t) - mean) * (x.at(c, t) - mean) / static_cast<double>(T);
    }
    for (std::size_t t = 0; t < T; ++t) y.at(c, t) = gamma[c] * (x.at(c, t) - mean) / std::sqrt(var + eps) + beta[c];
  }
  return y;
}

inline Tensor relu(Tensor x) {
  for (double& v : x.data()) v = v > 0 ? v : 0;
  return x;
}

inline Tensor add(Tensor a, const Tensor& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

// One residual block on [d_in x T], written straight from the block equations.
inline Tensor block(const Tensor& H, const ResidualBlock& p, Mode mode) {
  const Tensor h1 = batchnorm(conv1d(H, p.conv1_weight.value, p.conv1_bias.value, 1), p.bn1_gamma.value,
                              p.bn1_beta.value, p.bn1_stats, mode);
  const Tensor h2 = batchnorm(conv1d(relu(h1), p.conv2_weight.value, p.conv2_bias.value, 1), p.bn2_gamma.value,
                              p.bn2_beta.value, p.bn2_stats, mode);
  const Tensor res = p.has_projection() ? conv1d(H, p.proj_weight->value, p.proj_bias->value, 0) : H;
  return relu(add(h2, res));
}

// x [T x D] -> [T x D_out]
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t T = x.dim(0), din = x.dim(1), dout = w.dim(0);
  Tensor y({T, dout});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t o = 0; o < dout; ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < din; ++i) acc += w.at(o, i) * x.at(t, i);
      y.at(t, o) = acc;
    }
  return y;
}

inline Tensor transpose(const Tensor& x) {
  Tensor y({x.dim(1), x.dim(0)});
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t j = 0; j < x.dim(1); ++j) y.at(j, i) = x.at(i, j);
  return y;
}

// f [T x d] -> pooled [d]
inline Tensor attention_pool(const Tensor& f, const AttentionSubnet& s) {
  const Tensor e = linear(relu(linear(f, s.w1.value, s.b1.value)), s.w2.value, s.b2.value);
  const std::size_t T = f.dim(0), d = f.dim(1);
  double mx = e[0];
  for (std::size_t t = 1; t < T; ++t) mx = std::max(mx, e[t]);
  std::vector<double> a(T);
  double z = 0;
  for (std::size_t t = 0; t < T; ++t) z += (a[t] = std::exp(e[t] - mx));
  Tensor out({d});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < d; ++j) out[j] += a[t] / z * f.at(t, j);
  return out;
}

// Eval-mode logits of one utterance given its channel-major input [C x T].
inline Tensor model_logits(const Tensor& input, const EmoAntiModel& model) {
  std::vector<double> fused;
  if (model.config().ablation == Ablation::full) {
    Tensor x = input;
    for (std::size_t i = 0; i < model.blocks().size(); ++i) {
      x = block(x, model.blocks()[i], Mode::eval);
      const Tensor pooled = attention_pool(transpose(x), model.attention()[i]);
      fused.insert(fused.end(), pooled.data().begin(), pooled.data().end());
    }
  } else {
    const Tensor pooled = attention_pool(transpose(input), model.attention()[0]);
    fused.assign(pooled.data().begin(), pooled.data().end());
  }
  const Tensor F({1, fused.size()}, fused);
  const ClassifierHead& h = model.head();
  return linear(relu(linear(F, h.w1.value, h.b1.value)), h.w2.value, h.b2.value).reshaped({2});
}

}  // namespace emoanti::testing::ref
