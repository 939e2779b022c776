#include "emoanti/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "emoanti/errors.hpp"

namespace emoanti {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

BatchNormStats BatchNormStats::fresh(std::size_t channels) {
  return BatchNormStats{Tensor({channels}, 0.0), Tensor({channels}, 1.0), true};
}

namespace ops {
namespace {

Tape& tape_of(Var v) {
  if (v.tape == nullptr) throw StateError("variable is not attached to a tape");
  return *v.tape;
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

struct Ncl {
  std::size_t batch, channels, length;
};

// [C x T] is treated as a batch of one.
Ncl as_ncl(const Shape& s, const char* what) {
  if (s.size() == 2) return {1, s[0], s[1]};
  if (s.size() == 3) return {s[0], s[1], s[2]};
  throw ShapeError(std::string(what) + ": expected [C x T] or [B x C x T], got " + shape_to_string(s));
}

}  // namespace

Var conv1d(Var x, Var weight, Var bias, std::size_t padding) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const Tensor& bv = bias.value();
  const Ncl in = as_ncl(xv.shape(), "conv1d input");
  require(wv.rank() == 3, "conv1d weight: expected [C_out x C_in x k], got " + shape_to_string(wv.shape()));
  const std::size_t c_out = wv.dim(0);
  const std::size_t k = wv.dim(2);
  if (k != 1 && k != 3) throw InvalidArgument("conv1d: kernel size must be 1 or 3, got " + std::to_string(k));
  if (padding > 1) throw InvalidArgument("conv1d: padding must be 0 or 1, got " + std::to_string(padding));
  require(wv.dim(1) == in.channels, "conv1d: channel axis mismatch, input has " + std::to_string(in.channels) +
                                        " channels but weight expects " + std::to_string(wv.dim(1)));
  require(bv.rank() == 1 && bv.dim(0) == c_out, "conv1d: bias axis mismatch, expected [" + std::to_string(c_out) +
                                                    "], got " + shape_to_string(bv.shape()));
  require(in.length + 2 * padding >= k, "conv1d: time axis too short (" + std::to_string(in.length) +
                                            ") for kernel " + std::to_string(k));
  const std::size_t t_out = in.length + 2 * padding - k + 1;
  const std::size_t rows = in.channels * k;

  // im2col per batch item: cols[b] is [C_in*k x T_out].
  AlignedDoubles cols(in.batch * rows * t_out, 0.0);
  for (std::size_t b = 0; b < in.batch; ++b) {
    const double* xb = xv.raw() + b * in.channels * in.length;
    double* cb = cols.data() + b * rows * t_out;
    for (std::size_t i = 0; i < in.channels; ++i) {
      for (std::size_t kk = 0; kk < k; ++kk) {
        double* row = cb + (i * k + kk) * t_out;
        for (std::size_t t = 0; t < t_out; ++t) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + kk) - static_cast<std::ptrdiff_t>(padding);
          if (src >= 0 && src < static_cast<std::ptrdiff_t>(in.length)) row[t] = xb[i * in.length + src];
        }
      }
    }
  }

  Shape out_shape = xv.rank() == 2 ? Shape{c_out, t_out} : Shape{in.batch, c_out, t_out};
  Tensor out(out_shape);
  ConstMatMap w(wv.raw(), c_out, rows);
  Eigen::Map<const Eigen::VectorXd> bvec(bv.raw(), c_out);
  for (std::size_t b = 0; b < in.batch; ++b) {
    ConstMatMap col(cols.data() + b * rows * t_out, rows, t_out);
    MatMap y(out.raw() + b * c_out * t_out, c_out, t_out);
    y.noalias() = w * col;
    y.colwise() += bvec;
  }

  return tape.record(std::move(out), {x, weight, bias},
                     [x, weight, bias, in, c_out, k, padding, t_out, rows, cols = std::move(cols)](
                         Tape& t, const Tensor& g) {
                       const Tensor& wv = t.value(weight);
                       ConstMatMap w(wv.raw(), c_out, rows);
                       const bool need_x = t.requires_grad(x);
                       const bool need_w = t.requires_grad(weight);
                       const bool need_b = t.requires_grad(bias);
                       RowMat dcol(rows, t_out);
                       for (std::size_t b = 0; b < in.batch; ++b) {
                         ConstMatMap gy(g.raw() + b * c_out * t_out, c_out, t_out);
                         ConstMatMap col(cols.data() + b * rows * t_out, rows, t_out);
                         if (need_w) {
                           MatMap dw(t.grad_of(weight).raw(), c_out, rows);
                           dw.noalias() += gy * col.transpose();
                         }
                         if (need_b) {
                           Eigen::Map<Eigen::VectorXd> db(t.grad_of(bias).raw(), c_out);
                           db += gy.rowwise().sum();
                         }
                         if (need_x) {
                           dcol.noalias() = w.transpose() * gy;
                           double* dx = t.grad_of(x).raw() + b * in.channels * in.length;
                           for (std::size_t i = 0; i < in.channels; ++i) {
                             for (std::size_t kk = 0; kk < k; ++kk) {
                               const double* row = dcol.data() + (i * k + kk) * t_out;
                               for (std::size_t tt = 0; tt < t_out; ++tt) {
                                 const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(tt + kk) -
                                                            static_cast<std::ptrdiff_t>(padding);
                                 if (src >= 0 && src < static_cast<std::ptrdiff_t>(in.length)) {
                                   dx[i * in.length + src] += row[tt];
                                 }
                               }
                             }
                           }
                         }
                       }
                     });
}

Var batchnorm1d(Var x, Var gamma, Var beta, Mode mode, BatchNormStats& running, const BatchNormOptions& options,
                std::span<const std::uint8_t> mask) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  const Ncl in = as_ncl(xv.shape(), "batchnorm1d input");
  const std::size_t C = in.channels;
  require(gamma.value().shape() == Shape{C}, "batchnorm1d: gamma channel axis mismatch, expected [" +
                                                 std::to_string(C) + "], got " + shape_to_string(gamma.shape()));
  require(beta.value().shape() == Shape{C}, "batchnorm1d: beta channel axis mismatch, expected [" +
                                                std::to_string(C) + "], got " + shape_to_string(beta.shape()));
  if (!(options.eps > 0.0)) throw InvalidArgument("batchnorm1d: eps must be positive");
  require(mask.empty() || mask.size() == in.batch * in.length,
          "batchnorm1d: mask has " + std::to_string(mask.size()) + " entries for " + std::to_string(in.batch) +
              " rows of " + std::to_string(in.length) + " frames");

  // valid[b * T + t] == 1 for real frames; padded frames are excluded from the
  // statistics and produce exact zeros.
  std::vector<std::uint8_t> valid(mask.begin(), mask.end());
  if (valid.empty()) valid.assign(in.batch * in.length, 1);
  const std::size_t n = static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
  if (n == 0) throw InvalidArgument("batchnorm1d: every frame is masked");
  std::vector<double> mean(C, 0.0), inv_std(C, 0.0);

  if (running.initialized) {
    require(running.mean.shape() == Shape{C} && running.var.shape() == Shape{C},
            "batchnorm1d: running statistics channel axis mismatch");
  }
  if (mode == Mode::train) {
    if (!running.initialized) running = BatchNormStats::fresh(C);
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t b = 0; b < in.batch; ++b) {
        const double* p = xv.raw() + (b * C + c) * in.length;
        const std::uint8_t* v = valid.data() + b * in.length;
        for (std::size_t t = 0; t < in.length; ++t) {
          if (v[t]) s += p[t];
        }
      }
      const double m = s / static_cast<double>(n);
      double ss = 0.0;
      for (std::size_t b = 0; b < in.batch; ++b) {
        const double* p = xv.raw() + (b * C + c) * in.length;
        const std::uint8_t* v = valid.data() + b * in.length;
        for (std::size_t t = 0; t < in.length; ++t) {
          if (v[t]) ss += (p[t] - m) * (p[t] - m);
        }
      }
      const double var = ss / static_cast<double>(n);
      mean[c] = m;
      inv_std[c] = 1.0 / std::sqrt(var + options.eps);

      const double mom = options.momentum;
      running.mean[c] = (1.0 - mom) * running.mean[c] + mom * m;
      if (n > 1) {
        const double unbiased = ss / static_cast<double>(n - 1);
        running.var[c] = (1.0 - mom) * running.var[c] + mom * unbiased;
      }
    }
  } else {
    if (!running.initialized) throw StateError("batchnorm1d: eval mode needs initialized running statistics");
    for (std::size_t c = 0; c < C; ++c) {
      if (running.var[c] < 0.0) throw InvalidArgument("batchnorm1d: negative running variance");
      mean[c] = running.mean[c];
      inv_std[c] = 1.0 / std::sqrt(running.var[c] + options.eps);
    }
  }

  Tensor xhat(xv.shape());
  Tensor out(xv.shape());
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t b = 0; b < in.batch; ++b) {
    const std::uint8_t* v = valid.data() + b * in.length;
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (b * C + c) * in.length;
      for (std::size_t t = 0; t < in.length; ++t) {
        if (!v[t]) continue;
        const double h = (xv[off + t] - mean[c]) * inv_std[c];
        xhat[off + t] = h;
        out[off + t] = gv[c] * h + bv[c];
      }
    }
  }

  return tape.record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, in, mode, n, valid = std::move(valid), inv_std = std::move(inv_std),
       xhat = std::move(xhat)](Tape& t, const Tensor& g) {
        const std::size_t C = in.channels;
        const Tensor& gv = t.value(gamma);
        std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
        for (std::size_t b = 0; b < in.batch; ++b) {
          const std::uint8_t* v = valid.data() + b * in.length;
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (b * C + c) * in.length;
            for (std::size_t tt = 0; tt < in.length; ++tt) {
              if (!v[tt]) continue;
              sum_g[c] += g[off + tt];
              sum_gx[c] += g[off + tt] * xhat[off + tt];
            }
          }
        }
        if (t.requires_grad(gamma)) {
          Tensor& dg = t.grad_of(gamma);
          for (std::size_t c = 0; c < C; ++c) dg[c] += sum_gx[c];
        }
        if (t.requires_grad(beta)) {
          Tensor& db = t.grad_of(beta);
          for (std::size_t c = 0; c < C; ++c) db[c] += sum_g[c];
        }
        if (!t.requires_grad(x)) return;
        Tensor& dx = t.grad_of(x);
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t b = 0; b < in.batch; ++b) {
          const std::uint8_t* v = valid.data() + b * in.length;
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (b * C + c) * in.length;
            const double scale = gv[c] * inv_std[c];
            for (std::size_t tt = 0; tt < in.length; ++tt) {
              if (!v[tt]) continue;
              if (mode == Mode::train) {
                dx[off + tt] += scale * (g[off + tt] - inv_n * sum_g[c] - xhat[off + tt] * inv_n * sum_gx[c]);
              } else {
                dx[off + tt] += scale * g[off + tt];
              }
            }
          }
        }
      });
}

Var mask_frames(Var x, std::span<const std::uint8_t> mask) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  const Ncl in = as_ncl(xv.shape(), "mask_frames input");
  require(mask.size() == in.batch * in.length, "mask_frames: mask has " + std::to_string(mask.size()) +
                                                   " entries for " + std::to_string(in.batch) + " rows of " +
                                                   std::to_string(in.length) + " frames");
  std::vector<std::uint8_t> valid(mask.begin(), mask.end());
  Tensor out = xv;
  auto apply = [in, &valid](double* p) {
    for (std::size_t b = 0; b < in.batch; ++b) {
      for (std::size_t c = 0; c < in.channels; ++c) {
        for (std::size_t t = 0; t < in.length; ++t) {
          if (!valid[b * in.length + t]) p[(b * in.channels + c) * in.length + t] = 0.0;
        }
      }
    }
  };
  apply(out.raw());
  return tape.record(std::move(out), {x}, [x, in, valid = std::move(valid)](Tape& t, const Tensor& g) {
    Tensor& dx = t.grad_of(x);
    for (std::size_t b = 0; b < in.batch; ++b) {
      for (std::size_t c = 0; c < in.channels; ++c) {
        for (std::size_t tt = 0; tt < in.length; ++tt) {
          const std::size_t i = (b * in.channels + c) * in.length + tt;
          if (valid[b * in.length + tt]) dx[i] += g[i];
        }
      }
    }
  });
}

Var affine(Var x, Var weight, Var bias) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const Tensor& bv = bias.value();
  require(wv.rank() == 2, "affine weight: expected [D_out x D_in], got " + shape_to_string(wv.shape()));
  const std::size_t d_out = wv.dim(0);
  const std::size_t d_in = wv.dim(1);
  require(xv.rank() >= 1 && xv.shape().back() == d_in,
          "affine: trailing axis of input " + shape_to_string(xv.shape()) + " does not match D_in = " +
              std::to_string(d_in));
  require(bv.shape() == Shape{d_out}, "affine: bias axis mismatch, expected [" + std::to_string(d_out) +
                                          "], got " + shape_to_string(bv.shape()));
  const std::size_t rows = xv.size() / d_in;
  Shape out_shape = xv.shape();
  out_shape.back() = d_out;
  Tensor out(out_shape);
  {
    ConstMatMap xm(xv.raw(), rows, d_in);
    ConstMatMap w(wv.raw(), d_out, d_in);
    MatMap y(out.raw(), rows, d_out);
    y.noalias() = xm * w.transpose();
    y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.raw(), d_out);
  }
  return tape.record(std::move(out), {x, weight, bias}, [x, weight, bias, rows, d_in, d_out](Tape& t, const Tensor& g) {
    ConstMatMap gy(g.raw(), rows, d_out);
    if (t.requires_grad(x)) {
      ConstMatMap w(t.value(weight).raw(), d_out, d_in);
      MatMap dx(t.grad_of(x).raw(), rows, d_in);
      dx.noalias() += gy * w;
    }
    if (t.requires_grad(weight)) {
      ConstMatMap xm(t.value(x).raw(), rows, d_in);
      MatMap dw(t.grad_of(weight).raw(), d_out, d_in);
      dw.noalias() += gy.transpose() * xm;
    }
    if (t.requires_grad(bias)) {
      Eigen::Map<Eigen::RowVectorXd> db(t.grad_of(bias).raw(), d_out);
      db += gy.colwise().sum();
    }
  });
}

Var relu(Var x) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return tape.record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(x);
    Tensor& dx = t.grad_of(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > 0.0) dx[i] += g[i];
    }
  });
}

Var dropout(Var x, double p, Mode mode, std::uint64_t seed) {
  if (!(p >= 0.0 && p < 1.0)) throw InvalidArgument("dropout: p must lie in [0, 1), got " + std::to_string(p));
  if (mode == Mode::eval) return x;
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  std::vector<double> scale(xv.size());
  std::mt19937_64 rng(seed);
  const double keep = 1.0 / (1.0 - p);
  for (auto& s : scale) {
    // 53 random bits -> uniform in [0, 1).
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    s = u >= p ? keep : 0.0;
  }
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * scale[i];
  return tape.record(std::move(out), {x}, [x, scale = std::move(scale)](Tape& t, const Tensor& g) {
    Tensor& dx = t.grad_of(x);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * scale[i];
  });
}

Var softmax_over_time(Var scores, std::span<const std::uint8_t> mask) {
  Tape& tape = tape_of(scores);
  const Tensor& ev = scores.value();
  require(ev.rank() == 1 || ev.rank() == 2,
          "softmax_over_time: expected [T] or [B x T] scores, got " + shape_to_string(ev.shape()));
  const std::size_t T = ev.shape().back();
  const std::size_t B = ev.size() / T;
  if (!mask.empty() && mask.size() != ev.size()) {
    throw ShapeError("softmax_over_time: mask has " + std::to_string(mask.size()) + " entries for scores " +
                     shape_to_string(ev.shape()));
  }
  auto valid = [&](std::size_t i) { return mask.empty() || mask[i] != 0; };
  if (!ev.all_finite()) throw NonFiniteError("softmax_over_time: non-finite score");

  Tensor out(ev.shape());
  for (std::size_t b = 0; b < B; ++b) {
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t t = 0; t < T; ++t) {
      if (valid(b * T + t)) {
        mx = std::max(mx, ev[b * T + t]);
        any = true;
      }
    }
    if (!any) throw InvalidArgument("softmax_over_time: every frame of row " + std::to_string(b) + " is masked");
    double z = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t i = b * T + t;
      out[i] = valid(i) ? std::exp(ev[i] - mx) : 0.0;
      z += out[i];
    }
    for (std::size_t t = 0; t < T; ++t) out[b * T + t] /= z;
  }

  Tensor weights = out;
  return tape.record(std::move(out), {scores}, [scores, B, T, a = std::move(weights)](Tape& t, const Tensor& g) {
    Tensor& de = t.grad_of(scores);
    for (std::size_t b = 0; b < B; ++b) {
      double dot = 0.0;
      for (std::size_t tt = 0; tt < T; ++tt) dot += a[b * T + tt] * g[b * T + tt];
      for (std::size_t tt = 0; tt < T; ++tt) de[b * T + tt] += a[b * T + tt] * (g[b * T + tt] - dot);
    }
  });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  Tape& tape = tape_of(logits);
  const Tensor& zv = logits.value();
  require(zv.rank() == 2, "cross_entropy: expected [B x K] logits, got " + shape_to_string(zv.shape()));
  const std::size_t B = zv.dim(0);
  const std::size_t K = zv.dim(1);
  require(labels.size() == B, "cross_entropy: batch axis mismatch, " + std::to_string(B) + " logit rows but " +
                                  std::to_string(labels.size()) + " labels");
  if (!zv.all_finite()) throw NonFiniteError("cross_entropy: non-finite logits");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= K) {
      throw InvalidArgument("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(K) + ")");
    }
  }
  Tensor probs(zv.shape());
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    double mx = zv.at(b, 0);
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, zv.at(b, k));
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(zv.at(b, k) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t k = 0; k < K; ++k) probs.at(b, k) = std::exp(zv.at(b, k) - lse);
    // log1p form keeps tiny losses (confident correct rows) accurate.
    const std::size_t y = static_cast<std::size_t>(labels[b]);
    double rest = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      if (k != y) rest += std::exp(zv.at(b, k) - zv.at(b, y));
    }
    total += zv.at(b, y) >= mx ? std::log1p(rest) : lse - zv.at(b, y);
  }
  Tensor out({1}, total / static_cast<double>(B));
  std::vector<int> ys(labels.begin(), labels.end());
  return tape.record(std::move(out), {logits}, [logits, B, K, probs = std::move(probs), ys = std::move(ys)](
                                                   Tape& t, const Tensor& g) {
    Tensor& dz = t.grad_of(logits);
    const double s = g[0] / static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t k = 0; k < K; ++k) {
        const double onehot = static_cast<std::size_t>(ys[b]) == k ? 1.0 : 0.0;
        dz.at(b, k) += s * (probs.at(b, k) - onehot);
      }
    }
  });
}

Var add(Var a, Var b) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.shape() == bv.shape(), "add: shape mismatch " + shape_to_string(av.shape()) + " vs " +
                                        shape_to_string(bv.shape()));
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    for (Var v : {a, b}) {
      if (!t.requires_grad(v)) continue;
      Tensor& d = t.grad_of(v);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.shape() == bv.shape(), "mul: shape mismatch " + shape_to_string(av.shape()) + " vs " +
                                        shape_to_string(bv.shape()));
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (t.requires_grad(a)) {
      Tensor& d = t.grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      Tensor& d = t.grad_of(b);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * av[i];
    }
  });
}

Var sum(Var x) {
  Tape& tape = tape_of(x);
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return tape.record(Tensor({1}, s), {x}, [x](Tape& t, const Tensor& g) {
    Tensor& d = t.grad_of(x);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[0];
  });
}

Var reshape(Var x, Shape shape) {
  Tape& tape = tape_of(x);
  return tape.record(x.value().reshaped(std::move(shape)), {x}, [x](Tape& t, const Tensor& g) {
    Tensor& d = t.grad_of(x);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

Var transpose_last2(Var x) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  require(xv.rank() == 2 || xv.rank() == 3, "transpose_last2: expected rank 2 or 3, got " + shape_to_string(xv.shape()));
  const std::size_t n = xv.rank() == 3 ? xv.dim(0) : 1;
  const std::size_t r = xv.shape()[xv.rank() - 2];
  const std::size_t c = xv.shape()[xv.rank() - 1];
  Shape out_shape = xv.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  Tensor out(out_shape);
  for (std::size_t k = 0; k < n; ++k) {
    ConstMatMap src(xv.raw() + k * r * c, r, c);
    MatMap dst(out.raw() + k * r * c, c, r);
    dst = src.transpose();
  }
  return tape.record(std::move(out), {x}, [x, n, r, c](Tape& t, const Tensor& g) {
    Tensor& d = t.grad_of(x);
    for (std::size_t k = 0; k < n; ++k) {
      ConstMatMap gsrc(g.raw() + k * r * c, c, r);
      MatMap dst(d.raw() + k * r * c, r, c);
      dst += gsrc.transpose();
    }
  });
}

Var weighted_time_sum(Var alpha, Var f) {
  Tape& tape = tape_of(alpha);
  const Tensor& av = alpha.value();
  const Tensor& fv = f.value();
  require(av.rank() == 2, "weighted_time_sum: expected [B x T] weights, got " + shape_to_string(av.shape()));
  require(fv.rank() == 3 && fv.dim(0) == av.dim(0) && fv.dim(1) == av.dim(1),
          "weighted_time_sum: features " + shape_to_string(fv.shape()) + " do not match weights " +
              shape_to_string(av.shape()) + " on the batch/time axes");
  const std::size_t B = fv.dim(0), T = fv.dim(1), D = fv.dim(2);
  Tensor out({B, D});
  for (std::size_t b = 0; b < B; ++b) {
    Eigen::Map<const Eigen::RowVectorXd> a(av.raw() + b * T, T);
    ConstMatMap fm(fv.raw() + b * T * D, T, D);
    Eigen::Map<Eigen::RowVectorXd>(out.raw() + b * D, D).noalias() = a * fm;
  }
  return tape.record(std::move(out), {alpha, f}, [alpha, f, B, T, D](Tape& t, const Tensor& g) {
    for (std::size_t b = 0; b < B; ++b) {
      Eigen::Map<const Eigen::RowVectorXd> gb(g.raw() + b * D, D);
      if (t.requires_grad(alpha)) {
        ConstMatMap fm(t.value(f).raw() + b * T * D, T, D);
        Eigen::Map<Eigen::VectorXd>(t.grad_of(alpha).raw() + b * T, T).noalias() += fm * gb.transpose();
      }
      if (t.requires_grad(f)) {
        Eigen::Map<const Eigen::VectorXd> a(t.value(alpha).raw() + b * T, T);
        MatMap(t.grad_of(f).raw() + b * T * D, T, D).noalias() += a * gb;
      }
    }
  });
}

Var concat_last(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidArgument("concat_last: nothing to concatenate");
  Tape& tape = tape_of(parts[0]);
  const Shape& first = parts[0].shape();
  require(first.size() == 1 || first.size() == 2, "concat_last: expected [D] or [B x D] parts");
  const std::size_t rows = first.size() == 2 ? first[0] : 1;
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    require(s.size() == first.size() && (s.size() == 1 || s[0] == rows),
            "concat_last: part shape " + shape_to_string(s) + " incompatible with " + shape_to_string(first));
    widths.push_back(s.back());
    total += s.back();
  }
  Shape out_shape = first.size() == 2 ? Shape{rows, total} : Shape{total};
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& pv = parts[i].value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(pv.raw() + r * widths[i], widths[i], out.raw() + r * total + offset);
    }
    offset += widths[i];
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape.record(std::move(out), inputs, [inputs, widths, rows, total](Tape& t, const Tensor& g) {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (t.requires_grad(inputs[i])) {
        Tensor& d = t.grad_of(inputs[i]);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < widths[i]; ++j) d[r * widths[i] + j] += g[r * total + offset + j];
        }
      }
      offset += widths[i];
    }
  });
}

}  // namespace ops
}  // namespace emoanti
