#pragma once

// Nearest-centroid classifier over time-averaged model-input features. It
// establishes that a synthetic split is learnable without touching the model.

#include <vector>

#include "emoanti/dataio.hpp"
#include "emoanti/metrics.hpp"

namespace emoanti::testing {

inline std::vector<double> time_average(const LayerFeatures& f, const ModelConfig& cfg) {
  const Tensor x = select_input(f, cfg);  // [C x T]
  const std::size_t C = x.dim(0), T = x.dim(1);
  std::vector<double> mean(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t t = 0; t < T; ++t) mean[c] += x.at(c, t);
    mean[c] /= static_cast<double>(T);
  }
  return mean;
}

/// Fits class centroids on `train` and scores `test` by
/// |x - mu_spoof|^2 - |x - mu_bonafide|^2; returns the test EER.
inline double centroid_oracle_eer(const std::vector<SynthUtterance>& train, const std::vector<SynthUtterance>& test,
                                  const ModelConfig& cfg) {
  const std::size_t C = cfg.input_channels;
  std::vector<double> mu_b(C, 0.0), mu_s(C, 0.0);
  double nb = 0, ns = 0;
  for (const auto& u : train) {
    const auto m = time_average(u.features, cfg);
    auto& mu = u.label == TrialLabel::bonafide ? mu_b : mu_s;
    (u.label == TrialLabel::bonafide ? nb : ns) += 1;
    for (std::size_t c = 0; c < C; ++c) mu[c] += m[c];
  }
  for (std::size_t c = 0; c < C; ++c) {
    mu_b[c] /= nb;
    mu_s[c] /= ns;
  }
  std::vector<ScoreRecord> recs;
  for (const auto& u : test) {
    const auto m = time_average(u.features, cfg);
    double db = 0, ds = 0;
    for (std::size_t c = 0; c < C; ++c) {
      db += (m[c] - mu_b[c]) * (m[c] - mu_b[c]);
      ds += (m[c] - mu_s[c]) * (m[c] - mu_s[c]);
    }
    recs.push_back({u.features.utt_id, ds - db, u.label});
  }
  return compute_eer(recs).eer;
}

}  // namespace emoanti::testing
