#include <cmath>
#include <cstdio>
#include <random>

#include "emoanti/dataio.hpp"
#include "emoanti/errors.hpp"

namespace emoanti {

void SynthConfig::validate() const {
  if (n_per_class == 0) throw InvalidArgument("synth: n_per_class must be positive");
  if (channels < 2) throw InvalidArgument("synth: need at least 2 channels");
  if (layers == 0) throw InvalidArgument("synth: need at least one layer");
  if (t_min == 0 || t_max < t_min) throw InvalidArgument("synth: need 0 < t_min <= t_max");
  if (!(separation >= 0.0) || !std::isfinite(separation)) throw InvalidArgument("synth: separation must be >= 0");
  if (!(window_fraction > 0.0 && window_fraction <= 1.0)) {
    throw InvalidArgument("synth: window_fraction must lie in (0, 1]");
  }
}

namespace {

constexpr double kAr = 0.8;            // frame-to-frame correlation of the base process
constexpr double kOffsetStd = 0.5;     // per-utterance channel offset
constexpr double kLayerNoiseStd = 0.3;

std::mt19937_64 stream(std::uint64_t seed, std::uint32_t a, std::uint32_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), a, b};
  return std::mt19937_64(seq);
}

std::vector<double> class_direction(std::uint64_t seed, std::size_t channels) {
  auto rng = stream(seed, 0xC1A55u, 0u);
  std::normal_distribution<double> n01;
  std::vector<double> u(channels);
  double norm = 0.0;
  for (double& x : u) {
    x = n01(rng);
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (double& x : u) x /= norm;
  return u;
}

}  // namespace

std::vector<SynthUtterance> synth_gen(const SynthConfig& config, std::uint32_t split, const std::string& prefix) {
  config.validate();
  const std::size_t C = config.channels, L = config.layers;
  const std::vector<double> u = class_direction(config.seed, C);
  const double innov = std::sqrt(1.0 - kAr * kAr);

  std::vector<SynthUtterance> out;
  out.reserve(2 * config.n_per_class);
  for (std::size_t i = 0; i < 2 * config.n_per_class; ++i) {
    const TrialLabel label = i < config.n_per_class ? TrialLabel::bonafide : TrialLabel::spoof;
    auto rng = stream(config.seed, split + 1, static_cast<std::uint32_t>(i));
    std::normal_distribution<double> n01;
    const std::size_t T = std::uniform_int_distribution<std::size_t>(config.t_min, config.t_max)(rng);
    const std::size_t w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(config.window_fraction * T)));
    const std::size_t start = std::uniform_int_distribution<std::size_t>(0, T - w)(rng);

    std::vector<double> offset(C), state(C);
    for (std::size_t c = 0; c < C; ++c) {
      offset[c] = kOffsetStd * n01(rng);
      state[c] = n01(rng);
    }
    Tensor base({T, C});
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t c = 0; c < C; ++c) {
        if (t > 0) state[c] = kAr * state[c] + innov * n01(rng);
        double v = offset[c] + state[c];
        if (label == TrialLabel::spoof && t >= start && t < start + w) v += config.separation * u[c];
        base.at(t, c) = v;
      }
    }

    Tensor layers({L, T, C});
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t c = 0; c < C; ++c) {
          layers.at(l, t, c) = static_cast<float>(base.at(t, c) + kLayerNoiseStd * n01(rng));
        }
      }
    }
    char id[64];
    std::snprintf(id, sizeof id, "%s_%05zu", prefix.c_str(), i);
    out.push_back({LayerFeatures{id, std::move(layers)}, label});
  }
  return out;
}

Manifest write_synth_split(const SynthConfig& config, std::uint32_t split, const fs::path& dir,
                           const std::string& name) {
  const fs::path feature_dir = dir / name;
  std::error_code ec;
  fs::create_directories(feature_dir, ec);
  if (ec) throw IoError("cannot create directory '" + feature_dir.string() + "'");
  Manifest m;
  for (const SynthUtterance& utt : synth_gen(config, split, name)) {
    const fs::path path = feature_dir / (utt.features.utt_id + ".emof");
    write_features(path, utt.features);
    m.entries.push_back({utt.features.utt_id, path, utt.label});
  }
  m.save(dir / (name + ".tsv"));
  return m;
}

}  // namespace emoanti
