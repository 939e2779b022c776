#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "emoanti/metrics.hpp"
#include "emoanti/model.hpp"
#include "emoanti/optim.hpp"

namespace emoanti {

namespace fs = std::filesystem;

using Bytes = std::vector<std::uint8_t>;

/// Writes to a sibling temporary file, then renames it over `path`.
void write_file_atomic(const fs::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const fs::path& path, const std::string& text);
Bytes read_file(const fs::path& path);

// ---------------------------------------------------------------------------
// Feature files: "EMOF", u16 version, u32-prefixed UTF-8 utt_id, u32 L, T, C,
// then L*T*C float32 values (layer, time, channel order). Little-endian.

inline constexpr std::uint16_t kFeatureVersion = 1;

struct FeatureHeader {
  std::uint16_t version = kFeatureVersion;
  std::string utt_id;
  std::uint32_t num_layers = 0;
  std::uint32_t num_frames = 0;
  std::uint32_t num_channels = 0;
};

/// Values are rounded to float32; non-finite or out-of-range values throw.
Bytes encode_features(const LayerFeatures& features);
LayerFeatures decode_features(std::span<const std::uint8_t> bytes);
FeatureHeader decode_feature_header(std::span<const std::uint8_t> bytes);

void write_features(const fs::path& path, const LayerFeatures& features);
LayerFeatures read_features(const fs::path& path);
FeatureHeader read_feature_header(const fs::path& path);

/// Frames produced by the wav2vec2 convolutional frontend for `samples`
/// input samples (kernels 10,3,3,3,3,2,2; strides 5,2,2,2,2,2,2; no padding).
/// Zero when the input is shorter than the receptive field.
std::size_t frontend_frame_count(std::size_t samples);

// ---------------------------------------------------------------------------
// Checkpoints: "EMOC", u16 version, model hyperparameters, named float64
// parameter tensors with shape headers, BatchNorm running statistics,
// training metadata and optional Adam state.

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::uint32_t epoch = 0;
  /// Validation loss at the time of saving; NaN when unknown.
  double val_loss = std::numeric_limits<double>::quiet_NaN();
};

struct CheckpointHeader {
  std::uint16_t version = kCheckpointVersion;
  ModelConfig config;
  CheckpointMeta meta;
  std::size_t num_tensors = 0;
  std::size_t num_values = 0;
  bool has_adam = false;
};

struct LoadedCheckpoint {
  EmoAntiModel model;
  CheckpointMeta meta;
  std::optional<AdamState> adam;
};

Bytes encode_checkpoint(EmoAntiModel& model, const CheckpointMeta& meta, const AdamState* adam = nullptr);
LoadedCheckpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
CheckpointHeader decode_checkpoint_header(std::span<const std::uint8_t> bytes);

void save_checkpoint(const fs::path& path, EmoAntiModel& model, const CheckpointMeta& meta,
                     const AdamState* adam = nullptr);
LoadedCheckpoint load_checkpoint(const fs::path& path);
CheckpointHeader read_checkpoint_header(const fs::path& path);

// ---------------------------------------------------------------------------
// Manifests: `utt_id<TAB>feature_path<TAB>{bonafide|spoof}` per line. Relative
// paths are resolved against the manifest's directory.

struct ManifestEntry {
  std::string utt_id;
  fs::path path;
  TrialLabel label = TrialLabel::bonafide;
};

struct Manifest {
  std::vector<ManifestEntry> entries;

  std::size_t size() const { return entries.size(); }
  std::size_t count(TrialLabel label) const;

  /// Duplicate ids, malformed lines or unknown labels throw FormatError; a
  /// missing feature file throws IoError.
  static Manifest load(const fs::path& path);
  static Manifest parse(const std::string& text, const fs::path& base_dir);
  /// Paths under the manifest's directory are written relative to it.
  void save(const fs::path& path) const;
};

// ---------------------------------------------------------------------------
// Score files (`utt_id score`) and key files (`utt_id label`).

struct Score {
  std::string utt_id;
  double score = 0.0;
};

/// Shortest round-trip decimal form, one line per score.
std::string format_scores(std::span<const Score> scores);
void write_scores(const fs::path& path, std::span<const Score> scores);
std::vector<Score> parse_scores(const std::string& text);
std::vector<Score> read_scores(const fs::path& path);

std::map<std::string, TrialLabel> parse_keys(const std::string& text);
std::map<std::string, TrialLabel> read_keys(const fs::path& path);
void write_keys(const fs::path& path, const Manifest& manifest);

/// Attaches labels; every score needs a key.
std::vector<ScoreRecord> join_scores(std::span<const Score> scores, const std::map<std::string, TrialLabel>& keys);

// ---------------------------------------------------------------------------
// Synthetic data.

/// Preset amplitudes: "high" lets a nearest-centroid probe on time-averaged
/// inputs reach EER <= 10% at 200 + 200 utterances; "zero" makes both classes
/// identically distributed.
inline constexpr double kSeparationHigh = 8.0;
inline constexpr double kSeparationZero = 0.0;

struct SynthConfig {
  std::uint64_t seed = 43;
  std::size_t n_per_class = 200;
  std::size_t t_min = 24;
  std::size_t t_max = 40;
  std::size_t channels = 32;
  std::size_t layers = 3;
  /// Amplitude of the spoof perturbation inside its temporal window.
  double separation = kSeparationHigh;
  /// Window length as a fraction of the utterance length.
  double window_fraction = 0.25;

  void validate() const;
};

struct SynthUtterance {
  LayerFeatures features;
  TrialLabel label;
};

/// Bonafide utterances follow a per-channel AR(1) process shared by all
/// layers up to layer-specific noise; spoof utterances add
/// `separation * direction` over one contiguous window of frames. The
/// direction depends only on `seed`, so splits drawn with different `split`
/// indices share it. Values are float32-representable.
std::vector<SynthUtterance> synth_gen(const SynthConfig& config, std::uint32_t split = 0,
                                      const std::string& prefix = "utt");

/// Writes feature files under `dir/name/` and the manifest `dir/name.tsv`.
Manifest write_synth_split(const SynthConfig& config, std::uint32_t split, const fs::path& dir,
                           const std::string& name);

}  // namespace emoanti
