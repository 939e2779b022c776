#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "emoanti/dataio.hpp"
#include "emoanti/model.hpp"
#include "emoanti/optim.hpp"

namespace emoanti {

struct LabeledUtterance {
  LayerFeatures features;
  TrialLabel label = TrialLabel::bonafide;
};

using Dataset = std::vector<LabeledUtterance>;

/// Reads every feature file listed in `manifest`.
Dataset load_dataset(const Manifest& manifest);
Dataset to_dataset(std::vector<SynthUtterance> utterances);

inline int class_index(TrialLabel label) { return label == TrialLabel::bonafide ? kBonafide : kSpoof; }

struct TrainConfig {
  double learning_rate = 1e-4;
  std::uint32_t epochs = 6;
  std::size_t batch_size = 32;
  std::uint64_t seed = 43;
  double weight_decay = 0.0;
  /// Hyperparameters of the detector, including dropout p and ablation mode.
  ModelConfig model;
  /// When set, receives best.emoc (best validation loss so far), last.emoc
  /// (with Adam state) and history.tsv.
  std::filesystem::path checkpoint_dir;
  /// Workers for validation scoring.
  unsigned threads = 1;

  void validate() const;
};

/// Seed lists used per dataset: "2019la" {43, 44, 45}, "2021la" {43, 45, 456},
/// "2021df" {46, 47, 78}.
std::vector<std::uint64_t> seed_preset(const std::string& name);
std::vector<std::string> seed_preset_names();

struct EpochRecord {
  std::uint32_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  /// NaN when the validation split holds a single class.
  double val_eer = 0.0;
  double wall_seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> records;
  std::uint32_t best_epoch = 0;
  double best_val_loss = 0.0;

  /// `epoch train_loss val_loss val_eer` per line, after a `#` header.
  std::string to_text() const;
};

struct TrainResult {
  EmoAntiModel best_model;
  CheckpointMeta best_meta;
  TrainHistory history;
};

struct Evaluation {
  std::vector<Score> scores;
  double mean_loss = 0.0;
  double eer = 0.0;  // NaN for single-class data
};

/// Eval-mode, one utterance at a time, so results never depend on which
/// utterances share a batch.
Evaluation evaluate(EmoAntiModel& model, const Dataset& data, unsigned threads = 1);
std::vector<Score> score_dataset(EmoAntiModel& model, const Dataset& data, unsigned threads = 1);

/// Called after each epoch (for progress reporting).
using EpochCallback = std::function<void(const EpochRecord&)>;

/// Adam on padded, masked mini-batches reshuffled each epoch; keeps the model
/// of the epoch with strictly lowest validation loss. Deterministic in
/// `config.seed`.
TrainResult train(const TrainConfig& config, const Dataset& train_data, const Dataset& val_data,
                  const EpochCallback& on_epoch = {});
TrainResult train(const TrainConfig& config, const Manifest& train_manifest, const Manifest& val_manifest,
                  const EpochCallback& on_epoch = {});

}  // namespace emoanti
