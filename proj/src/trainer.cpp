#include "emoanti/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <thread>

#include "emoanti/errors.hpp"
#include "emoanti/metrics.hpp"

namespace emoanti {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t purpose, std::uint64_t a = 0, std::uint64_t b = 0) {
  return splitmix(splitmix(splitmix(splitmix(seed) ^ purpose) ^ a) ^ b);
}

enum Purpose : std::uint64_t { kInit = 1, kShuffle = 2, kDropout = 3 };

std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

Dataset load_dataset(const Manifest& manifest) {
  Dataset out;
  out.reserve(manifest.size());
  for (const ManifestEntry& e : manifest.entries) {
    LayerFeatures f = read_features(e.path);
    if (f.utt_id != e.utt_id) {
      throw FormatError("feature file '" + e.path.string() + "' holds utterance '" + f.utt_id + "', manifest says '" +
                        e.utt_id + "'");
    }
    out.push_back({std::move(f), e.label});
  }
  return out;
}

Dataset to_dataset(std::vector<SynthUtterance> utterances) {
  Dataset out;
  out.reserve(utterances.size());
  for (SynthUtterance& u : utterances) out.push_back({std::move(u.features), u.label});
  return out;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw InvalidArgument("learning rate must be > 0");
  if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
  if (batch_size < 1) throw InvalidArgument("batch size must be >= 1");
  if (!(weight_decay >= 0.0)) throw InvalidArgument("weight decay must be >= 0");
  model.validate();
}

std::vector<std::uint64_t> seed_preset(const std::string& name) {
  static const std::map<std::string, std::vector<std::uint64_t>> presets{
      {"2019la", {43, 44, 45}}, {"2021la", {43, 45, 456}}, {"2021df", {46, 47, 78}}};
  auto it = presets.find(name);
  if (it == presets.end()) throw InvalidArgument("unknown seed preset '" + name + "'");
  return it->second;
}

std::vector<std::string> seed_preset_names() { return {"2019la", "2021la", "2021df"}; }

std::string TrainHistory::to_text() const {
  std::string s = "# epoch train_loss val_loss val_eer\n";
  for (const EpochRecord& r : records) {
    s += std::to_string(r.epoch) + ' ' + fmt(r.train_loss) + ' ' + fmt(r.val_loss) + ' ' + fmt(r.val_eer) + '\n';
  }
  return s;
}

namespace {

struct UtteranceResult {
  double score = 0.0;
  double loss = 0.0;
};

UtteranceResult eval_one(EmoAntiModel& model, const LabeledUtterance& u) {
  const LayerFeatures* one[] = {&u.features};
  const int label = class_index(u.label);
  const Batch batch = make_batch(one, model.config(), std::span<const int>(&label, 1));
  Tape tape;
  Var logits = model.forward(tape, batch, Mode::eval);
  const Tensor& l = logits.value();
  const double loss = ops::cross_entropy(logits, batch.labels).value()[0];
  return {cm_score(l[0], l[1]), loss};
}

std::vector<UtteranceResult> eval_all(EmoAntiModel& model, const Dataset& data, unsigned threads) {
  std::vector<UtteranceResult> out(data.size());
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, data.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < data.size(); ++i) out[i] = eval_one(model, data[i]);
    return out;
  }
  // Eval mode reads parameters and running statistics only; each worker owns
  // its tape and writes disjoint slots.
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < data.size(); i += workers) out[i] = eval_one(model, data[i]);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (std::thread& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

bool has_both_classes(const Dataset& data) {
  bool b = false, s = false;
  for (const LabeledUtterance& u : data) (u.label == TrialLabel::bonafide ? b : s) = true;
  return b && s;
}

}  // namespace

Evaluation evaluate(EmoAntiModel& model, const Dataset& data, unsigned threads) {
  if (data.empty()) throw InvalidArgument("cannot evaluate an empty dataset");
  const std::vector<UtteranceResult> res = eval_all(model, data, threads);
  Evaluation ev;
  std::vector<ScoreRecord> recs;
  for (std::size_t i = 0; i < data.size(); ++i) {
    ev.scores.push_back({data[i].features.utt_id, res[i].score});
    recs.push_back({data[i].features.utt_id, res[i].score, data[i].label});
    ev.mean_loss += res[i].loss;
  }
  ev.mean_loss /= static_cast<double>(data.size());
  ev.eer = has_both_classes(data) ? compute_eer(recs).eer : std::numeric_limits<double>::quiet_NaN();
  return ev;
}

std::vector<Score> score_dataset(EmoAntiModel& model, const Dataset& data, unsigned threads) {
  const std::vector<UtteranceResult> res = eval_all(model, data, threads);
  std::vector<Score> out;
  out.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) out.push_back({data[i].features.utt_id, res[i].score});
  return out;
}

TrainResult train(const TrainConfig& config, const Dataset& train_data, const Dataset& val_data,
                  const EpochCallback& on_epoch) {
  config.validate();
  if (train_data.empty()) throw InvalidArgument("training set is empty");
  if (val_data.empty()) throw InvalidArgument("validation set is empty");
  if (!has_both_classes(train_data)) throw InvalidArgument("training set must contain both bonafide and spoof");
  {
    std::map<std::string, int> ids;
    for (const LabeledUtterance& u : train_data) {
      if (ids[u.features.utt_id]++) throw InvalidArgument("duplicate training utt_id '" + u.features.utt_id + "'");
    }
  }
  if (!config.checkpoint_dir.empty()) fs::create_directories(config.checkpoint_dir);

  EmoAntiModel model(config.model, derive_seed(config.seed, kInit));
  std::vector<Parameter*> params = model.parameters();
  AdamState adam = AdamState::for_parameters(params);

  std::vector<std::size_t> order(train_data.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result{model, CheckpointMeta{}, TrainHistory{}};
  bool have_best = false;

  for (std::uint32_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 shuffle_rng(derive_seed(config.seed, kShuffle, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    std::size_t step = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++step) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<const LayerFeatures*> utts;
      std::vector<int> labels;
      for (std::size_t k = start; k < end; ++k) {
        utts.push_back(&train_data[order[k]].features);
        labels.push_back(class_index(train_data[order[k]].label));
      }
      const Batch batch = make_batch(utts, config.model, labels);

      Tape tape;
      model.zero_grad();
      Var logits = model.forward(tape, batch, Mode::train, derive_seed(config.seed, kDropout, epoch, step));
      Var loss = ops::cross_entropy(logits, batch.labels);
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) {
        throw NonFiniteError("non-finite training loss at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(step));
      }
      tape.backward(loss);
      try {
        adam_step(params, adam, config.learning_rate, config.weight_decay);
      } catch (const NonFiniteError& e) {
        throw NonFiniteError("epoch " + std::to_string(epoch) + " aborted at step " + std::to_string(step) + ": " +
                             e.what());
      }
      loss_sum += lv * static_cast<double>(end - start);
    }

    const Evaluation val = evaluate(model, val_data, config.threads);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.val_loss = val.mean_loss;
    rec.val_eer = val.eer;

    if (!have_best || rec.val_loss < result.history.best_val_loss) {
      have_best = true;
      result.best_model = model;
      result.best_meta = CheckpointMeta{config.seed, epoch, rec.val_loss};
      result.history.best_epoch = epoch;
      result.history.best_val_loss = rec.val_loss;
      if (!config.checkpoint_dir.empty()) {
        save_checkpoint(config.checkpoint_dir / "best.emoc", model, result.best_meta);
      }
    }
    if (!config.checkpoint_dir.empty()) {
      save_checkpoint(config.checkpoint_dir / "last.emoc", model, CheckpointMeta{config.seed, epoch, rec.val_loss},
                      &adam);
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.records.push_back(rec);
    if (!config.checkpoint_dir.empty()) {
      write_file_atomic(config.checkpoint_dir / "history.tsv", result.history.to_text());
    }
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

TrainResult train(const TrainConfig& config, const Manifest& train_manifest, const Manifest& val_manifest,
                  const EpochCallback& on_epoch) {
  if (train_manifest.size() == 0) throw InvalidArgument("training manifest is empty");
  if (train_manifest.count(TrialLabel::bonafide) == 0 || train_manifest.count(TrialLabel::spoof) == 0) {
    throw InvalidArgument("training manifest must contain both bonafide and spoof");
  }
  return train(config, load_dataset(train_manifest), load_dataset(val_manifest), on_epoch);
}

}  // namespace emoanti
