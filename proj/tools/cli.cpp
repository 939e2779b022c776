#include "cli.hpp"

#include <CLI11.hpp>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <iomanip>
#include <json.hpp>
#include <ostream>
#include <sstream>

#include "emoanti/dataio.hpp"
#include "emoanti/errors.hpp"
#include "emoanti/metrics.hpp"
#include "emoanti/trainer.hpp"

#ifndef EMOANTI_VERSION
#define EMOANTI_VERSION "0.0.0"
#endif

namespace emoanti::cli {

namespace {

using json = nlohmann::ordered_json;

std::string shortest(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

void write_config(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

json model_json(const ModelConfig& c) {
  return json{{"input_channels", c.input_channels},
              {"input_layer_index", c.input_layer_index},
              {"layer_taps", c.layer_taps},
              {"d_hidden", c.d_hidden},
              {"attention_width", c.attention_width},
              {"classifier_width", c.classifier_width},
              {"dropout", c.dropout},
              {"ablation", to_string(c.ablation)},
              {"batchnorm_eps", c.batchnorm.eps},
              {"batchnorm_momentum", c.batchnorm.momentum}};
}

unsigned default_threads() {
  if (const char* env = std::getenv("EMOANTI_THREADS")) {
    unsigned v = 0;
    const auto [p, ec] = std::from_chars(env, env + std::strlen(env), v);
    if (ec == std::errc() && *p == '\0' && v > 0) return v;
  }
  return 1;
}

// ---- synth -----------------------------------------------------------------

struct SynthOptions {
  std::string out;
  std::uint64_t seed = 43;
  std::size_t n_train = 200;
  std::size_t n_val = 100;
  std::string preset = "high";
  double separation = std::numeric_limits<double>::quiet_NaN();
  std::size_t channels = 32;
  std::size_t layers = 3;
  std::size_t t_min = 24;
  std::size_t t_max = 40;
  double window_fraction = 0.25;
};

int run_synth(const SynthOptions& o, std::ostream& out) {
  SynthConfig cfg;
  cfg.seed = o.seed;
  cfg.channels = o.channels;
  cfg.layers = o.layers;
  cfg.t_min = o.t_min;
  cfg.t_max = o.t_max;
  cfg.window_fraction = o.window_fraction;
  cfg.separation = std::isnan(o.separation) ? (o.preset == "zero" ? kSeparationZero : kSeparationHigh) : o.separation;

  const fs::path dir(o.out);
  fs::create_directories(dir);
  SynthConfig train_cfg = cfg;
  train_cfg.n_per_class = o.n_train;
  SynthConfig val_cfg = cfg;
  val_cfg.n_per_class = o.n_val;
  const Manifest train = write_synth_split(train_cfg, 0, dir, "train");
  const Manifest val = write_synth_split(val_cfg, 1, dir, "val");
  write_keys(dir / "train.key", train);
  write_keys(dir / "val.key", val);

  write_config(dir / "synth.config.json",
               json{{"command", "synth"},
                    {"version", EMOANTI_VERSION},
                    {"seed", cfg.seed},
                    {"n_train_per_class", o.n_train},
                    {"n_val_per_class", o.n_val},
                    {"preset", std::isnan(o.separation) ? o.preset : "custom"},
                    {"separation", cfg.separation},
                    {"channels", cfg.channels},
                    {"layers", cfg.layers},
                    {"t_min", cfg.t_min},
                    {"t_max", cfg.t_max},
                    {"window_fraction", cfg.window_fraction},
                    {"outputs", {"train.tsv", "val.tsv", "train.key", "val.key"}}});
  out << "wrote " << train.size() << " train and " << val.size() << " val utterances to " << dir.string() << "\n";
  return kExitOk;
}

// ---- train -----------------------------------------------------------------

struct TrainOptions {
  std::string train_manifest;
  std::string val_manifest;
  std::string out;
  std::uint64_t seed = 43;
  std::string seed_preset;
  std::uint32_t epochs = 6;
  double lr = 1e-4;
  std::size_t batch_size = 32;
  double weight_decay = 0.0;
  std::int64_t layer_index = -1;
  std::vector<std::size_t> layer_taps;
  std::vector<std::size_t> d_hidden{256};
  std::size_t attention_width = 0;
  std::size_t classifier_width = 256;
  double dropout = 0.3;
  std::string ablation = "full";
  unsigned threads = 1;
  bool quiet = false;
};

int run_train(const TrainOptions& o, std::ostream& out) {
  const Manifest train_m = Manifest::load(o.train_manifest);
  const Manifest val_m = Manifest::load(o.val_manifest);
  if (train_m.size() == 0) throw InvalidArgument("training manifest is empty");
  if (val_m.size() == 0) throw InvalidArgument("validation manifest is empty");

  TrainConfig tc;
  tc.learning_rate = o.lr;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch_size;
  tc.weight_decay = o.weight_decay;
  tc.threads = o.threads;
  tc.model.input_channels = read_feature_header(train_m.entries.front().path).num_channels;
  tc.model.input_layer_index = o.layer_index;
  tc.model.layer_taps = o.layer_taps;
  for (std::size_t i = 0; i < kNumBlocks; ++i) tc.model.d_hidden[i] = o.d_hidden.size() == 1 ? o.d_hidden[0] : o.d_hidden[i];
  tc.model.attention_width = o.attention_width;
  tc.model.classifier_width = o.classifier_width;
  tc.model.dropout = o.dropout;
  tc.model.ablation = parse_ablation(o.ablation);

  const std::vector<std::uint64_t> seeds =
      o.seed_preset.empty() ? std::vector<std::uint64_t>{o.seed} : seed_preset(o.seed_preset);
  const Dataset train_data = load_dataset(train_m);
  const Dataset val_data = load_dataset(val_m);

  for (std::uint64_t seed : seeds) {
    tc.seed = seed;
    tc.checkpoint_dir = o.seed_preset.empty() ? fs::path(o.out) : fs::path(o.out) / ("seed" + std::to_string(seed));
    tc.validate();
    fs::create_directories(tc.checkpoint_dir);
    write_config(tc.checkpoint_dir / "train.config.json",
                 json{{"command", "train"},
                      {"version", EMOANTI_VERSION},
                      {"train_manifest", fs::absolute(o.train_manifest).lexically_normal().string()},
                      {"val_manifest", fs::absolute(o.val_manifest).lexically_normal().string()},
                      {"seed", seed},
                      {"seed_preset", o.seed_preset},
                      {"epochs", tc.epochs},
                      {"learning_rate", tc.learning_rate},
                      {"batch_size", tc.batch_size},
                      {"weight_decay", tc.weight_decay},
                      {"adam", {{"beta1", 0.9}, {"beta2", 0.999}, {"eps", 1e-8}}},
                      {"threads", tc.threads},
                      {"model", model_json(tc.model)},
                      {"outputs", {"best.emoc", "last.emoc", "history.tsv"}}});
    if (!o.quiet) out << "seed " << seed << ": training " << train_data.size() << " utterances\n";
    const TrainResult r = train(tc, train_data, val_data, [&](const EpochRecord& e) {
      if (o.quiet) return;
      out << "epoch " << e.epoch << "  train_loss " << fixed(e.train_loss, 6) << "  val_loss " << fixed(e.val_loss, 6)
          << "  val_eer " << fixed(e.val_eer, 4) << "  (" << fixed(e.wall_seconds, 1) << " s)\n"
          << std::flush;
    });
    out << "best epoch " << r.history.best_epoch << " val_loss " << fixed(r.history.best_val_loss, 6) << " -> "
        << (tc.checkpoint_dir / "best.emoc").string() << "\n";
  }
  return kExitOk;
}

// ---- score -----------------------------------------------------------------

struct ScoreOptions {
  std::string checkpoint;
  std::string manifest;
  std::string out;
  unsigned threads = 1;
};

int run_score(const ScoreOptions& o, std::ostream& out) {
  LoadedCheckpoint ck = load_checkpoint(o.checkpoint);
  const Manifest m = Manifest::load(o.manifest);
  const Dataset data = load_dataset(m);
  const std::vector<Score> scores = score_dataset(ck.model, data, o.threads);
  write_scores(o.out, scores);
  write_config(o.out + ".config.json",
               json{{"command", "score"},
                    {"version", EMOANTI_VERSION},
                    {"checkpoint", fs::absolute(o.checkpoint).lexically_normal().string()},
                    {"manifest", fs::absolute(o.manifest).lexically_normal().string()},
                    {"threads", o.threads},
                    {"checkpoint_seed", ck.meta.seed},
                    {"checkpoint_epoch", ck.meta.epoch},
                    {"model", model_json(ck.model.config())}});
  out << "scored " << scores.size() << " utterances (" << to_string(ck.model.config().ablation) << ") -> " << o.out
      << "\n";
  return kExitOk;
}

// ---- eval ------------------------------------------------------------------

struct EvalOptions {
  std::string scores;
  std::string key;
  std::string manifest;
  std::string tdcf_params;
  std::string tdcf_mode = "legacy";
  std::string report;
};

int run_eval(const EvalOptions& o, std::ostream& out) {
  const std::vector<Score> scores = read_scores(o.scores);
  std::map<std::string, TrialLabel> keys;
  if (!o.key.empty()) {
    keys = read_keys(o.key);
  } else {
    const Bytes b = read_file(o.manifest);
    for (const ManifestEntry& e : Manifest::parse(std::string(b.begin(), b.end()), fs::path(o.manifest).parent_path())
                                      .entries) {
      keys.emplace(e.utt_id, e.label);
    }
  }
  const std::vector<ScoreRecord> recs = join_scores(scores, keys);
  const TdcfParams params = o.tdcf_params.empty() ? TdcfParams::asvspoof2019_la() : TdcfParams::load(o.tdcf_params);
  const TdcfMode mode = parse_tdcf_mode(o.tdcf_mode);

  const EerResult eer = compute_eer(recs);
  const MinTdcfResult tdcf = compute_min_tdcf(recs, params, mode);
  std::size_t nb = 0;
  for (const ScoreRecord& r : recs) nb += r.label == TrialLabel::bonafide;

  out << "metric           value\n"
      << "---------------  ------------------------------\n"
      << "trials           " << recs.size() << " (" << nb << " bonafide, " << recs.size() - nb << " spoof)\n"
      << "EER              " << fixed(eer.eer, 4) << " (" << fixed(100.0 * eer.eer, 2) << " %)\n"
      << "EER threshold    " << fixed(eer.threshold, 6) << "\n"
      << "min t-DCF        " << fixed(tdcf.min_tdcf, 4) << " (" << to_string(mode) << ")\n"
      << "t-DCF threshold  " << (std::isfinite(tdcf.threshold) ? fixed(tdcf.threshold, 6) : shortest(tdcf.threshold))
      << "\n"
      << "C0 C1 C2         " << shortest(tdcf.coefficients.c0) << " " << shortest(tdcf.coefficients.c1) << " "
      << shortest(tdcf.coefficients.c2) << "\n"
      << "EER=" << shortest(eer.eer) << " MIN_TDCF=" << shortest(tdcf.min_tdcf) << "\n";

  const std::string report = o.report.empty() ? o.scores + ".eval.json" : o.report;
  write_config(report, json{{"command", "eval"},
                            {"version", EMOANTI_VERSION},
                            {"scores", fs::absolute(o.scores).lexically_normal().string()},
                            {"key", o.key.empty() ? json(nullptr) : json(fs::absolute(o.key).lexically_normal().string())},
                            {"manifest", o.manifest.empty() ? json(nullptr)
                                                            : json(fs::absolute(o.manifest).lexically_normal().string())},
                            {"tdcf_params", o.tdcf_params.empty() ? json("preset:asvspoof2019_la") : json(o.tdcf_params)},
                            {"tdcf_mode", to_string(mode)},
                            {"coefficients",
                             {{"C0", tdcf.coefficients.c0}, {"C1", tdcf.coefficients.c1}, {"C2", tdcf.coefficients.c2}}},
                            {"trials", recs.size()},
                            {"eer", eer.eer},
                            {"eer_threshold", eer.threshold},
                            {"min_tdcf", tdcf.min_tdcf},
                            {"min_tdcf_threshold", std::isfinite(tdcf.threshold) ? json(tdcf.threshold) : json(nullptr)}});
  return kExitOk;
}

// ---- inspect ---------------------------------------------------------------

int run_inspect(const std::vector<std::string>& paths, std::ostream& out) {
  for (const std::string& p : paths) {
    const Bytes b = read_file(p);
    const std::string magic = b.size() >= 4 ? std::string(b.begin(), b.begin() + 4) : std::string();
    if (magic == "EMOF") {
      const FeatureHeader h = decode_feature_header(b);
      decode_features(b);  // full validation: sizes and finiteness
      out << p << ": feature file v" << h.version << "\n"
          << "  utt_id  " << h.utt_id << "\n"
          << "  L T C   " << h.num_layers << " " << h.num_frames << " " << h.num_channels << "\n";
    } else if (magic == "EMOC") {
      const CheckpointHeader h = decode_checkpoint_header(b);
      out << p << ": checkpoint v" << h.version << "\n"
          << "  seed " << h.meta.seed << "  epoch " << h.meta.epoch << "  val_loss " << shortest(h.meta.val_loss) << "\n"
          << "  tensors " << h.num_tensors << "  values " << h.num_values << "  adam " << (h.has_adam ? "yes" : "no")
          << "\n"
          << "  model " << model_json(h.config).dump() << "\n";
    } else {
      throw BadMagicError(p + ": not a feature file or checkpoint");
    }
  }
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"EmoAnti audio anti-spoofing detector: synthetic data, training, scoring and evaluation"};
  app.set_version_flag("--version", std::string("emoanti ") + EMOANTI_VERSION);
  app.require_subcommand(1);
  const unsigned threads = default_threads();

  SynthOptions so;
  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic train/val dataset");
  synth->add_option("--out", so.out, "Output directory")->required();
  synth->add_option("--seed", so.seed, "Generator seed")->capture_default_str();
  synth->add_option("--n-train", so.n_train, "Training utterances per class")->capture_default_str();
  synth->add_option("--n-val", so.n_val, "Validation utterances per class")->capture_default_str();
  synth->add_option("--preset", so.preset, "Separation preset")
      ->check(CLI::IsMember({"high", "zero"}))
      ->capture_default_str();
  synth->add_option("--separation", so.separation, "Explicit separation amplitude (overrides --preset)")
      ->check(CLI::NonNegativeNumber);
  synth->add_option("--channels", so.channels, "Channels C")->capture_default_str();
  synth->add_option("--layers", so.layers, "Layers L")->capture_default_str();
  synth->add_option("--t-min", so.t_min, "Shortest utterance in frames")->capture_default_str();
  synth->add_option("--t-max", so.t_max, "Longest utterance in frames")->capture_default_str();
  synth->add_option("--window-fraction", so.window_fraction, "Spoof window length / utterance length")
      ->capture_default_str();

  TrainOptions to;
  to.threads = threads;
  CLI::App* tr = app.add_subcommand("train", "Train a detector from manifests");
  tr->add_option("--train", to.train_manifest, "Training manifest")->required()->check(CLI::ExistingFile);
  tr->add_option("--val", to.val_manifest, "Validation manifest")->required()->check(CLI::ExistingFile);
  tr->add_option("--out", to.out, "Output directory for checkpoints and history")->required();
  auto* seed_opt = tr->add_option("--seed", to.seed, "Random seed")->capture_default_str();
  tr->add_option("--seed-preset", to.seed_preset, "Train once per seed of a named list")
      ->check(CLI::IsMember(seed_preset_names()))
      ->excludes(seed_opt);
  tr->add_option("--epochs", to.epochs, "Epochs")->capture_default_str()->check(CLI::PositiveNumber);
  tr->add_option("--lr", to.lr, "Adam learning rate")->capture_default_str()->check(CLI::PositiveNumber);
  tr->add_option("--batch-size", to.batch_size, "Mini-batch size")->capture_default_str()->check(CLI::PositiveNumber);
  tr->add_option("--weight-decay", to.weight_decay, "L2 weight decay")->capture_default_str();
  tr->add_option("--layer-index", to.layer_index, "Input layer; negative counts from the last")->capture_default_str();
  tr->add_option("--layer-taps", to.layer_taps, "Sum these layers instead of --layer-index");
  tr->add_option("--d-hidden", to.d_hidden, "Block widths: one value or four")->expected(1, 4)->capture_default_str();
  tr->add_option("--attention-width", to.attention_width, "Attention hidden width (0: half the block width)")
      ->capture_default_str();
  tr->add_option("--classifier-width", to.classifier_width, "Classifier hidden width")->capture_default_str();
  tr->add_option("--dropout", to.dropout, "Classifier dropout p")->capture_default_str()->check(CLI::Range(0.0, 0.999));
  tr->add_option("--ablation", to.ablation, "Model variant")
      ->check(CLI::IsMember({"full", "no_crfe"}))
      ->capture_default_str();
  tr->add_option("--threads", to.threads, "Validation workers (default: $EMOANTI_THREADS or 1)")
      ->check(CLI::PositiveNumber);
  tr->add_flag("--quiet", to.quiet, "Only print the final summary");

  ScoreOptions sc;
  sc.threads = threads;
  CLI::App* score = app.add_subcommand("score", "Score a manifest with a checkpoint");
  score->add_option("--checkpoint", sc.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  score->add_option("--manifest", sc.manifest, "Manifest to score")->required()->check(CLI::ExistingFile);
  score->add_option("--out", sc.out, "Score file to write")->required();
  score->add_option("--threads", sc.threads, "Scoring workers (default: $EMOANTI_THREADS or 1)")
      ->check(CLI::PositiveNumber);

  EvalOptions ev;
  CLI::App* eval = app.add_subcommand("eval", "EER and min t-DCF of a score file");
  eval->add_option("--scores", ev.scores, "Score file")->required()->check(CLI::ExistingFile);
  auto* key_opt = eval->add_option("--key", ev.key, "Key file (utt_id label)")->check(CLI::ExistingFile);
  auto* man_opt =
      eval->add_option("--manifest", ev.manifest, "Manifest used as the key")->check(CLI::ExistingFile)->excludes(key_opt);
  eval->add_option("--tdcf-params", ev.tdcf_params, "t-DCF params file (default: ASVspoof 2019 LA preset)")
      ->check(CLI::ExistingFile);
  eval->add_option("--tdcf-mode", ev.tdcf_mode, "t-DCF coefficient form")
      ->check(CLI::IsMember({"legacy", "revised"}))
      ->capture_default_str();
  eval->add_option("--report", ev.report, "JSON report path (default: <scores>.eval.json)");

  std::vector<std::string> inspect_paths;
  CLI::App* inspect = app.add_subcommand("inspect", "Print feature file or checkpoint headers");
  inspect->add_option("files", inspect_paths, "Files to inspect")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
    if (eval->parsed() && key_opt->count() == 0 && man_opt->count() == 0) {
      throw CLI::RequiredError("--key or --manifest");
    }
    if (tr->parsed() && to.d_hidden.size() != 1 && to.d_hidden.size() != kNumBlocks) {
      throw CLI::ValidationError("--d-hidden", "expects one value or four");
    }
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (synth->parsed()) return run_synth(so, out);
    if (tr->parsed()) return run_train(to, out);
    if (score->parsed()) return run_score(sc, out);
    if (eval->parsed()) return run_eval(ev, out);
    if (inspect->parsed()) return run_inspect(inspect_paths, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace emoanti::cli
