#include "emoanti/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "emoanti/errors.hpp"

namespace emoanti {

std::string to_string(Ablation a) { return a == Ablation::full ? "full" : "no_crfe"; }

Ablation parse_ablation(const std::string& s) {
  if (s == "full") return Ablation::full;
  if (s == "no_crfe") return Ablation::no_crfe;
  throw InvalidArgument("unknown ablation mode '" + s + "' (expected full or no_crfe)");
}

void LayerFeatures::validate() const {
  if (layers.rank() != 3) {
    throw ShapeError("features of '" + utt_id + "' must be [L x T x C], got " + shape_to_string(layers.shape()));
  }
  if (!layers.all_finite()) throw NonFiniteError("features of '" + utt_id + "' contain non-finite values");
}

void ModelConfig::validate() const {
  if (input_channels == 0) throw InvalidArgument("input_channels must be positive");
  for (std::size_t d : d_hidden) {
    if (d == 0) throw InvalidArgument("every d_hidden must be positive");
  }
  if (classifier_width == 0) throw InvalidArgument("classifier_width must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidArgument("dropout must lie in [0, 1)");
  if (!(batchnorm.eps > 0.0)) throw InvalidArgument("batchnorm eps must be positive");
  if (!(batchnorm.momentum >= 0.0 && batchnorm.momentum <= 1.0)) {
    throw InvalidArgument("batchnorm momentum must lie in [0, 1]");
  }
}

std::size_t ModelConfig::fused_width() const {
  if (ablation == Ablation::no_crfe) return input_channels;
  std::size_t total = 0;
  for (std::size_t d : d_hidden) total += d;
  return total;
}

std::size_t ModelConfig::attention_width_for(std::size_t attended) const {
  if (attention_width > 0) return attention_width;
  return std::max<std::size_t>(1, attended / 2);
}

ResidualBlock::ResidualBlock(std::size_t in, std::size_t hidden)
    : d_in(in),
      d_hidden(hidden),
      conv1_weight("conv1.weight", Tensor({hidden, in, 3})),
      conv1_bias("conv1.bias", Tensor({hidden})),
      bn1_gamma("bn1.gamma", Tensor({hidden}, 1.0)),
      bn1_beta("bn1.beta", Tensor({hidden})),
      conv2_weight("conv2.weight", Tensor({hidden, hidden, 3})),
      conv2_bias("conv2.bias", Tensor({hidden})),
      bn2_gamma("bn2.gamma", Tensor({hidden}, 1.0)),
      bn2_beta("bn2.beta", Tensor({hidden})),
      bn1_stats(BatchNormStats::fresh(hidden)),
      bn2_stats(BatchNormStats::fresh(hidden)) {
  if (in != hidden) {
    proj_weight.emplace("proj.weight", Tensor({hidden, in, 1}));
    proj_bias.emplace("proj.bias", Tensor({hidden}));
  }
}

AttentionSubnet::AttentionSubnet(std::size_t in, std::size_t width)
    : w1("w1", Tensor({width, in})), b1("b1", Tensor({width})), w2("w2", Tensor({1, width})), b2("b2", Tensor({1})) {}

ClassifierHead::ClassifierHead(std::size_t in, std::size_t width, double p)
    : w1("w1", Tensor({width, in})), b1("b1", Tensor({width})), w2("w2", Tensor({2, width})), b2("b2", Tensor({2})),
      dropout(p) {}

EmoAntiModel::EmoAntiModel(ModelConfig config, std::uint64_t init_seed) : config_(std::move(config)) {
  config_.validate();
  if (config_.ablation == Ablation::full) {
    std::size_t d_in = config_.input_channels;
    for (std::size_t i = 0; i < kNumBlocks; ++i) {
      blocks_.emplace_back(d_in, config_.d_hidden[i]);
      attention_.emplace_back(config_.d_hidden[i], config_.attention_width_for(config_.d_hidden[i]));
      d_in = config_.d_hidden[i];
    }
  } else {
    attention_.emplace_back(config_.input_channels, config_.attention_width_for(config_.input_channels));
  }
  head_ = ClassifierHead(config_.fused_width(), config_.classifier_width, config_.dropout);

  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    ResidualBlock& b = blocks_[i];
    for (Parameter* p : {&b.conv1_weight, &b.conv1_bias, &b.bn1_gamma, &b.bn1_beta, &b.conv2_weight, &b.conv2_bias,
                         &b.bn2_gamma, &b.bn2_beta}) {
      p->name = "block" + std::to_string(i) + "." + p->name;
    }
    if (b.has_projection()) {
      b.proj_weight->name = "block" + std::to_string(i) + "." + b.proj_weight->name;
      b.proj_bias->name = "block" + std::to_string(i) + "." + b.proj_bias->name;
    }
  }
  for (std::size_t i = 0; i < attention_.size(); ++i) {
    for (Parameter* p : {&attention_[i].w1, &attention_[i].b1, &attention_[i].w2, &attention_[i].b2}) {
      p->name = "attention" + std::to_string(i) + "." + p->name;
    }
  }
  for (Parameter* p : {&head_.w1, &head_.b1, &head_.w2, &head_.b2}) p->name = "head." + p->name;

  initialize(init_seed);
}

void EmoAntiModel::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  // Fan-in scaled normal draws; gain sqrt(2) ahead of rectifiers.
  auto draw = [&](Parameter& p, std::size_t fan_in, double gain) {
    std::normal_distribution<double> dist(0.0, gain / std::sqrt(static_cast<double>(fan_in)));
    for (double& v : p.value.data()) v = dist(rng);
    p.zero_grad();
  };
  const double relu_gain = std::sqrt(2.0);
  for (ResidualBlock& b : blocks_) {
    draw(b.conv1_weight, b.d_in * 3, relu_gain);
    draw(b.conv2_weight, b.d_hidden * 3, relu_gain);
    if (b.has_projection()) draw(*b.proj_weight, b.d_in, 1.0);
  }
  for (AttentionSubnet& a : attention_) {
    draw(a.w1, a.w1.value.dim(1), relu_gain);
    draw(a.w2, a.w2.value.dim(1), 1.0);
  }
  draw(head_.w1, head_.w1.value.dim(1), relu_gain);
  draw(head_.w2, head_.w2.value.dim(1), 1.0);
}

std::vector<Parameter*> EmoAntiModel::parameters() {
  std::vector<Parameter*> out;
  for (ResidualBlock& b : blocks_) {
    for (Parameter* p : {&b.conv1_weight, &b.conv1_bias, &b.bn1_gamma, &b.bn1_beta, &b.conv2_weight, &b.conv2_bias,
                         &b.bn2_gamma, &b.bn2_beta}) {
      out.push_back(p);
    }
    if (b.has_projection()) {
      out.push_back(&*b.proj_weight);
      out.push_back(&*b.proj_bias);
    }
  }
  for (AttentionSubnet& a : attention_) {
    for (Parameter* p : {&a.w1, &a.b1, &a.w2, &a.b2}) out.push_back(p);
  }
  for (Parameter* p : {&head_.w1, &head_.b1, &head_.w2, &head_.b2}) out.push_back(p);
  return out;
}

std::vector<std::pair<std::string, BatchNormStats*>> EmoAntiModel::buffers() {
  std::vector<std::pair<std::string, BatchNormStats*>> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    out.emplace_back("block" + std::to_string(i) + ".bn1", &blocks_[i].bn1_stats);
    out.emplace_back("block" + std::to_string(i) + ".bn2", &blocks_[i].bn2_stats);
  }
  return out;
}

std::size_t EmoAntiModel::parameter_count() {
  std::size_t n = 0;
  for (Parameter* p : parameters()) n += p->value.size();
  return n;
}

void EmoAntiModel::zero_grad() {
  for (Parameter* p : parameters()) p->zero_grad();
}

Tensor select_input(const LayerFeatures& features, const ModelConfig& config) {
  features.validate();
  const std::size_t L = features.num_layers(), T = features.num_frames(), C = features.num_channels();
  if (C != config.input_channels) {
    throw ShapeError("utterance '" + features.utt_id + "' has " + std::to_string(C) + " channels, model expects " +
                     std::to_string(config.input_channels));
  }
  std::vector<std::size_t> taps = config.layer_taps;
  if (taps.empty()) {
    const std::int64_t idx = config.input_layer_index < 0 ? static_cast<std::int64_t>(L) + config.input_layer_index
                                                         : config.input_layer_index;
    if (idx < 0 || idx >= static_cast<std::int64_t>(L)) {
      throw InvalidArgument("layer index " + std::to_string(config.input_layer_index) + " out of range for " +
                            std::to_string(L) + " exported layers");
    }
    taps.push_back(static_cast<std::size_t>(idx));
  }
  Tensor out({C, T});
  for (std::size_t layer : taps) {
    if (layer >= L) {
      throw InvalidArgument("layer tap " + std::to_string(layer) + " out of range for " + std::to_string(L) +
                            " exported layers");
    }
    const double* src = features.layers.raw() + layer * T * C;
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t c = 0; c < C; ++c) out.at(c, t) += src[t * C + c];
    }
  }
  return out;
}

Batch make_batch(std::span<const LayerFeatures* const> utterances, const ModelConfig& config,
                 std::span<const int> labels) {
  if (utterances.empty()) throw InvalidArgument("cannot build an empty batch");
  if (!labels.empty() && labels.size() != utterances.size()) {
    throw ShapeError("batch has " + std::to_string(utterances.size()) + " utterances but " +
                     std::to_string(labels.size()) + " labels");
  }
  std::vector<Tensor> inputs;
  std::size_t t_max = 0;
  for (const LayerFeatures* u : utterances) {
    inputs.push_back(select_input(*u, config));
    t_max = std::max(t_max, inputs.back().dim(1));
  }
  const std::size_t B = inputs.size(), C = config.input_channels;
  Batch batch{Tensor({B, C, t_max}), std::vector<std::uint8_t>(B * t_max, 0), {labels.begin(), labels.end()}, {}};
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t T = inputs[b].dim(1);
    for (std::size_t c = 0; c < C; ++c) {
      std::copy_n(inputs[b].raw() + c * T, T, batch.input.raw() + (b * C + c) * t_max);
    }
    std::fill_n(batch.mask.begin() + static_cast<std::ptrdiff_t>(b * t_max), T, std::uint8_t{1});
    batch.utt_ids.push_back(utterances[b]->utt_id);
  }
  return batch;
}

BlockActivation residual_block_forward(Var H, ResidualBlock& block, Mode mode, const BatchNormOptions& bn,
                                       std::span<const std::uint8_t> mask) {
  Tape& tape = *H.tape;
  const Shape& s = H.shape();
  if (s.size() < 2 || s[s.size() - 2] != block.d_in) {
    throw ShapeError("residual block expects " + std::to_string(block.d_in) + " input channels, got shape " +
                     shape_to_string(s));
  }
  BlockActivation act;
  act.h_conv1 = ops::batchnorm1d(
      ops::conv1d(H, tape.param(block.conv1_weight), tape.param(block.conv1_bias), 1), tape.param(block.bn1_gamma),
      tape.param(block.bn1_beta), mode, block.bn1_stats, bn, mask);
  act.h_conv2 = ops::batchnorm1d(
      ops::conv1d(ops::relu(act.h_conv1), tape.param(block.conv2_weight), tape.param(block.conv2_bias), 1),
      tape.param(block.bn2_gamma), tape.param(block.bn2_beta), mode, block.bn2_stats, bn, mask);
  act.h_residual =
      block.has_projection() ? ops::conv1d(H, tape.param(*block.proj_weight), tape.param(*block.proj_bias), 0) : H;
  act.f = ops::relu(ops::add(act.h_conv2, act.h_residual));
  if (std::find(mask.begin(), mask.end(), std::uint8_t{0}) != mask.end()) act.f = ops::mask_frames(act.f, mask);
  return act;
}

std::vector<Var> crfe_forward(Var H_in, EmoAntiModel& model, Mode mode, std::span<const std::uint8_t> mask) {
  if (model.config().ablation != Ablation::full) throw StateError("crfe_forward called on a no_crfe model");
  std::vector<Var> outputs;
  Var x = H_in;
  for (ResidualBlock& block : model.blocks()) {
    x = residual_block_forward(x, block, mode, model.config().batchnorm, mask).f;
    outputs.push_back(ops::transpose_last2(x));
  }
  return outputs;
}

AttentionOutput temporal_attention(Var f, AttentionSubnet& subnet, std::span<const std::uint8_t> mask) {
  Tape& tape = *f.tape;
  const Shape s = f.shape();
  const bool unbatched = s.size() == 2;
  if (!unbatched && s.size() != 3) {
    throw ShapeError("temporal_attention expects [T x d] or [B x T x d], got " + shape_to_string(s));
  }
  Var fb = unbatched ? ops::reshape(f, {1, s[0], s[1]}) : f;
  const std::size_t B = fb.shape()[0], T = fb.shape()[1];
  Var hidden = ops::relu(ops::affine(fb, tape.param(subnet.w1), tape.param(subnet.b1)));
  Var scores = ops::reshape(ops::affine(hidden, tape.param(subnet.w2), tape.param(subnet.b2)), {B, T});
  Var weights = ops::softmax_over_time(scores, mask);
  Var pooled = ops::weighted_time_sum(weights, fb);
  if (unbatched) {
    return {ops::reshape(pooled, {s[1]}), ops::reshape(weights, {T}), ops::reshape(scores, {T})};
  }
  return {pooled, weights, scores};
}

Var fuse(std::span<const Var> pooled) { return ops::concat_last(pooled); }

Var classify(Var fused, ClassifierHead& head, Mode mode, std::uint64_t dropout_seed) {
  Tape& tape = *fused.tape;
  const std::size_t expected = head.w1.value.dim(1);
  if (fused.shape().back() != expected) {
    throw ShapeError("classifier expects fused width " + std::to_string(expected) + ", got " +
                     shape_to_string(fused.shape()));
  }
  Var h = ops::affine(fused, tape.param(head.w1), tape.param(head.b1));
  h = ops::relu(ops::dropout(h, head.dropout, mode, dropout_seed));
  return ops::affine(h, tape.param(head.w2), tape.param(head.b2));
}

double cm_score(double bonafide_logit, double spoof_logit) { return bonafide_logit - spoof_logit; }

Var EmoAntiModel::forward(Tape& tape, const Batch& batch, Mode mode, std::uint64_t dropout_seed,
                          FusionState* fusion) {
  Var x = tape.constant(batch.input);
  std::vector<Var> frames;
  if (config_.ablation == Ablation::full) {
    frames = crfe_forward(x, *this, mode, batch.mask);
  } else {
    frames.push_back(ops::transpose_last2(x));
  }
  std::vector<Var> pooled;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    AttentionOutput att = temporal_attention(frames[i], attention_[i], batch.mask);
    pooled.push_back(att.pooled);
    if (fusion != nullptr) {
      fusion->scores.push_back(att.scores.value());
      fusion->weights.push_back(att.weights.value());
      fusion->pooled.push_back(att.pooled.value());
    }
  }
  Var fused = fuse(pooled);
  if (fusion != nullptr) fusion->fused = fused.value();
  return classify(fused, head_, mode, dropout_seed);
}

Prediction forward(const LayerFeatures& features, EmoAntiModel& model, Mode mode, std::uint64_t dropout_seed) {
  const LayerFeatures* one[] = {&features};
  const Batch batch = make_batch(one, model.config());
  Tape tape;
  const Tensor logits = model.forward(tape, batch, mode, dropout_seed).value();
  return {logits.reshaped({2}), cm_score(logits[0], logits[1])};
}

}  // namespace emoanti
