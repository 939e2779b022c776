#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "emoanti/autograd.hpp"
#include "emoanti/ops.hpp"

namespace emoanti {

enum class Ablation { full, no_crfe };

std::string to_string(Ablation a);
Ablation parse_ablation(const std::string& s);

inline constexpr std::size_t kNumBlocks = 4;
inline constexpr int kBonafide = 0;
inline constexpr int kSpoof = 1;

/// Hidden-state stack of one utterance: layers is [L x T x C].
struct LayerFeatures {
  std::string utt_id;
  Tensor layers;

  std::size_t num_layers() const { return layers.dim(0); }
  std::size_t num_frames() const { return layers.dim(1); }
  std::size_t num_channels() const { return layers.dim(2); }

  /// Rank 3 and all values finite.
  void validate() const;
};

struct ModelConfig {
  std::size_t input_channels = 1024;
  /// Layer feeding block 1; negative counts from the end (-1 = final layer).
  std::int64_t input_layer_index = -1;
  /// When non-empty, block 1 consumes the sum of these layers instead.
  std::vector<std::size_t> layer_taps;
  std::array<std::size_t, kNumBlocks> d_hidden{256, 256, 256, 256};
  /// Width of the attention subnet's hidden layer; 0 means half the attended width.
  std::size_t attention_width = 0;
  std::size_t classifier_width = 256;
  double dropout = 0.3;
  Ablation ablation = Ablation::full;
  BatchNormOptions batchnorm;

  void validate() const;
  /// Concatenated pooled width fed to the classifier.
  std::size_t fused_width() const;
  std::size_t attention_width_for(std::size_t attended) const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct ResidualBlock {
  std::size_t d_in = 0;
  std::size_t d_hidden = 0;
  Parameter conv1_weight, conv1_bias, bn1_gamma, bn1_beta;
  Parameter conv2_weight, conv2_bias, bn2_gamma, bn2_beta;
  BatchNormStats bn1_stats, bn2_stats;
  /// 1x1 projection on the residual path; present iff d_in != d_hidden.
  std::optional<Parameter> proj_weight, proj_bias;

  ResidualBlock() = default;
  ResidualBlock(std::size_t in, std::size_t hidden);
  bool has_projection() const { return proj_weight.has_value(); }
};

struct AttentionSubnet {
  Parameter w1, b1, w2, b2;

  AttentionSubnet() = default;
  AttentionSubnet(std::size_t in, std::size_t width);
};

struct ClassifierHead {
  Parameter w1, b1, w2, b2;
  double dropout = 0.0;

  ClassifierHead() = default;
  ClassifierHead(std::size_t in, std::size_t width, double p);
};

/// Intermediate tensors of one block, channel-major [B x d x T].
struct BlockActivation {
  Var h_conv1, h_conv2, h_residual, f;
};

/// Per-block attention scores, weights and pooled vectors of one forward pass.
struct FusionState {
  std::vector<Tensor> scores;   // [B x T] per block
  std::vector<Tensor> weights;  // [B x T] per block
  std::vector<Tensor> pooled;   // [B x d_i] per block
  Tensor fused;                 // [B x D_total]
};

/// Padded, channel-major model input for a set of utterances.
struct Batch {
  Tensor input;                     // [B x C x T_max]
  std::vector<std::uint8_t> mask;   // [B x T_max], 1 = real frame
  std::vector<int> labels;          // empty when unlabeled
  std::vector<std::string> utt_ids;

  std::size_t size() const { return input.dim(0); }
};

/// The selected (or tap-summed) layer of one utterance as [C x T].
Tensor select_input(const LayerFeatures& features, const ModelConfig& config);

/// Zero-pads to the longest utterance and builds the frame mask.
Batch make_batch(std::span<const LayerFeatures* const> utterances, const ModelConfig& config,
                 std::span<const int> labels = {});

class EmoAntiModel {
 public:
  EmoAntiModel(ModelConfig config, std::uint64_t init_seed);

  const ModelConfig& config() const { return config_; }

  std::vector<ResidualBlock>& blocks() { return blocks_; }
  const std::vector<ResidualBlock>& blocks() const { return blocks_; }
  std::vector<AttentionSubnet>& attention() { return attention_; }
  const std::vector<AttentionSubnet>& attention() const { return attention_; }
  ClassifierHead& head() { return head_; }
  const ClassifierHead& head() const { return head_; }

  /// Every learnable parameter in a fixed order.
  std::vector<Parameter*> parameters();
  /// BatchNorm running statistics in a fixed order, named like parameters.
  std::vector<std::pair<std::string, BatchNormStats*>> buffers();

  std::size_t parameter_count();
  void zero_grad();

  /// Logits [B x 2] for a batch; `fusion` receives attention internals.
  Var forward(Tape& tape, const Batch& batch, Mode mode, std::uint64_t dropout_seed = 0,
              FusionState* fusion = nullptr);

 private:
  void initialize(std::uint64_t seed);

  ModelConfig config_;
  std::vector<ResidualBlock> blocks_;
  std::vector<AttentionSubnet> attention_;
  ClassifierHead head_;
};

/// Conv -> BN -> ReLU -> Conv -> BN main branch, 1x1 projection or identity
/// residual, then add and ReLU. H is [d_in x T] or [B x d_in x T]. A [B x T]
/// frame mask keeps padded frames out of the BatchNorm statistics and zeroes
/// them in the output, so a padded utterance sees the same zero boundary as
/// when run alone.
BlockActivation residual_block_forward(Var H, ResidualBlock& block, Mode mode, const BatchNormOptions& bn = {},
                                       std::span<const std::uint8_t> mask = {});

/// Runs the four blocks in sequence on channel-major input and returns each
/// block output transposed to time-major [B x T x d_i].
std::vector<Var> crfe_forward(Var H_in, EmoAntiModel& model, Mode mode, std::span<const std::uint8_t> mask = {});

struct AttentionOutput {
  Var pooled;   // [B x d] (or [d] for unbatched input)
  Var weights;  // [B x T] (or [T])
  Var scores;   // same shape as weights
};

/// Scores each frame with the two-layer subnet, softmax-normalizes over
/// unmasked frames and returns the weighted frame sum. f is [T x d] or [B x T x d].
AttentionOutput temporal_attention(Var f, AttentionSubnet& subnet, std::span<const std::uint8_t> mask = {});

/// Ordered concatenation of pooled vectors.
Var fuse(std::span<const Var> pooled);

/// affine -> dropout -> relu -> affine.
Var classify(Var fused, ClassifierHead& head, Mode mode, std::uint64_t dropout_seed = 0);

/// logit(bonafide) - logit(spoof); higher means more bonafide.
double cm_score(double bonafide_logit, double spoof_logit);

struct Prediction {
  Tensor logits;  // [2]
  double score = 0.0;
};

/// Single-utterance pipeline.
Prediction forward(const LayerFeatures& features, EmoAntiModel& model, Mode mode, std::uint64_t dropout_seed = 0);

}  // namespace emoanti
