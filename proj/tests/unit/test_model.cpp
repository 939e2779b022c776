#include <doctest.h>

#include <cmath>
#include <random>

#include "emoanti/errors.hpp"
#include "emoanti/model.hpp"
#include "gradcheck.hpp"
#include "model_gradcheck.hpp"
#include "reference_ops.hpp"

using namespace emoanti;
using emoanti::testing::random_tensor;
namespace ref = emoanti::testing::ref;

namespace {

void zero_main_branch(ResidualBlock& b) {
  b.conv1_weight.value.fill(0);
  b.conv1_bias.value.fill(0);
  b.conv2_weight.value.fill(0);
  b.conv2_bias.value.fill(0);
  b.bn1_stats = BatchNormStats::fresh(b.d_hidden);
  b.bn2_stats = BatchNormStats::fresh(b.d_hidden);
}

void randomize(EmoAntiModel& model, std::mt19937_64& rng) {
  for (Parameter* p : model.parameters()) {
    for (double& v : p->value.data()) v = std::uniform_real_distribution<double>(-0.8, 0.8)(rng);
  }
  for (auto& [name, stats] : model.buffers()) {
    for (double& v : stats->mean.data()) v = std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
    for (double& v : stats->var.data()) v = std::uniform_real_distribution<double>(0.5, 1.5)(rng);
  }
}

ModelConfig tiny_config(std::size_t C = 8, std::size_t d = 4) {
  ModelConfig cfg;
  cfg.input_channels = C;
  cfg.d_hidden = {d, d, d, d};
  cfg.classifier_width = 6;
  cfg.dropout = 0.3;
  return cfg;
}

LayerFeatures random_features(const std::string& id, std::size_t L, std::size_t T, std::size_t C,
                              std::mt19937_64& rng) {
  return LayerFeatures{id, random_tensor({L, T, C}, rng)};
}

}  // namespace

TEST_CASE("residual block: zeroed main branch reduces to relu of the input") {
  std::mt19937_64 rng(1);
  ResidualBlock block(5, 5);
  CHECK_FALSE(block.has_projection());
  zero_main_branch(block);
  Tape tape;
  const Tensor H = random_tensor({5, 7}, rng);
  BlockActivation act = residual_block_forward(tape.constant(H), block, Mode::eval);
  for (double v : act.h_conv2.value().data()) CHECK(v == 0.0);
  CHECK(act.f.value() == ref::relu(H));
}

TEST_CASE("residual block: zeroed branches with projection give zero output") {
  std::mt19937_64 rng(2);
  ResidualBlock block(5, 3);
  CHECK(block.has_projection());
  CHECK(block.proj_weight->value.shape() == Shape{3, 5, 1});
  zero_main_branch(block);
  block.proj_weight->value.fill(0);
  Tape tape;
  BlockActivation act = residual_block_forward(tape.constant(random_tensor({5, 7}, rng)), block, Mode::eval);
  for (double v : act.f.value().data()) CHECK(v == 0.0);
}

TEST_CASE("residual block matches the step-by-step oracle") {
  std::mt19937_64 rng(3);
  ModelConfig cfg = tiny_config(3, 2);
  EmoAntiModel model(cfg, 7);
  randomize(model, rng);
  ResidualBlock& block = model.blocks()[0];
  REQUIRE(block.d_in == 3);
  REQUIRE(block.d_hidden == 2);
  const Tensor H = random_tensor({3, 4}, rng);
  for (Mode mode : {Mode::eval, Mode::train}) {
    ResidualBlock copy = block;
    const Tensor expected = ref::block(H, copy, mode);
    Tape tape;
    const Tensor got = residual_block_forward(tape.constant(H), copy, mode).f.value();
    REQUIRE(got.shape() == expected.shape());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(expected[i]).epsilon(1e-12));
  }
  Tape tape;
  CHECK_THROWS_AS(residual_block_forward(tape.constant(Tensor({4, 4})), block, Mode::eval), ShapeError);
}

TEST_CASE("crfe_forward: four time-major outputs") {
  std::mt19937_64 rng(4);
  EmoAntiModel model(tiny_config(), 11);
  Tape tape;
  const Tensor H = random_tensor({8, 9}, rng);
  std::vector<Var> outs = crfe_forward(tape.constant(H), model, Mode::eval);
  REQUIRE(outs.size() == 4);
  Tensor x = H;
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(outs[i].shape() == Shape{9, 4});
    x = ref::block(x, model.blocks()[i], Mode::eval);
    const Tensor expected = ref::transpose(x);
    for (std::size_t j = 0; j < expected.size(); ++j) {
      CHECK(outs[i].value()[j] == doctest::Approx(expected[j]).epsilon(1e-12));
      CHECK(outs[i].value()[j] >= 0.0);
    }
  }
}

TEST_CASE("crfe_forward: zero input, zero biases, identity BN gives zeros") {
  EmoAntiModel model(tiny_config(), 12);
  for (ResidualBlock& b : model.blocks()) {
    b.conv1_bias.value.fill(0);
    b.conv2_bias.value.fill(0);
    if (b.has_projection()) b.proj_bias->value.fill(0);
  }
  Tape tape;
  for (const Var& f : crfe_forward(tape.constant(Tensor({8, 5})), model, Mode::eval)) {
    for (double v : f.value().data()) CHECK(v == 0.0);
  }
}

TEST_CASE("temporal attention examples") {
  AttentionSubnet subnet(2, 1);
  Tape tape;

  SUBCASE("single frame pools to itself") {
    std::mt19937_64 rng(5);
    for (Parameter* p : {&subnet.w1, &subnet.b1, &subnet.w2, &subnet.b2}) p->value = random_tensor(p->value.shape(), rng);
    const Tensor f({1, 2}, {0.25, -3.5});
    AttentionOutput out = temporal_attention(tape.constant(f), subnet);
    CHECK(out.pooled.value() == Tensor::from({0.25, -3.5}));
    CHECK(out.weights.value()[0] == 1.0);
  }
  SUBCASE("equal scores give the mean of unmasked frames") {
    const Tensor f({4, 2}, {1, 2, 3, 4, 5, 6, 100, 100});
    const std::vector<std::uint8_t> mask{1, 1, 1, 0};
    AttentionOutput out = temporal_attention(tape.constant(f), subnet, mask);
    CHECK(out.pooled.value()[0] == doctest::Approx(3.0).epsilon(1e-15));
    CHECK(out.pooled.value()[1] == doctest::Approx(4.0).epsilon(1e-15));
    CHECK(out.weights.value()[3] == 0.0);
    CHECK_THROWS_AS(temporal_attention(tape.constant(f), subnet, std::vector<std::uint8_t>(4, 0)), InvalidArgument);
  }
  SUBCASE("scores [10, 0] follow the closed-form softmax") {
    subnet.w1.value = Tensor({1, 2}, {1, 0});
    subnet.w2.value = Tensor({1, 1}, {10});
    const Tensor f({2, 2}, {1, 0.5, 0, -2});
    AttentionOutput out = temporal_attention(tape.constant(f), subnet);
    CHECK(out.scores.value() == Tensor::from({10, 0}));
    const double a1 = 1.0 / (1.0 + std::exp(-10.0));
    const double a2 = std::exp(-10.0) / (1.0 + std::exp(-10.0));
    CHECK(a1 == doctest::Approx(0.9999546).epsilon(1e-7));
    CHECK(a2 == doctest::Approx(0.0000454).epsilon(1e-3));
    CHECK(out.weights.value()[0] == doctest::Approx(a1).epsilon(1e-15));
    CHECK(out.weights.value()[1] == doctest::Approx(a2).epsilon(1e-12));
    CHECK(out.pooled.value()[0] == doctest::Approx(a1).epsilon(1e-15));
    CHECK(out.pooled.value()[1] == doctest::Approx(0.5 * a1 - 2.0 * a2).epsilon(1e-14));
  }
}

TEST_CASE("fuse concatenates in block order") {
  Tape tape;
  std::vector<Var> parts{tape.constant(Tensor::from({1})), tape.constant(Tensor::from({2})),
                         tape.constant(Tensor::from({3})), tape.constant(Tensor::from({4}))};
  CHECK(fuse(parts).value() == Tensor::from({1, 2, 3, 4}));
  std::swap(parts[0], parts[3]);
  CHECK(fuse(parts).value() != Tensor::from({1, 2, 3, 4}));

  std::vector<Var> wide;
  for (int i = 0; i < 4; ++i) wide.push_back(tape.constant(Tensor({3, 256}, i)));
  CHECK(fuse(wide).shape() == Shape{3, 1024});
  ModelConfig defaults;
  CHECK(defaults.fused_width() == 1024);
}

TEST_CASE("classifier head examples") {
  Tape tape;
  SUBCASE("zero weights return the output bias") {
    ClassifierHead head(3, 4, 0.3);
    head.b1.value = Tensor::from({1, -1, 2, 0.5});
    head.b2.value = Tensor::from({0.7, -0.2});
    for (Mode mode : {Mode::eval, Mode::train}) {
      CHECK(classify(tape.constant(Tensor({1, 3}, {5, 6, 7})), head, mode, 3).value() == Tensor({1, 2}, {0.7, -0.2}));
    }
  }
  SUBCASE("p = 0 makes train and eval identical") {
    std::mt19937_64 rng(6);
    ClassifierHead head(5, 4, 0.0);
    for (Parameter* p : {&head.w1, &head.b1, &head.w2, &head.b2}) p->value = random_tensor(p->value.shape(), rng);
    const Tensor F = random_tensor({2, 5}, rng);
    CHECK(classify(tape.constant(F), head, Mode::eval).value() == classify(tape.constant(F), head, Mode::train, 77).value());
  }
  SUBCASE("hand computation through relu") {
    ClassifierHead head(2, 2, 0.0);
    head.w1.value = Tensor({2, 2}, {1, 0, 0, 1});
    head.w2.value = Tensor({2, 2}, {1, 0, 0, 1});
    CHECK(classify(tape.constant(Tensor::from({-1, 3})), head, Mode::eval).value() == Tensor::from({0, 3}));
  }
  SUBCASE("dropout sits between the first affine and the relu") {
    // A negative pre-activation scaled by the dropout mask must still be
    // clipped by the relu that follows.
    ClassifierHead head(1, 1, 0.5);
    head.w1.value = Tensor({1, 1}, {1});
    head.w2.value = Tensor({2, 1}, {1, 0});
    const Tensor neg = classify(tape.constant(Tensor::from({-2})), head, Mode::train, 5).value();
    CHECK(neg[0] == 0.0);
    const Tensor pos = classify(tape.constant(Tensor::from({2})), head, Mode::train, 5).value();
    CHECK((pos[0] == 0.0 || pos[0] == doctest::Approx(4.0)));
  }
  ClassifierHead head(4, 2, 0.0);
  CHECK_THROWS_AS(classify(tape.constant(Tensor({1, 3})), head, Mode::eval), ShapeError);
}

TEST_CASE("forward: cm score, determinism, oracle composition") {
  CHECK(cm_score(3, 1) == 2);
  CHECK(cm_score(1, 3) == -cm_score(3, 1));

  std::mt19937_64 rng(7);
  for (Ablation ablation : {Ablation::full, Ablation::no_crfe}) {
    ModelConfig cfg = tiny_config();
    cfg.ablation = ablation;
    EmoAntiModel model(cfg, 21);
    randomize(model, rng);
    const LayerFeatures u = random_features("u1", 3, 6, 8, rng);
    const Prediction a = forward(u, model, Mode::eval);
    const Prediction b = forward(u, model, Mode::eval);
    CHECK(a.logits == b.logits);
    CHECK(a.score == b.score);
    CHECK(a.score == a.logits[0] - a.logits[1]);

    const Tensor expected = ref::model_logits(select_input(u, cfg), model);
    CHECK(a.logits[0] == doctest::Approx(expected[0]).epsilon(1e-11));
    CHECK(a.logits[1] == doctest::Approx(expected[1]).epsilon(1e-11));
  }
}

TEST_CASE("input selection") {
  std::mt19937_64 rng(8);
  const LayerFeatures u = random_features("u", 3, 4, 2, rng);
  ModelConfig cfg = tiny_config(2);
  const Tensor last = select_input(u, cfg);
  CHECK(last.shape() == Shape{2, 4});
  CHECK(last.at(1, 3) == u.layers.at(2, 3, 1));
  cfg.input_layer_index = 0;
  CHECK(select_input(u, cfg).at(0, 2) == u.layers.at(0, 2, 0));
  cfg.input_layer_index = 3;
  CHECK_THROWS_AS(select_input(u, cfg), InvalidArgument);
  EmoAntiModel model(cfg, 1);
  CHECK_THROWS_AS(forward(u, model, Mode::eval), InvalidArgument);
  cfg.layer_taps = {0, 2};
  CHECK(select_input(u, cfg).at(1, 1) == doctest::Approx(u.layers.at(0, 1, 1) + u.layers.at(2, 1, 1)));
  cfg.layer_taps.clear();
  cfg.input_layer_index = -1;
  cfg.input_channels = 3;
  CHECK_THROWS_AS(select_input(u, cfg), ShapeError);
}

TEST_CASE("model structure") {
  EmoAntiModel model(ModelConfig{}, 3);
  REQUIRE(model.blocks().size() == 4);
  CHECK(model.blocks()[0].has_projection());
  CHECK(model.blocks()[0].d_in == 1024);
  for (std::size_t i = 1; i < 4; ++i) {
    CHECK_FALSE(model.blocks()[i].has_projection());
    CHECK(model.blocks()[i].d_in == model.blocks()[i - 1].d_hidden);
  }
  CHECK(model.attention().size() == 4);
  CHECK(model.attention()[0].w1.value.shape() == Shape{128, 256});
  CHECK(model.head().w1.value.shape() == Shape{256, 1024});
  CHECK(model.head().dropout == 0.3);
  for (double v : model.head().b2.value.data()) CHECK(v == 0.0);

  ModelConfig ab;
  ab.ablation = Ablation::no_crfe;
  EmoAntiModel bypass(ab, 3);
  CHECK(bypass.blocks().empty());
  CHECK(bypass.attention().size() == 1);
  CHECK(bypass.head().w1.value.shape() == Shape{256, 1024});
}

TEST_CASE("batched forward: masks, attention sums, non-negativity, padding independence of weights") {
  std::mt19937_64 rng(9);
  EmoAntiModel model(tiny_config(), 5);
  randomize(model, rng);
  const LayerFeatures a = random_features("a", 2, 7, 8, rng);
  const LayerFeatures b = random_features("b", 2, 4, 8, rng);
  const LayerFeatures* us[] = {&a, &b};
  const Batch batch = make_batch(us, model.config(), std::vector<int>{0, 1});
  CHECK(batch.input.shape() == Shape{2, 8, 7});
  CHECK(batch.mask == std::vector<std::uint8_t>{1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0});
  Tape tape;
  FusionState fusion;
  const Tensor logits = model.forward(tape, batch, Mode::train, 1, &fusion).value();
  CHECK(logits.shape() == Shape{2, 2});
  REQUIRE(fusion.weights.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t r = 0; r < 2; ++r) {
      double s = 0;
      for (std::size_t t = 0; t < 7; ++t) s += fusion.weights[i].at(r, t);
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
    for (std::size_t t = 4; t < 7; ++t) CHECK(fusion.weights[i].at(1, t) == 0.0);
    CHECK(fusion.pooled[i].shape() == Shape{2, 4});
  }
  CHECK(fusion.fused.shape() == Shape{2, 16});
}

TEST_CASE("end-to-end gradient check on a tiny model (T=6, C=8, d_hidden=4)") {
  std::mt19937_64 rng(10);
  ModelConfig cfg = tiny_config(8, 4);
  EmoAntiModel model(cfg, 99);
  randomize(model, rng);
  const LayerFeatures a = random_features("a", 2, 6, 8, rng);
  const LayerFeatures b = random_features("b", 2, 6, 8, rng);
  const LayerFeatures c = random_features("c", 2, 5, 8, rng);
  const LayerFeatures* us[] = {&a, &b, &c};
  const Batch batch = make_batch(us, cfg, std::vector<int>{0, 1, 1});

  for (Mode mode : {Mode::eval, Mode::train}) {
    CAPTURE(static_cast<int>(mode));
    const auto res = emoanti::testing::check_model_gradients(model, batch, mode, 4242);
    for (const auto& w : res.worst) MESSAGE(w);
    CHECK(res.max_rel_error <= 1e-4);
    CHECK(res.max_structural_zero <= 1e-12);
    CHECK(res.checked + res.structural_zeros == model.parameter_count());
    CHECK(res.structural_zeros >= 4);  // at least the attention output biases
  }
}

TEST_CASE("padded batches reproduce per-utterance results") {
  std::mt19937_64 rng(12);
  ModelConfig cfg = tiny_config(8, 6);
  cfg.d_hidden = {6, 5, 5, 4};  // exercises projections, whose bias would leak into padding
  EmoAntiModel model(cfg, 17);
  randomize(model, rng);
  const LayerFeatures a = random_features("a", 1, 9, 8, rng);
  const LayerFeatures b = random_features("b", 1, 4, 8, rng);
  const LayerFeatures c = random_features("c", 1, 6, 8, rng);
  const LayerFeatures* us[] = {&a, &b, &c};

  SUBCASE("eval logits") {
    const Batch batch = make_batch(us, cfg);
    Tape tape;
    const Tensor logits = model.forward(tape, batch, Mode::eval).value();
    for (std::size_t r = 0; r < 3; ++r) {
      const Prediction p = forward(*us[r], model, Mode::eval);
      CHECK(std::abs(logits.at(r, 0) - p.logits[0]) <= 1e-12);
      CHECK(std::abs(logits.at(r, 1) - p.logits[1]) <= 1e-12);
    }
  }

  SUBCASE("train-mode statistics ignore padded frames") {
    // Concatenating the utterances along time with zero gaps would change the
    // conv boundaries, so compare block-1 BN1 statistics against the conv
    // outputs of each utterance run alone.
    ResidualBlock& blk = model.blocks()[0];
    std::vector<double> sum(6, 0.0), sq(6, 0.0);
    double n = 0;
    std::vector<Tensor> convs;
    for (const LayerFeatures* u : us) {
      Tape t;
      const Tensor y = ops::conv1d(t.constant(select_input(*u, cfg)), t.constant(blk.conv1_weight.value),
                                   t.constant(blk.conv1_bias.value), 1)
                           .value();
      for (std::size_t ch = 0; ch < 6; ++ch) {
        for (std::size_t tt = 0; tt < y.dim(1); ++tt) sum[ch] += y.at(ch, tt);
      }
      n += static_cast<double>(y.dim(1));
      convs.push_back(y);
    }
    for (const Tensor& y : convs) {
      for (std::size_t ch = 0; ch < 6; ++ch) {
        for (std::size_t tt = 0; tt < y.dim(1); ++tt) sq[ch] += std::pow(y.at(ch, tt) - sum[ch] / n, 2);
      }
    }
    const BatchNormStats before = blk.bn1_stats;
    const Batch batch = make_batch(us, cfg, std::vector<int>{0, 1, 0});
    Tape tape;
    model.forward(tape, batch, Mode::train, 3);
    for (std::size_t ch = 0; ch < 6; ++ch) {
      CHECK(blk.bn1_stats.mean[ch] == doctest::Approx(0.9 * before.mean[ch] + 0.1 * sum[ch] / n).epsilon(1e-12));
      CHECK(blk.bn1_stats.var[ch] == doctest::Approx(0.9 * before.var[ch] + 0.1 * sq[ch] / (n - 1)).epsilon(1e-12));
    }
  }

  SUBCASE("gradients of padded utterances are unaffected by the padding") {
    const Batch batch = make_batch(us, cfg, std::vector<int>{0, 1, 0});
    const auto res = emoanti::testing::check_model_gradients(model, batch, Mode::train, 77);
    CHECK(res.max_rel_error <= 1e-4);
    CHECK(res.max_structural_zero <= 1e-12);
  }
}
