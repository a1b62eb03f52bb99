#include <gtest/gtest.h>

#include <cmath>

#include "rela/transformer.hpp"

using namespace rela;

namespace {

ModelConfig small_config(const std::string& mechanism = "rela_g") {
  ModelConfig c;
  c.layers = 2;
  c.model_dim = 16;
  c.heads = 2;
  c.ffn_dim = 32;
  c.source_vocab = c.target_vocab = 10 + kTokenOffset;
  c.set_all(mechanism_preset(mechanism));
  return c;
}

TrainConfig small_train(const std::string& mechanism = "rela_g") {
  TrainConfig t;
  t.model = small_config(mechanism);
  t.batch_size = 8;
  t.warmup = 20;
  t.log_every = 5;
  return t;
}

ToyTask small_task(TaskKind kind = TaskKind::copy) { return ToyTask::make(kind, 10, 2, 6); }

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(CrossEntropy, AllPaddingContributesNothing) {
  Tensor logits({2, 5}, {1, 2, 3, 4, 5, 5, 4, 3, 2, 1}, true);
  std::vector<int> targets{-1, -1};
  Tensor loss = cross_entropy(logits, targets, 0.1);
  EXPECT_EQ(loss.item(), 0.0);
  loss.backward();
  for (double g : logits.grad()) EXPECT_EQ(g, 0.0);
}

TEST(CrossEntropy, ConfidentCorrectLogitsGiveZeroLoss) {
  Tensor logits({2, 3}, {60, 0, 0, 0, 0, 60});
  std::vector<int> targets{0, 2};
  EXPECT_LT(cross_entropy(logits, targets, 0.0).item(), 1e-20);
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  Tensor logits = Tensor::full({3, 7}, 0.3);
  std::vector<int> targets{0, 4, 6};
  for (double eps : {0.0, 0.1, 0.5}) EXPECT_NEAR(cross_entropy(logits, targets, eps).item(), std::log(7.0), 1e-12);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  std::vector<int> targets{1, -1, 3};
  auto report = grad_check(
      [&](const Tensor& x) { return cross_entropy(x, targets, 0.1); },
      Tensor({3, 4}, {0.1, -0.3, 2.0, 0.5, 1.0, 1.0, -1.0, 0.0, 0.7, -2.0, 0.2, 0.4}));
  EXPECT_TRUE(report.passed(1e-7)) << report.max_rel_error;
}

TEST(LearningRate, PeaksAtWarmup) {
  const double w = 400;
  EXPECT_NEAR(std::pow(w, -0.5), w * std::pow(w, -1.5), 1e-15);
  EXPECT_NEAR(lr_at(400, 400, 64), 0.00625, 1e-15);
  EXPECT_LT(lr_at(399, 400, 64), lr_at(400, 400, 64));
  EXPECT_LT(lr_at(401, 400, 64), lr_at(400, 400, 64));
  EXPECT_THROW(lr_at(0, 400, 64), std::invalid_argument);
}

TEST(Batch, TokenOutsideVocabularyRejected) {
  Example ex{{3, 10}, {3}, std::nullopt};
  EXPECT_THROW(make_batch(std::span<const Example>(&ex, 1), small_config()), std::out_of_range);
}

TEST(Batch, LayoutAppendsEosAndShiftsDecoderInput) {
  std::vector<Example> exs{{{4, 5}, {6}, std::nullopt}, {{1}, {2, 3}, std::nullopt}};
  Batch b = make_batch(exs, small_config());
  EXPECT_EQ(b.source_len, 3u);
  EXPECT_EQ(b.target_len, 3u);
  EXPECT_EQ(b.source_ids, (std::vector<int>{6, 7, kEos, 3, kEos, kPad}));
  EXPECT_EQ(b.decoder_input, (std::vector<int>{kPad, 8, kPad, kPad, 4, 5}));
  EXPECT_EQ(b.decoder_target, (std::vector<int>{8, kEos, -1, 4, 5, kEos}));
}

TEST(Forward, OutputOfAnExampleDoesNotDependOnBatchmates) {
  for (const char* mech : {"softmax", "rela_g", "sparsemax"}) {
    Model model(small_config(mech));
    std::vector<Example> exs{{{1, 2, 3}, {4, 5}, std::nullopt}, {{7, 8, 9, 1, 2, 3}, {1, 1, 1, 1, 1}, std::nullopt}};
    Tensor alone = forward(model, make_batch(std::span<const Example>(exs.data(), 1), model.config()));
    Tensor together = forward(model, make_batch(exs, model.config()));
    // Example 0 occupies rows [0, 3) in both; the batched version pads to 6 columns.
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t c = 0; c < alone.dim(1); ++c) EXPECT_NEAR(alone.at(i, c), together.at(i, c), 1e-12) << mech;
  }
}

TEST(Forward, DecoderIsCausal) {
  Model model(small_config());
  std::vector<Example> a{{{1, 2, 3}, {4, 5, 6}, std::nullopt}}, b{{{1, 2, 3}, {4, 5, 9}, std::nullopt}};
  Tensor la = forward(model, make_batch(a, model.config())), lb = forward(model, make_batch(b, model.config()));
  // Target token 2 enters the decoder at position 3 only.
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < la.dim(1); ++c) EXPECT_EQ(la.at(i, c), lb.at(i, c));
}

TEST(Model, EveryParameterReceivesGradient) {
  for (const char* mech : {"softmax", "relu", "rela_i", "rela_g", "rela_g_layernorm", "rela_g_gelu"}) {
    TrainConfig t = small_train(mech);
    Model model(t.model);
    Rng rng = make_rng(5);
    Dataset data = generate(small_task(TaskKind::reverse), rng, 8);
    model.zero_grad();
    Tensor logits = forward(model, make_batch(data, model.config()));
    cross_entropy(logits, make_batch(data, model.config()).decoder_target, 0.1).backward();
    for (const auto& [name, p] : model.parameters()) {
      ASSERT_TRUE(p.has_grad()) << mech << " " << name;
      double norm = 0.0;
      for (double g : p.grad()) norm += g * g;
      EXPECT_GT(norm, 0.0) << mech << " " << name;
    }
  }
}

TEST(Model, GradientMatchesFiniteDifferencesOnSomeWeights) {
  ModelConfig c = small_config();
  c.layers = 1;
  c.dropout = c.attention_dropout = 0.0;
  Model model(c);
  Rng rng = make_rng(6);
  Dataset data = generate(small_task(), rng, 3);
  Batch b = make_batch(data, c);
  auto loss = [&] { return cross_entropy(forward(model, b), b.decoder_target, 0.1).item(); };
  model.zero_grad();
  cross_entropy(forward(model, b), b.decoder_target, 0.1).backward();
  double worst = 0.0;
  for (auto [name, p] : model.parameters()) {
    auto v = p.mutable_data();
    for (std::size_t i = 0; i < std::min<std::size_t>(v.size(), 3); ++i) {
      const double x0 = v[i], h = 1e-5;
      v[i] = x0 + h;
      const double up = loss();
      v[i] = x0 - h;
      const double down = loss();
      v[i] = x0;
      const double analytic = p.grad()[i];
      worst = std::max(worst, std::abs(analytic - (up - down) / (2 * h)) / std::max(1.0, std::abs(analytic)));
    }
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Train, ZeroStepsReturnsInitialModel) {
  TrainConfig t = small_train();
  TrainResult r = train(t, small_task(), 0);
  Model fresh(t.model);
  EXPECT_EQ(r.state.step, 0u);
  EXPECT_TRUE(r.telemetry.empty());
  for (std::size_t i = 0; i < fresh.parameters().size(); ++i)
    EXPECT_EQ(values(r.model.parameters()[i].second), values(fresh.parameters()[i].second));
}

TEST(Train, SameSeedIsBitIdentical) {
  TrainConfig t = small_train();
  t.checkpoint_every = 10;
  TrainResult a = train(t, small_task(TaskKind::lexical_translate), 20);
  TrainResult b = train(t, small_task(TaskKind::lexical_translate), 20);
  ASSERT_EQ(a.telemetry.size(), b.telemetry.size());
  for (std::size_t i = 0; i < a.telemetry.size(); ++i) EXPECT_EQ(a.telemetry[i].loss, b.telemetry[i].loss);
  for (std::size_t i = 0; i < a.model.parameters().size(); ++i)
    EXPECT_EQ(values(a.model.parameters()[i].second), values(b.model.parameters()[i].second));
  ASSERT_EQ(a.checkpoints.size(), 2u);
  EXPECT_EQ(a.checkpoints[1].attention.size(), b.checkpoints[1].attention.size());
  t.model.seed = 2;
  TrainResult c = train(t, small_task(TaskKind::lexical_translate), 20);
  EXPECT_NE(a.telemetry.back().loss, c.telemetry.back().loss);
}

TEST(Train, LossDecreasesOnCopy) {
  TrainConfig t = small_train();
  t.batch_size = 16;
  TrainResult r = train(t, small_task(), 150);
  EXPECT_FALSE(r.state.nan_seen);
  EXPECT_LT(r.telemetry.back().loss, 0.8 * r.telemetry.front().loss);
  EXPECT_FALSE(r.state.diverged);
}

TEST(Train, TelemetryCadence) {
  TrainConfig t = small_train();
  t.log_every = 4;
  TrainResult r = train(t, small_task(), 10);
  ASSERT_EQ(r.telemetry.size(), 3u);
  EXPECT_EQ(r.telemetry[0].step, 4u);
  EXPECT_EQ(r.telemetry[2].step, 10u);
  EXPECT_DOUBLE_EQ(r.telemetry[0].lr, lr_at(4, t.warmup, 16));
}

TEST(Divergence, FlagFollowsLossTrend) {
  std::vector<double> falling{5, 4, 3, 2, 1, 0.5}, rising{1, 1, 2, 3, 4, 5}, flat{1, 1};
  EXPECT_FALSE(loss_diverged(falling, 2, false));
  EXPECT_TRUE(loss_diverged(rising, 2, false));
  EXPECT_TRUE(loss_diverged(falling, 2, true));
  EXPECT_TRUE(loss_diverged(flat, 500, false));
  EXPECT_FALSE(loss_diverged(std::vector<double>{3.0}, 500, false));
}

TEST(Decode, EmptySourceEndsImmediately) {
  Model model(small_config());
  EXPECT_TRUE(greedy_decode(model, {}).empty());
}

TEST(Decode, OutputIsBoundedAndInVocabulary) {
  Model model(small_config());
  auto out = greedy_decode(model, {1, 2, 3});
  EXPECT_LE(out.size(), 11u);
  for (int t : out) {
    EXPECT_GE(t, 0);
    EXPECT_LT(t, 10);
  }
}

TEST(Capture, OneRecordPerLayerTypeAndSentence) {
  Model model(small_config());
  Rng rng = make_rng(7);
  Dataset data = generate(small_task(), rng, 5);
  auto records = capture_attention(model, data, 2);
  EXPECT_EQ(records.size(), 2u * 3u * 5u);
  std::size_t cross = 0;
  for (const auto& r : records) {
    const auto& ex = data[r.sentence];
    if (r.type == AttentionType::cross) {
      ++cross;
      EXPECT_EQ(r.rows, ex.target.size() + 1);
      EXPECT_EQ(r.cols, ex.source.size() + 1);
      EXPECT_FALSE(r.causal);
    }
    if (r.type == AttentionType::decoder_self) {
      EXPECT_TRUE(r.causal);
    }
  }
  EXPECT_EQ(cross, 10u);
}

TEST(Checkpoint, JsonRoundTripReproducesForward) {
  TrainConfig t = small_train("rela_i");
  TrainResult r = train(t, small_task(), 5);
  Model back = model_from_checkpoint(checkpoint_json(r.model, 5));
  Rng rng = make_rng(8);
  Dataset data = generate(small_task(), rng, 4);
  Batch b = make_batch(data, t.model);
  EXPECT_EQ(values(forward(r.model, b)), values(forward(back, b)));
  EXPECT_EQ(back.config().mechanism(AttentionType::cross), mechanism_preset("rela_i"));
}

TEST(Mechanism, PresetsAndValidation) {
  EXPECT_EQ(mechanism_preset("rela_g").norm, NormKind::gated_rmsnorm);
  EXPECT_EQ(mechanism_preset("rela_i").init, GainInit::xavier_uniform_gain);
  EXPECT_EQ(mechanism_preset("rela_g_leaky").activation.tag, ActivationTag::leaky_relu);
  EXPECT_THROW(mechanism_preset("linear"), std::invalid_argument);
  ModelConfig c = small_config();
  c.attention[2] = {{ActivationTag::softmax}, NormKind::rmsnorm, GainInit::ones};
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Mechanism, PerTypeOverrideOnlyTouchesThatType) {
  ModelConfig c = small_config("softmax");
  c.attention[static_cast<std::size_t>(AttentionType::cross)] = mechanism_preset("rela_g");
  Model model(c);
  Rng rng = make_rng(9);
  Dataset data = generate(small_task(), rng, 2);
  for (const auto& r : capture_attention(model, data))
    EXPECT_EQ(r.activation.tag, r.type == AttentionType::cross ? ActivationTag::relu : ActivationTag::softmax);
}
