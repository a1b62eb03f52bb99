#include <gtest/gtest.h>

#include <cmath>

#include "rela/attention.hpp"
#include "rela/rng.hpp"

using namespace rela;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool grad = false) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = scale * normal(rng);
  return Tensor(std::move(shape), std::move(v), grad);
}

Tensor copy(const Tensor& t) {
  return Tensor(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), true);
}

Tensor eye(std::size_t n) {
  Tensor t = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) t.mutable_data()[i * n + i] = 1.0;
  return t;
}

AttentionConfig make_config(ActivationTag tag, NormKind norm, std::size_t heads = 2, std::size_t dh = 3) {
  AttentionConfig c;
  c.heads = heads;
  c.head_dim = dh;
  c.model_dim = heads * dh;
  c.activation = {tag};
  c.norm = NormConfig{norm, c.model_dim, dh};
  return c;
}

AttentionParams random_params(const AttentionConfig& c, Rng& rng) {
  AttentionParams p = init_attention(c, rng);
  // Non-trivial norm parameters so the gate and gain paths matter.
  for (Tensor* t : {&p.norm.gain, &p.norm.gate, &p.norm.bias})
    if (t->defined())
      for (auto& v : t->mutable_data()) v = normal(rng);
  return p;
}

std::vector<Tensor> leaves(const AttentionParams& p) {
  std::vector<Tensor> out{p.wq, p.wk, p.wv, p.wo};
  for (const Tensor& t : {p.norm.gain, p.norm.gate, p.norm.bias})
    if (t.defined()) out.push_back(t);
  return out;
}

AttentionParams clone(const AttentionParams& p) {
  auto c = [](const Tensor& t) { return t.defined() ? copy(t) : Tensor(); };
  return {c(p.wq), c(p.wk), c(p.wv), c(p.wo), NormParams{c(p.norm.gain), c(p.norm.gate), c(p.norm.bias)}};
}

}  // namespace

TEST(ScaledScores, ZeroInputsGiveZeroScores) {
  Rng rng = make_rng(1);
  Tensor s = scaled_scores(Tensor::zeros({3, 4}), Tensor::zeros({2, 4}), random_tensor({4, 2}, rng),
                           random_tensor({4, 2}, rng));
  EXPECT_EQ(s.shape(), (Shape{3, 2}));
  for (double v : s.data()) EXPECT_EQ(v, 0.0);
}

TEST(ScaledScores, SingleDimensionHandComputed) {
  Tensor s = scaled_scores(Tensor({1, 1}, {2}), Tensor({1, 1}, {3}), eye(1), eye(1));
  EXPECT_DOUBLE_EQ(s.item(), 6.0);
}

TEST(ScaledScores, DimensionMismatchRejected) {
  EXPECT_THROW(scaled_scores(Tensor::zeros({2, 3}), Tensor::zeros({2, 4}), eye(3), eye(3)), ShapeError);
}

TEST(AttHead, ReluWithNegativeScoresIsNull) {
  AttentionConfig c = make_config(ActivationTag::relu, NormKind::none, 1, 2);
  AttentionParams p{eye(2), eye(2), eye(2), eye(2), {}};
  Tensor x({2, 2}, {1, 1, 2, 0.5});
  Tensor y({3, 2}, {-1, -1, -3, -0.5, -0.2, -4});
  auto [out, alpha] = att_head(x, y, p, 0, c);
  for (double v : alpha.data()) EXPECT_EQ(v, 0.0);
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(AttHead, SoftmaxWithOneVisibleKeyCopiesItsValue) {
  Rng rng = make_rng(2);
  AttentionConfig c = make_config(ActivationTag::softmax, NormKind::none, 1, 3);
  AttentionParams p{random_tensor({3, 3}, rng), random_tensor({3, 3}, rng), random_tensor({3, 3}, rng), eye(3), {}};
  Tensor x = random_tensor({2, 3}, rng), y = random_tensor({4, 3}, rng);
  auto mask = make_mask(2, 4, 1, false);
  auto [out, alpha] = att_head(x, y, p, 0, c, mask);
  Tensor v = matmul(y, p.wv);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(alpha.at(i, 0), 1.0);
    for (std::size_t j = 1; j < 4; ++j) EXPECT_EQ(alpha.at(i, j), 0.0);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(out.at(i, k), v.at(0, k), 1e-14);
  }
}

TEST(AttHead, FullyMaskedRowLegalOnlyForRelu) {
  Rng rng = make_rng(3);
  Tensor x = random_tensor({2, 2}, rng), y = random_tensor({2, 2}, rng);
  AttentionParams p{eye(2), eye(2), eye(2), eye(2), {}};
  auto mask = make_mask(2, 2, 0, false);
  EXPECT_THROW(att_head(x, y, p, 0, make_config(ActivationTag::softmax, NormKind::none, 1, 2), mask),
               std::invalid_argument);
  auto [out, alpha] = att_head(x, y, p, 0, make_config(ActivationTag::relu, NormKind::none, 1, 2), mask);
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Mhatt, SingleHeadIdentityOutputEqualsHead) {
  Rng rng = make_rng(4);
  AttentionConfig c = make_config(ActivationTag::relu, NormKind::none, 1, 4);
  AttentionParams p = random_params(c, rng);
  p.wo = eye(4);
  Tensor x = random_tensor({3, 4}, rng), y = random_tensor({5, 4}, rng);
  Tensor full = mhatt(x, y, p, c);
  auto head = att_head(x, y, p, 0, c);
  for (std::size_t i = 0; i < full.size(); ++i) EXPECT_NEAR(full.at(i), head.output.at(i), 1e-14);
}

TEST(AttentionConfig, Validation) {
  EXPECT_THROW(make_config(ActivationTag::softmax, NormKind::rmsnorm).validate(), std::invalid_argument);
  AttentionConfig c = make_config(ActivationTag::relu, NormKind::gated_rmsnorm);
  EXPECT_NO_THROW(c.validate());
  c.model_dim = 7;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

// The fused batched route against the per-sentence reference route, values
// and gradients, over padded sentences.
TEST(BatchedRoute, MatchesReferenceRoute) {
  Rng rng = make_rng(5);
  struct Case {
    ActivationTag tag;
    NormKind norm;
    bool causal;
  };
  const std::vector<Case> cases{{ActivationTag::softmax, NormKind::none, false},
                                {ActivationTag::sparsemax, NormKind::none, true},
                                {ActivationTag::entmax15, NormKind::none, false},
                                {ActivationTag::relu, NormKind::none, true},
                                {ActivationTag::relu, NormKind::rmsnorm, false},
                                {ActivationTag::relu, NormKind::gated_rmsnorm, true},
                                {ActivationTag::relu, NormKind::gated_layernorm, false},
                                {ActivationTag::gelu, NormKind::gated_rmsnorm, false},
                                {ActivationTag::leaky_relu, NormKind::layernorm, true}};
  const std::size_t B = 3, n = 5, m = 5;
  const std::vector<std::size_t> qlen{5, 3, 4}, klen{4, 5, 2};
  for (const Case& cs : cases) {
    AttentionConfig c = make_config(cs.tag, cs.norm);
    AttentionParams p = random_params(c, rng);
    Tensor x = random_tensor({B * n, c.model_dim}, rng, 1.0, true);
    Tensor y = random_tensor({B * m, c.model_dim}, rng, 1.0, true);
    Tensor w = random_tensor({B * n, c.model_dim}, rng);
    // Causal layouts are self-attention: keys follow the query lengths.
    BatchLayout layout{B, n, m, qlen, cs.causal ? qlen : klen, cs.causal};

    AttentionParams pa = clone(p), pb = clone(p);
    Tensor xa = copy(x), ya = copy(y), xb = copy(x), yb = copy(y);
    Tensor fused = mhatt_batched(xa, ya, pa, c, layout);
    Tensor loss_a = Tensor::scalar(0.0), loss_b = Tensor::scalar(0.0);
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t nq = qlen[b], nk = layout.key_lengths[b];
      Tensor ref = mhatt(narrow(xb, 0, b * n, nq), narrow(yb, 0, b * m, nk), pb, c, make_mask(nq, nk, nk, cs.causal));
      Tensor got = narrow(fused, 0, b * n, nq);
      for (std::size_t i = 0; i < ref.size(); ++i)
        EXPECT_NEAR(got.at(i), ref.at(i), 1e-12) << to_string(cs.tag) << " item " << b;
      loss_a = add(loss_a, sum_all(mul(got, narrow(w, 0, b * n, nq))));
      loss_b = add(loss_b, sum_all(mul(ref, narrow(w, 0, b * n, nq))));
    }
    loss_a.backward();
    loss_b.backward();
    std::vector<Tensor> ga = leaves(pa), gb = leaves(pb);
    ga.push_back(xa), ga.push_back(ya), gb.push_back(xb), gb.push_back(yb);
    for (std::size_t t = 0; t < ga.size(); ++t) {
      ASSERT_EQ(ga[t].has_grad(), gb[t].has_grad());
      if (!ga[t].has_grad()) continue;
      for (std::size_t i = 0; i < ga[t].size(); ++i)
        EXPECT_NEAR(ga[t].grad()[i], gb[t].grad()[i], 1e-10) << to_string(cs.tag) << " leaf " << t;
    }
  }
}

TEST(BatchedRoute, PaddingKeysDoNotChangeOutput) {
  Rng rng = make_rng(6);
  AttentionConfig c = make_config(ActivationTag::relu, NormKind::gated_rmsnorm);
  AttentionParams p = random_params(c, rng);
  Tensor x = random_tensor({4, c.model_dim}, rng);
  Tensor y = random_tensor({3, c.model_dim}, rng);
  Tensor padded = concat({y, random_tensor({4, c.model_dim}, rng, 50.0)}, 0);
  Tensor a = mhatt_batched(x, y, p, c, BatchLayout{1, 4, 3, {4}, {3}, false});
  Tensor b = mhatt_batched(x, padded, p, c, BatchLayout{1, 4, 7, {4}, {3}, false});
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.at(i), b.at(i));
}

TEST(BatchedRoute, CausalOutputIgnoresFuturePositions) {
  Rng rng = make_rng(7);
  for (auto tag : {ActivationTag::softmax, ActivationTag::relu}) {
    AttentionConfig c = make_config(tag, tag == ActivationTag::relu ? NormKind::gated_rmsnorm : NormKind::none);
    AttentionParams p = random_params(c, rng);
    Tensor x = random_tensor({6, c.model_dim}, rng);
    Tensor changed = x.detach();
    for (std::size_t k = 0; k < c.model_dim; ++k) changed.mutable_data()[4 * c.model_dim + k] += 3.0;
    BatchLayout layout{1, 6, 6, {6}, {6}, true};
    Tensor a = mhatt_batched(x, x, p, c, layout), b = mhatt_batched(changed, changed, p, c, layout);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t k = 0; k < c.model_dim; ++k) EXPECT_EQ(a.at(i, k), b.at(i, k));
    EXPECT_NE(a.at(4, 0), b.at(4, 0));
  }
}

TEST(BatchedRoute, CaptureRecordsValidRegionOnly) {
  Rng rng = make_rng(8);
  AttentionConfig c = make_config(ActivationTag::relu, NormKind::gated_rmsnorm);
  AttentionParams p = random_params(c, rng);
  std::vector<AttentionRecord> records;
  BatchLayout layout{2, 4, 3, {4, 2}, {3, 1}, false};
  mhatt_batched(random_tensor({8, c.model_dim}, rng), random_tensor({6, c.model_dim}, rng), p, c, layout, nullptr,
                CaptureSink{&records, 1, AttentionType::cross, 10});
  ASSERT_EQ(records.size(), 2u);
  EXPECT_EQ(records[1].sentence, 11u);
  EXPECT_EQ(records[1].layer, 1u);
  EXPECT_EQ(records[1].rows, 2u);
  EXPECT_EQ(records[1].cols, 1u);
  EXPECT_EQ(records[1].alpha.size(), c.heads * 2 * 1);
  AttentionRecord back = record_from_json(to_json(records[0]));
  EXPECT_EQ(back.alpha, records[0].alpha);
  EXPECT_EQ(back.rows, records[0].rows);
}

// With independent symmetric keys, each ReLU score is positive with
// probability 1/2 independently, so a row over m keys is null with
// probability 2^-m. Checked against a 5-sigma binomial band.
TEST(NullAttention, RandomReluRowsAreNullAtTwoToTheMinusM) {
  Rng rng = make_rng(9);
  const std::size_t dh = 4;
  AttentionConfig c = make_config(ActivationTag::relu, NormKind::none, 1, dh);
  AttentionParams p{eye(dh), eye(dh), eye(dh), eye(dh), {}};
  for (std::size_t m : {1u, 2u, 3u, 5u}) {
    const std::size_t trials = 20000;
    std::size_t nulls = 0;
    for (std::size_t t = 0; t < trials; ++t) {
      auto [out, alpha] = att_head(random_tensor({1, dh}, rng), random_tensor({m, dh}, rng), p, 0, c);
      bool null = true;
      for (double v : alpha.data()) null = null && v == 0.0;
      nulls += null;
    }
    const double q = std::pow(0.5, static_cast<double>(m));
    const double sd = std::sqrt(q * (1 - q) / trials);
    EXPECT_NEAR(static_cast<double>(nulls) / trials, q, 5 * sd) << "m = " << m;
  }
}

TEST(Dropout, InactiveWithoutRngOrRate) {
  Rng rng = make_rng(10);
  Tensor x = random_tensor({3, 3}, rng);
  EXPECT_EQ(dropout(x, 0.5, nullptr).node(), x.node());
  EXPECT_EQ(dropout(x, 0.0, &rng).node(), x.node());
  Tensor d = dropout(x, 0.5, &rng);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_TRUE(d.at(i) == 0.0 || std::abs(d.at(i) - 2 * x.at(i)) < 1e-15);
}
