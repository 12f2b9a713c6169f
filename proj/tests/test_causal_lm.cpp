#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "gep/gradcheck.hpp"
#include "gep/transformer.hpp"

using namespace gep;

namespace {

TransformerConfig small_config(std::size_t dim = 16, std::size_t window = 32) {
  return TransformerConfig{2, 2, dim, 32, window, 3};
}

TokenSequence alternating(Rng& rng, std::size_t k, std::size_t d) {
  std::vector<Modality> m(k);
  for (std::size_t i = 0; i < k; ++i) m[i] = i % 2 ? Modality::kImage : Modality::kEvent;
  return TokenSequence(Tensor::randn({k, d}, rng), m);
}

// Two interleaved phase-shifted sinusoid streams projected to D dimensions.
TokenSequence periodic_sequence(std::size_t steps, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  const Tensor proj = Tensor::randn({2, d}, rng, 0.7);
  Tensor ev({steps, d}), im({steps, d});
  for (std::size_t t = 0; t < steps; ++t) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(t) / 8.0;
    for (std::size_t j = 0; j < d; ++j) {
      ev(t, j) = std::cos(a) * proj(0, j) + std::sin(a) * proj(1, j);
      im(t, j) = std::cos(a + 1.0) * proj(0, j) - std::sin(a + 1.0) * proj(1, j);
    }
  }
  return interleave(ev, im);
}

bool bitwise_equal_rows(const Tensor& a, const Tensor& b, std::size_t rows) {
  return std::memcmp(a.data().data(), b.data().data(), rows * a.cols() * sizeof(double)) == 0;
}

}  // namespace

TEST(PretrainLoss, Examples) {
  Rng rng(1);
  const Tensor t = Tensor::randn({4, 3}, rng);
  EXPECT_EQ(pretrain_loss(t, t), 0.0);
  Tensor p = t;
  p(2, 1) += 1.0;
  EXPECT_NEAR(pretrain_loss(p, t), 0.25, 1e-15);
}

TEST(PretrainLoss, MatchesLoopOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t w = 1 + rng.below(8), d = 1 + rng.below(6);
    const Tensor a = Tensor::randn({w, d}, rng), b = Tensor::randn({w, d}, rng);
    double s = 0.0;
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t c = 0; c < d; ++c) s += (a(j, c) - b(j, c)) * (a(j, c) - b(j, c));
    EXPECT_NEAR(pretrain_loss(a, b), s / static_cast<double>(w), 1e-12);
  }
  EXPECT_THROW(pretrain_loss(Tensor({2, 3}), Tensor({3, 2})), ShapeError);
  EXPECT_THROW(pretrain_loss(Tensor({0, 3}), Tensor({0, 3})), ShapeError);
}

TEST(Transformer, ConfigValidation) {
  EXPECT_THROW(CausalTransformer(TransformerConfig{2, 3, 16, 32, 8, 0}), ParameterError);
  EXPECT_THROW(CausalTransformer(TransformerConfig{0, 2, 16, 32, 8, 0}), ParameterError);
  const CausalTransformer m(small_config());
  EXPECT_THROW(m.forward(Tensor({33, 16})), RangeError);
  EXPECT_THROW(m.forward(Tensor({4, 15})), ShapeError);
  EXPECT_THROW(m.forward(Tensor({0, 16})), ShapeError);
}

TEST(Transformer, CausalPerturbationSweep) {
  Rng rng(3);
  const CausalTransformer m(small_config());
  const std::size_t k = 12;
  const Tensor x = Tensor::randn({k, 16}, rng);
  const Tensor base = m.forward(x);
  for (std::size_t pos = 0; pos < k; ++pos) {
    Tensor y = x;
    for (double& v : y.row(pos)) v += rng.normal();
    const Tensor out = m.forward(y);
    EXPECT_TRUE(bitwise_equal_rows(base, out, pos)) << pos;
    double change = 0.0;
    for (std::size_t c = 0; c < 16; ++c) change += std::abs(out(pos, c) - base(pos, c));
    EXPECT_GT(change, 0.0) << pos;
  }
}

TEST(Transformer, SingleTokenAndPrefixConsistency) {
  Rng rng(4);
  const CausalTransformer m(small_config());
  const Tensor x = Tensor::randn({6, 16}, rng);
  const Tensor full = m.forward(x);
  for (std::size_t k = 1; k <= 6; ++k) {
    const Tensor prefix(Shape{k, 16}, std::vector<double>(x.data().begin(), x.data().begin() + k * 16));
    const Tensor out = m.forward(prefix);
    EXPECT_EQ(out.rows(), k);
    EXPECT_LT(max_abs_diff(out, Tensor(Shape{k, 16}, std::vector<double>(full.data().begin(),
                                                                          full.data().begin() + k * 16))),
              1e-12);
  }
}

TEST(Transformer, DeterministicForward) {
  Rng rng(5);
  const CausalTransformer a(small_config()), b(small_config());
  const TokenSequence s = alternating(rng, 10, 16);
  const Tensor pa = a.predict(s), pb = b.predict(s);
  EXPECT_EQ(std::memcmp(pa.data().data(), pb.data().data(), pa.size() * sizeof(double)), 0);
  EXPECT_EQ(a.predict(s), pa);
}

TEST(Transformer, GradCheckThroughFullModel) {
  Rng rng(6);
  const CausalTransformer m(TransformerConfig{2, 2, 16, 16, 6, 11});
  const TokenSequence s = alternating(rng, 6, 16);
  const ARWindow win = dense_targets(s, 0, 5);
  std::vector<Tensor> in{win.input.tokens};
  for (const auto& p : m.parameters()) in.push_back(p.value);
  const ScalarFn f = [&m, &win](Tape&, std::span<const Var> v) {
    return pretrain_loss(m.predict(v[0], win.input.modalities, v.subspan(1)), win.target);
  };
  const GradReport r = grad_check(f, in, 1e-3);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(Schedule, WarmupAndCosine) {
  const TrainSchedule s{500, 100, 5e-4, 0.0, 8, 1, 0};
  EXPECT_EQ(s.lr_at(0), 0.0);
  EXPECT_NEAR(s.lr_at(50), 2.5e-4, 1e-18);
  EXPECT_EQ(s.lr_at(100), 5e-4);
  EXPECT_NEAR(s.lr_at(300), 2.5e-4, 1e-15);
  EXPECT_NEAR(s.lr_at(499), 5e-4 * 0.5 * (1.0 + std::cos(std::numbers::pi * 399.0 / 400.0)), 1e-18);
  EXPECT_EQ(s.lr_at(500), 0.0);
  for (std::size_t k = 1; k < 100; ++k) EXPECT_GT(s.lr_at(k), s.lr_at(k - 1));
  for (std::size_t k = 101; k < 500; ++k) EXPECT_LE(s.lr_at(k), s.lr_at(k - 1));
}

TEST(Train, ZeroLearningRateLeavesParametersUnchanged) {
  const std::vector<TokenSequence> data{periodic_sequence(10, 16, 1)};
  CausalTransformer m(small_config());
  const auto before = m.parameters();
  const TrainResult r = train(m, data, TrainSchedule{5, 2, 0.0, 1e-2, 8, 2, 0});
  EXPECT_EQ(r.curve.size(), 5u);
  for (std::size_t k = 0; k < before.size(); ++k) EXPECT_EQ(m.parameters()[k].value, before[k].value);
}

TEST(Train, ReducesLossOnPeriodicSequence) {
  const std::vector<TokenSequence> data{periodic_sequence(24, 16, 2)};
  CausalTransformer m(small_config());
  const TrainResult r = train(m, data, TrainSchedule{150, 10, 3e-3, 1e-5, 16, 2, 4});
  ASSERT_EQ(r.curve.size(), 150u);
  double head = 0.0, tail = 0.0;
  for (std::size_t k = 0; k < 10; ++k) {
    head += r.curve[k].loss;
    tail += r.curve[140 + k].loss;
  }
  EXPECT_LT(tail, 0.5 * head);
  for (const LossPoint& p : r.curve) EXPECT_TRUE(std::isfinite(p.loss));
}

TEST(Train, DivergenceIsReported) {
  TokenSequence s = periodic_sequence(10, 16, 3);
  s.tokens(4, 2) = std::nan("");
  const std::vector<TokenSequence> data{s};
  CausalTransformer m(small_config());
  try {
    train(m, data, TrainSchedule{50, 5, 1e-3, 0.0, 16, 1, 0});
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.step, 0);
    EXPECT_EQ(e.exit_code(), 9);
  }
}

TEST(Train, RejectsBadSchedule) {
  const std::vector<TokenSequence> data{periodic_sequence(4, 16, 4)};
  CausalTransformer m(small_config());
  EXPECT_THROW(train(m, data, TrainSchedule{1, 0, 1e-3, 0.0, 16, 1, 0}), ShapeError);
  EXPECT_THROW(train(m, data, TrainSchedule{1, 0, 1e-3, 0.0, 0, 1, 0}), ParameterError);
  EXPECT_THROW(train(m, data, TrainSchedule{1, 0, 1e-3, 0.0, 4, 0, 0}), ParameterError);
  EXPECT_THROW(train(m, std::vector<TokenSequence>{}, TrainSchedule{}), ParameterError);
}

TEST(Rollout, NextModality) {
  using M = Modality;
  const std::vector<M> alt{M::kEvent, M::kImage, M::kEvent};
  EXPECT_EQ(next_modality(alt), M::kImage);
  const std::vector<M> grouped{M::kEvent, M::kEvent, M::kImage, M::kImage, M::kEvent, M::kEvent};
  EXPECT_EQ(next_modality(grouped), M::kImage);
  const std::vector<M> grouped2{M::kEvent, M::kEvent, M::kImage, M::kImage, M::kEvent};
  EXPECT_EQ(next_modality(grouped2), M::kEvent);
  const std::vector<M> single{M::kImage};
  EXPECT_EQ(next_modality(single), M::kImage);
}

TEST(Rollout, HorizonZeroReturnsContext) {
  Rng rng(7);
  const CausalTransformer m(small_config());
  const TokenSequence ctx = alternating(rng, 6, 16);
  const TokenSequence out = rollout(m, ctx, RolloutSpec{6, 0, 16});
  EXPECT_EQ(out.tokens, ctx.tokens);
  EXPECT_EQ(out.modalities, ctx.modalities);
}

TEST(Rollout, ErrorsAndValidation) {
  Rng rng(8);
  const CausalTransformer m(small_config());
  const TokenSequence ctx = alternating(rng, 6, 16);
  EXPECT_THROW(rollout(m, TokenSequence(Tensor({0, 16}), {}), RolloutSpec{0, 2, 16}), RangeError);
  EXPECT_THROW(rollout(m, ctx, RolloutSpec{0, 2, 0}), RangeError);
  EXPECT_THROW(rollout(m, ctx, RolloutSpec{0, 2, 64}), RangeError);
  EXPECT_THROW(rollout(m, ctx, RolloutSpec{8, 2, 16}), RangeError);
  EXPECT_THROW(rollout(m, ctx, RolloutSpec{20, 2, 16}), RangeError);
}

TEST(Rollout, MatchesUnboundedGenerationWithinWindow) {
  Rng rng(9);
  const CausalTransformer m(small_config());
  const TokenSequence ctx = alternating(rng, 8, 16);
  const TokenSequence out = rollout(m, ctx, RolloutSpec{8, 20, 28});
  TokenSequence naive = ctx;
  for (int step = 0; step < 20; ++step) {
    const Tensor p = m.predict(naive);
    naive.append(p.row(p.rows() - 1), naive.modalities[naive.size() - 2]);
  }
  EXPECT_EQ(out.tokens, naive.tokens);
  EXPECT_EQ(out.modalities, naive.modalities);
}

TEST(Rollout, DeskProtocolRunsWithFiniteOutput) {
  // 16 steps of 2 modalities × 2 tokens as context, 32 steps generated with a sliding window.
  Rng rng(10);
  const CausalTransformer m(TransformerConfig{2, 2, 32, 128, 64, 5});
  const Tensor ev = Tensor::randn({32, 32}, rng), im = Tensor::randn({32, 32}, rng);
  const TokenSequence ctx = interleave(ev, im, InterleaveOrder::kEventFirst, 2);
  ASSERT_EQ(ctx.size(), 64u);
  const TokenSequence out = rollout(m, ctx, RolloutSpec{64, 128, 64});
  ASSERT_EQ(out.size(), 192u);
  EXPECT_TRUE(out.tokens.all_finite());
  const std::vector<Modality> want{Modality::kEvent, Modality::kEvent, Modality::kImage, Modality::kImage};
  for (std::size_t k = 64; k < out.size(); ++k) EXPECT_EQ(out.modalities[k], want[k % 4]) << k;
}

TEST(Checkpoint, RoundTrip) {
  Rng rng(11);
  const CausalTransformer m(small_config());
  const std::string bytes = m.checkpoint_bytes();
  const CausalTransformer r = CausalTransformer::from_checkpoint(bytes);
  EXPECT_EQ(r.parameter_count(), m.parameter_count());
  EXPECT_EQ(r.config().seed, m.config().seed);
  const TokenSequence s = alternating(rng, 7, 16);
  EXPECT_EQ(r.predict(s), m.predict(s));
  EXPECT_THROW(CausalTransformer::from_checkpoint(bytes.substr(0, bytes.size() / 2)), IoError);
  EXPECT_THROW(CausalTransformer::from_checkpoint("garbage"), IoError);
}
