#include <gtest/gtest.h>

#include <algorithm>
#include <map>

#include "gep/gradcheck.hpp"
#include "gep/sequence.hpp"

using namespace gep;

namespace {

TokenSequence random_sequence(Rng& rng, std::size_t k, std::size_t d) {
  std::vector<Modality> m(k);
  for (auto& x : m) x = rng.bernoulli(0.5) ? Modality::kEvent : Modality::kImage;
  return TokenSequence(Tensor::randn({k, d}, rng), m);
}

std::vector<std::vector<double>> sorted_rows(const Tensor& t) {
  std::vector<std::vector<double>> rows;
  for (std::size_t r = 0; r < t.rows(); ++r) rows.emplace_back(t.row(r).begin(), t.row(r).end());
  std::sort(rows.begin(), rows.end());
  return rows;
}

}  // namespace

TEST(Compose, ZeroTablesAreIdentity) {
  Rng rng(1);
  const TokenSequence s = random_sequence(rng, 5, 3);
  EXPECT_EQ(compose_tokens(s, EncodingTables::zeros(8, 3)), s.tokens);
}

TEST(Compose, ZeroTokensGiveTableSum) {
  Rng rng(2);
  const EncodingTables enc = EncodingTables::random(6, 4, rng);
  const std::vector<Modality> m{Modality::kImage, Modality::kEvent, Modality::kImage};
  const Tensor x = compose_tokens(TokenSequence(Tensor({3, 4}), m), enc);
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t j = 0; j < 4; ++j)
      EXPECT_EQ(x(k, j), enc.positional(k, j) + enc.modality(static_cast<std::size_t>(m[k]), j));
}

TEST(Compose, MatchesLoopOracleAndTapeVersion) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t k = 1 + rng.below(10), d = 1 + rng.below(6);
    const TokenSequence s = random_sequence(rng, k, d);
    const EncodingTables enc = EncodingTables::random(10, d, rng);
    const Tensor x = compose_tokens(s, enc);
    for (std::size_t r = 0; r < k; ++r)
      for (std::size_t j = 0; j < d; ++j) {
        const double want = s.tokens(r, j) + enc.positional(r, j) +
                            enc.modality(s.modalities[r] == Modality::kEvent ? 0 : 1, j);
        EXPECT_EQ(x(r, j), want);
      }
    Tape t;
    const Var v = compose_tokens(t.constant(s.tokens), s.modalities, t.constant(enc.positional),
                                 t.constant(enc.modality));
    EXPECT_EQ(v.value(), x);
  }
}

TEST(Compose, IsLinearInTokens) {
  Rng rng(4);
  const TokenSequence s = random_sequence(rng, 6, 3);
  const EncodingTables enc = EncodingTables::random(6, 3, rng);
  const double a = -2.5;
  Tensor scaled = s.tokens;
  scaled *= a;
  const Tensor xa = compose_tokens(TokenSequence(scaled, s.modalities), enc);
  const Tensor x0 = compose_tokens(TokenSequence(Tensor({6, 3}), s.modalities), enc);
  for (std::size_t i = 0; i < xa.size(); ++i) EXPECT_NEAR(xa[i] - x0[i], a * s.tokens[i], 1e-12);
}

TEST(Compose, GradientsReachBothTables) {
  Rng rng(5);
  const TokenSequence s = random_sequence(rng, 4, 3);
  const std::vector<Modality> m = s.modalities;
  const ScalarFn f = [m](Tape&, std::span<const Var> v) {
    return sum(square(compose_tokens(v[0], m, v[1], v[2])));
  };
  const std::vector<Tensor> in{s.tokens, Tensor::randn({5, 3}, rng), Tensor::randn({2, 3}, rng)};
  EXPECT_TRUE(grad_check(f, in, 1e-6).passed);
}

TEST(Compose, RejectsOverlongSequence) {
  Rng rng(6);
  const TokenSequence s = random_sequence(rng, 5, 2);
  EXPECT_THROW(compose_tokens(s, EncodingTables::zeros(4, 2)), RangeError);
  EXPECT_THROW(compose_tokens(s, EncodingTables::zeros(5, 3)), ShapeError);
  Tape t;
  EXPECT_THROW(compose_tokens(t.constant(s.tokens), s.modalities, t.constant(Tensor({4, 2})),
                              t.constant(Tensor({2, 2}))),
               RangeError);
}

TEST(Interleave, SingleStep) {
  const Tensor e = Tensor::matrix(1, 2, {1, 2}), i = Tensor::matrix(1, 2, {3, 4});
  const TokenSequence s = interleave(e, i);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s.modalities, (std::vector<Modality>{Modality::kEvent, Modality::kImage}));
  EXPECT_EQ(s.tokens, Tensor::matrix(2, 2, {1, 2, 3, 4}));
  const TokenSequence r = interleave(e, i, InterleaveOrder::kImageFirst);
  EXPECT_EQ(r.tokens, Tensor::matrix(2, 2, {3, 4, 1, 2}));
  EXPECT_EQ(r.modalities.front(), Modality::kImage);
}

TEST(Interleave, PatternAndRoundTrip) {
  Rng rng(7);
  const Tensor e = Tensor::randn({3, 4}, rng), i = Tensor::randn({3, 4}, rng);
  const TokenSequence s = interleave(e, i);
  const std::vector<Modality> want{Modality::kEvent, Modality::kImage, Modality::kEvent,
                                   Modality::kImage, Modality::kEvent, Modality::kImage};
  EXPECT_EQ(s.modalities, want);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_EQ(s.tokens(2 * t, j), e(t, j));
      EXPECT_EQ(s.tokens(2 * t + 1, j), i(t, j));
    }
  const auto [de, di] = deinterleave(s);
  EXPECT_EQ(de, e);
  EXPECT_EQ(di, i);
  Tensor both({6, 4});
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t j = 0; j < 4; ++j) {
      both(t, j) = e(t, j);
      both(t + 3, j) = i(t, j);
    }
  EXPECT_EQ(sorted_rows(s.tokens), sorted_rows(both));
}

TEST(Interleave, GroupedTokens) {
  Rng rng(8);
  const Tensor e = Tensor::randn({4, 2}, rng), i = Tensor::randn({4, 2}, rng);
  const TokenSequence s = interleave(e, i, InterleaveOrder::kEventFirst, 2);
  const std::vector<Modality> want{Modality::kEvent, Modality::kEvent, Modality::kImage, Modality::kImage,
                                   Modality::kEvent, Modality::kEvent, Modality::kImage, Modality::kImage};
  EXPECT_EQ(s.modalities, want);
  const auto [de, di] = deinterleave(s);
  EXPECT_EQ(de, e);
  EXPECT_EQ(di, i);
  EXPECT_THROW(interleave(e, i, InterleaveOrder::kEventFirst, 3), ShapeError);
}

TEST(Interleave, RejectsUnpairedStreams) {
  EXPECT_THROW(interleave(Tensor({3, 2}), Tensor({2, 2})), ShapeError);
  EXPECT_THROW(interleave(Tensor({3, 2}), Tensor({3, 3})), ShapeError);
  EXPECT_THROW(TokenSequence(Tensor({2, 2}), {Modality::kEvent}), ShapeError);
}

TEST(Sequence, ImageOnlyAndConcat) {
  Rng rng(9);
  const TokenSequence im = image_only(Tensor::randn({3, 2}, rng));
  for (Modality m : im.modalities) EXPECT_EQ(m, Modality::kImage);
  const TokenSequence pair = interleave(Tensor::randn({1, 2}, rng), Tensor::randn({1, 2}, rng));
  const TokenSequence c = concat(pair, im);
  EXPECT_EQ(c.size(), 5u);
  EXPECT_EQ(c.slice(2, 5).tokens, im.tokens);
  EXPECT_EQ(c.slice(0, 2).modalities, pair.modalities);
  EXPECT_THROW(concat(pair, image_only(Tensor({1, 3}))), ShapeError);
  EXPECT_THROW(c.slice(3, 6), RangeError);
}

TEST(DenseTargets, Definition) {
  const TokenSequence s(Tensor::matrix(3, 1, {10, 20, 30}),
                        {Modality::kEvent, Modality::kImage, Modality::kEvent});
  const ARWindow w = dense_targets(s, 0, 2);
  EXPECT_EQ(w.input.tokens, Tensor::matrix(2, 1, {10, 20}));
  EXPECT_EQ(w.target, Tensor::matrix(2, 1, {20, 30}));
  const ARWindow one = dense_targets(s, 1, 1);
  EXPECT_EQ(one.input.tokens, Tensor::matrix(1, 1, {20}));
  EXPECT_EQ(one.target, Tensor::matrix(1, 1, {30}));
  EXPECT_EQ(one.input.modalities.front(), Modality::kImage);
}

TEST(DenseTargets, RangeErrors) {
  Rng rng(10);
  const TokenSequence s = random_sequence(rng, 5, 2);
  EXPECT_THROW(dense_targets(s, 0, 0), RangeError);
  EXPECT_THROW(dense_targets(s, 0, 5), RangeError);
  EXPECT_THROW(dense_targets(s, 3, 2), RangeError);
  EXPECT_NO_THROW(dense_targets(s, 2, 2));
  EXPECT_THROW(sample_window_start(5, 5, rng), RangeError);
  EXPECT_THROW(sample_window_start(5, 0, rng), RangeError);
}

TEST(DenseTargets, RandomStartsStayInRange) {
  Rng rng(11);
  const std::size_t k = 20, w = 7;
  const TokenSequence s = random_sequence(rng, k, 2);
  std::vector<int> seen(k, 0);
  for (int draw = 0; draw < 100; ++draw) {
    const std::size_t st = sample_window_start(k, w, rng);
    ASSERT_LE(st + w + 1, k);
    ++seen[st];
    const ARWindow win = dense_targets(s, st, w);
    EXPECT_EQ(win.input.size(), w);
    EXPECT_EQ(win.target.rows(), w);
  }
  for (std::size_t st = 0; st + w + 1 <= k; ++st) EXPECT_GT(seen[st], 0) << st;
}

TEST(DenseTargets, InteriorPairCoverage) {
  const std::size_t k = 12, w = 4;
  std::vector<double> v(k);
  for (std::size_t i = 0; i < k; ++i) v[i] = static_cast<double>(i);
  const TokenSequence s(Tensor({k, 1}, v), std::vector<Modality>(k, Modality::kEvent));
  std::map<std::pair<int, int>, int> count;
  for (std::size_t st = 0; st + w + 1 <= k; ++st) {
    const ARWindow win = dense_targets(s, st, w);
    for (std::size_t j = 0; j < w; ++j)
      ++count[{static_cast<int>(win.input.tokens(j, 0)), static_cast<int>(win.target(j, 0))}];
  }
  for (std::size_t a = 0; a + 1 < k; ++a) {
    const int c = count[{static_cast<int>(a), static_cast<int>(a + 1)}];
    const std::size_t expected = std::min({a + 1, w, k - 1 - a, k - w});
    EXPECT_EQ(static_cast<std::size_t>(c), expected) << a;
    if (a + 1 >= w && a + w <= k - 1) {
      EXPECT_EQ(static_cast<std::size_t>(c), w);
    }
  }
}

TEST(Aggregate, DegenerateFactorsConcatenate) {
  Rng rng(12);
  const TokenGrid g{3, 4, Tensor::randn({12, 2}, rng), Modality::kImage};
  const TokenSequence s = aggregate_tokens(g, 1, 1);
  EXPECT_EQ(s.size(), 24u);
  EXPECT_EQ(s.slice(0, 12).tokens, g.tokens);
  EXPECT_EQ(s.slice(12, 24).tokens, g.tokens);
  EXPECT_EQ(s.modalities.front(), Modality::kImage);
}

TEST(Aggregate, PoolsMatchMeanOracle) {
  Rng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t t = 4, q = 4, d = 3;
    const std::size_t tp = trial % 2 ? 4 : 2, sp = trial % 3 ? 4 : 2;
    const TokenGrid g{t, q, Tensor::randn({t * q, d}, rng), Modality::kEvent};
    const TokenSequence s = aggregate_tokens(g, tp, sp);
    ASSERT_EQ(s.size(), (t / tp) * q + t * (q / sp));
    std::size_t r = 0;
    for (std::size_t bt = 0; bt < t / tp; ++bt)
      for (std::size_t slot = 0; slot < q; ++slot, ++r)
        for (std::size_t j = 0; j < d; ++j) {
          double m = 0.0;
          for (std::size_t k = 0; k < tp; ++k) m += g.tokens((bt * tp + k) * q + slot, j);
          EXPECT_NEAR(s.tokens(r, j), m / static_cast<double>(tp), 1e-12);
        }
    for (std::size_t step = 0; step < t; ++step)
      for (std::size_t bq = 0; bq < q / sp; ++bq, ++r)
        for (std::size_t j = 0; j < d; ++j) {
          double m = 0.0;
          for (std::size_t k = 0; k < sp; ++k) m += g.tokens(step * q + bq * sp + k, j);
          EXPECT_NEAR(s.tokens(r, j), m / static_cast<double>(sp), 1e-12);
        }
  }
  const TokenGrid g{4, 4, Tensor({16, 2}), Modality::kEvent};
  EXPECT_EQ(aggregate_tokens(g, 4, 4).size(), 8u);
}

TEST(Aggregate, ReducesTokenCount) {
  Rng rng(14);
  const std::size_t t = 6, q = 8;
  const TokenGrid g{t, q, Tensor::randn({t * q, 2}, rng), Modality::kEvent};
  for (std::size_t tp : {1, 2, 3, 6})
    for (std::size_t sp : {1, 2, 4, 8}) {
      const std::size_t n = aggregate_tokens(g, tp, sp).size();
      if (tp > 1 || sp > 1) {
        EXPECT_LT(n, 2 * t * q);
      } else {
        EXPECT_EQ(n, 2 * t * q);
      }
    }
}

TEST(Aggregate, RejectsNonDivisibleFactors) {
  const TokenGrid g{4, 6, Tensor({24, 2}), Modality::kEvent};
  EXPECT_THROW(aggregate_tokens(g, 3, 1), ShapeError);
  EXPECT_THROW(aggregate_tokens(g, 1, 4), ShapeError);
  EXPECT_THROW(aggregate_tokens(g, 0, 1), ShapeError);
  const TokenGrid bad{4, 6, Tensor({23, 2}), Modality::kEvent};
  EXPECT_THROW(aggregate_tokens(bad, 1, 1), ShapeError);
}

TEST(Serialization, RoundTrip) {
  Rng rng(15);
  const TokenSequence s = random_sequence(rng, 7, 5);
  const std::string bytes = encode_sequence(s, 64);
  EXPECT_EQ(bytes.substr(0, 4), "GSEQ");
  const DecodedSequence d = decode_sequence(bytes);
  EXPECT_EQ(d.max_len, 64u);
  EXPECT_EQ(d.sequence.tokens, s.tokens);
  EXPECT_EQ(d.sequence.modalities, s.modalities);
  EXPECT_THROW(decode_sequence(bytes.substr(0, bytes.size() - 1)), IoError);
  std::string bad = bytes;
  bad[1] = 'X';
  EXPECT_THROW(decode_sequence(bad), IoError);
  std::string bad_mod = bytes;
  bad_mod.back() = 5;
  EXPECT_THROW(decode_sequence(bad_mod), IoError);
}
