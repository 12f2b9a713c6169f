#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <numeric>

#include "gep/events.hpp"

using namespace gep;

namespace {

std::vector<Event> random_events(Rng& rng, std::size_t n, Resolution res, std::int64_t t_max) {
  std::vector<Event> ev;
  for (std::size_t i = 0; i < n; ++i)
    ev.push_back(Event{static_cast<std::uint16_t>(rng.below(res.width)),
                       static_cast<std::uint16_t>(rng.below(res.height)),
                       static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(t_max))),
                       static_cast<std::int8_t>(rng.bernoulli(0.5) ? 1 : -1)});
  std::sort(ev.begin(), ev.end(), [](const Event& a, const Event& b) { return a.t < b.t; });
  return ev;
}

RawCounts counts_from(const std::vector<std::vector<std::uint32_t>>& pos,
                      const std::vector<std::vector<std::uint32_t>>& neg) {
  const std::size_t h = pos.size(), w = pos[0].size();
  RawCounts c{Grid<std::uint32_t>(h, w), Grid<std::uint32_t>(h, w), Grid<std::uint8_t>(h, w), {0, 1}};
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      c.positive(y, x) = pos[y][x];
      c.negative(y, x) = neg[y][x];
      c.mask(y, x) = pos[y][x] + neg[y][x] > 0 ? 1 : 0;
    }
  return c;
}

RawCounts random_counts(Rng& rng, std::size_t h, std::size_t w, std::uint64_t max_count) {
  std::vector<std::vector<std::uint32_t>> p(h, std::vector<std::uint32_t>(w)), n = p;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      p[y][x] = static_cast<std::uint32_t>(rng.below(max_count + 1));
      n[y][x] = static_cast<std::uint32_t>(rng.below(max_count + 1));
    }
  return counts_from(p, n);
}

// Sort-based nearest-rank percentile over both channels.
std::uint32_t sorted_percentile(const RawCounts& c, int n) {
  std::vector<std::uint32_t> all(c.positive.data);
  all.insert(all.end(), c.negative.data.begin(), c.negative.data.end());
  std::sort(all.begin(), all.end());
  const auto rank = static_cast<std::size_t>(std::ceil(n / 100.0 * static_cast<double>(all.size())));
  return all[std::max<std::size_t>(rank, 1) - 1];
}

PseudoFrame random_frame(Rng& rng, std::size_t h, std::size_t w) {
  return normalize(random_counts(rng, h, w, 6), 90);
}

void expect_frame_in_range(const PseudoFrame& f) {
  for (std::size_t y = 0; y < f.height(); ++y)
    for (std::size_t x = 0; x < f.width(); ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_GE(f(y, x, c), 0.0);
        EXPECT_LE(f(y, x, c), 1.0);
      }
      const double m = f(y, x, kChannelMask);
      EXPECT_TRUE(m == 0.0 || m == 1.0);
    }
}

}  // namespace

TEST(Accumulate, SmallExample) {
  const std::vector<Event> ev{{0, 0, 10, 1}, {0, 0, 20, 1}, {1, 0, 30, -1}};
  const RawCounts c = accumulate(ev, {0, 100}, {2, 2});
  EXPECT_EQ(c.positive(0, 0), 2u);
  EXPECT_EQ(c.negative(0, 1), 1u);
  EXPECT_EQ(c.mask(0, 0), 1);
  EXPECT_EQ(c.mask(0, 1), 1);
  EXPECT_EQ(c.mask(1, 0), 0);
  EXPECT_EQ(c.mask(1, 1), 0);
  std::uint32_t total = 0;
  for (std::size_t i = 0; i < 4; ++i) total += c.positive.data[i] + c.negative.data[i];
  EXPECT_EQ(total, 3u);
}

TEST(Accumulate, EmptyList) {
  const RawCounts c = accumulate({}, {0, 100}, {3, 4});
  EXPECT_EQ(c.height(), 3u);
  EXPECT_EQ(c.width(), 4u);
  for (std::size_t i = 0; i < 12; ++i) {
    EXPECT_EQ(c.positive.data[i], 0u);
    EXPECT_EQ(c.negative.data[i], 0u);
    EXPECT_EQ(c.mask.data[i], 0);
  }
}

TEST(Accumulate, MatchesHistogramOracle) {
  Rng rng(3);
  const Resolution res{7, 9};
  const auto ev = random_events(rng, 1000, res, 1000);
  const TimeWindow win{200, 500};
  std::map<std::tuple<int, int, int>, std::uint32_t> hist;
  for (const Event& e : ev)
    if (e.t >= 200 && e.t < 700) ++hist[{e.y, e.x, e.p}];
  const RawCounts c = accumulate(ev, win, res);
  for (std::size_t y = 0; y < res.height; ++y)
    for (std::size_t x = 0; x < res.width; ++x) {
      const int yi = static_cast<int>(y), xi = static_cast<int>(x);
      const std::uint32_t p = hist.count({yi, xi, 1}) ? hist[{yi, xi, 1}] : 0;
      const std::uint32_t n = hist.count({yi, xi, -1}) ? hist[{yi, xi, -1}] : 0;
      EXPECT_EQ(c.positive(y, x), p);
      EXPECT_EQ(c.negative(y, x), n);
      EXPECT_EQ(c.mask(y, x), p + n > 0 ? 1 : 0);
    }
}

TEST(Accumulate, HalfOpenWindow) {
  const std::vector<Event> ev{{0, 0, 99, 1}, {0, 0, 100, 1}, {0, 0, 200, 1}};
  EXPECT_EQ(accumulate(ev, {100, 100}, {1, 1}).positive(0, 0), 1u);
  EXPECT_EQ(accumulate(ev, {0, 100}, {1, 1}).positive(0, 0), 1u);
}

TEST(Accumulate, RejectsBadInput) {
  const std::vector<Event> off{{2, 0, 0, 1}};
  EXPECT_THROW(accumulate(off, {0, 10}, {2, 2}), RangeError);
  const std::vector<Event> off_y{{0, 5, 1000, 1}};
  EXPECT_THROW(accumulate(off_y, {0, 10}, {2, 2}), RangeError);
  const std::vector<Event> bad_p{{0, 0, 0, 0}};
  EXPECT_THROW(accumulate(bad_p, {0, 10}, {2, 2}), DomainError);
  EXPECT_THROW(accumulate({}, {0, 0}, {2, 2}), ParameterError);
  EXPECT_THROW(accumulate_bins({}, {0, 10}, {2, 2}, 0), ParameterError);
}

TEST(Accumulate, OrderIndependent) {
  Rng rng(4);
  const Resolution res{5, 5};
  auto ev = random_events(rng, 300, res, 1000);
  const RawCounts ref = accumulate(ev, {0, 1000}, res);
  for (int k = 0; k < 5; ++k) {
    for (std::size_t i = ev.size(); i-- > 1;) std::swap(ev[i], ev[rng.below(i + 1)]);
    EXPECT_EQ(accumulate(ev, {0, 1000}, res), ref);
  }
}

TEST(Accumulate, WindowSplitSums) {
  Rng rng(5);
  const Resolution res{6, 4};
  const auto ev = random_events(rng, 500, res, 1000);
  RawCounts a = accumulate(ev, {100, 350}, res);
  a += accumulate(ev, {450, 400}, res);
  EXPECT_EQ(a, accumulate(ev, {100, 750}, res));
  const auto bins = accumulate_bins(ev, {0, 1000}, res, 7);
  ASSERT_EQ(bins.size(), 7u);
  RawCounts sum = bins[0];
  for (std::size_t k = 1; k < bins.size(); ++k) {
    EXPECT_EQ(bins[k].window.start, bins[k - 1].window.end());
    sum += bins[k];
  }
  EXPECT_EQ(bins.back().window.end(), 1000);
  EXPECT_EQ(sum, accumulate(ev, {0, 1000}, res));
}

TEST(Normalize, Example) {
  const RawCounts c = counts_from({{0, 1}, {2, 100}}, {{0, 0}, {0, 0}});
  const PseudoFrame f = normalize(c, 100);
  EXPECT_EQ(f.percentile, 100);
  EXPECT_DOUBLE_EQ(f(0, 0, kChannelPositive), 0.0);
  EXPECT_DOUBLE_EQ(f(0, 1, kChannelPositive), 0.01);
  EXPECT_DOUBLE_EQ(f(1, 0, kChannelPositive), 0.02);
  EXPECT_DOUBLE_EQ(f(1, 1, kChannelPositive), 1.0);
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 2; ++x) EXPECT_EQ(f(y, x, kChannelNegative), 0.0);
  EXPECT_EQ(f(0, 0, kChannelMask), 0.0);
  EXPECT_EQ(f(1, 1, kChannelMask), 1.0);
}

TEST(Normalize, AllZeroGivesZeroFrame) {
  const RawCounts c = accumulate({}, {0, 10}, {3, 3});
  for (int n : {1, 50, 99, 100}) {
    const PseudoFrame f = normalize(c, n);
    for (double v : f.data.data()) {
      EXPECT_FALSE(std::isnan(v));
      EXPECT_EQ(v, 0.0);
    }
  }
}

TEST(Normalize, ZeroPercentileFallsBackToMax) {
  // Two nonzero values out of 32: the median is 0.
  std::vector<std::vector<std::uint32_t>> p(4, std::vector<std::uint32_t>(4, 0)), n = p;
  p[1][2] = 4;
  n[3][0] = 2;
  const PseudoFrame f = normalize(counts_from(p, n), 50);
  EXPECT_DOUBLE_EQ(f(1, 2, kChannelPositive), 1.0);
  EXPECT_DOUBLE_EQ(f(3, 0, kChannelNegative), 0.5);
}

TEST(Normalize, MatchesSortOracle) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const RawCounts c = random_counts(rng, 5, 6, 20);
    const int n = trial % 2 ? 99 : static_cast<int>(1 + rng.below(100));
    const std::uint32_t alpha = sorted_percentile(c, n);
    EXPECT_EQ(count_percentile(c, n), alpha);
    const PseudoFrame f = normalize(c, n);
    expect_frame_in_range(f);
    for (std::size_t y = 0; y < 5; ++y)
      for (std::size_t x = 0; x < 6; ++x) {
        if (alpha == 0) continue;
        const double a = alpha;
        EXPECT_DOUBLE_EQ(f(y, x, kChannelPositive), std::min<double>(c.positive(y, x), a) / a);
        EXPECT_DOUBLE_EQ(f(y, x, kChannelNegative), std::min<double>(c.negative(y, x), a) / a);
        if (c.positive(y, x) >= alpha) {
          EXPECT_EQ(f(y, x, kChannelPositive), 1.0);
        }
        EXPECT_EQ(f(y, x, kChannelMask), c.mask(y, x) ? 1.0 : 0.0);
      }
  }
}

TEST(Normalize, ScaleInvariantAtFullPercentile) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const RawCounts c = random_counts(rng, 4, 4, 9);
    RawCounts scaled = c;
    const std::uint32_t k = static_cast<std::uint32_t>(2 + rng.below(7));
    for (auto& v : scaled.positive.data) v *= k;
    for (auto& v : scaled.negative.data) v *= k;
    const PseudoFrame a = normalize(c, 100), b = normalize(scaled, 100);
    EXPECT_LT(max_abs_diff(a.data, b.data), 1e-15);
  }
}

TEST(Normalize, RejectsBadPercentile) {
  const RawCounts c = accumulate({}, {0, 10}, {2, 2});
  EXPECT_THROW(normalize(c, 0), ParameterError);
  EXPECT_THROW(normalize(c, 101), ParameterError);
}

TEST(Augment, Involutions) {
  Rng rng(8);
  const PseudoFrame f = random_frame(rng, 6, 5);
  AugSpec swap;
  swap.polarity_swap = true;
  AugSpec flip;
  flip.hflip = true;
  EXPECT_EQ(augment(augment(f, swap), swap).data, f.data);
  EXPECT_EQ(augment(augment(f, flip), flip).data, f.data);
  const PseudoFrame s = augment(f, swap);
  EXPECT_EQ(s(2, 3, kChannelPositive), f(2, 3, kChannelNegative));
  const PseudoFrame h = augment(f, flip);
  EXPECT_EQ(h(2, 0, kChannelMask), f(2, 4, kChannelMask));
}

TEST(Augment, SwapCommutesWithFlip) {
  Rng rng(9);
  const PseudoFrame f = random_frame(rng, 4, 7);
  AugSpec swap, flip, both;
  swap.polarity_swap = true;
  flip.hflip = true;
  both.polarity_swap = both.hflip = true;
  EXPECT_EQ(augment(augment(f, swap), flip).data, augment(augment(f, flip), swap).data);
  EXPECT_EQ(augment(f, both).data, augment(augment(f, flip), swap).data);
}

TEST(Augment, IdentityCropAndUnitUpscale) {
  Rng rng(10);
  const PseudoFrame f = random_frame(rng, 8, 6);
  AugSpec crop;
  crop.crop = CropSpec{0, 0, 8, 6, 8, 6};
  EXPECT_LT(max_abs_diff(augment(f, crop).data, f.data), 1e-15);
  AugSpec up;
  up.upscale = 1.0;
  EXPECT_EQ(augment(f, up).data, f.data);
}

TEST(Augment, CropResizeAndUpscale) {
  Rng rng(11);
  const PseudoFrame f = random_frame(rng, 8, 8);
  AugSpec crop;
  crop.crop = CropSpec{2, 2, 4, 4, 4, 4};
  const PseudoFrame c = augment(f, crop);
  ASSERT_EQ(c.height(), 4u);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x)
      for (std::size_t ch = 0; ch < 3; ++ch) EXPECT_NEAR(c(y, x, ch), f(y + 2, x + 2, ch), 1e-15);
  AugSpec up;
  up.upscale = 2.0;
  const PseudoFrame u = augment(f, up);
  EXPECT_EQ(u.height(), 8u);
  expect_frame_in_range(u);
  // Nearest-neighbour mask: every output mask pixel copies a central pixel.
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x)
      EXPECT_EQ(u(y, x, kChannelMask), f(2 + y / 2, 2 + x / 2, kChannelMask));
}

TEST(Augment, RandomSpecsStayValid) {
  Rng rng(12);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const PseudoFrame f = random_frame(rng, 8, 12);
    const PseudoFrame a = augment_random(f, seed, AugProbabilities{0.5, 0.5, 0.25, 1.0, 0.5, 2.0});
    EXPECT_EQ(a.height(), 8u);
    EXPECT_EQ(a.width(), 12u);
    expect_frame_in_range(a);
    EXPECT_EQ(augment_random(f, seed).data, augment_random(f, seed).data);
  }
}

TEST(Augment, RejectsInvalidSpec) {
  Rng rng(13);
  const PseudoFrame f = random_frame(rng, 4, 4);
  AugSpec out;
  out.crop = CropSpec{2, 0, 3, 4, 4, 4};
  EXPECT_THROW(augment(f, out), RangeError);
  AugSpec zero;
  zero.crop = CropSpec{0, 0, 4, 4, 0, 4};
  EXPECT_THROW(augment(f, zero), ParameterError);
  AugSpec shrink;
  shrink.upscale = 0.5;
  EXPECT_THROW(augment(f, shrink), ParameterError);
}

TEST(EventFile, RoundTrip) {
  Rng rng(14);
  const Resolution res{10, 20};
  auto ev = random_events(rng, 100, res, 1'000'000'000);
  ev.push_back(Event{19, 9, -5, -1});
  const std::string bytes = encode_events(res, ev);
  EXPECT_EQ(bytes.size(), kEventHeaderBytes + kEventRecordBytes * ev.size());
  EXPECT_EQ(bytes.substr(0, 4), "EVT1");
  const EventFile f = decode_events(bytes);
  EXPECT_EQ(f.resolution, res);
  EXPECT_EQ(f.events, ev);

  const auto path = std::filesystem::temp_directory_path() / "gep_test_events.evt";
  write_event_file(path.string(), res, ev);
  EXPECT_EQ(read_event_file(path.string()).events, ev);
  std::filesystem::remove(path);
}

TEST(EventFile, RejectsCorruptInput) {
  const Resolution res{2, 2};
  const std::vector<Event> ev{{1, 1, 5, 1}};
  std::string bytes = encode_events(res, ev);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_events(bad_magic), IoError);
  EXPECT_THROW(decode_events(bytes.substr(0, bytes.size() - 1)), IoError);
  EXPECT_THROW(decode_events("EVT"), IoError);
  std::string bad_coord = bytes;
  bad_coord[kEventHeaderBytes] = 7;
  EXPECT_THROW(decode_events(bad_coord), RangeError);
  EXPECT_THROW(read_event_file("/nonexistent/dir/file.evt"), IoError);
  const std::vector<Event> off{{3, 0, 0, 1}};
  EXPECT_THROW(encode_events(res, off), RangeError);
}
