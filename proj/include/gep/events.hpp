#pragma once

// Event streams, count accumulation and percentile-normalized pseudo-frames.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gep/bytes.hpp"
#include "gep/error.hpp"
#include "gep/rng.hpp"
#include "gep/tensor.hpp"

namespace gep {

struct Event {
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  std::int64_t t = 0;  // nanoseconds
  std::int8_t p = 1;   // +1 or -1

  friend bool operator==(const Event&, const Event&) = default;
};

struct Resolution {
  std::size_t height = 0;
  std::size_t width = 0;

  friend bool operator==(const Resolution&, const Resolution&) = default;
};

/// Half-open interval [start, start + duration) in nanoseconds.
struct TimeWindow {
  std::int64_t start = 0;
  std::int64_t duration = 0;

  std::int64_t end() const { return start + duration; }
  bool contains(std::int64_t t) const { return t >= start && t < end(); }
};

template <class T>
struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(std::size_t h, std::size_t w, T fill = T{})
      : height(h), width(w), data(h * w, fill) {}

  T& operator()(std::size_t y, std::size_t x) { return data[y * width + x]; }
  const T& operator()(std::size_t y, std::size_t x) const { return data[y * width + x]; }

  friend bool operator==(const Grid&, const Grid&) = default;
};

struct RawCounts {
  Grid<std::uint32_t> positive;  // M_r
  Grid<std::uint32_t> negative;  // M_b
  Grid<std::uint8_t> mask;       // 1 where any event fell in the window
  TimeWindow window;

  std::size_t height() const { return mask.height; }
  std::size_t width() const { return mask.width; }

  RawCounts& operator+=(const RawCounts& o) {
    for (std::size_t i = 0; i < mask.data.size(); ++i) {
      positive.data[i] += o.positive.data[i];
      negative.data[i] += o.negative.data[i];
      mask.data[i] = (positive.data[i] + negative.data[i]) > 0 ? 1 : 0;
    }
    return *this;
  }

  friend bool operator==(const RawCounts& a, const RawCounts& b) {
    return a.positive == b.positive && a.negative == b.negative && a.mask == b.mask;
  }
};

inline constexpr std::size_t kChannelPositive = 0;
inline constexpr std::size_t kChannelMask = 1;
inline constexpr std::size_t kChannelNegative = 2;

/// H×W×3 frame, channels (positive, mask, negative), values in [0, 1].
struct PseudoFrame {
  Tensor data;
  int percentile = 99;

  std::size_t height() const { return data.dim(0); }
  std::size_t width() const { return data.dim(1); }
  double operator()(std::size_t y, std::size_t x, std::size_t c) const { return data(y, x, c); }
};

inline void validate_event(const Event& e, Resolution res) {
  if (e.x >= res.width || e.y >= res.height)
    throw RangeError("event at (" + std::to_string(e.x) + ", " + std::to_string(e.y) +
                     ") outside " + std::to_string(res.width) + "x" +
                     std::to_string(res.height) + " sensor");
  if (e.p != 1 && e.p != -1)
    throw DomainError("event polarity must be +1 or -1, got " + std::to_string(e.p));
}

/// Counts events per pixel and polarity inside the window. Input order does
/// not matter; every event is validated, including those outside the window.
inline RawCounts accumulate(std::span<const Event> events, TimeWindow window,
                            Resolution res) {
  if (window.duration <= 0) throw ParameterError("accumulate: empty time window");
  RawCounts out{Grid<std::uint32_t>(res.height, res.width),
                Grid<std::uint32_t>(res.height, res.width),
                Grid<std::uint8_t>(res.height, res.width), window};
  for (const Event& e : events) {
    validate_event(e, res);
    if (!window.contains(e.t)) continue;
    if (e.p > 0)
      ++out.positive(e.y, e.x);
    else
      ++out.negative(e.y, e.x);
    out.mask(e.y, e.x) = 1;
  }
  return out;
}

/// Splits the window into `bins` contiguous sub-windows and accumulates each.
inline std::vector<RawCounts> accumulate_bins(std::span<const Event> events,
                                              TimeWindow window, Resolution res,
                                              std::size_t bins) {
  if (bins == 0) throw ParameterError("accumulate_bins: bins must be >= 1");
  std::vector<RawCounts> out;
  for (std::size_t k = 0; k < bins; ++k) {
    const std::int64_t b0 = window.start + window.duration * static_cast<std::int64_t>(k) /
                                               static_cast<std::int64_t>(bins);
    const std::int64_t b1 = window.start + window.duration * static_cast<std::int64_t>(k + 1) /
                                               static_cast<std::int64_t>(bins);
    out.push_back(accumulate(events, TimeWindow{b0, b1 - b0}, res));
  }
  return out;
}

/// Nearest-rank n-th percentile of the pooled positive and negative counts,
/// zeros included: the value at 1-based rank ceil(n/100 * 2HW) in sorted order.
inline std::uint32_t count_percentile(const RawCounts& counts, int n) {
  if (n <= 0 || n > 100) throw ParameterError("percentile must be in (0, 100]");
  std::vector<std::uint32_t> pool;
  pool.reserve(counts.positive.data.size() * 2);
  pool.insert(pool.end(), counts.positive.data.begin(), counts.positive.data.end());
  pool.insert(pool.end(), counts.negative.data.begin(), counts.negative.data.end());
  if (pool.empty()) return 0;
  const std::size_t rank = (static_cast<std::size_t>(n) * pool.size() + 99) / 100;
  std::nth_element(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(rank - 1), pool.end());
  return pool[rank - 1];
}

/// min(M_c, α) / α for the two count channels, mask copied. If the
/// percentile is 0 the maximum count is used instead; if that is 0 too the
/// count channels are all zero.
inline PseudoFrame normalize(const RawCounts& counts, int n = 99) {
  std::uint32_t alpha = count_percentile(counts, n);
  if (alpha == 0) {
    for (std::uint32_t v : counts.positive.data) alpha = std::max(alpha, v);
    for (std::uint32_t v : counts.negative.data) alpha = std::max(alpha, v);
  }
  const std::size_t h = counts.height(), w = counts.width();
  PseudoFrame f{Tensor({h, w, 3}), n};
  const double a = static_cast<double>(alpha);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      if (alpha > 0) {
        f.data(y, x, kChannelPositive) =
            static_cast<double>(std::min(counts.positive(y, x), alpha)) / a;
        f.data(y, x, kChannelNegative) =
            static_cast<double>(std::min(counts.negative(y, x), alpha)) / a;
      }
      f.data(y, x, kChannelMask) = counts.mask(y, x) ? 1.0 : 0.0;
    }
  return f;
}

struct CropSpec {
  std::size_t top = 0;
  std::size_t left = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t out_height = 0;
  std::size_t out_width = 0;
};

struct AugSpec {
  bool polarity_swap = false;
  bool hflip = false;
  std::optional<CropSpec> crop;
  // Zoom by this factor about the center, keeping the frame size.
  std::optional<double> upscale;
};

struct AugProbabilities {
  double polarity_swap = 0.5;
  double hflip = 0.5;
  double crop_scale_min = 0.25;
  double crop_scale_max = 1.0;
  double upscale = 0.1;
  double upscale_factor = 2.0;
};

inline void validate(const AugSpec& spec, std::size_t h, std::size_t w) {
  if (spec.crop) {
    const CropSpec& c = *spec.crop;
    if (c.height == 0 || c.width == 0 || c.top + c.height > h || c.left + c.width > w)
      throw RangeError("crop rectangle outside the frame");
    if (c.out_height == 0 || c.out_width == 0)
      throw ParameterError("crop output size must be positive");
  }
  if (spec.upscale && !(*spec.upscale >= 1.0))
    throw ParameterError("upscale factor must be >= 1");
}

namespace detail {

// Pixel-center mapping from a destination index to continuous source
// coordinates: src = (dst + 0.5) * in / out - 0.5, offset by `origin`.
inline double src_coord(std::size_t dst, double origin, double in, double out) {
  return origin + (static_cast<double>(dst) + 0.5) * in / out - 0.5;
}

inline double clampd(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

// Resamples the region [top, top+rh) x [left, left+rw) (continuous) of `src`
// onto an out_h×out_w grid. Count channels are bilinear, the mask channel is
// nearest-neighbour.
inline Tensor resample(const Tensor& src, double top, double left, double rh, double rw,
                       std::size_t out_h, std::size_t out_w) {
  const std::size_t h = src.dim(0), w = src.dim(1);
  Tensor out({out_h, out_w, 3});
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const double sy = clampd(src_coord(oy, top, rh, static_cast<double>(out_h)), 0.0,
                             static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - static_cast<double>(y0);
    const double ny = top + (static_cast<double>(oy) + 0.5) * rh / static_cast<double>(out_h);
    const auto my = static_cast<std::size_t>(clampd(std::floor(ny), 0.0, static_cast<double>(h - 1)));
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const double sx = clampd(src_coord(ox, left, rw, static_cast<double>(out_w)), 0.0,
                               static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t c : {kChannelPositive, kChannelNegative}) {
        const double top_v = (1.0 - fx) * src(y0, x0, c) + fx * src(y0, x1, c);
        const double bot_v = (1.0 - fx) * src(y1, x0, c) + fx * src(y1, x1, c);
        out(oy, ox, c) = clampd((1.0 - fy) * top_v + fy * bot_v, 0.0, 1.0);
      }
      const double nx = left + (static_cast<double>(ox) + 0.5) * rw / static_cast<double>(out_w);
      const auto mx = static_cast<std::size_t>(clampd(std::floor(nx), 0.0, static_cast<double>(w - 1)));
      out(oy, ox, kChannelMask) = src(my, mx, kChannelMask);
    }
  }
  return out;
}

}  // namespace detail

/// Applies, in order: polarity swap, horizontal flip, crop + resize, center
/// upscale. Deterministic in (frame, spec).
inline PseudoFrame augment(const PseudoFrame& frame, const AugSpec& spec) {
  validate(spec, frame.height(), frame.width());
  Tensor cur = frame.data;
  const std::size_t h = frame.height(), w = frame.width();
  if (spec.polarity_swap)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        std::swap(cur(y, x, kChannelPositive), cur(y, x, kChannelNegative));
  if (spec.hflip) {
    Tensor flipped(cur.shape());
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t c = 0; c < 3; ++c) flipped(y, w - 1 - x, c) = cur(y, x, c);
    cur = std::move(flipped);
  }
  if (spec.crop) {
    const CropSpec& c = *spec.crop;
    cur = detail::resample(cur, static_cast<double>(c.top), static_cast<double>(c.left),
                           static_cast<double>(c.height), static_cast<double>(c.width),
                           c.out_height, c.out_width);
  }
  if (spec.upscale && *spec.upscale > 1.0) {
    const double ch = static_cast<double>(cur.dim(0)), cw = static_cast<double>(cur.dim(1));
    const double rh = ch / *spec.upscale, rw = cw / *spec.upscale;
    cur = detail::resample(cur, (ch - rh) / 2.0, (cw - rw) / 2.0, rh, rw, cur.dim(0), cur.dim(1));
  }
  return PseudoFrame{std::move(cur), frame.percentile};
}

/// Draws an AugSpec with the given probabilities. The crop keeps the frame's
/// aspect ratio, covers a uniform area fraction in [crop_scale_min,
/// crop_scale_max] and is resized back to the frame size.
inline AugSpec sample_aug_spec(Rng& rng, std::size_t h, std::size_t w,
                               const AugProbabilities& probs = {}) {
  AugSpec s;
  s.polarity_swap = rng.bernoulli(probs.polarity_swap);
  s.hflip = rng.bernoulli(probs.hflip);
  const double area = rng.uniform(probs.crop_scale_min, probs.crop_scale_max);
  const double side = std::sqrt(area);
  CropSpec c;
  c.height = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(side * static_cast<double>(h))), 1, h);
  c.width = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(side * static_cast<double>(w))), 1, w);
  c.top = static_cast<std::size_t>(rng.below(h - c.height + 1));
  c.left = static_cast<std::size_t>(rng.below(w - c.width + 1));
  c.out_height = h;
  c.out_width = w;
  s.crop = c;
  if (rng.bernoulli(probs.upscale)) s.upscale = probs.upscale_factor;
  return s;
}

inline PseudoFrame augment_random(const PseudoFrame& frame, std::uint64_t seed,
                                  const AugProbabilities& probs = {}) {
  Rng rng(seed);
  return augment(frame, sample_aug_spec(rng, frame.height(), frame.width(), probs));
}

// ---------------------------------------------------------------------------
// Binary event file: "EVT1", u16 width, u16 height, u64 count, then 16-byte
// little-endian records (u16 x, u16 y, i64 t_ns, i8 p, 3 pad bytes).

struct EventFile {
  Resolution resolution;
  std::vector<Event> events;
};


inline constexpr std::size_t kEventHeaderBytes = 16;
inline constexpr std::size_t kEventRecordBytes = 16;

inline std::string encode_events(Resolution res, std::span<const Event> events) {
  if (res.width > 0xFFFF || res.height > 0xFFFF)
    throw RangeError("event file resolution exceeds 16 bits");
  std::string buf = "EVT1";
  detail::put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(res.width));
  detail::put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(res.height));
  detail::put_le<std::uint64_t>(buf, events.size());
  for (const Event& e : events) {
    validate_event(e, res);
    detail::put_le<std::uint16_t>(buf, e.x);
    detail::put_le<std::uint16_t>(buf, e.y);
    detail::put_le<std::int64_t>(buf, e.t);
    detail::put_le<std::int8_t>(buf, e.p);
    buf.append(3, '\0');
  }
  return buf;
}

inline EventFile decode_events(std::string_view bytes) {
  if (bytes.size() < kEventHeaderBytes || bytes.substr(0, 4) != "EVT1")
    throw IoError("not an EVT1 event file");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  EventFile f;
  f.resolution.width = detail::get_le<std::uint16_t>(p + 4);
  f.resolution.height = detail::get_le<std::uint16_t>(p + 6);
  const auto count = detail::get_le<std::uint64_t>(p + 8);
  if ((bytes.size() - kEventHeaderBytes) / kEventRecordBytes != count ||
      (bytes.size() - kEventHeaderBytes) % kEventRecordBytes != 0)
    throw IoError("event file length does not match its record count");
  f.events.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const unsigned char* r = p + kEventHeaderBytes + i * kEventRecordBytes;
    Event e{detail::get_le<std::uint16_t>(r), detail::get_le<std::uint16_t>(r + 2),
            detail::get_le<std::int64_t>(r + 4), detail::get_le<std::int8_t>(r + 12)};
    validate_event(e, f.resolution);
    f.events.push_back(e);
  }
  return f;
}

inline void write_event_file(const std::string& path, Resolution res,
                             std::span<const Event> events) {
  const std::string buf = encode_events(res, events);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("short write to " + path);
}

inline EventFile read_event_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_events(buf);
}

}  // namespace gep
