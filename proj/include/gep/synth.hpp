#pragma once

// Synthetic moving-shape scenes: rendered intensity frames, events from
// per-pixel log-intensity threshold crossings, and labels from the known
// geometry. Only the optional noise events depend on the seed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "gep/error.hpp"
#include "gep/events.hpp"
#include "gep/rng.hpp"
#include "gep/tensor.hpp"

namespace gep {

inline constexpr std::size_t kNumShapes = 8;

inline const char* shape_name(std::size_t s) {
  static const char* names[kNumShapes] = {"square", "disk", "triangle", "cross",
                                          "hbar",   "vbar", "ring",     "diamond"};
  return s < kNumShapes ? names[s] : "unknown";
}

struct SynthScene {
  std::uint64_t seed = 0;
  Resolution resolution{16, 16};
  std::size_t shape = 0;
  double center_x = 8.0, center_y = 8.0;  // pixel units at frame 0
  double radius = 4.5;
  double velocity_x = 1.0, velocity_y = 0.0;  // px per frame
  double angle = 0.0, angular_velocity = 0.0;  // rad, rad per frame
  std::size_t frames = 8;
  double fps = 30.0;
  double threshold = 0.2;  // log-intensity contrast per event
  double background = 0.2, foreground = 0.8;
  std::size_t noise_per_frame = 0;  // uniformly scattered noise events per interval
  double object_depth = 8.0;
  double far_depth = 40.0, near_depth = 10.0;  // background plane, top row to bottom row
  std::size_t invalid_rows = 2;                // depth unknown in the top rows
  bool bounce = false;  // reflect the centre inside the middle 40% of the sensor

  void validate() const {
    if (resolution.height == 0 || resolution.width == 0 || resolution.height > 65535 ||
        resolution.width > 65535)
      throw ParameterError("synth: resolution must be in [1, 65535]");
    if (shape >= kNumShapes) throw ParameterError("synth: shape id must be < 8");
    if (frames < 2) throw ParameterError("synth: need at least 2 frames");
    if (!(fps > 0.0) || !(threshold > 0.0) || !(radius > 0.0))
      throw ParameterError("synth: fps, threshold and radius must be > 0");
    if (!(background > 0.0) || !(foreground > 0.0))
      throw ParameterError("synth: intensities must be > 0 for log-intensity events");
    if (!(object_depth > 0.0) || !(far_depth > 0.0) || !(near_depth > 0.0))
      throw ParameterError("synth: depths must be > 0");
  }

  std::int64_t frame_interval_ns() const { return static_cast<std::int64_t>(std::llround(1e9 / fps)); }
  std::int64_t frame_time(std::size_t f) const { return static_cast<std::int64_t>(f) * frame_interval_ns(); }
  TimeWindow interval(std::size_t f) const { return {frame_time(f), frame_interval_ns()}; }
};

struct SynthClip {
  Resolution resolution;
  std::size_t shape = 0;
  std::vector<Event> events;       // sorted by (t, y, x, p)
  std::vector<Tensor> images;      // per frame, H×W×3 (gray replicated)
  std::vector<Grid<std::uint8_t>> segmentation;  // per frame, 1 = object
  std::vector<Tensor> depth;       // per frame, H×W
  Tensor depth_mask;               // H×W, 1 where depth is valid
};

/// True when the pixel centre (px, py) lies inside the shape at frame pose.
inline bool shape_contains(std::size_t shape, double u, double v, double r) {
  const double au = std::abs(u), av = std::abs(v);
  switch (shape) {
    case 0: return au <= 0.8 * r && av <= 0.8 * r;
    case 1: return u * u + v * v <= r * r;
    case 2: return v >= -r && v <= 0.6 * r && au <= 0.6 * (v + r);
    case 3: return (au <= 0.35 * r && av <= r) || (av <= 0.35 * r && au <= r);
    case 4: return au <= r && av <= 0.4 * r;
    case 5: return au <= 0.4 * r && av <= r;
    case 6: {
      const double rho2 = u * u + v * v;
      return rho2 <= r * r && rho2 >= 0.25 * r * r;
    }
    case 7: return au + av <= r;
    default: throw ParameterError("unknown shape id");
  }
}

namespace detail {

inline double fold(double p, double lo, double hi) {
  const double len = hi - lo;
  if (!(len > 0.0)) return lo;
  double q = std::fmod(p - lo, 2.0 * len);
  if (q < 0.0) q += 2.0 * len;
  return lo + (q <= len ? q : 2.0 * len - q);
}

}  // namespace detail

/// Object centre at `frame`.
inline std::pair<double, double> scene_center(const SynthScene& s, std::size_t frame) {
  const double f = static_cast<double>(frame);
  double cx = s.center_x + s.velocity_x * f, cy = s.center_y + s.velocity_y * f;
  if (s.bounce) {
    const double w = static_cast<double>(s.resolution.width), h = static_cast<double>(s.resolution.height);
    cx = detail::fold(cx, 0.3 * w, 0.7 * w);
    cy = detail::fold(cy, 0.3 * h, 0.7 * h);
  }
  return {cx, cy};
}

inline Grid<std::uint8_t> render_mask(const SynthScene& s, std::size_t frame) {
  const double f = static_cast<double>(frame);
  const auto [cx, cy] = scene_center(s, frame);
  const double th = s.angle + s.angular_velocity * f;
  const double c = std::cos(th), sn = std::sin(th);
  Grid<std::uint8_t> m(s.resolution.height, s.resolution.width);
  for (std::size_t y = 0; y < m.height; ++y)
    for (std::size_t x = 0; x < m.width; ++x) {
      const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
      // rotate into the shape frame
      const double u = c * dx + sn * dy, v = -sn * dx + c * dy;
      m(y, x) = shape_contains(s.shape, u, v, s.radius) ? 1 : 0;
    }
  return m;
}

inline Tensor render_intensity(const SynthScene& s, std::size_t frame) {
  const auto m = render_mask(s, frame);
  Tensor out({m.height, m.width});
  for (std::size_t i = 0; i < m.data.size(); ++i) out[i] = m.data[i] ? s.foreground : s.background;
  return out;
}

inline Tensor gray_to_rgb(const Tensor& gray) {
  Tensor out({gray.dim(0), gray.dim(1), 3});
  for (std::size_t i = 0; i < gray.size(); ++i)
    for (std::size_t c = 0; c < 3; ++c) out[i * 3 + c] = gray[i];
  return out;
}

inline Tensor render_depth(const SynthScene& s, const Grid<std::uint8_t>& mask) {
  Tensor d({mask.height, mask.width});
  const double span = mask.height > 1 ? static_cast<double>(mask.height - 1) : 1.0;
  for (std::size_t y = 0; y < mask.height; ++y)
    for (std::size_t x = 0; x < mask.width; ++x)
      d(y, x) = mask(y, x) ? s.object_depth
                           : s.far_depth + (s.near_depth - s.far_depth) * static_cast<double>(y) / span;
  return d;
}

inline SynthClip synth_scene(const SynthScene& s) {
  s.validate();
  const std::size_t h = s.resolution.height, w = s.resolution.width;
  SynthClip clip;
  clip.resolution = s.resolution;
  clip.shape = s.shape;
  clip.depth_mask = Tensor({h, w});
  for (std::size_t y = s.invalid_rows; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) clip.depth_mask(y, x) = 1.0;

  std::vector<Tensor> log_i;
  for (std::size_t f = 0; f < s.frames; ++f) {
    const auto m = render_mask(s, f);
    Tensor inten = render_intensity(s, f);
    clip.depth.push_back(render_depth(s, m));
    clip.segmentation.push_back(m);
    clip.images.push_back(gray_to_rgb(inten));
    for (double& v : inten.data()) v = std::log(v);
    log_i.push_back(std::move(inten));
  }

  // Each pixel keeps a reference log level; a crossing of ref ± C emits an
  // event at the linearly interpolated time inside the frame interval.
  Tensor ref = log_i[0];
  const double c = s.threshold;
  const std::int64_t dt = s.frame_interval_ns();
  Rng noise(s.seed);
  for (std::size_t f = 0; f + 1 < s.frames; ++f) {
    const std::int64_t t0 = s.frame_time(f);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t i = y * w + x;
        const double la = log_i[f][i], lb = log_i[f + 1][i];
        if (la == lb) continue;
        const std::int8_t pol = lb > la ? 1 : -1;
        const double dir = static_cast<double>(pol);
        const long n = static_cast<long>(std::floor((lb - ref[i]) * dir / c + 1e-12));
        for (long k = 1; k <= n; ++k) {
          const double level = ref[i] + dir * c * static_cast<double>(k);
          const double frac = std::clamp((level - la) / (lb - la), 0.0, 1.0);
          std::int64_t t = t0 + static_cast<std::int64_t>(std::llround(frac * static_cast<double>(dt)));
          t = std::clamp(t, t0, t0 + dt - 1);
          clip.events.push_back({static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y), t, pol});
        }
        if (n > 0) ref[i] += dir * c * static_cast<double>(n);
      }
    for (std::size_t k = 0; k < s.noise_per_frame; ++k) {
      Event e;
      e.x = static_cast<std::uint16_t>(noise.below(w));
      e.y = static_cast<std::uint16_t>(noise.below(h));
      e.t = t0 + static_cast<std::int64_t>(noise.below(static_cast<std::uint64_t>(dt)));
      e.p = noise.bernoulli(0.5) ? 1 : -1;
      clip.events.push_back(e);
    }
  }
  std::sort(clip.events.begin(), clip.events.end(), [](const Event& a, const Event& b) {
    return std::tie(a.t, a.y, a.x, a.p) < std::tie(b.t, b.y, b.x, b.p);
  });
  return clip;
}

struct DatasetSpec {
  std::size_t classes = kNumShapes;
  std::size_t per_class = 16;
  std::size_t frames = 8;
  Resolution resolution{16, 16};
  double fps = 30.0;
  double threshold = 0.2;
  std::size_t noise_per_frame = 2;
  std::uint64_t seed = 0;
};

/// Scenes ordered class-major. Poses and motion come from `spec.seed`; the
/// noise seed of each scene is derived from it.
inline std::vector<SynthScene> make_dataset(const DatasetSpec& spec) {
  if (spec.classes == 0 || spec.classes > kNumShapes) throw ParameterError("dataset: classes must be in [1, 8]");
  if (spec.per_class == 0) throw ParameterError("dataset: per_class must be >= 1");
  Rng rng(spec.seed);
  std::vector<SynthScene> out;
  const double hh = static_cast<double>(spec.resolution.height), ww = static_cast<double>(spec.resolution.width);
  for (std::size_t c = 0; c < spec.classes; ++c)
    for (std::size_t k = 0; k < spec.per_class; ++k) {
      SynthScene s;
      s.resolution = spec.resolution;
      s.shape = c;
      s.frames = spec.frames;
      s.fps = spec.fps;
      s.threshold = spec.threshold;
      s.noise_per_frame = spec.noise_per_frame;
      s.radius = std::min(hh, ww) * rng.uniform(0.24, 0.30);
      const double ang = 2.0 * std::numbers::pi * static_cast<double>(rng.below(8)) / 8.0;
      s.velocity_x = std::round(std::cos(ang));
      s.velocity_y = std::round(std::sin(ang));
      s.bounce = true;
      s.center_x = 0.5 * ww + rng.uniform(-1.5, 1.5);
      s.center_y = 0.5 * hh + rng.uniform(-1.5, 1.5);
      s.object_depth = rng.uniform(5.0, 9.0);
      s.seed = rng.next_u64();
      out.push_back(s);
    }
  return out;
}

}  // namespace gep
