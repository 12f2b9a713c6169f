#pragma once

// Linear patch encoder for pseudo-frames and images, plus the frozen
// synthetic teacher it is aligned to.
//
// Frames are H×W×C. Patch q (row-major over the patch grid) flattens to C·P²
// values in (c, i, j) order. Patch tokens are t_q = patch_q · W_q + b with a
// position-specific block W_q; the global embedding is the mean token.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "gep/autodiff.hpp"
#include "gep/error.hpp"
#include "gep/io.hpp"
#include "gep/rng.hpp"
#include "gep/synth.hpp"
#include "gep/tensor.hpp"

namespace gep {

struct EncoderConfig {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 3;
  std::size_t patch = 4;
  std::size_t dim = 32;

  void validate() const {
    if (height == 0 || width == 0 || channels == 0 || patch == 0 || dim == 0)
      throw ParameterError("encoder dimensions must be positive");
    if (height % patch != 0 || width % patch != 0)
      throw ParameterError("patch size must divide the frame size");
  }
  std::size_t patches() const { return (height / patch) * (width / patch); }
  std::size_t patch_dim() const { return channels * patch * patch; }
  std::size_t input_dim() const { return patches() * patch_dim(); }
};

/// Q × C·P² patch matrix of an H×W×C frame.
inline Tensor patchify(const Tensor& frame, std::size_t patch) {
  if (frame.rank() != 3) throw ShapeError("patchify needs an H×W×C frame, got " + shape_str(frame.shape()));
  const std::size_t h = frame.dim(0), w = frame.dim(1), c = frame.dim(2);
  if (patch == 0 || h % patch || w % patch) throw ShapeError("patchify: patch does not tile the frame");
  const std::size_t gw = w / patch, pp = patch * patch;
  Tensor out({(h / patch) * gw, c * pp});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k)
        out((y / patch) * gw + x / patch, k * pp + (y % patch) * patch + (x % patch)) = frame(y, x, k);
  return out;
}

class PatchEncoder {
 public:
  PatchEncoder() = default;

  static PatchEncoder random(const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    PatchEncoder e;
    e.cfg_ = cfg;
    const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.patch_dim()));
    e.weight_ = Tensor::randn({cfg.input_dim(), cfg.dim}, rng, sd);
    e.bias_ = Tensor({cfg.dim});
    return e;
  }

  const EncoderConfig& config() const { return cfg_; }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

  /// Patch-major flattening of one frame into an input row.
  std::vector<double> flatten(const Tensor& frame) const {
    check_frame(frame);
    const Tensor p = patchify(frame, cfg_.patch);
    return p.vec();
  }

  /// Stack of flattened frames, N × input_dim.
  Tensor batch(std::span<const Tensor> frames) const {
    Tensor out({frames.size(), cfg_.input_dim()});
    for (std::size_t n = 0; n < frames.size(); ++n) {
      const auto row = flatten(frames[n]);
      std::copy(row.begin(), row.end(), out.row(n).begin());
    }
    return out;
  }

  /// Global embeddings on a tape: (1/Q) X W + b.
  static Var embed(const Var& x, const Var& w, const Var& b, std::size_t patches) {
    return add_rowvec(scale(matmul(x, w), 1.0 / static_cast<double>(patches)), b);
  }

  Tensor embed(const Tensor& x) const {
    Tape t;
    return embed(t.constant(x), t.constant(weight_), t.constant(bias_), cfg_.patches()).value();
  }

  Tensor embed_frames(std::span<const Tensor> frames) const { return embed(batch(frames)); }

  /// Q × D patch tokens of one frame.
  Tensor patch_tokens(const Tensor& frame) const {
    check_frame(frame);
    const Tensor p = patchify(frame, cfg_.patch);
    const std::size_t pd = cfg_.patch_dim(), d = cfg_.dim;
    Tensor out({cfg_.patches(), d});
    for (std::size_t q = 0; q < cfg_.patches(); ++q)
      for (std::size_t j = 0; j < d; ++j) {
        double s = bias_[j];
        for (std::size_t k = 0; k < pd; ++k) s += p(q, k) * weight_(q * pd + k, j);
        out(q, j) = s;
      }
    return out;
  }

  std::string checkpoint_bytes(const std::vector<NamedTensor>& extra = {}) const {
    std::ostringstream hdr;
    hdr << "kind=patch_encoder\nheight=" << cfg_.height << "\nwidth=" << cfg_.width
        << "\nchannels=" << cfg_.channels << "\npatch=" << cfg_.patch << "\ndim=" << cfg_.dim << "\n";
    std::vector<NamedTensor> t{{"encoder.weight", weight_}, {"encoder.bias", bias_}};
    t.insert(t.end(), extra.begin(), extra.end());
    return encode_bundle(hdr.str(), t);
  }

  static PatchEncoder from_checkpoint(std::string_view bytes) {
    const Bundle b = decode_bundle(bytes);
    std::map<std::string, std::string> kv;
    std::istringstream is(b.header);
    for (std::string line; std::getline(is, line);) {
      const auto eq = line.find('=');
      if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    if (kv["kind"] != "patch_encoder") throw IoError("checkpoint is not a patch encoder");
    auto get = [&](const char* k) -> std::size_t {
      auto it = kv.find(k);
      if (it == kv.end()) throw IoError(std::string("encoder checkpoint lacks ") + k);
      return std::stoull(it->second);
    };
    PatchEncoder e;
    e.cfg_ = {get("height"), get("width"), get("channels"), get("patch"), get("dim")};
    e.cfg_.validate();
    e.weight_ = b.at("encoder.weight");
    e.bias_ = b.at("encoder.bias");
    if (e.weight_.shape() != Shape{e.cfg_.input_dim(), e.cfg_.dim} || e.bias_.shape() != Shape{e.cfg_.dim})
      throw IoError("encoder checkpoint tensor shapes do not match its header");
    return e;
  }

 private:
  void check_frame(const Tensor& frame) const {
    if (frame.shape() != Shape{cfg_.height, cfg_.width, cfg_.channels})
      throw ShapeError("encoder expects " + shape_str({cfg_.height, cfg_.width, cfg_.channels}) +
                       " frames, got " + shape_str(frame.shape()));
  }

  EncoderConfig cfg_;
  Tensor weight_, bias_;
};

/// Mean of patch-token groups: the Q tokens are split into `groups`
/// contiguous runs of rows (top to bottom) and each run is averaged.
inline Tensor pool_tokens(const Tensor& tokens, std::size_t groups) {
  const std::size_t q = tokens.rows(), d = tokens.cols();
  if (groups == 0 || q % groups != 0) throw ParameterError("token groups must divide the patch count");
  const std::size_t per = q / groups;
  Tensor out({groups, d});
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t r = 0; r < per; ++r)
      for (std::size_t j = 0; j < d; ++j) out(g, j) += tokens(g * per + r, j) / static_cast<double>(per);
  return out;
}

/// Frozen stand-in for an image foundation model. It matches the object
/// silhouette against canonical class templates over integer shifts,
/// soft-assigns a class embedding and adds a small fixed random projection
/// of the image.
class SemanticTeacher {
 public:
  SemanticTeacher(std::size_t height, std::size_t width, std::size_t dim, std::uint64_t seed,
                  std::size_t classes = kNumShapes, double temperature = 0.05, double linear_scale = 0.05)
      : h_(height), w_(width), dim_(dim), temperature_(temperature), linear_scale_(linear_scale) {
    if (classes == 0 || classes > kNumShapes) throw ParameterError("teacher: classes must be in [1, 8]");
    if (!(temperature > 0.0)) throw ParameterError("teacher temperature must be > 0");
    Rng rng(seed);
    class_embed_ = Tensor::randn({classes, dim}, rng);
    for (std::size_t c = 0; c < classes; ++c) {
      double n = 0.0;
      for (double v : class_embed_.row(c)) n += v * v;
      n = std::sqrt(n);
      for (double& v : class_embed_.row(c)) v /= n;
    }
    proj_ = Tensor::randn({height * width * 3, dim}, rng, 1.0 / std::sqrt(static_cast<double>(height * width)));
    for (std::size_t c = 0; c < classes; ++c) {
      SynthScene s;
      s.resolution = {height, width};
      s.shape = c;
      s.center_x = 0.5 * static_cast<double>(width);
      s.center_y = 0.5 * static_cast<double>(height);
      s.radius = 0.27 * static_cast<double>(std::min(height, width));
      const auto m = render_mask(s, 0);
      Tensor t({height, width});
      for (std::size_t i = 0; i < m.data.size(); ++i) t[i] = m.data[i];
      templates_.push_back(std::move(t));
    }
  }

  std::size_t dim() const { return dim_; }
  std::size_t classes() const { return templates_.size(); }
  const Tensor& class_embeddings() const { return class_embed_; }

  /// Class scores: best normalized correlation of the image foreground with
  /// each template over shifts in [-h/4, h/4] × [-w/4, w/4].
  std::vector<double> class_scores(const Tensor& image) const {
    if (image.shape() != Shape{h_, w_, 3}) throw ShapeError("teacher expects H×W×3 images");
    Tensor fg({h_, w_});
    double lo = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < h_ * w_; ++i) lo = std::min(lo, image[i * 3]);
    double fn = 0.0;
    for (std::size_t i = 0; i < h_ * w_; ++i) {
      fg[i] = image[i * 3] - lo;
      fn += fg[i] * fg[i];
    }
    fn = std::sqrt(fn);
    std::vector<double> scores(templates_.size(), 0.0);
    if (fn == 0.0) return scores;
    const long sh = static_cast<long>(h_ / 4), sw = static_cast<long>(w_ / 4);
    for (std::size_t c = 0; c < templates_.size(); ++c) {
      const Tensor& t = templates_[c];
      double best = -1.0;
      for (long dy = -sh; dy <= sh; ++dy)
        for (long dx = -sw; dx <= sw; ++dx) {
          double dot = 0.0, tn = 0.0;
          for (long y = 0; y < static_cast<long>(h_); ++y) {
            const long sy = y - dy;
            if (sy < 0 || sy >= static_cast<long>(h_)) continue;
            for (long x = 0; x < static_cast<long>(w_); ++x) {
              const long sx = x - dx;
              if (sx < 0 || sx >= static_cast<long>(w_)) continue;
              const double tv = t(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
              dot += tv * fg(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
              tn += tv * tv;
            }
          }
          if (tn > 0.0) best = std::max(best, dot / (std::sqrt(tn) * fn));
        }
      scores[c] = best;
    }
    return scores;
  }

  Tensor embed(const Tensor& image) const {
    const auto s = class_scores(image);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : s) mx = std::max(mx, v);
    std::vector<double> p(s.size());
    double z = 0.0;
    for (std::size_t c = 0; c < s.size(); ++c) z += (p[c] = std::exp((s[c] - mx) / temperature_));
    Tensor out({dim_});
    for (std::size_t c = 0; c < s.size(); ++c)
      for (std::size_t j = 0; j < dim_; ++j) out[j] += p[c] / z * class_embed_(c, j);
    for (std::size_t i = 0; i < image.size(); ++i)
      for (std::size_t j = 0; j < dim_; ++j) out[j] += linear_scale_ * image[i] * proj_(i, j);
    return out;
  }

  Tensor embed_all(std::span<const Tensor> images) const {
    Tensor out({images.size(), dim_});
    for (std::size_t n = 0; n < images.size(); ++n) {
      const Tensor e = embed(images[n]);
      std::copy(e.data().begin(), e.data().end(), out.row(n).begin());
    }
    return out;
  }

 private:
  std::size_t h_, w_, dim_;
  double temperature_, linear_scale_;
  Tensor class_embed_, proj_;
  std::vector<Tensor> templates_;
};

}  // namespace gep
