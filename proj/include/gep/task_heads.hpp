#pragma once

// Downstream heads: linear patch-wise decoding, segmentation loss
// (cross-entropy + soft Dice) and the log-depth supervision stack.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gep/autodiff.hpp"
#include "gep/error.hpp"
#include "gep/tensor.hpp"

namespace gep {

struct PatchDecoder {
  Tensor weight;  // D × (C·P²)
  std::size_t patch = 1;
  std::size_t classes = 1;

  std::size_t dim() const { return weight.rows(); }

  void validate() const {
    if (weight.rank() != 2 || weight.cols() != classes * patch * patch)
      throw ShapeError("patch decoder weight must be D×(C·P²) = D×" +
                       std::to_string(classes * patch * patch) + ", got " + shape_str(weight.shape()));
  }
};

namespace detail {

inline void check_patch_grid(std::size_t tokens, std::size_t patch, std::size_t h, std::size_t w) {
  if (patch == 0 || h % patch != 0 || w % patch != 0)
    throw ShapeError("image " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by patch " + std::to_string(patch));
  if (tokens != (h / patch) * (w / patch))
    throw ShapeError("expected " + std::to_string((h / patch) * (w / patch)) + " tokens for a " +
                     std::to_string(h) + "x" + std::to_string(w) + " image, got " + std::to_string(tokens));
}

// Index of pixel (c, y, x) of a C×H×W map inside the L×(C·P²) token layout.
inline std::size_t token_offset(std::size_t c, std::size_t y, std::size_t x, std::size_t classes,
                                std::size_t patch, std::size_t w) {
  const std::size_t pp = patch * patch;
  const std::size_t l = (y / patch) * (w / patch) + x / patch;
  return l * classes * pp + c * pp + (y % patch) * patch + (x % patch);
}

}  // namespace detail

/// Places row l of an L×(C·P²) matrix into patch cell l (row-major over
/// the patch grid) of a C×H×W map; column c·P² + i·P + j is pixel (i, j)
/// of class c.
inline Var patches_to_map(const Var& per_token, std::size_t classes, std::size_t patch,
                          std::size_t h, std::size_t w) {
  const Tensor& v = per_token.value();
  detail::require_rank2(v, "patches_to_map");
  detail::check_patch_grid(v.rows(), patch, h, w);
  if (v.cols() != classes * patch * patch) throw ShapeError("patches_to_map: width is not C·P²");
  Tensor out({classes, h, w});
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        out(c, y, x) = v[detail::token_offset(c, y, x, classes, patch, w)];
  return per_token.tape().record(std::move(out), {per_token},
                                 [per_token, classes, patch, h, w](Tape& t, const Tensor& g) {
                                   Tensor* gp = t.grad_buffer(per_token);
                                   if (!gp) return;
                                   for (std::size_t c = 0; c < classes; ++c)
                                     for (std::size_t y = 0; y < h; ++y)
                                       for (std::size_t x = 0; x < w; ++x)
                                         (*gp)[detail::token_offset(c, y, x, classes, patch, w)] += g(c, y, x);
                                 });
}

/// Inverse of patches_to_map.
inline Tensor map_to_patches(const Tensor& map, std::size_t patch) {
  if (map.rank() != 3) throw ShapeError("map_to_patches needs a C×H×W map");
  const std::size_t classes = map.dim(0), h = map.dim(1), w = map.dim(2);
  detail::check_patch_grid((h / std::max<std::size_t>(patch, 1)) * (w / std::max<std::size_t>(patch, 1)),
                           patch, h, w);
  Tensor out({(h / patch) * (w / patch), classes * patch * patch});
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[detail::token_offset(c, y, x, classes, patch, w)] = map(c, y, x);
  return out;
}

/// Ŷ = rearrange(F · W_dec) into C×H×W logits.
inline Var linear_patch_decode(const Var& tokens, const Var& weight, std::size_t classes,
                               std::size_t patch, std::size_t h, std::size_t w) {
  detail::check_patch_grid(tokens.value().rows(), patch, h, w);
  return patches_to_map(matmul(tokens, weight), classes, patch, h, w);
}

inline Tensor linear_patch_decode(const Tensor& tokens, const PatchDecoder& dec, std::size_t h,
                                  std::size_t w) {
  dec.validate();
  Tape t;
  return linear_patch_decode(t.constant(tokens), t.constant(dec.weight), dec.classes, dec.patch, h, w)
      .value();
}

struct SegLossOptions {
  double ce_weight = 0.5;
  double dice_weight = 0.5;
  double dice_smooth = 1.0;
  // Pixels carrying this label are excluded from both terms.
  std::optional<std::size_t> ignore_index;
};

/// ce_weight · CE + dice_weight · (1 - mean_c Dice_c) with soft Dice
/// (2 Σ p g + δ) / (Σ p + Σ g + δ) on softmax probabilities.
inline Var seg_loss(const Var& logits, std::span<const std::size_t> labels, const SegLossOptions& opt = {}) {
  const Tensor& lv = logits.value();
  if (lv.rank() != 3) throw ShapeError("seg_loss: logits must be C×H×W");
  const std::size_t c = lv.dim(0), n = lv.dim(1) * lv.dim(2);
  if (labels.size() != n) throw ShapeError("seg_loss: label map size mismatch");
  Tensor valid({n});
  Tensor onehot({n, c});
  std::vector<std::size_t> target(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (opt.ignore_index && labels[i] == *opt.ignore_index) continue;
    if (labels[i] >= c)
      throw RangeError("seg_loss: label " + std::to_string(labels[i]) + " >= classes " + std::to_string(c));
    valid[i] = 1.0;
    onehot(i, labels[i]) = 1.0;
    target[i] = labels[i];
  }
  Tape& tape = logits.tape();
  const Var rows = transpose(reshape(logits, {c, n}));  // n × c
  const Var logp = row_log_softmax(rows);
  const Var ce = scale(masked_mean(pick(logp, target), valid, 0.0), -1.0);
  Tensor valid_rows({n, c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) valid_rows(i, k) = valid[i];
  const Var prob = mul(exp(logp), tape.constant(valid_rows));
  const Var inter = sum_rows(mul(prob, tape.constant(onehot)));
  const Var psum = sum_rows(prob);
  Tensor gsum({c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) gsum[k] += onehot(i, k);
  const Var num = add_scalar(scale(inter, 2.0), opt.dice_smooth);
  const Var den = add_scalar(add(psum, tape.constant(gsum)), opt.dice_smooth);
  const Var dice = add_scalar(scale(mean(div(num, den)), -1.0), 1.0);
  return add(scale(ce, opt.ce_weight), scale(dice, opt.dice_weight));
}

inline double seg_loss(const Tensor& logits, std::span<const std::size_t> labels, const SegLossOptions& opt = {}) {
  Tape t;
  return seg_loss(t.constant(logits), labels, opt).value().item();
}

// ---------------------------------------------------------------------------
// Depth

struct DepthRange {
  double d_min = 1.0;
  double d_max = 80.0;

  void validate() const {
    if (!(d_min > 0.0) || !(d_max > d_min)) throw ParameterError("depth range needs 0 < d_min < d_max");
  }
  double log_min() const { return std::log(d_min); }
  double log_max() const { return std::log(d_max); }
  double log_span() const { return log_max() - log_min(); }
};

inline Var clamp01(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::clamp(x, 0.0, 1.0); },
      [](double x, double) { return (x > 0.0 && x < 1.0) ? 1.0 : 0.0; });
}

/// exp(clamp(y, 0, 1) · Δℓ + ℓ_min).
inline Var denorm_log_depth(const Var& y_norm, const DepthRange& range) {
  range.validate();
  return exp(add_scalar(scale(clamp01(y_norm), range.log_span()), range.log_min()));
}

inline Tensor denorm_log_depth(const Tensor& y_norm, const DepthRange& range) {
  range.validate();
  Tensor out(y_norm.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    // Endpoints are returned exactly rather than through exp(log(.)).
    const double y = std::clamp(y_norm[i], 0.0, 1.0);
    out[i] = y == 0.0 ? range.d_min
             : y == 1.0 ? range.d_max
                        : std::exp(y * range.log_span() + range.log_min());
  }
  return out;
}

/// (log d - ℓ_min) / Δℓ, the inverse of denorm_log_depth on [d_min, d_max].
inline Tensor normalize_log_depth(const Tensor& depth, const DepthRange& range) {
  range.validate();
  Tensor out(depth.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(depth[i] > 0.0)) throw DomainError("normalize_log_depth: non-positive depth");
    out[i] = (std::log(depth[i]) - range.log_min()) / range.log_span();
  }
  return out;
}

inline double masked_mean(const Tensor& x, const Tensor& mask, double eps) {
  Tape t;
  return masked_mean(t.constant(x), mask, eps).value().item();
}

struct DepthSupervision {
  Tensor depth_gt;  // H×W, positive where mask = 1
  Tensor mask;      // H×W in {0, 1}
  std::vector<std::size_t> scales{1, 2, 4};
  double lambda = 0.85;
  double w_silog = 1.0;
  double w_ms_grad = 0.25;
  double eps = 1e-8;

  void validate() const {
    if (depth_gt.rank() != 2 || depth_gt.shape() != mask.shape())
      throw ShapeError("depth supervision needs matching H×W depth and mask");
    for (double m : mask.data())
      if (m != 0.0 && m != 1.0) throw ParameterError("depth mask must be binary");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ParameterError("silog lambda must be in [0, 1]");
    if (w_silog < 0.0 || w_ms_grad < 0.0) throw ParameterError("depth loss weights must be >= 0");
    if (scales.empty()) throw ParameterError("multi-scale gradient loss needs at least one scale");
  }
};

namespace detail {

// log x on entries where mask != 0, 0 elsewhere (and no gradient there).
inline Var masked_log(const Var& a, const Tensor& mask) {
  a.value().check_same(mask, "masked_log");
  Tensor out(a.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (mask[i] == 0.0) continue;
    if (!(a.value()[i] > 0.0))
      throw DomainError("non-positive depth at valid pixel " + std::to_string(i));
    out[i] = std::log(a.value()[i]);
  }
  return a.tape().record(std::move(out), {a}, [a, mask](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i)
        if (mask[i] != 0.0) (*ga)[i] += g[i] / a.value()[i];
  });
}

inline Tensor masked_log(const Tensor& x, const Tensor& mask) {
  Tape t;
  return masked_log(t.constant(x), mask).value();
}

// sqrt(max(x, 0)); zero derivative at and below 0.
inline Var safe_sqrt(const Var& a) {
  return unary(
      a, [](double x) { return std::sqrt(std::max(x, 0.0)); },
      [](double x, double y) { return x > 0.0 ? 0.5 / y : 0.0; });
}

inline Tensor avg_pool(const Tensor& x, std::size_t s) {
  Tensor out({x.rows() / s, x.cols() / s});
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(i / s, j / s) += x(i, j);
  out *= 1.0 / static_cast<double>(s * s);
  return out;
}

inline Tensor pair_mask_x(const Tensor& m) {
  Tensor out({m.rows(), m.cols() - 1});
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j + 1 < m.cols(); ++j) out(i, j) = m(i, j) * m(i, j + 1);
  return out;
}

inline Tensor pair_mask_y(const Tensor& m) {
  Tensor out({m.rows() - 1, m.cols()});
  for (std::size_t i = 0; i + 1 < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(i, j) * m(i + 1, j);
  return out;
}

}  // namespace detail

/// sqrt(<y²>_M - λ <y>_M²) with y = log d_pred - log d_gt, evaluated as
/// sqrt(<(y - ȳ)²>_M + (1 - λ) ȳ²). Means are exact over the valid pixels;
/// an empty mask gives 0.
inline Var silog_loss(const Var& d_pred, const Tensor& d_gt, const Tensor& mask, double lambda) {
  d_pred.value().check_same(d_gt, "silog_loss");
  detail::require_rank2(d_gt, "silog_loss");
  Tape& tape = d_pred.tape();
  const std::size_t h = d_gt.rows(), w = d_gt.cols();
  const Var y = sub(detail::masked_log(d_pred, mask), tape.constant(detail::masked_log(d_gt, mask)));
  const Var ybar = reshape(masked_mean(y, mask, 0.0), {1, 1});
  const Var ybar_map = matmul(matmul(tape.constant(Tensor({h, 1}, 1.0)), ybar), tape.constant(Tensor({1, w}, 1.0)));
  const Var var = masked_mean(square(sub(y, ybar_map)), mask, 0.0);
  return detail::safe_sqrt(add(var, scale(square(reshape(ybar, {})), 1.0 - lambda)));
}

/// Mean over scales s of <|∇x log D - ∇x log D*|> + <|∇y ...|>, where
/// depths are s×s averaged over valid pixels only, the scale-s mask is
/// 1{avg_s(M) > 0.5}, and a forward difference counts only when both of its
/// pixels are valid.
inline Var ms_grad_loss(const Var& d_pred, const Tensor& d_gt, const Tensor& mask,
                        std::span<const std::size_t> scales, double eps = 1e-8) {
  d_pred.value().check_same(d_gt, "ms_grad_loss");
  d_pred.value().check_same(mask, "ms_grad_loss");
  if (scales.empty()) throw ParameterError("ms_grad_loss: no scales");
  const std::size_t h = d_gt.rows(), w = d_gt.cols();
  Tape& tape = d_pred.tape();
  std::vector<Var> per_scale;
  for (std::size_t s : scales) {
    if (s == 0 || s > h || s > w)
      throw RangeError("gradient-loss scale " + std::to_string(s) + " larger than the " +
                       std::to_string(h) + "x" + std::to_string(w) + " grid");
    if (h % s != 0 || w % s != 0 || h / s < 2 || w / s < 2)
      throw RangeError("gradient-loss scale " + std::to_string(s) + " does not tile the grid");
    Var pred_s = d_pred;
    Tensor gt_s = d_gt, mask_s = mask;
    if (s > 1) {
      pred_s = masked_avg_pool(d_pred, mask, s);
      Tape plain;
      gt_s = masked_avg_pool(plain.constant(d_gt), mask, s).value();
      mask_s = detail::avg_pool(mask, s);
      for (double& m : mask_s.data()) m = m > 0.5 ? 1.0 : 0.0;
    }
    const Var lp = detail::masked_log(pred_s, mask_s);
    const Var lg = tape.constant(detail::masked_log(gt_s, mask_s));
    const Var gx = sub(diff_x(lp), diff_x(lg));
    const Var gy = sub(diff_y(lp), diff_y(lg));
    const Var ex = masked_mean(abs(gx), detail::pair_mask_x(mask_s), eps);
    const Var ey = masked_mean(abs(gy), detail::pair_mask_y(mask_s), eps);
    per_scale.push_back(add(ex, ey));
  }
  Var total = per_scale[0];
  for (std::size_t k = 1; k < per_scale.size(); ++k) total = add(total, per_scale[k]);
  return scale(total, 1.0 / static_cast<double>(per_scale.size()));
}

/// w_silog · silog + w_ms_grad · ms_grad.
inline Var depth_total(const Var& d_pred, const DepthSupervision& sup) {
  sup.validate();
  const Var a = silog_loss(d_pred, sup.depth_gt, sup.mask, sup.lambda);
  const Var b = ms_grad_loss(d_pred, sup.depth_gt, sup.mask, sup.scales, sup.eps);
  return add(scale(a, sup.w_silog), scale(b, sup.w_ms_grad));
}

inline double silog_loss(const Tensor& d_pred, const Tensor& d_gt, const Tensor& mask, double lambda) {
  Tape t;
  return silog_loss(t.constant(d_pred), d_gt, mask, lambda).value().item();
}

inline double ms_grad_loss(const Tensor& d_pred, const Tensor& d_gt, const Tensor& mask,
                           std::span<const std::size_t> scales, double eps = 1e-8) {
  Tape t;
  return ms_grad_loss(t.constant(d_pred), d_gt, mask, scales, eps).value().item();
}

inline double depth_total(const Tensor& d_pred, const DepthSupervision& sup) {
  Tape t;
  return depth_total(t.constant(d_pred), sup).value().item();
}

}  // namespace gep
