#pragma once

// Alignment objectives between event embeddings and frozen image embeddings.
//
// Every loss stops the gradient on the image embeddings it receives, so the
// image branch behaves as a fixed teacher no matter how the caller built it.

#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "gep/autodiff.hpp"
#include "gep/error.hpp"
#include "gep/rng.hpp"

namespace gep {

struct AlignWeights {
  double lambda_cos = 1.0;
  double lambda_nce = 1.0;
  double mu = 1.0;
  double tau = 0.07;

  /// Training configurations require every weight strictly positive.
  void validate() const {
    if (!(lambda_cos > 0.0) || !(lambda_nce > 0.0) || !(mu > 0.0))
      throw ParameterError("alignment weights lambda_cos, lambda_nce and mu must be > 0");
    if (!(tau > 0.0)) throw ParameterError("temperature tau must be > 0");
  }
};

/// affine -> GELU -> affine. An empty head is the identity map.
struct ProjectionHead {
  Tensor w1, b1, w2, b2;

  bool is_identity() const { return w1.size() == 0; }

  static ProjectionHead identity() { return {Tensor({0}), Tensor({0}), Tensor({0}), Tensor({0})}; }

  static ProjectionHead random(Rng& rng, std::size_t dim, std::size_t hidden) {
    const double s1 = 1.0 / std::sqrt(static_cast<double>(dim));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden));
    return {Tensor::randn({dim, hidden}, rng, s1), Tensor({hidden}),
            Tensor::randn({hidden, dim}, rng, s2), Tensor({dim})};
  }

  std::vector<Tensor*> parameters() { return {&w1, &b1, &w2, &b2}; }
};

/// A projection head whose parameters live on a tape.
struct HeadVars {
  bool identity = true;
  Var w1, b1, w2, b2;

  Var operator()(const Var& z) const {
    if (identity) return z;
    return add_rowvec(matmul(gelu(add_rowvec(matmul(z, w1), b1)), w2), b2);
  }

  std::vector<Var> vars() const {
    if (identity) return {};
    return {w1, b1, w2, b2};
  }
};

/// Puts the head on `tape`, as leaves when trainable, constants otherwise.
inline HeadVars bind(Tape& tape, const ProjectionHead& head, bool trainable) {
  if (head.is_identity()) return {};
  auto put = [&](const Tensor& t) { return trainable ? tape.leaf(t) : tape.constant(t); };
  return {false, put(head.w1), put(head.b1), put(head.w2), put(head.b2)};
}

namespace detail {

inline void require_pair(const Var& a, const Var& b, const char* op) {
  if (a.value().rank() != 2 || a.value().shape() != b.value().shape())
    throw ShapeError(std::string(op) + ": embeddings must be matching N×D matrices, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  if (a.value().rows() == 0) throw ShapeError(std::string(op) + ": empty batch");
}

inline Var one_minus_mean_cos(const Var& a, const Var& b) {
  const Var c = cosine_rows(a, b);
  return add_scalar(scale(mean(c), -1.0), 1.0);
}

}  // namespace detail

/// mean_n (1 - cos(z_e^n, z_i^n)), in [0, 2].
inline Var cosine_align_loss(const Var& z_e, const Var& z_i) {
  detail::require_pair(z_e, z_i, "cosine_align_loss");
  return detail::one_minus_mean_cos(z_e, stop_gradient(z_i));
}

/// In-batch InfoNCE. Both streams go through `head` and are l2-normalized;
/// row n of the event batch is scored against every image row, with the
/// matching row as the positive.
inline Var info_nce(const Var& z_e, const Var& z_i, double tau, const HeadVars& head = {}) {
  detail::require_pair(z_e, z_i, "info_nce");
  if (!(tau > 0.0)) throw ParameterError("info_nce: temperature must be > 0");
  const Var e = l2_normalize_rows(head(z_e));
  const Var i = l2_normalize_rows(head(stop_gradient(z_i)));
  const Var logits = scale(matmul(e, transpose(i)), 1.0 / tau);
  std::vector<std::size_t> diag(z_e.value().rows());
  std::iota(diag.begin(), diag.end(), std::size_t{0});
  return scale(mean(pick(row_log_softmax(logits), diag)), -1.0);
}

/// mu * mean_n (1 - cos(E_e(X_i)^n, z_i^n)).
inline Var preservation_loss(const Var& z_e_on_image, const Var& z_i, double mu) {
  detail::require_pair(z_e_on_image, z_i, "preservation_loss");
  return scale(detail::one_minus_mean_cos(z_e_on_image, stop_gradient(z_i)), mu);
}

struct AlignBatchVars {
  Var z_e;
  Var z_i;
  Var z_e_on_image;
};

/// lambda_cos * cosine + lambda_nce * InfoNCE + preservation. Zero weights
/// are accepted here so single terms can be isolated.
inline Var total_alignment_loss(const AlignBatchVars& b, const AlignWeights& w,
                                const HeadVars& head = {}) {
  if (w.lambda_cos < 0.0 || w.lambda_nce < 0.0 || w.mu < 0.0)
    throw ParameterError("alignment weights must be non-negative");
  const Var cos_term = scale(cosine_align_loss(b.z_e, b.z_i), w.lambda_cos);
  const Var nce_term = scale(info_nce(b.z_e, b.z_i, w.tau, head), w.lambda_nce);
  const Var pres_term = preservation_loss(b.z_e_on_image, b.z_i, w.mu);
  return add(add(cos_term, nce_term), pres_term);
}

// Value-only conveniences.

inline double cosine_align_loss(const Tensor& z_e, const Tensor& z_i) {
  Tape t;
  return cosine_align_loss(t.constant(z_e), t.constant(z_i)).value().item();
}

inline double info_nce(const Tensor& z_e, const Tensor& z_i, double tau,
                       const ProjectionHead& head = ProjectionHead::identity()) {
  Tape t;
  return info_nce(t.constant(z_e), t.constant(z_i), tau, bind(t, head, false)).value().item();
}

inline double preservation_loss(const Tensor& z_e_on_image, const Tensor& z_i, double mu) {
  Tape t;
  return preservation_loss(t.constant(z_e_on_image), t.constant(z_i), mu).value().item();
}

struct AlignBatch {
  Tensor z_e;
  Tensor z_i;
  Tensor z_e_on_image;
};

inline double total_alignment_loss(const AlignBatch& b, const AlignWeights& w,
                                   const ProjectionHead& head = ProjectionHead::identity()) {
  Tape t;
  return total_alignment_loss({t.constant(b.z_e), t.constant(b.z_i), t.constant(b.z_e_on_image)},
                              w, bind(t, head, false))
      .value()
      .item();
}

}  // namespace gep
