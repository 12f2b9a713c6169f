#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

#include "gep/error.hpp"
#include "gep/tensor.hpp"

namespace gep {

/// Linear warmup from 0 to `peak` over `warmup` steps, then half-cosine decay
/// reaching 0 at `total` steps.
inline double warmup_cosine_lr(std::size_t step, std::size_t warmup, std::size_t total, double peak) {
  if (step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  if (total <= warmup) return peak;
  if (step >= total) return 0.0;
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Adam with decoupled weight decay. Moment buffers are created on the first
/// step and matched to parameters by position.
class AdamW {
 public:
  explicit AdamW(AdamWOptions opts = {}) : opts_(opts) {}

  void step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, double lr) {
    if (params.size() != grads.size()) throw ShapeError("AdamW: parameter/gradient count mismatch");
    if (m_.empty()) {
      for (Tensor* p : params) {
        m_.emplace_back(p->shape());
        v_.emplace_back(p->shape());
      }
    }
    if (m_.size() != params.size()) throw ShapeError("AdamW: parameter set changed between steps");
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = *params[k];
      const Tensor& g = *grads[k];
      p.check_same(g, "AdamW");
      for (std::size_t i = 0; i < p.size(); ++i) {
        m_[k][i] = opts_.beta1 * m_[k][i] + (1.0 - opts_.beta1) * g[i];
        v_[k][i] = opts_.beta2 * v_[k][i] + (1.0 - opts_.beta2) * g[i] * g[i];
        const double mhat = m_[k][i] / bc1;
        const double vhat = v_[k][i] / bc2;
        p[i] -= lr * (mhat / (std::sqrt(vhat) + opts_.eps) + opts_.weight_decay * p[i]);
      }
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  AdamWOptions opts_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace gep
