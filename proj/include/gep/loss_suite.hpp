#pragma once

// Every differentiable loss wrapped as a gradient-check case on small random
// inputs. Stop-gradient inputs (teacher embeddings, ground truth, masks) are
// captured as constants; only the trainable arguments are checked.

#include <string>
#include <vector>

#include "gep/align.hpp"
#include "gep/gradcheck.hpp"
#include "gep/rng.hpp"
#include "gep/task_heads.hpp"
#include "gep/transformer.hpp"

namespace gep {

struct LossCase {
  std::string name;
  ScalarFn fn;
  std::vector<Tensor> inputs;
};

namespace detail {

inline Tensor positive_uniform(Shape s, Rng& rng, double lo, double hi) {
  return Tensor::uniform(std::move(s), rng, lo, hi);
}

inline Tensor random_mask(std::size_t h, std::size_t w, Rng& rng, double keep) {
  Tensor m({h, w});
  for (double& v : m.data()) v = rng.bernoulli(keep) ? 1.0 : 0.0;
  m[0] = 1.0;
  return m;
}

}  // namespace detail

inline std::vector<LossCase> loss_suite(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = 4, d = 6;
  std::vector<LossCase> out;

  const Tensor z_i = Tensor::randn({n, d}, rng);
  const double tau = 0.5;
  const ProjectionHead head = ProjectionHead::random(rng, d, 5);

  out.push_back({"cosine_align",
                 [z_i](Tape& t, std::span<const Var> in) { return cosine_align_loss(in[0], t.constant(z_i)); },
                 {Tensor::randn({n, d}, rng)}});
  out.push_back({"info_nce",
                 [z_i, tau](Tape& t, std::span<const Var> in) {
                   HeadVars hv{false, in[1], in[2], in[3], in[4]};
                   return info_nce(in[0], t.constant(z_i), tau, hv);
                 },
                 {Tensor::randn({n, d}, rng), head.w1, Tensor::randn({5}, rng, 0.1), head.w2,
                  Tensor::randn({d}, rng, 0.1)}});
  out.push_back({"preservation",
                 [z_i](Tape& t, std::span<const Var> in) { return preservation_loss(in[0], t.constant(z_i), 1.7); },
                 {Tensor::randn({n, d}, rng)}});
  out.push_back({"total_alignment",
                 [z_i, tau, head](Tape& t, std::span<const Var> in) {
                   AlignWeights w{0.7, 1.3, 0.9, tau};
                   return total_alignment_loss({in[0], t.constant(z_i), in[1]}, w, bind(t, head, false));
                 },
                 {Tensor::randn({n, d}, rng), Tensor::randn({n, d}, rng)}});

  const Tensor targets = Tensor::randn({5, d}, rng);
  out.push_back({"pretrain",
                 [targets](Tape&, std::span<const Var> in) { return pretrain_loss(in[0], targets); },
                 {Tensor::randn({5, d}, rng)}});

  const std::size_t h = 8, w = 8;
  const Tensor gt = detail::positive_uniform({h, w}, rng, 1.0, 20.0);
  const Tensor mask = detail::random_mask(h, w, rng, 0.8);
  out.push_back({"silog",
                 [gt, mask](Tape&, std::span<const Var> in) { return silog_loss(in[0], gt, mask, 0.85); },
                 {detail::positive_uniform({h, w}, rng, 1.0, 20.0)}});
  out.push_back({"ms_grad",
                 [gt, mask](Tape&, std::span<const Var> in) {
                   const std::vector<std::size_t> sc{1, 2, 4};
                   return ms_grad_loss(in[0], gt, mask, sc);
                 },
                 {detail::positive_uniform({h, w}, rng, 1.0, 20.0)}});
  DepthSupervision sup{gt, mask};
  out.push_back({"depth_total",
                 [sup](Tape&, std::span<const Var> in) { return depth_total(in[0], sup); },
                 {detail::positive_uniform({h, w}, rng, 1.0, 20.0)}});

  const std::size_t classes = 3;
  std::vector<std::size_t> labels(6 * 5);
  for (auto& l : labels) l = rng.below(classes);
  out.push_back({"seg_ce_dice",
                 [labels](Tape&, std::span<const Var> in) { return seg_loss(in[0], labels); },
                 {Tensor::randn({classes, 6, 5}, rng)}});
  return out;
}

}  // namespace gep
