#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "gep/autodiff.hpp"

namespace gep {

/// A scalar-valued function built from tape primitives. It receives one leaf
/// per input tensor, in order.
using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

struct ValueAndGrad {
  double value = 0.0;
  std::vector<Tensor> grads;
};

inline ValueAndGrad evaluate_with_grad(const ScalarFn& f,
                                       std::span<const Tensor> inputs) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t));
  const Var out = f(tape, leaves);
  if (out.value().size() != 1)
    throw ShapeError("evaluate_with_grad: function output has shape " +
                     shape_str(out.value().shape()) + ", expected a scalar");
  tape.backward(out);
  ValueAndGrad r{out.value()[0], {}};
  for (const Var& l : leaves) r.grads.push_back(l.grad());
  return r;
}

inline double evaluate(const ScalarFn& f, std::span<const Tensor> inputs) {
  Tape tape;
  std::vector<Var> leaves;
  for (const Tensor& t : inputs) leaves.push_back(tape.constant(t));
  const Var out = f(tape, leaves);
  if (out.value().size() != 1)
    throw ShapeError("evaluate: function output is not a scalar");
  return out.value()[0];
}

/// Central differences (f(x+εe) - f(x-εe)) / 2ε, one coordinate at a time.
inline std::vector<Tensor> finite_diff_grad(const ScalarFn& f,
                                            std::span<const Tensor> inputs,
                                            double epsilon) {
  if (!(epsilon > 0.0)) throw ParameterError("finite_diff_grad: epsilon must be > 0");
  std::vector<Tensor> work(inputs.begin(), inputs.end());
  std::vector<Tensor> grads;
  for (std::size_t k = 0; k < work.size(); ++k) {
    Tensor g(work[k].shape());
    for (std::size_t i = 0; i < work[k].size(); ++i) {
      const double orig = work[k][i];
      work[k][i] = orig + epsilon;
      const double fp = evaluate(f, work);
      work[k][i] = orig - epsilon;
      const double fm = evaluate(f, work);
      work[k][i] = orig;
      g[i] = (fp - fm) / (2.0 * epsilon);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

struct GradReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  // Flat index of the worst relative error inside each input.
  std::vector<std::size_t> worst_index;
  std::size_t worst_input = 0;
  bool passed = false;
};

struct GradCheckOptions {
  double epsilon = 1e-6;
  // Denominator floor for the relative error, so coordinates whose true
  // derivative is ~0 are judged on absolute error instead.
  double scale_floor = 1e-4;
};

/// Relative error per coordinate is |a - n| / max(|a|, |n|, scale_floor).
inline GradReport grad_check(const ScalarFn& f, std::span<const Tensor> inputs,
                             double rel_tol, GradCheckOptions opts = {}) {
  if (!(rel_tol > 0.0)) throw ParameterError("grad_check: rel_tol must be > 0");
  const ValueAndGrad analytic = evaluate_with_grad(f, inputs);
  const std::vector<Tensor> numeric = finite_diff_grad(f, inputs, opts.epsilon);
  GradReport rep;
  rep.worst_index.assign(inputs.size(), 0);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    double worst_here = -1.0;
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double a = analytic.grads[k][i], n = numeric[k][i];
      const double abs_err = std::abs(a - n);
      double rel = abs_err / std::max({std::abs(a), std::abs(n), opts.scale_floor});
      if (std::isnan(rel)) rel = std::numeric_limits<double>::infinity();
      rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
      if (rel > worst_here) {
        worst_here = rel;
        rep.worst_index[k] = i;
      }
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_input = k;
      }
    }
  }
  rep.passed = rep.max_rel_error < rel_tol;
  return rep;
}

}  // namespace gep
