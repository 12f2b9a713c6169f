#pragma once

// Tape-based reverse-mode differentiation over Tensor values.
//
// A Tape owns every node created while evaluating a function. Leaves created
// with Tape::leaf receive gradients; Tape::constant and stop_gradient nodes
// never do. Tape::backward walks the nodes in reverse creation order, so the
// accumulation order for every gradient is fixed and evaluation is bitwise
// reproducible.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gep/error.hpp"
#include "gep/tensor.hpp"

namespace gep {

class Tape;

/// Handle to a node on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // Receives the gradient of the node's output; adds contributions to the
  // parents through Tape::grad_buffer.
  using BackwardFn = std::function<void(Tape&, const Tensor&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value) { return push(std::move(value), true, {}); }
  Var constant(Tensor value) { return push(std::move(value), false, {}); }

  /// Registers the output of a primitive. The node requires a gradient iff
  /// any parent does; otherwise `backward` is dropped.
  Var record(Tensor value, std::span<const Var> parents, BackwardFn backward) {
    bool needs = false;
    for (const Var& p : parents) needs = needs || nodes_[p.id()].requires_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  Var record(Tensor value, std::initializer_list<Var> parents,
             BackwardFn backward) {
    return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                  std::move(backward));
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor& grad(std::size_t id) const { return nodes_.at(id).grad; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulator of `v`, or nullptr when `v` takes no gradient.
  /// Only valid during backward().
  Tensor* grad_buffer(const Var& v) {
    Node& n = nodes_[v.id()];
    return n.requires_grad ? &n.grad : nullptr;
  }

  /// Seeds d(root)/d(root) = 1 and propagates to every leaf.
  void backward(const Var& root) {
    const Tensor& rv = nodes_.at(root.id()).value;
    if (rv.size() != 1)
      throw ShapeError("backward() needs a scalar output, got shape " +
                       shape_str(rv.shape()));
    for (Node& n : nodes_)
      n.grad = n.requires_grad ? Tensor(n.value.shape()) : Tensor();
    if (!nodes_[root.id()].requires_grad) return;
    nodes_[root.id()].grad.fill(1.0);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward) n.backward(*this, n.grad);
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn backward) {
    nodes_.push_back(Node{std::move(value), Tensor(), requires_grad,
                          std::move(backward)});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Tensor& Var::grad() const { return tape_->grad(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace detail {

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw ShapeError(std::string(op) + " needs a matrix, got " +
                     shape_str(t.shape()));
}

template <class F, class G>
Var unary(const Var& a, F forward, G derivative) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = forward(av[i]);
  Tensor saved = out;
  return a.tape().record(std::move(out), {a},
                         [a, derivative, y = std::move(saved)](Tape& t, const Tensor& g) {
                           Tensor* ga = t.grad_buffer(a);
                           if (!ga) return;
                           const Tensor& x = a.value();
                           for (std::size_t i = 0; i < g.size(); ++i)
                             (*ga)[i] += g[i] * derivative(x[i], y[i]);
                         });
}

}  // namespace detail

/// Same value, no gradient flows back through it.
inline Var stop_gradient(const Var& a) { return a.tape().constant(a.value()); }

inline Var add(const Var& a, const Var& b) {
  a.value().check_same(b.value(), "add");
  Tensor out = a.value();
  out += b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a)) *ga += g;
    if (Tensor* gb = t.grad_buffer(b)) *gb += g;
  });
}

inline Var sub(const Var& a, const Var& b) {
  a.value().check_same(b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a)) *ga += g;
    if (Tensor* gb = t.grad_buffer(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  });
}

/// Element-wise (Hadamard) product.
inline Var mul(const Var& a, const Var& b) {
  a.value().check_same(b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b.value()[i];
    if (Tensor* gb = t.grad_buffer(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a.value()[i];
  });
}

inline Var div(const Var& a, const Var& b) {
  a.value().check_same(b.value(), "div");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b.value()[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& bv = b.value();
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / bv[i];
    if (Tensor* gb = t.grad_buffer(b))
      for (std::size_t i = 0; i < g.size(); ++i)
        (*gb)[i] -= g[i] * a.value()[i] / (bv[i] * bv[i]);
  });
}

inline Var scale(const Var& a, double c) {
  return detail::unary(
      a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var add_scalar(const Var& a, double c) {
  return detail::unary(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var square(const Var& a) {
  return detail::unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var exp(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  for (double v : a.value().data())
    if (!(v > 0.0)) throw DomainError("log of non-positive value");
  return detail::unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var sqrt(const Var& a) {
  for (double v : a.value().data())
    if (v < 0.0) throw DomainError("sqrt of negative value");
  return detail::unary(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

// d|x|/dx taken as 0 at x = 0.
inline Var abs(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Var sigmoid(const Var& a) {
  return detail::unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

// Exact (erf) GELU.
inline Var gelu(const Var& a) {
  return detail::unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
        return cdf + x * pdf;
      });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().record(Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a))
      for (double& v : ga->data()) v += g[0];
  });
}

inline Var mean(const Var& a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

/// Σ m·x / (Σ m + eps). Entries with m == 0 are skipped outright, so they
/// receive an exactly zero gradient even when x is non-finite there.
inline Var masked_mean(const Var& x, const Tensor& mask, double eps) {
  x.value().check_same(mask, "masked_mean");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] == 0.0) continue;
    num += mask[i] * x.value()[i];
    den += mask[i];
  }
  const double denom = den + eps;
  const double out = denom > 0.0 ? num / denom : 0.0;
  return x.tape().record(Tensor::scalar(out), {x},
                         [x, mask, denom](Tape& t, const Tensor& g) {
                           Tensor* gx = t.grad_buffer(x);
                           if (!gx || !(denom > 0.0)) return;
                           for (std::size_t i = 0; i < mask.size(); ++i)
                             if (mask[i] != 0.0) (*gx)[i] += g[0] * mask[i] / denom;
                         });
}

inline Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
  });
}

inline Var matmul(const Var& a, const Var& b) {
  Tensor out = matmul(a.value(), b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += g(i, j) * bv(p, j);
          (*ga)(i, p) += s;
        }
    if (Tensor* gb = t.grad_buffer(b))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av_ip = av(i, p);
          for (std::size_t j = 0; j < m; ++j) (*gb)(p, j) += av_ip * g(i, j);
        }
  });
}

inline Var transpose(const Var& a) {
  detail::require_rank2(a.value(), "transpose");
  return a.tape().record(transpose(a.value()), {a}, [a](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) (*ga)(j, i) += g(i, j);
  });
}

/// a (N×D) + b broadcast over rows; b has shape [D].
inline Var add_rowvec(const Var& a, const Var& b) {
  detail::require_rank2(a.value(), "add_rowvec");
  const std::size_t n = a.value().rows(), d = a.value().cols();
  if (b.value().shape() != Shape{d})
    throw ShapeError("add_rowvec: bias shape " + shape_str(b.shape()));
  Tensor out = a.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out(i, j) += b.value()[j];
  return a.tape().record(std::move(out), {a, b}, [a, b, n, d](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a)) *ga += g;
    if (Tensor* gb = t.grad_buffer(b))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) (*gb)[j] += g(i, j);
  });
}

/// a (N×D) scaled column-wise by b of shape [D].
inline Var mul_rowvec(const Var& a, const Var& b) {
  detail::require_rank2(a.value(), "mul_rowvec");
  const std::size_t n = a.value().rows(), d = a.value().cols();
  if (b.value().shape() != Shape{d})
    throw ShapeError("mul_rowvec: scale shape " + shape_str(b.shape()));
  Tensor out = a.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out(i, j) *= b.value()[j];
  return a.tape().record(std::move(out), {a, b}, [a, b, n, d](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) (*ga)(i, j) += g(i, j) * b.value()[j];
    if (Tensor* gb = t.grad_buffer(b))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) (*gb)[j] += g(i, j) * a.value()(i, j);
  });
}

/// Column sums: N×C -> [C].
inline Var sum_rows(const Var& a) {
  detail::require_rank2(a.value(), "sum_rows");
  const std::size_t n = a.value().rows(), c = a.value().cols();
  Tensor out({c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += a.value()(i, j);
  return a.tape().record(std::move(out), {a}, [a, n, c](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) (*ga)(i, j) += g[j];
  });
}

/// out[n] = a[n, index[n]].
inline Var pick(const Var& a, std::span<const std::size_t> index) {
  detail::require_rank2(a.value(), "pick");
  const std::size_t n = a.value().rows();
  if (index.size() != n) throw ShapeError("pick: index length mismatch");
  std::vector<std::size_t> idx(index.begin(), index.end());
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    if (idx[i] >= a.value().cols()) throw RangeError("pick: index out of range");
    out[i] = a.value()(i, idx[i]);
  }
  return a.tape().record(std::move(out), {a}, [a, idx](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < idx.size(); ++i) (*ga)(i, idx[i]) += g[i];
  });
}

/// out[k] = table[index[k]] for a rows×D table -> K×D.
inline Var gather_rows(const Var& table, std::span<const std::size_t> index) {
  detail::require_rank2(table.value(), "gather_rows");
  const std::size_t d = table.value().cols();
  std::vector<std::size_t> idx(index.begin(), index.end());
  Tensor out({idx.size(), d});
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= table.value().rows()) throw RangeError("gather_rows: index out of range");
    for (std::size_t j = 0; j < d; ++j) out(k, j) = table.value()(idx[k], j);
  }
  return table.tape().record(std::move(out), {table}, [table, idx, d](Tape& t, const Tensor& g) {
    if (Tensor* gt = t.grad_buffer(table))
      for (std::size_t k = 0; k < idx.size(); ++k)
        for (std::size_t j = 0; j < d; ++j) (*gt)(idx[k], j) += g(k, j);
  });
}

inline Var row_softmax(const Var& a) {
  detail::require_rank2(a.value(), "row_softmax");
  const std::size_t n = a.value().rows(), c = a.value().cols();
  Tensor out({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, a.value()(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (out(i, j) = std::exp(a.value()(i, j) - mx));
    for (std::size_t j = 0; j < c; ++j) out(i, j) /= z;
  }
  Tensor y = out;
  return a.tape().record(std::move(out), {a}, [a, y = std::move(y), n, c](Tape& t, const Tensor& g) {
    Tensor* ga = t.grad_buffer(a);
    if (!ga) return;
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < c; ++j) (*ga)(i, j) += y(i, j) * (g(i, j) - dot);
    }
  });
}

inline Var row_log_softmax(const Var& a) {
  detail::require_rank2(a.value(), "row_log_softmax");
  const std::size_t n = a.value().rows(), c = a.value().cols();
  Tensor out({n, c});
  Tensor prob({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, a.value()(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(a.value()(i, j) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) {
      out(i, j) = a.value()(i, j) - lse;
      prob(i, j) = std::exp(out(i, j));
    }
  }
  return a.tape().record(std::move(out), {a}, [a, p = std::move(prob), n, c](Tape& t, const Tensor& g) {
    Tensor* ga = t.grad_buffer(a);
    if (!ga) return;
    for (std::size_t i = 0; i < n; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < c; ++j) gs += g(i, j);
      for (std::size_t j = 0; j < c; ++j) (*ga)(i, j) += g(i, j) - p(i, j) * gs;
    }
  });
}

/// Softmax of row i over columns 0..i of a square matrix; columns > i are
/// exactly 0 and never read, so later positions cannot leak into earlier rows.
inline Var causal_row_softmax(const Var& a) {
  detail::require_rank2(a.value(), "causal_row_softmax");
  const std::size_t n = a.value().rows();
  if (a.value().cols() != n) throw ShapeError("causal_row_softmax needs a square matrix");
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j <= i; ++j) mx = std::max(mx, a.value()(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j <= i; ++j) z += (out(i, j) = std::exp(a.value()(i, j) - mx));
    for (std::size_t j = 0; j <= i; ++j) out(i, j) /= z;
  }
  Tensor y = out;
  return a.tape().record(std::move(out), {a}, [a, y = std::move(y), n](Tape& t, const Tensor& g) {
    Tensor* ga = t.grad_buffer(a);
    if (!ga) return;
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j <= i; ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j <= i; ++j) (*ga)(i, j) += y(i, j) * (g(i, j) - dot);
    }
  });
}

/// Each row divided by its Euclidean norm. Zero rows map to zero and pass a
/// zero gradient (the map is singular there).
inline Var l2_normalize_rows(const Var& a) {
  detail::require_rank2(a.value(), "l2_normalize_rows");
  const std::size_t n = a.value().rows(), d = a.value().cols();
  Tensor out({n, d});
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += a.value()(i, j) * a.value()(i, j);
    norms[i] = std::sqrt(s);
    if (norms[i] > 0.0)
      for (std::size_t j = 0; j < d; ++j) out(i, j) = a.value()(i, j) / norms[i];
  }
  Tensor y = out;
  return a.tape().record(std::move(out), {a}, [a, y = std::move(y), norms, n, d](Tape& t, const Tensor& g) {
    Tensor* ga = t.grad_buffer(a);
    if (!ga) return;
    for (std::size_t i = 0; i < n; ++i) {
      if (!(norms[i] > 0.0)) continue;
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += y(i, j) * g(i, j);
      for (std::size_t j = 0; j < d; ++j)
        (*ga)(i, j) += (g(i, j) - y(i, j) * dot) / norms[i];
    }
  });
}

/// Row-wise cosine similarity of two N×D matrices -> [N].
inline Var cosine_rows(const Var& a, const Var& b) {
  detail::require_rank2(a.value(), "cosine_rows");
  a.value().check_same(b.value(), "cosine_rows");
  const std::size_t n = a.value().rows(), d = a.value().cols();
  std::vector<double> na(n), nb(n);
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0.0, sa = 0.0, sb = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double x = a.value()(i, j), z = b.value()(i, j);
      dot += x * z;
      sa += x * x;
      sb += z * z;
    }
    na[i] = std::sqrt(sa);
    nb[i] = std::sqrt(sb);
    if (!(na[i] > 0.0) || !(nb[i] > 0.0))
      throw DomainError("cosine similarity of a zero row (row " + std::to_string(i) + ")");
    out[i] = dot / (na[i] * nb[i]);
  }
  Tensor c = out;
  return a.tape().record(std::move(out), {a, b},
                         [a, b, c = std::move(c), na, nb, n, d](Tape& t, const Tensor& g) {
                           Tensor* ga = t.grad_buffer(a);
                           Tensor* gb = t.grad_buffer(b);
                           for (std::size_t i = 0; i < n; ++i) {
                             const double inv = 1.0 / (na[i] * nb[i]);
                             for (std::size_t j = 0; j < d; ++j) {
                               const double x = a.value()(i, j), z = b.value()(i, j);
                               if (ga) (*ga)(i, j) += g[i] * (z * inv - c[i] * x / (na[i] * na[i]));
                               if (gb) (*gb)(i, j) += g[i] * (x * inv - c[i] * z / (nb[i] * nb[i]));
                             }
                           }
                         });
}

/// Per-row standardization (x - mean) / sqrt(var + eps), biased variance.
inline Var layer_norm_rows(const Var& a, double eps = 1e-5) {
  detail::require_rank2(a.value(), "layer_norm_rows");
  const std::size_t n = a.value().rows(), d = a.value().cols();
  Tensor out({n, d});
  std::vector<double> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += a.value()(i, j);
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = a.value()(i, j) - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) out(i, j) = (a.value()(i, j) - mu) * inv_std[i];
  }
  Tensor xhat = out;
  return a.tape().record(std::move(out), {a},
                         [a, xhat = std::move(xhat), inv_std, n, d](Tape& t, const Tensor& g) {
                           Tensor* ga = t.grad_buffer(a);
                           if (!ga) return;
                           const double inv_d = 1.0 / static_cast<double>(d);
                           for (std::size_t i = 0; i < n; ++i) {
                             double mg = 0.0, mgx = 0.0;
                             for (std::size_t j = 0; j < d; ++j) {
                               mg += g(i, j);
                               mgx += g(i, j) * xhat(i, j);
                             }
                             mg *= inv_d;
                             mgx *= inv_d;
                             for (std::size_t j = 0; j < d; ++j)
                               (*ga)(i, j) += inv_std[i] * (g(i, j) - mg - xhat(i, j) * mgx);
                           }
                         });
}

inline Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
  detail::require_rank2(a.value(), "slice_cols");
  const std::size_t n = a.value().rows(), c = a.value().cols();
  if (begin > end || end > c) throw RangeError("slice_cols out of range");
  const std::size_t w = end - begin;
  Tensor out({n, w});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out(i, j) = a.value()(i, begin + j);
  return a.tape().record(std::move(out), {a}, [a, begin, n, w](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < w; ++j) (*ga)(i, begin + j) += g(i, j);
  });
}

inline Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  detail::require_rank2(a.value(), "slice_rows");
  const std::size_t c = a.value().cols();
  if (begin > end || end > a.value().rows()) throw RangeError("slice_rows out of range");
  const auto src = a.value().data().subspan(begin * c, (end - begin) * c);
  Tensor out({end - begin, c}, std::vector<double>(src.begin(), src.end()));
  return a.tape().record(std::move(out), {a}, [a, begin, c](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[begin * c + i] += g[i];
  });
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const std::size_t n = parts[0].value().rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    detail::require_rank2(p.value(), "concat_cols");
    if (p.value().rows() != n) throw ShapeError("concat_cols row mismatch");
    total += p.value().cols();
  }
  Tensor out({n, total});
  std::size_t off = 0;
  for (const Var& p : parts) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < p.value().cols(); ++j) out(i, off + j) = p.value()(i, j);
    off += p.value().cols();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return parts[0].tape().record(std::move(out), parts, [ps, n](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (const Var& p : ps) {
      const std::size_t w = p.value().cols();
      if (Tensor* gp = t.grad_buffer(p))
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < w; ++j) (*gp)(i, j) += g(i, off + j);
      off += w;
    }
  });
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const std::size_t c = parts[0].value().cols();
  std::vector<double> data;
  std::size_t rows = 0;
  for (const Var& p : parts) {
    detail::require_rank2(p.value(), "concat_rows");
    if (p.value().cols() != c) throw ShapeError("concat_rows column mismatch");
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
    rows += p.value().rows();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return parts[0].tape().record(Tensor({rows, c}, std::move(data)), parts,
                                [ps](Tape& t, const Tensor& g) {
                                  std::size_t off = 0;
                                  for (const Var& p : ps) {
                                    const std::size_t len = p.value().size();
                                    if (Tensor* gp = t.grad_buffer(p))
                                      for (std::size_t i = 0; i < len; ++i) (*gp)[i] += g[off + i];
                                    off += len;
                                  }
                                });
}

/// Forward differences along columns: H×W -> H×(W-1).
inline Var diff_x(const Var& a) {
  detail::require_rank2(a.value(), "diff_x");
  const std::size_t h = a.value().rows(), w = a.value().cols();
  if (w < 2) throw ShapeError("diff_x needs at least two columns");
  Tensor out({h, w - 1});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j + 1 < w; ++j) out(i, j) = a.value()(i, j + 1) - a.value()(i, j);
  return a.tape().record(std::move(out), {a}, [a, h, w](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j + 1 < w; ++j) {
          (*ga)(i, j + 1) += g(i, j);
          (*ga)(i, j) -= g(i, j);
        }
  });
}

/// Forward differences along rows: H×W -> (H-1)×W.
inline Var diff_y(const Var& a) {
  detail::require_rank2(a.value(), "diff_y");
  const std::size_t h = a.value().rows(), w = a.value().cols();
  if (h < 2) throw ShapeError("diff_y needs at least two rows");
  Tensor out({h - 1, w});
  for (std::size_t i = 0; i + 1 < h; ++i)
    for (std::size_t j = 0; j < w; ++j) out(i, j) = a.value()(i + 1, j) - a.value()(i, j);
  return a.tape().record(std::move(out), {a}, [a, h, w](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i + 1 < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          (*ga)(i + 1, j) += g(i, j);
          (*ga)(i, j) -= g(i, j);
        }
  });
}

/// s×s block average of `a` restricted to entries where mask != 0. Blocks
/// with no valid entry yield `empty_value` and take no gradient.
inline Var masked_avg_pool(const Var& a, const Tensor& mask, std::size_t s,
                           double empty_value = 1.0) {
  detail::require_rank2(a.value(), "masked_avg_pool");
  a.value().check_same(mask, "masked_avg_pool");
  const std::size_t h = a.value().rows(), w = a.value().cols();
  if (s == 0 || h % s != 0 || w % s != 0)
    throw ShapeError("masked_avg_pool: factor " + std::to_string(s) +
                     " does not divide " + shape_str(a.shape()));
  const std::size_t oh = h / s, ow = w / s;
  Tensor out({oh, ow});
  Tensor counts({oh, ow});
  for (std::size_t bi = 0; bi < oh; ++bi)
    for (std::size_t bj = 0; bj < ow; ++bj) {
      double acc = 0.0, cnt = 0.0;
      for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = 0; j < s; ++j) {
          const std::size_t r = bi * s + i, c = bj * s + j;
          if (mask(r, c) == 0.0) continue;
          acc += a.value()(r, c);
          cnt += 1.0;
        }
      counts(bi, bj) = cnt;
      out(bi, bj) = cnt > 0.0 ? acc / cnt : empty_value;
    }
  return a.tape().record(std::move(out), {a},
                         [a, mask, counts = std::move(counts), s, oh, ow](Tape& t, const Tensor& g) {
                           Tensor* ga = t.grad_buffer(a);
                           if (!ga) return;
                           for (std::size_t bi = 0; bi < oh; ++bi)
                             for (std::size_t bj = 0; bj < ow; ++bj) {
                               if (counts(bi, bj) == 0.0) continue;
                               const double share = g(bi, bj) / counts(bi, bj);
                               for (std::size_t i = 0; i < s; ++i)
                                 for (std::size_t j = 0; j < s; ++j) {
                                   const std::size_t r = bi * s + i, c = bj * s + j;
                                   if (mask(r, c) != 0.0) (*ga)(r, c) += share;
                                 }
                             }
                         });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }

}  // namespace gep
