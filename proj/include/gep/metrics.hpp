#pragma once

// Evaluation metrics: top-k accuracy, confusion-matrix mIoU/mAcc, masked
// depth errors and label-aware clustering indices.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "gep/error.hpp"
#include "gep/tensor.hpp"

namespace gep {

/// Fraction of rows whose label ranks among the k highest scores. A tie is
/// resolved in favour of the lower class index.
inline double topk_accuracy(const Tensor& scores, std::span<const std::size_t> labels, std::size_t k) {
  if (scores.rank() != 2 || scores.rows() != labels.size())
    throw ShapeError("topk_accuracy: scores must be N×C with N labels");
  if (k == 0 || k > scores.cols()) throw ParameterError("topk_accuracy: k must be in [1, C]");
  if (labels.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t n = 0; n < scores.rows(); ++n) {
    const std::size_t y = labels[n];
    if (y >= scores.cols()) throw RangeError("topk_accuracy: label out of range");
    const double s = scores(n, y);
    std::size_t ahead = 0;
    for (std::size_t c = 0; c < scores.cols(); ++c)
      if (scores(n, c) > s || (scores(n, c) == s && c < y)) ++ahead;
    if (ahead < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// Rows are ground truth, columns predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes) : c_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const { return c_; }
  std::uint64_t operator()(std::size_t gt, std::size_t pred) const { return counts_[gt * c_ + pred]; }

  void add(std::size_t gt, std::size_t pred, std::uint64_t n = 1) {
    if (gt >= c_ || pred >= c_) throw RangeError("confusion matrix index out of range");
    counts_[gt * c_ + pred] += n;
  }

  void add(std::span<const std::size_t> gt, std::span<const std::size_t> pred) {
    if (gt.size() != pred.size()) throw ShapeError("confusion matrix: label count mismatch");
    for (std::size_t i = 0; i < gt.size(); ++i) add(gt[i], pred[i]);
  }

  ConfusionMatrix& merge(const ConfusionMatrix& o) {
    if (o.c_ != c_) throw ShapeError("confusion matrix class count mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    return *this;
  }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto v : counts_) t += v;
    return t;
  }

 private:
  std::size_t c_;
  std::vector<std::uint64_t> counts_;
};

struct SegScores {
  double miou = 0.0;
  double macc = 0.0;
};

/// Class means of IoU = TP/(TP+FP+FN) and Acc = TP/row sum, over classes
/// that occur in the ground truth.
inline SegScores miou_macc(const ConfusionMatrix& conf) {
  const std::size_t c = conf.classes();
  double iou_sum = 0.0, acc_sum = 0.0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < c; ++k) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < c; ++j) {
      row += conf(k, j);
      col += conf(j, k);
    }
    if (row == 0) continue;
    const double tp = static_cast<double>(conf(k, k));
    iou_sum += tp / static_cast<double>(row + col - conf(k, k));
    acc_sum += tp / static_cast<double>(row);
    ++present;
  }
  if (present == 0) return {};
  return {iou_sum / static_cast<double>(present), acc_sum / static_cast<double>(present)};
}

struct DepthErrors {
  double abs = 0.0;
  double rms = 0.0;
};

/// Masked mean absolute error and root mean squared error, in depth units.
inline DepthErrors depth_errors(const Tensor& d_pred, const Tensor& d_gt, const Tensor& mask) {
  d_pred.check_same(d_gt, "depth_errors");
  d_pred.check_same(mask, "depth_errors");
  double sa = 0.0, ss = 0.0, n = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] == 0.0) continue;
    const double e = d_pred[i] - d_gt[i];
    sa += std::abs(e);
    ss += e * e;
    n += 1.0;
  }
  if (n == 0.0) return {};
  return {sa / n, std::sqrt(ss / n)};
}

struct ClusterScores {
  double silhouette = 0.0;
  double davies_bouldin = 0.0;
  double calinski_harabasz = 0.0;
};

/// Silhouette, Davies-Bouldin and Calinski-Harabasz with Euclidean
/// distances. Labels must be 0..k-1 with every label used and k >= 2.
/// A point alone in its cluster scores 0 silhouette. CH is 0 when the
/// between-cluster dispersion is 0 and +inf when only the within-cluster
/// dispersion is 0.
inline ClusterScores cluster_metrics(const Tensor& points, std::span<const std::size_t> labels) {
  if (points.rank() != 2 || points.rows() != labels.size())
    throw ShapeError("cluster_metrics: points must be N×D with N labels");
  const std::size_t n = points.rows(), d = points.cols();
  std::size_t k = 0;
  for (std::size_t l : labels) k = std::max(k, l + 1);
  std::vector<std::size_t> sizes(k, 0);
  for (std::size_t l : labels) ++sizes[l];
  for (std::size_t c = 0; c < k; ++c)
    if (sizes[c] == 0) throw ParameterError("cluster labels must be contiguous from 0");
  if (k < 2 || n <= k) throw ParameterError("cluster_metrics needs >= 2 clusters and more points than clusters");

  auto dist = [&](std::size_t a, std::size_t b) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double t = points(a, j) - points(b, j);
      s += t * t;
    }
    return std::sqrt(s);
  };

  ClusterScores out;
  // Silhouette from per-point mean distances to each cluster.
  std::vector<double> to_cluster(k);
  double sil = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(to_cluster.begin(), to_cluster.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) to_cluster[labels[j]] += dist(i, j);
    const std::size_t own = labels[i];
    if (sizes[own] < 2) continue;
    const double a = to_cluster[own] / static_cast<double>(sizes[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c)
      if (c != own) b = std::min(b, to_cluster[c] / static_cast<double>(sizes[c]));
    const double denom = std::max(a, b);
    if (denom > 0.0) sil += (b - a) / denom;
  }
  out.silhouette = sil / static_cast<double>(n);

  Tensor centroids({k, d});
  Tensor overall({d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      centroids(labels[i], j) += points(i, j);
      overall[j] += points(i, j);
    }
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t j = 0; j < d; ++j) centroids(c, j) /= static_cast<double>(sizes[c]);
  for (std::size_t j = 0; j < d; ++j) overall[j] /= static_cast<double>(n);

  std::vector<double> spread(k, 0.0);
  double within = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double t = points(i, j) - centroids(labels[i], j);
      s += t * t;
    }
    within += s;
    spread[labels[i]] += std::sqrt(s);
  }
  for (std::size_t c = 0; c < k; ++c) spread[c] /= static_cast<double>(sizes[c]);

  double between = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double t = centroids(c, j) - overall[j];
      s += t * t;
    }
    between += static_cast<double>(sizes[c]) * s;
  }
  if (between == 0.0)
    out.calinski_harabasz = 0.0;
  else if (within == 0.0)
    out.calinski_harabasz = std::numeric_limits<double>::infinity();
  else
    out.calinski_harabasz = (between / static_cast<double>(k - 1)) / (within / static_cast<double>(n - k));

  double db = 0.0;
  for (std::size_t a = 0; a < k; ++a) {
    double worst = 0.0;
    for (std::size_t b = 0; b < k; ++b) {
      if (a == b) continue;
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double t = centroids(a, j) - centroids(b, j);
        s += t * t;
      }
      const double sep = std::sqrt(s);
      const double num = spread[a] + spread[b];
      const double r = sep > 0.0 ? num / sep : (num > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
      worst = std::max(worst, r);
    }
    db += worst;
  }
  out.davies_bouldin = db / static_cast<double>(k);
  return out;
}

/// Ordered metric name -> value pairs, written as `name=value` lines or CSV.
class MetricsReport {
 public:
  void set(const std::string& name, double value) { values_[name] = value; }
  void set_text(const std::string& name, const std::string& value) { text_[name] = value; }

  double get(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw RangeError("report has no metric " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return values_.count(name) > 0; }

  // %.17g keeps every double round-trippable and the text byte-stable.
  static std::string format(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }

  std::string to_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : text_) os << k << '=' << v << '\n';
    for (const auto& [k, v] : values_) os << k << '=' << format(v) << '\n';
    return os.str();
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "metric,value\n";
    for (const auto& [k, v] : text_) os << k << ',' << v << '\n';
    for (const auto& [k, v] : values_) os << k << ',' << format(v) << '\n';
    return os.str();
  }

  void merge(const MetricsReport& o) {
    for (const auto& [k, v] : o.values_) values_[k] = v;
    for (const auto& [k, v] : o.text_) text_[k] = v;
  }

 private:
  std::map<std::string, double> values_;
  std::map<std::string, std::string> text_;
};

}  // namespace gep
