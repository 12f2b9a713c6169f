#pragma once

// Multimodal token sequences: interleaving, additive position/modality
// encodings, stride-1 autoregressive windows and the pooled token aggregator.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gep/autodiff.hpp"
#include "gep/bytes.hpp"
#include "gep/error.hpp"
#include "gep/rng.hpp"
#include "gep/tensor.hpp"

namespace gep {

enum class Modality : std::uint8_t { kEvent = 0, kImage = 1 };

inline constexpr std::size_t kNumModalities = 2;

inline const char* modality_name(Modality m) {
  return m == Modality::kEvent ? "event" : "image";
}

/// K×D token embeddings with one modality label per row. Positions are the
/// row indices 0..K-1.
struct TokenSequence {
  Tensor tokens;
  std::vector<Modality> modalities;

  TokenSequence() : tokens({0, 0}) {}
  TokenSequence(Tensor t, std::vector<Modality> m) : tokens(std::move(t)), modalities(std::move(m)) {
    validate();
  }

  std::size_t size() const { return tokens.rows(); }
  std::size_t dim() const { return tokens.cols(); }
  bool empty() const { return size() == 0; }

  std::vector<std::size_t> positions() const {
    std::vector<std::size_t> p(size());
    for (std::size_t k = 0; k < p.size(); ++k) p[k] = k;
    return p;
  }

  void validate() const {
    if (tokens.rank() != 2) throw ShapeError("token sequence must be K×D");
    if (modalities.size() != tokens.rows())
      throw ShapeError("token sequence has " + std::to_string(tokens.rows()) + " tokens but " +
                       std::to_string(modalities.size()) + " modality labels");
  }

  /// Rows [begin, end) as a new sequence.
  TokenSequence slice(std::size_t begin, std::size_t end) const {
    if (begin > end || end > size()) throw RangeError("sequence slice out of range");
    const std::size_t d = dim();
    const auto src = tokens.data().subspan(begin * d, (end - begin) * d);
    return TokenSequence(Tensor({end - begin, d}, std::vector<double>(src.begin(), src.end())),
                         std::vector<Modality>(modalities.begin() + static_cast<std::ptrdiff_t>(begin),
                                               modalities.begin() + static_cast<std::ptrdiff_t>(end)));
  }

  void append(std::span<const double> row, Modality m) {
    if (!empty() && row.size() != dim()) throw ShapeError("append: token dimension mismatch");
    const std::size_t d = row.size();
    std::vector<double> data(tokens.data().begin(), tokens.data().end());
    data.insert(data.end(), row.begin(), row.end());
    tokens = Tensor({size() + 1, d}, std::move(data));
    modalities.push_back(m);
  }
};

/// Learned additive tables: one positional row per index, one row per modality.
struct EncodingTables {
  Tensor positional;  // max_len × D
  Tensor modality;    // 2 × D

  std::size_t max_len() const { return positional.rows(); }
  std::size_t dim() const { return positional.cols(); }

  static EncodingTables zeros(std::size_t max_len, std::size_t d) {
    return {Tensor({max_len, d}), Tensor({kNumModalities, d})};
  }

  /// Unit-variance Gaussian initialization.
  static EncodingTables random(std::size_t max_len, std::size_t d, Rng& rng, double stddev = 1.0) {
    return {Tensor::randn({max_len, d}, rng, stddev), Tensor::randn({kNumModalities, d}, rng, stddev)};
  }
};

inline std::vector<std::size_t> modality_indices(std::span<const Modality> m) {
  std::vector<std::size_t> idx(m.size());
  for (std::size_t k = 0; k < m.size(); ++k) idx[k] = static_cast<std::size_t>(m[k]);
  return idx;
}

/// X_k = S_k + P_k + M_{modality(k)} on a tape, so both tables can be learned.
inline Var compose_tokens(const Var& tokens, std::span<const Modality> modalities,
                          const Var& positional, const Var& modality_table) {
  const std::size_t k = tokens.value().rows();
  if (k > positional.value().rows())
    throw RangeError("sequence of " + std::to_string(k) + " tokens exceeds positional table of " +
                     std::to_string(positional.value().rows()));
  if (modalities.size() != k) throw ShapeError("compose_tokens: modality count mismatch");
  if (tokens.value().cols() != positional.value().cols())
    throw ShapeError("compose_tokens: token and table dimensions differ");
  const Var pos = slice_rows(positional, 0, k);
  const Var mod = gather_rows(modality_table, modality_indices(modalities));
  return add(add(tokens, pos), mod);
}

inline Tensor compose_tokens(const TokenSequence& seq, const EncodingTables& enc) {
  const std::size_t k = seq.size(), d = seq.dim();
  if (k > enc.max_len())
    throw RangeError("sequence of " + std::to_string(k) + " tokens exceeds positional table of " +
                     std::to_string(enc.max_len()));
  if (d != enc.dim()) throw ShapeError("compose_tokens: token and table dimensions differ");
  Tensor x = seq.tokens;
  for (std::size_t r = 0; r < k; ++r) {
    const auto m = static_cast<std::size_t>(seq.modalities[r]);
    for (std::size_t j = 0; j < d; ++j) {
      x(r, j) += enc.positional(r, j);
      x(r, j) += enc.modality(m, j);
    }
  }
  return x;
}

enum class InterleaveOrder { kEventFirst, kImageFirst };

/// Alternates groups of `group` rows from each stream per time step. With
/// group = 1 the pattern is E, I, E, I, ...
inline TokenSequence interleave(const Tensor& event_feats, const Tensor& image_feats,
                                InterleaveOrder order = InterleaveOrder::kEventFirst,
                                std::size_t group = 1) {
  if (event_feats.rank() != 2 || image_feats.rank() != 2)
    throw ShapeError("interleave: features must be T×D");
  if (event_feats.shape() != image_feats.shape())
    throw ShapeError("interleave: unpaired streams " + shape_str(event_feats.shape()) + " vs " +
                     shape_str(image_feats.shape()));
  if (group == 0 || event_feats.rows() % group != 0)
    throw ShapeError("interleave: group size must divide the stream length");
  const std::size_t t = event_feats.rows(), d = event_feats.cols();
  const bool event_first = order == InterleaveOrder::kEventFirst;
  const Tensor& first = event_first ? event_feats : image_feats;
  const Tensor& second = event_first ? image_feats : event_feats;
  const Modality m_first = event_first ? Modality::kEvent : Modality::kImage;
  const Modality m_second = event_first ? Modality::kImage : Modality::kEvent;
  std::vector<double> data;
  data.reserve(2 * t * d);
  std::vector<Modality> mods;
  mods.reserve(2 * t);
  for (std::size_t s = 0; s < t; s += group) {
    for (std::size_t r = s; r < s + group; ++r) {
      data.insert(data.end(), first.row(r).begin(), first.row(r).end());
      mods.push_back(m_first);
    }
    for (std::size_t r = s; r < s + group; ++r) {
      data.insert(data.end(), second.row(r).begin(), second.row(r).end());
      mods.push_back(m_second);
    }
  }
  return TokenSequence(Tensor({2 * t, d}, std::move(data)), std::move(mods));
}

/// Splits a sequence into its event rows and image rows, preserving order.
inline std::pair<Tensor, Tensor> deinterleave(const TokenSequence& seq) {
  std::vector<double> ev, im;
  std::size_t ne = 0, ni = 0;
  for (std::size_t k = 0; k < seq.size(); ++k) {
    auto row = seq.tokens.row(k);
    if (seq.modalities[k] == Modality::kEvent) {
      ev.insert(ev.end(), row.begin(), row.end());
      ++ne;
    } else {
      im.insert(im.end(), row.begin(), row.end());
      ++ni;
    }
  }
  return {Tensor({ne, seq.dim()}, std::move(ev)), Tensor({ni, seq.dim()}, std::move(im))};
}

/// A sample without paired events enters as an image-only subsequence.
inline TokenSequence image_only(const Tensor& image_feats) {
  return TokenSequence(image_feats, std::vector<Modality>(image_feats.rows(), Modality::kImage));
}

inline TokenSequence concat(const TokenSequence& a, const TokenSequence& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.dim() != b.dim()) throw ShapeError("concat: token dimensions differ");
  std::vector<double> data(a.tokens.data().begin(), a.tokens.data().end());
  data.insert(data.end(), b.tokens.data().begin(), b.tokens.data().end());
  std::vector<Modality> m = a.modalities;
  m.insert(m.end(), b.modalities.begin(), b.modalities.end());
  return TokenSequence(Tensor({a.size() + b.size(), a.dim()}, std::move(data)), std::move(m));
}

/// One training sample: rows [start, start+length) predict rows
/// [start+1, start+length], i.e. input j supervises position j+1.
struct ARWindow {
  std::size_t start = 0;
  std::size_t length = 0;
  TokenSequence input;
  Tensor target;
};

inline ARWindow dense_targets(const TokenSequence& seq, std::size_t start, std::size_t length) {
  if (length == 0) throw RangeError("dense_targets: window length must be >= 1");
  if (start + length + 1 > seq.size())
    throw RangeError("dense_targets: window [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + "] exceeds sequence of " +
                     std::to_string(seq.size()) + " tokens");
  return {start, length, seq.slice(start, start + length),
          seq.slice(start + 1, start + length + 1).tokens};
}

/// Uniform start index s with s + length + 1 <= K.
inline std::size_t sample_window_start(std::size_t seq_len, std::size_t length, Rng& rng) {
  if (length == 0 || length + 1 > seq_len)
    throw RangeError("no valid window of length " + std::to_string(length) + " in a sequence of " +
                     std::to_string(seq_len));
  return static_cast<std::size_t>(rng.below(seq_len - length));
}

/// T time steps × Q spatial tokens of one modality, rows ordered (t, q).
struct TokenGrid {
  std::size_t steps = 0;
  std::size_t spatial = 0;
  Tensor tokens;  // (T·Q) × D
  Modality modality = Modality::kEvent;
};

/// Mean-pools the grid along time (groups of `temporal_pool` steps, per
/// spatial slot) and, separately, along space (groups of `spatial_pool`
/// slots, per step), then concatenates: temporal-pooled rows first.
inline TokenSequence aggregate_tokens(const TokenGrid& grid, std::size_t temporal_pool,
                                      std::size_t spatial_pool) {
  const std::size_t t = grid.steps, q = grid.spatial;
  if (grid.tokens.rank() != 2 || grid.tokens.rows() != t * q)
    throw ShapeError("aggregate_tokens: grid tokens must be (T·Q)×D");
  if (temporal_pool == 0 || spatial_pool == 0 || t % temporal_pool != 0 || q % spatial_pool != 0)
    throw ShapeError("aggregate_tokens: pool factors (" + std::to_string(temporal_pool) + ", " +
                     std::to_string(spatial_pool) + ") do not divide (" + std::to_string(t) + ", " +
                     std::to_string(q) + ")");
  const std::size_t d = grid.tokens.cols();
  const std::size_t tt = t / temporal_pool, qq = q / spatial_pool;
  Tensor out({tt * q + t * qq, d});
  std::size_t r = 0;
  for (std::size_t bt = 0; bt < tt; ++bt)
    for (std::size_t s = 0; s < q; ++s, ++r) {
      for (std::size_t k = 0; k < temporal_pool; ++k) {
        const auto src = grid.tokens.row((bt * temporal_pool + k) * q + s);
        for (std::size_t j = 0; j < d; ++j) out(r, j) += src[j];
      }
      for (std::size_t j = 0; j < d; ++j) out(r, j) /= static_cast<double>(temporal_pool);
    }
  for (std::size_t step = 0; step < t; ++step)
    for (std::size_t bq = 0; bq < qq; ++bq, ++r) {
      for (std::size_t k = 0; k < spatial_pool; ++k) {
        const auto src = grid.tokens.row(step * q + bq * spatial_pool + k);
        for (std::size_t j = 0; j < d; ++j) out(r, j) += src[j];
      }
      for (std::size_t j = 0; j < d; ++j) out(r, j) /= static_cast<double>(spatial_pool);
    }
  const std::size_t rows = out.rows();
  return TokenSequence(std::move(out), std::vector<Modality>(rows, grid.modality));
}

// ---------------------------------------------------------------------------
// Serialization: "GSEQ", u64 K, u64 D, u64 max_len, K·D little-endian
// float64 (row-major), K modality bytes.


inline std::string encode_sequence(const TokenSequence& seq, std::size_t max_len) {
  std::string buf = "GSEQ";
  detail::put_u64(buf, seq.size());
  detail::put_u64(buf, seq.dim());
  detail::put_u64(buf, max_len);
  for (double v : seq.tokens.data()) detail::put_f64(buf, v);
  for (Modality m : seq.modalities) buf.push_back(static_cast<char>(m));
  return buf;
}

struct DecodedSequence {
  TokenSequence sequence;
  std::size_t max_len = 0;
};

inline DecodedSequence decode_sequence(std::string_view bytes) {
  if (bytes.size() < 28 || bytes.substr(0, 4) != "GSEQ") throw IoError("not a GSEQ sequence blob");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t k = detail::get_u64(p + 4), d = detail::get_u64(p + 12),
                      max_len = detail::get_u64(p + 20);
  if (bytes.size() != 28 + k * d * 8 + k) throw IoError("sequence blob length mismatch");
  std::vector<double> data(k * d);
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = detail::get_f64(p + 28 + 8 * i);
  std::vector<Modality> mods(k);
  for (std::size_t i = 0; i < k; ++i) {
    const unsigned char m = p[28 + k * d * 8 + i];
    if (m > 1) throw IoError("invalid modality byte in sequence blob");
    mods[i] = static_cast<Modality>(m);
  }
  return {TokenSequence(Tensor({k, d}, std::move(data)), std::move(mods)), max_len};
}

}  // namespace gep
