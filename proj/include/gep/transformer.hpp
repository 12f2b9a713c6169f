#pragma once

// Desk-scale causal transformer over continuous token embeddings, trained
// with the dense next-token MSE objective and rolled out autoregressively.

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "gep/autodiff.hpp"
#include "gep/error.hpp"
#include "gep/io.hpp"
#include "gep/optim.hpp"
#include "gep/rng.hpp"
#include "gep/sequence.hpp"

namespace gep {

struct TransformerConfig {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t dim = 32;
  std::size_t ff_dim = 128;
  std::size_t max_window = 64;
  std::uint64_t seed = 0;

  void validate() const {
    if (layers == 0 || heads == 0 || dim == 0 || ff_dim == 0 || max_window == 0)
      throw ParameterError("transformer dimensions must be positive");
    if (dim % heads != 0)
      throw ParameterError("model dim " + std::to_string(dim) + " not divisible by " +
                           std::to_string(heads) + " heads");
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "block=pre-norm\nlayers=" << layers << "\nheads=" << heads << "\ndim=" << dim
       << "\nff_dim=" << ff_dim << "\nmax_window=" << max_window << "\nseed=" << seed << "\n";
    return os.str();
  }

  static TransformerConfig from_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    for (std::string line; std::getline(is, line);) {
      const auto eq = line.find('=');
      if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto get = [&](const char* k) -> std::uint64_t {
      auto it = kv.find(k);
      if (it == kv.end()) throw IoError(std::string("checkpoint header lacks ") + k);
      return std::stoull(it->second);
    };
    TransformerConfig c{get("layers"), get("heads"), get("dim"), get("ff_dim"), get("max_window"),
                        get("seed")};
    c.validate();
    return c;
  }
};

class CausalTransformer {
 public:
  explicit CausalTransformer(const TransformerConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    const std::size_t d = cfg_.dim, f = cfg_.ff_dim;
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    const double sf = 1.0 / std::sqrt(static_cast<double>(f));
    const double resid = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg_.layers));
    add_param("pos", Tensor::randn({cfg_.max_window, d}, rng));
    add_param("modality", Tensor::randn({kNumModalities, d}, rng));
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      add_param(p + "ln1.gain", Tensor({d}, 1.0));
      add_param(p + "ln1.bias", Tensor({d}));
      add_param(p + "attn.wq", Tensor::randn({d, d}, rng, sd));
      add_param(p + "attn.bq", Tensor({d}));
      add_param(p + "attn.wk", Tensor::randn({d, d}, rng, sd));
      add_param(p + "attn.bk", Tensor({d}));
      add_param(p + "attn.wv", Tensor::randn({d, d}, rng, sd));
      add_param(p + "attn.bv", Tensor({d}));
      add_param(p + "attn.wo", Tensor::randn({d, d}, rng, sd * resid));
      add_param(p + "attn.bo", Tensor({d}));
      add_param(p + "ln2.gain", Tensor({d}, 1.0));
      add_param(p + "ln2.bias", Tensor({d}));
      add_param(p + "ff.w1", Tensor::randn({d, f}, rng, sd));
      add_param(p + "ff.b1", Tensor({f}));
      add_param(p + "ff.w2", Tensor::randn({f, d}, rng, sf * resid));
      add_param(p + "ff.b2", Tensor({d}));
    }
    add_param("lnf.gain", Tensor({d}, 1.0));
    add_param("lnf.bias", Tensor({d}));
    add_param("head.w", Tensor::randn({d, d}, rng, 0.02));
    add_param("head.b", Tensor({d}));
  }

  const TransformerConfig& config() const { return cfg_; }
  std::vector<NamedTensor>& parameters() { return params_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  EncodingTables encodings() const { return {params_[0].value, params_[1].value}; }

  /// One Var per parameter, in parameters() order.
  std::vector<Var> bind(Tape& tape, bool trainable) const {
    std::vector<Var> v;
    v.reserve(params_.size());
    for (const auto& p : params_) v.push_back(trainable ? tape.leaf(p.value) : tape.constant(p.value));
    return v;
  }

  /// K×D composed inputs -> K×D next-token predictions. Row k only reads
  /// rows 0..k.
  Var forward(const Var& inputs, std::span<const Var> p) const {
    const Tensor& x = inputs.value();
    if (x.rank() != 2 || x.cols() != cfg_.dim)
      throw ShapeError("transformer input must be K×" + std::to_string(cfg_.dim) + ", got " +
                       shape_str(x.shape()));
    if (x.rows() > cfg_.max_window)
      throw RangeError("input of " + std::to_string(x.rows()) + " tokens exceeds window " +
                       std::to_string(cfg_.max_window));
    if (x.rows() == 0) throw ShapeError("transformer input is empty");
    const std::size_t dh = cfg_.dim / cfg_.heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    Var h = inputs;
    std::size_t i = 2;
    auto affine = [](const Var& a, const Var& w, const Var& b) { return add_rowvec(matmul(a, w), b); };
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const Var* q = &p[i];
      const Var a = add_rowvec(mul_rowvec(layer_norm_rows(h), q[0]), q[1]);
      const Var qm = affine(a, q[2], q[3]);
      const Var km = affine(a, q[4], q[5]);
      const Var vm = affine(a, q[6], q[7]);
      std::vector<Var> heads;
      for (std::size_t hd = 0; hd < cfg_.heads; ++hd) {
        const Var qh = slice_cols(qm, hd * dh, (hd + 1) * dh);
        const Var kh = slice_cols(km, hd * dh, (hd + 1) * dh);
        const Var vh = slice_cols(vm, hd * dh, (hd + 1) * dh);
        const Var att = causal_row_softmax(scale(matmul(qh, transpose(kh)), inv_sqrt));
        heads.push_back(matmul(att, vh));
      }
      h = add(h, affine(concat_cols(heads), q[8], q[9]));
      const Var m = add_rowvec(mul_rowvec(layer_norm_rows(h), q[10]), q[11]);
      h = add(h, affine(gelu(affine(m, q[12], q[13])), q[14], q[15]));
      i += 16;
    }
    const Var out = add_rowvec(mul_rowvec(layer_norm_rows(h), p[i]), p[i + 1]);
    return affine(out, p[i + 2], p[i + 3]);
  }

  /// Adds the learned position/modality tables to `tokens`, then forward().
  Var predict(const Var& tokens, std::span<const Modality> modalities, std::span<const Var> p) const {
    return forward(compose_tokens(tokens, modalities, p[0], p[1]), p);
  }

  Tensor forward(const Tensor& composed) const {
    Tape tape;
    const auto p = bind(tape, false);
    return forward(tape.constant(composed), p).value();
  }

  Tensor predict(const TokenSequence& seq) const {
    Tape tape;
    const auto p = bind(tape, false);
    return predict(tape.constant(seq.tokens), seq.modalities, p).value();
  }

  std::string checkpoint_bytes() const { return encode_bundle(cfg_.to_text(), params_); }

  static CausalTransformer from_checkpoint(std::string_view bytes) {
    Bundle b = decode_bundle(bytes);
    CausalTransformer m(TransformerConfig::from_text(b.header));
    for (auto& p : m.params_) {
      const Tensor& t = b.at(p.name);
      if (t.shape() != p.value.shape()) throw IoError("checkpoint tensor " + p.name + " has wrong shape");
      p.value = t;
    }
    return m;
  }

 private:
  void add_param(std::string name, Tensor t) { params_.push_back({std::move(name), std::move(t)}); }

  TransformerConfig cfg_;
  std::vector<NamedTensor> params_;
};

/// (1/w) Σ_j ||pred_j - target_j||².
inline Var pretrain_loss(const Var& preds, const Tensor& targets) {
  if (preds.value().shape() != targets.shape() || targets.rank() != 2 || targets.rows() == 0)
    throw ShapeError("pretrain_loss: predictions " + shape_str(preds.shape()) + " vs targets " +
                     shape_str(targets.shape()));
  const Var diff = sub(preds, preds.tape().constant(targets));
  return scale(sum(square(diff)), 1.0 / static_cast<double>(targets.rows()));
}

inline double pretrain_loss(const Tensor& preds, const Tensor& targets) {
  Tape t;
  return pretrain_loss(t.constant(preds), targets).value().item();
}

struct TrainSchedule {
  std::size_t steps = 500;
  std::size_t warmup_steps = 100;
  double peak_lr = 5e-4;
  double weight_decay = 1e-5;
  std::size_t window = 16;
  std::size_t batch = 4;
  std::uint64_t seed = 0;

  /// Linear ramp 0 -> peak over warmup_steps, then cosine decay to 0 at `steps`.
  double lr_at(std::size_t step) const { return warmup_cosine_lr(step, warmup_steps, steps, peak_lr); }
};

struct LossPoint {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<LossPoint> curve;
};

/// AdamW on the dense next-token objective. Each step draws `batch`
/// (sequence, start) pairs and averages their window losses. Throws
/// DivergenceError on a non-finite loss.
inline TrainResult train(CausalTransformer& model, std::span<const TokenSequence> sequences,
                         const TrainSchedule& sched) {
  if (sequences.empty()) throw ParameterError("train: no sequences");
  if (sched.window == 0 || sched.window > model.config().max_window)
    throw ParameterError("train: window must be in [1, max_window]");
  if (sched.batch == 0) throw ParameterError("train: batch must be >= 1");
  for (const auto& s : sequences)
    if (s.size() < sched.window + 1 || s.dim() != model.config().dim)
      throw ShapeError("train: every sequence needs window+1 tokens of the model dimension");
  Rng rng(sched.seed);
  AdamW opt({0.9, 0.999, 1e-8, sched.weight_decay});
  TrainResult result;
  for (std::size_t step = 0; step < sched.steps; ++step) {
    const double lr = sched.lr_at(step);
    Tape tape;
    const auto p = model.bind(tape, true);
    std::vector<Var> losses;
    for (std::size_t b = 0; b < sched.batch; ++b) {
      const TokenSequence& seq = sequences[rng.below(sequences.size())];
      const ARWindow win = dense_targets(seq, sample_window_start(seq.size(), sched.window, rng), sched.window);
      const Var preds = model.predict(tape.constant(win.input.tokens), win.input.modalities, p);
      losses.push_back(pretrain_loss(preds, win.target));
    }
    Var total = losses[0];
    for (std::size_t b = 1; b < losses.size(); ++b) total = add(total, losses[b]);
    total = scale(total, 1.0 / static_cast<double>(losses.size()));
    const double loss = total.value().item();
    if (!std::isfinite(loss))
      throw DivergenceError("training diverged at step " + std::to_string(step), static_cast<long>(step));
    result.curve.push_back({step, lr, loss});
    tape.backward(total);
    std::vector<Tensor*> params;
    std::vector<const Tensor*> grads;
    for (std::size_t k = 0; k < p.size(); ++k) {
      params.push_back(&model.parameters()[k].value);
      grads.push_back(&p[k].grad());
    }
    opt.step(params, grads, lr);
  }
  return result;
}

struct RolloutSpec {
  std::size_t context = 0;  // tokens taken from the end of the given context
  std::size_t horizon = 0;  // tokens to generate
  std::size_t window = 0;   // sliding window length

  void validate(const TransformerConfig& cfg) const {
    if (window == 0 || window > cfg.max_window)
      throw RangeError("rollout window must be in [1, " + std::to_string(cfg.max_window) + "]");
    if (context > window) throw RangeError("rollout context longer than window");
  }
};

/// Modality of the token following `m`, continuing its smallest period.
inline Modality next_modality(std::span<const Modality> m) {
  const std::size_t n = m.size();
  for (std::size_t period = 1; period < n; ++period) {
    bool ok = true;
    for (std::size_t k = period; k < n && ok; ++k) ok = m[k] == m[k - period];
    if (ok) return m[n - period];
  }
  return m[0];
}

/// Appends `horizon` predicted tokens to the context. Each step feeds at
/// most the last `window` tokens (positions restart at 0 inside the window)
/// and appends the prediction at the final position.
inline TokenSequence rollout(const CausalTransformer& model, const TokenSequence& context,
                             const RolloutSpec& spec) {
  spec.validate(model.config());
  if (context.empty()) throw RangeError("rollout: empty context");
  const std::size_t take = spec.context == 0 ? std::min(context.size(), spec.window) : spec.context;
  if (take > context.size()) throw RangeError("rollout: context spec longer than the given context");
  TokenSequence seq = context.slice(context.size() - take, context.size());
  for (std::size_t step = 0; step < spec.horizon; ++step) {
    const std::size_t begin = seq.size() > spec.window ? seq.size() - spec.window : 0;
    const Tensor preds = model.predict(seq.slice(begin, seq.size()));
    seq.append(preds.row(preds.rows() - 1), next_modality(seq.modalities));
  }
  return seq;
}

}  // namespace gep
