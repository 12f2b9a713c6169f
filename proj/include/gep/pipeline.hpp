#pragma once

// Stage runner for the align -> pretrain chain and its evaluations. Every
// stage regenerates its synthetic data from the config, reads prerequisite
// artifacts from the run directory and writes `<stage>_report.txt` (and a
// CSV twin) next to them.

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "gep/align.hpp"
#include "gep/config.hpp"
#include "gep/encoder.hpp"
#include "gep/error.hpp"
#include "gep/events.hpp"
#include "gep/io.hpp"
#include "gep/loss_suite.hpp"
#include "gep/metrics.hpp"
#include "gep/optim.hpp"
#include "gep/sequence.hpp"
#include "gep/synth.hpp"
#include "gep/task_heads.hpp"
#include "gep/transformer.hpp"

namespace gep {

enum class Stage { kSynth, kAccumulate, kAlign, kPretrain, kRollout, kEvalSeg, kEvalDepth, kEvalCluster, kGradcheck };

inline const std::vector<std::pair<std::string, Stage>>& stage_names() {
  static const std::vector<std::pair<std::string, Stage>> names{
      {"synth", Stage::kSynth},         {"accumulate", Stage::kAccumulate}, {"align", Stage::kAlign},
      {"pretrain", Stage::kPretrain},   {"rollout", Stage::kRollout},       {"eval-seg", Stage::kEvalSeg},
      {"eval-depth", Stage::kEvalDepth}, {"eval-cluster", Stage::kEvalCluster}, {"gradcheck", Stage::kGradcheck}};
  return names;
}

inline std::string stage_name(Stage s) {
  for (const auto& [n, v] : stage_names())
    if (v == s) return n;
  return "unknown";
}

inline Stage parse_stage(const std::string& name) {
  for (const auto& [n, v] : stage_names())
    if (n == name) return v;
  throw ConfigError("unknown stage '" + name + "'");
}

namespace fs = std::filesystem;

namespace detail {

inline std::string artifact(const fs::path& dir, const char* name, Stage needed_by, const char* producer) {
  const fs::path p = dir / name;
  if (!fs::exists(p))
    throw StageOrderError("stage " + stage_name(needed_by) + " needs " + p.string() + "; run '" + producer +
                          "' first");
  return p.string();
}

// Event pseudo-frame for interval k (bins > 1 keeps the last bin) paired
// with the image at k + 1 and its labels.
struct FrameSample {
  Tensor event_frame;
  Tensor image;
  std::size_t label = 0;
  std::vector<std::size_t> seg;
  Tensor depth;
  Tensor depth_mask;
};

inline FrameSample make_sample(const SynthScene& s, const SynthClip& clip, std::size_t k, const RunConfig& cfg) {
  const auto bins = accumulate_bins(clip.events, s.interval(k), s.resolution, cfg.bins);
  FrameSample out;
  out.event_frame = normalize(bins.back(), cfg.percentile).data;
  out.image = clip.images[k + 1];
  out.label = s.shape;
  const auto& seg = clip.segmentation[k + 1];
  out.seg.assign(seg.data.begin(), seg.data.end());
  out.depth = clip.depth[k + 1];
  out.depth_mask = clip.depth_mask;
  return out;
}

inline std::vector<FrameSample> frame_samples(const RunConfig& cfg, bool eval) {
  std::vector<FrameSample> out;
  for (const SynthScene& s : make_dataset(cfg.dataset(eval, cfg.clip_frames))) {
    const SynthClip clip = synth_scene(s);
    for (std::size_t k = 0; k + 1 < s.frames; ++k) out.push_back(make_sample(s, clip, k, cfg));
  }
  return out;
}

inline Tensor gather(const Tensor& x, std::span<const std::size_t> idx) {
  Tensor out({idx.size(), x.cols()});
  for (std::size_t b = 0; b < idx.size(); ++b)
    std::copy(x.row(idx[b]).begin(), x.row(idx[b]).end(), out.row(b).begin());
  return out;
}

inline std::vector<Tensor*> head_params(ProjectionHead& h) { return h.parameters(); }

inline std::vector<TokenSequence> token_sequences(const RunConfig& cfg, const PatchEncoder& enc, bool eval) {
  std::vector<TokenSequence> out;
  const std::size_t g = cfg.tokens_per_frame;
  for (const SynthScene& s : make_dataset(cfg.dataset(eval, cfg.sequence_frames))) {
    const SynthClip clip = synth_scene(s);
    const std::size_t steps = s.frames - 1;
    Tensor ev({steps * g, cfg.dim}), im({steps * g, cfg.dim});
    for (std::size_t k = 0; k < steps; ++k) {
      const FrameSample fsmp = make_sample(s, clip, k, cfg);
      const Tensor e = pool_tokens(enc.patch_tokens(fsmp.event_frame), g);
      const Tensor i = pool_tokens(enc.patch_tokens(fsmp.image), g);
      for (std::size_t r = 0; r < g; ++r) {
        std::copy(e.row(r).begin(), e.row(r).end(), ev.row(k * g + r).begin());
        std::copy(i.row(r).begin(), i.row(r).end(), im.row(k * g + r).begin());
      }
    }
    out.push_back(interleave(ev, im, cfg.interleave_order(), g));
  }
  return out;
}

inline void write_report(const fs::path& dir, const std::string& stage, const MetricsReport& r) {
  write_file((dir / (stage + "_report.txt")).string(), r.to_text());
  write_file((dir / (stage + "_report.csv")).string(), r.to_csv());
}

inline MetricsReport base_report(const RunConfig& cfg, Stage stage) {
  MetricsReport r;
  r.set_text("config_hash", cfg.hash());
  r.set_text("stage", stage_name(stage));
  r.set_text("seed", std::to_string(cfg.seed));
  return r;
}

inline PatchEncoder load_encoder(const fs::path& dir, Stage stage) {
  return PatchEncoder::from_checkpoint(read_file(artifact(dir, "encoder.ckpt", stage, "align")));
}

inline PatchEncoder initial_encoder(const RunConfig& cfg) {
  Rng rng(cfg.seed ^ 0x656e63ULL);
  return PatchEncoder::random(cfg.encoder_config(), rng);
}

inline SemanticTeacher make_teacher(const RunConfig& cfg) {
  return SemanticTeacher(cfg.height, cfg.width, cfg.dim, 0x7465616368ULL, cfg.classes);
}

}  // namespace detail

struct AlignOutcome {
  PatchEncoder encoder;
  ProjectionHead head;
  std::vector<LossPoint> curve;
};

/// Trains the event encoder and projection head against the frozen teacher.
inline AlignOutcome train_alignment(const RunConfig& cfg) {
  const auto samples = detail::frame_samples(cfg, false);
  AlignOutcome out{detail::initial_encoder(cfg), {}, {}};
  Rng rng(cfg.seed ^ 0x616c6e67ULL);
  out.head = ProjectionHead::random(rng, cfg.dim, cfg.head_hidden_dim);
  const SemanticTeacher teacher = detail::make_teacher(cfg);

  std::vector<Tensor> ev, im;
  for (const auto& s : samples) {
    ev.push_back(s.event_frame);
    im.push_back(s.image);
  }
  const Tensor xi = out.encoder.batch(im);
  const Tensor zi = teacher.embed_all(im);
  Tensor xe = out.encoder.batch(ev);
  const AlignWeights w = cfg.align_weights();
  AdamW opt({0.9, 0.999, 1e-8, cfg.align_weight_decay});
  for (std::size_t step = 0; step < cfg.align_steps; ++step) {
    std::vector<std::size_t> idx(cfg.align_batch);
    for (auto& i : idx) i = rng.below(samples.size());
    Tensor be = detail::gather(xe, idx);
    if (cfg.augment) {
      for (std::size_t b = 0; b < idx.size(); ++b) {
        const PseudoFrame f{ev[idx[b]], cfg.percentile};
        const auto row = out.encoder.flatten(augment_random(f, rng.next_u64()).data);
        std::copy(row.begin(), row.end(), be.row(b).begin());
      }
    }
    Tape tape;
    const Var wv = tape.leaf(out.encoder.weight()), bv = tape.leaf(out.encoder.bias());
    const HeadVars hv = bind(tape, out.head, true);
    const std::size_t q = cfg.encoder_config().patches();
    const Var ze = PatchEncoder::embed(tape.constant(be), wv, bv, q);
    const Var zei = PatchEncoder::embed(tape.constant(detail::gather(xi, idx)), wv, bv, q);
    const Var loss = total_alignment_loss({ze, tape.constant(detail::gather(zi, idx)), zei}, w, hv);
    const double lv = loss.value().item();
    if (!std::isfinite(lv)) throw DivergenceError("alignment diverged at step " + std::to_string(step), static_cast<long>(step));
    const double lr = warmup_cosine_lr(step, cfg.align_warmup, cfg.align_steps, cfg.align_lr);
    out.curve.push_back({step, lr, lv});
    tape.backward(loss);
    std::vector<Tensor*> params{&out.encoder.weight(), &out.encoder.bias()};
    std::vector<const Tensor*> grads{&wv.grad(), &bv.grad()};
    for (Tensor* p : out.head.parameters()) params.push_back(p);
    for (const Var& v : hv.vars()) grads.push_back(&v.grad());
    opt.step(params, grads, lr);
  }
  return out;
}

inline std::string loss_curve_csv(std::span<const LossPoint> curve) {
  std::ostringstream os;
  os << "step,lr,loss\n";
  for (const auto& p : curve)
    os << p.step << ',' << MetricsReport::format(p.lr) << ',' << MetricsReport::format(p.loss) << '\n';
  return os.str();
}

/// Clustering indices of held-out event embeddings for an encoder.
inline ClusterScores event_cluster_scores(const RunConfig& cfg, const PatchEncoder& enc) {
  const auto samples = detail::frame_samples(cfg, true);
  std::vector<Tensor> ev;
  std::vector<std::size_t> labels;
  for (const auto& s : samples) {
    ev.push_back(s.event_frame);
    labels.push_back(s.label);
  }
  return cluster_metrics(enc.embed_frames(ev), labels);
}

namespace detail {

inline void add_cluster(MetricsReport& r, const std::string& prefix, const ClusterScores& c) {
  r.set(prefix + ".silhouette", c.silhouette);
  r.set(prefix + ".davies_bouldin", c.davies_bouldin);
  r.set(prefix + ".calinski_harabasz", c.calinski_harabasz);
}

inline MetricsReport run_synth(const RunConfig& cfg, const fs::path& dir) {
  const fs::path sd = dir / "synth";
  fs::create_directories(sd);
  MetricsReport r = base_report(cfg, Stage::kSynth);
  std::size_t idx = 0, total_events = 0;
  std::ostringstream manifest;
  manifest << "scene,shape,events\n";
  for (const SynthScene& s : make_dataset(cfg.dataset(false, cfg.clip_frames))) {
    const SynthClip clip = synth_scene(s);
    char stem[32];
    std::snprintf(stem, sizeof stem, "scene_%04zu", idx++);
    write_event_file((sd / (std::string(stem) + ".evt")).string(), s.resolution, clip.events);
    Tensor images({clip.images.size(), cfg.height, cfg.width, 3});
    for (std::size_t f = 0; f < clip.images.size(); ++f)
      std::copy(clip.images[f].data().begin(), clip.images[f].data().end(),
                images.data().begin() + static_cast<std::ptrdiff_t>(f * clip.images[f].size()));
    write_file((sd / (std::string(stem) + "_images.gten")).string(), encode_tensor(images));
    write_file((sd / (std::string(stem) + "_seg.glbl")).string(), encode_labels(clip.segmentation.back()));
    write_file((sd / (std::string(stem) + "_depth.gten")).string(), encode_tensor(clip.depth.back()));
    manifest << stem << ',' << shape_name(s.shape) << ',' << clip.events.size() << '\n';
    total_events += clip.events.size();
  }
  write_file((sd / "manifest.csv").string(), manifest.str());
  r.set("synth.scenes", static_cast<double>(idx));
  r.set("synth.events", static_cast<double>(total_events));
  return r;
}

inline MetricsReport run_accumulate(const RunConfig& cfg, const fs::path& dir) {
  const std::string input = cfg.accumulate_input.empty()
                                ? artifact(dir, "synth/scene_0000.evt", Stage::kAccumulate, "synth")
                                : cfg.accumulate_input;
  const EventFile ef = read_event_file(input);
  const SynthScene timing = [&] {
    SynthScene s;
    s.fps = cfg.fps;
    return s;
  }();
  std::int64_t t_end = 0;
  for (const Event& e : ef.events) t_end = std::max(t_end, e.t + 1);
  const std::int64_t dt = timing.frame_interval_ns();
  const std::size_t intervals = static_cast<std::size_t>(std::max<std::int64_t>(1, (t_end + dt - 1) / dt));
  Tensor frames({intervals * cfg.bins, ef.resolution.height, ef.resolution.width, 3});
  MetricsReport r = base_report(cfg, Stage::kAccumulate);
  std::size_t slot = 0, active = 0;
  for (std::size_t k = 0; k < intervals; ++k)
    for (const RawCounts& rc : accumulate_bins(ef.events, timing.interval(k), ef.resolution, cfg.bins)) {
      const PseudoFrame pf = normalize(rc, cfg.percentile);
      std::copy(pf.data.data().begin(), pf.data.data().end(),
                frames.data().begin() + static_cast<std::ptrdiff_t>(slot++ * pf.data.size()));
      for (auto m : rc.mask.data) active += m;
    }
  write_file((dir / "pseudo_frames.gten").string(), encode_tensor(frames));
  r.set("accumulate.events", static_cast<double>(ef.events.size()));
  r.set("accumulate.frames", static_cast<double>(slot));
  r.set("accumulate.active_pixels", static_cast<double>(active));
  return r;
}

inline MetricsReport run_align(const RunConfig& cfg, const fs::path& dir) {
  const AlignOutcome a = train_alignment(cfg);
  ProjectionHead head = a.head;
  std::vector<NamedTensor> extra{{"head.w1", head.w1}, {"head.b1", head.b1}, {"head.w2", head.w2}, {"head.b2", head.b2}};
  write_file((dir / "encoder.ckpt").string(), a.encoder.checkpoint_bytes(extra));
  write_file((dir / "align_loss.csv").string(), loss_curve_csv(a.curve));
  MetricsReport r = base_report(cfg, Stage::kAlign);
  r.set("align.loss_initial", a.curve.front().loss);
  r.set("align.loss_final", a.curve.back().loss);
  return r;
}

inline MetricsReport run_pretrain(const RunConfig& cfg, const fs::path& dir) {
  const PatchEncoder enc = load_encoder(dir, Stage::kPretrain);
  const auto seqs = token_sequences(cfg, enc, false);
  CausalTransformer model(cfg.transformer_config());
  const TrainResult res = train(model, seqs, cfg.train_schedule());
  write_file((dir / "transformer.ckpt").string(), model.checkpoint_bytes());
  write_file((dir / "loss_curve.csv").string(), loss_curve_csv(res.curve));
  MetricsReport r = base_report(cfg, Stage::kPretrain);
  r.set("pretrain.loss_initial", res.curve.front().loss);
  r.set("pretrain.loss_final", res.curve.back().loss);
  r.set("pretrain.parameters", static_cast<double>(model.parameter_count()));
  r.set("pretrain.sequences", static_cast<double>(seqs.size()));
  return r;
}

inline MetricsReport run_rollout(const RunConfig& cfg, const fs::path& dir) {
  const PatchEncoder enc = load_encoder(dir, Stage::kRollout);
  const CausalTransformer model =
      CausalTransformer::from_checkpoint(read_file(artifact(dir, "transformer.ckpt", Stage::kRollout, "pretrain")));
  const auto seqs = token_sequences(cfg, enc, true);
  const RolloutSpec spec = cfg.rollout_spec();
  const std::size_t c = spec.context, h = spec.horizon, period = cfg.tokens_per_step();
  double mse = 0.0, copy_mse = 0.0, first_mse = 0.0;
  std::size_t count = 0;
  for (std::size_t n = 0; n < seqs.size(); ++n) {
    const TokenSequence& seq = seqs[n];
    const TokenSequence gen = rollout(model, seq.slice(0, c), spec);
    if (n == 0) write_file((dir / "rollout_tokens.gseq").string(), encode_sequence(gen, gen.size()));
    for (std::size_t k = 0; k < h; ++k) {
      double e = 0.0, b = 0.0;
      // repeat the last observed time step as a baseline
      const std::size_t ref = c - period + (k % period);
      for (std::size_t j = 0; j < seq.dim(); ++j) {
        const double truth = seq.tokens(c + k, j);
        e += (gen.tokens(c + k, j) - truth) * (gen.tokens(c + k, j) - truth);
        b += (seq.tokens(ref, j) - truth) * (seq.tokens(ref, j) - truth);
      }
      mse += e;
      copy_mse += b;
      if (k == 0) first_mse += e;
      ++count;
    }
  }
  MetricsReport r = base_report(cfg, Stage::kRollout);
  r.set("rollout.mse", mse / static_cast<double>(count));
  r.set("rollout.first_token_mse", first_mse / static_cast<double>(seqs.size()));
  r.set("rollout.repeat_last_step_mse", copy_mse / static_cast<double>(count));
  r.set("rollout.sequences", static_cast<double>(seqs.size()));
  return r;
}

// Linear decoder over frozen event patch tokens, trained with AdamW on
// mini-batches of 8 frames.
template <class LossFn>
inline Tensor train_decoder(const RunConfig& cfg, const std::vector<Tensor>& tokens, std::size_t out_per_token,
                            LossFn&& loss_of, std::uint64_t salt) {
  Rng rng(cfg.seed ^ salt);
  Tensor weight = Tensor::randn({cfg.dim, out_per_token}, rng, 0.01);
  AdamW opt({0.9, 0.999, 1e-8, 0.0});
  for (std::size_t step = 0; step < cfg.decoder_steps; ++step) {
    Tape tape;
    const Var w = tape.leaf(weight);
    std::vector<Var> losses;
    for (int b = 0; b < 8; ++b) {
      const std::size_t i = rng.below(tokens.size());
      losses.push_back(loss_of(tape, tape.constant(tokens[i]), w, i));
    }
    Var total = losses[0];
    for (std::size_t k = 1; k < losses.size(); ++k) total = add(total, losses[k]);
    total = scale(total, 1.0 / static_cast<double>(losses.size()));
    if (!std::isfinite(total.value().item()))
      throw DivergenceError("decoder training diverged at step " + std::to_string(step), static_cast<long>(step));
    tape.backward(total);
    std::vector<Tensor*> ps{&weight};
    std::vector<const Tensor*> gs{&w.grad()};
    opt.step(ps, gs, warmup_cosine_lr(step, 10, cfg.decoder_steps, cfg.decoder_lr));
  }
  return weight;
}

inline std::vector<Tensor> event_tokens(const PatchEncoder& enc, const std::vector<FrameSample>& s) {
  std::vector<Tensor> out;
  for (const auto& x : s) out.push_back(enc.patch_tokens(x.event_frame));
  return out;
}

inline MetricsReport run_eval_seg(const RunConfig& cfg, const fs::path& dir) {
  const PatchEncoder enc = load_encoder(dir, Stage::kEvalSeg);
  const auto train_s = frame_samples(cfg, false), eval_s = frame_samples(cfg, true);
  const auto train_t = event_tokens(enc, train_s), eval_t = event_tokens(enc, eval_s);
  const std::size_t c = 2, p = cfg.patch, h = cfg.height, w = cfg.width;
  const SegLossOptions opt = cfg.seg_options();
  const Tensor weight = train_decoder(
      cfg, train_t, c * p * p,
      [&](Tape&, const Var& tok, const Var& wv, std::size_t i) {
        return seg_loss(linear_patch_decode(tok, wv, c, p, h, w), train_s[i].seg, opt);
      },
      0x736567ULL);
  const PatchDecoder dec{weight, p, c};
  ConfusionMatrix conf(c);
  double loss = 0.0;
  for (std::size_t i = 0; i < eval_s.size(); ++i) {
    const Tensor logits = linear_patch_decode(eval_t[i], dec, h, w);
    loss += seg_loss(logits, eval_s[i].seg, opt);
    Grid<std::uint8_t> pred(h, w);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < c; ++k)
          if (logits(k, y, x) > logits(best, y, x)) best = k;
        pred(y, x) = static_cast<std::uint8_t>(best);
        const std::size_t gt = eval_s[i].seg[y * w + x];
        if (opt.ignore_index && gt == *opt.ignore_index) continue;
        conf.add(gt, best);
      }
    if (i == 0) write_file((dir / "seg_pred_0000.glbl").string(), encode_labels(pred));
  }
  write_file((dir / "seg_decoder.ckpt").string(), encode_bundle("kind=seg_decoder\n", {{"decoder.weight", weight}}));
  const SegScores s = miou_macc(conf);
  MetricsReport r = base_report(cfg, Stage::kEvalSeg);
  r.set("seg.miou", s.miou);
  r.set("seg.macc", s.macc);
  r.set("seg.loss", loss / static_cast<double>(eval_s.size()));
  return r;
}

inline MetricsReport run_eval_depth(const RunConfig& cfg, const fs::path& dir) {
  const PatchEncoder enc = load_encoder(dir, Stage::kEvalDepth);
  const auto train_s = frame_samples(cfg, false), eval_s = frame_samples(cfg, true);
  const auto train_t = event_tokens(enc, train_s), eval_t = event_tokens(enc, eval_s);
  const std::size_t p = cfg.patch, h = cfg.height, w = cfg.width;
  const DepthRange range = cfg.depth_range();
  const auto scales = cfg.scales();
  auto supervision = [&](const FrameSample& s) {
    DepthSupervision sup{s.depth, s.depth_mask, scales, cfg.silog_lambda, cfg.w_silog, cfg.w_ms_grad, cfg.depth_eps};
    return sup;
  };
  auto predict = [&](const Var& tok, const Var& wv) {
    const Var logits = reshape(linear_patch_decode(tok, wv, 1, p, h, w), {h, w});
    return denorm_log_depth(sigmoid(logits), range);
  };
  const Tensor weight = train_decoder(
      cfg, train_t, p * p,
      [&](Tape&, const Var& tok, const Var& wv, std::size_t i) { return depth_total(predict(tok, wv), supervision(train_s[i])); },
      0x64657074ULL);
  double abs_sum = 0.0, rms_sum = 0.0, loss = 0.0;
  for (std::size_t i = 0; i < eval_s.size(); ++i) {
    Tape tape;
    const Tensor d = predict(tape.constant(eval_t[i]), tape.constant(weight)).value();
    const DepthErrors e = depth_errors(d, eval_s[i].depth, eval_s[i].depth_mask);
    abs_sum += e.abs;
    rms_sum += e.rms;
    loss += depth_total(d, supervision(eval_s[i]));
    if (i == 0) write_file((dir / "depth_pred_0000.gten").string(), encode_tensor(d));
  }
  write_file((dir / "depth_decoder.ckpt").string(), encode_bundle("kind=depth_decoder\n", {{"decoder.weight", weight}}));
  const double n = static_cast<double>(eval_s.size());
  MetricsReport r = base_report(cfg, Stage::kEvalDepth);
  r.set("depth.abs", abs_sum / n);
  r.set("depth.rms", rms_sum / n);
  r.set("depth.loss", loss / n);
  return r;
}

inline MetricsReport run_eval_cluster(const RunConfig& cfg, const fs::path& dir) {
  const PatchEncoder aligned = load_encoder(dir, Stage::kEvalCluster);
  MetricsReport r = base_report(cfg, Stage::kEvalCluster);
  add_cluster(r, "cluster.initial", event_cluster_scores(cfg, initial_encoder(cfg)));
  add_cluster(r, "cluster.aligned", event_cluster_scores(cfg, aligned));
  return r;
}

inline MetricsReport run_gradcheck(const RunConfig& cfg) {
  MetricsReport r = base_report(cfg, Stage::kGradcheck);
  bool all = true;
  std::map<std::string, double> worst;
  for (std::uint64_t s = 0; s < cfg.gradcheck_seeds; ++s)
    for (const LossCase& c : loss_suite(cfg.seed * 1000 + s)) {
      const GradReport g = grad_check(c.fn, c.inputs, cfg.gradcheck_tol);
      all = all && g.passed;
      worst[c.name] = std::max(worst[c.name], g.max_rel_error);
    }
  for (const auto& [name, e] : worst) {
    r.set("gradcheck." + name + ".max_rel_error", e);
    r.set("gradcheck." + name + ".passed", e < cfg.gradcheck_tol ? 1.0 : 0.0);
  }
  r.set("gradcheck.all_passed", all ? 1.0 : 0.0);
  return r;
}

}  // namespace detail

struct StageResult {
  MetricsReport report;
  fs::path report_path;
};

/// Runs one stage in `dir` (created if needed). The serialized config is
/// stored alongside the artifacts.
inline StageResult run_pipeline(const RunConfig& cfg, Stage stage, const fs::path& dir) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create run directory " + dir.string() + ": " + ec.message());
  write_file((dir / "config.txt").string(), cfg.serialize());
  MetricsReport r;
  switch (stage) {
    case Stage::kSynth: r = detail::run_synth(cfg, dir); break;
    case Stage::kAccumulate: r = detail::run_accumulate(cfg, dir); break;
    case Stage::kAlign: r = detail::run_align(cfg, dir); break;
    case Stage::kPretrain: r = detail::run_pretrain(cfg, dir); break;
    case Stage::kRollout: r = detail::run_rollout(cfg, dir); break;
    case Stage::kEvalSeg: r = detail::run_eval_seg(cfg, dir); break;
    case Stage::kEvalDepth: r = detail::run_eval_depth(cfg, dir); break;
    case Stage::kEvalCluster: r = detail::run_eval_cluster(cfg, dir); break;
    case Stage::kGradcheck: r = detail::run_gradcheck(cfg); break;
  }
  const std::string name = stage_name(stage);
  detail::write_report(dir, name, r);
  return {r, dir / (name + "_report.txt")};
}

}  // namespace gep
