#pragma once

// Flat `key = value` run configuration. Lines starting with '#' and blank
// lines are ignored; unknown keys, malformed values and values failing the
// module preconditions are ConfigErrors.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "gep/align.hpp"
#include "gep/encoder.hpp"
#include "gep/error.hpp"
#include "gep/events.hpp"
#include "gep/io.hpp"
#include "gep/sequence.hpp"
#include "gep/synth.hpp"
#include "gep/task_heads.hpp"
#include "gep/transformer.hpp"

namespace gep {

struct RunConfig {
  std::uint64_t seed = 0;

  // synthetic data
  std::uint64_t height = 16;
  std::uint64_t width = 16;
  std::uint64_t classes = 8;
  std::uint64_t train_per_class = 16;
  std::uint64_t eval_per_class = 8;
  std::uint64_t clip_frames = 8;
  std::uint64_t sequence_frames = 17;
  double fps = 30.0;
  double event_threshold = 0.2;
  std::uint64_t noise_per_frame = 2;

  // events
  int percentile = 99;
  std::uint64_t bins = 1;
  bool augment = false;
  std::string accumulate_input;

  // encoder + alignment
  std::uint64_t patch = 4;
  std::uint64_t dim = 32;
  double lambda_cos = 1.0;
  double lambda_nce = 1.0;
  double mu = 1.0;
  double tau = 0.07;
  std::uint64_t head_hidden_dim = 32;
  std::uint64_t align_steps = 600;
  std::uint64_t align_batch = 32;
  double align_lr = 3e-3;
  std::uint64_t align_warmup = 30;
  double align_weight_decay = 1e-5;

  // sequences + transformer
  std::uint64_t tokens_per_frame = 2;
  bool image_first = false;
  std::uint64_t layers = 2;
  std::uint64_t heads = 2;
  std::uint64_t ff_dim = 128;
  std::uint64_t max_window = 64;
  std::uint64_t pretrain_steps = 500;
  std::uint64_t warmup_steps = 100;
  double peak_lr = 5e-4;
  double weight_decay = 1e-5;
  std::uint64_t train_window = 16;
  std::uint64_t batch = 4;
  std::uint64_t rollout_context = 32;
  std::uint64_t rollout_horizon = 32;
  std::uint64_t rollout_window = 64;

  // task heads
  std::uint64_t decoder_steps = 200;
  double decoder_lr = 1e-2;
  double seg_ce_weight = 0.5;
  double seg_dice_weight = 0.5;
  double dice_smooth = 1.0;
  long ignore_index = -1;  // -1 disables
  double d_min = 1.0;
  double d_max = 80.0;
  std::string depth_scales = "1,2,4";
  double silog_lambda = 0.85;
  double w_silog = 1.0;
  double w_ms_grad = 0.25;
  double depth_eps = 1e-8;

  // gradient check
  std::uint64_t gradcheck_seeds = 3;
  double gradcheck_tol = 1e-4;

  using Field = std::variant<std::uint64_t*, int*, long*, double*, bool*, std::string*>;

  /// Every key with a pointer to its field, in serialization (sorted) order.
  std::map<std::string, Field> fields() {
    return {
        {"accumulate_input", &accumulate_input}, {"align_batch", &align_batch},
        {"align_lr", &align_lr}, {"align_steps", &align_steps},
        {"align_warmup", &align_warmup}, {"align_weight_decay", &align_weight_decay},
        {"augment", &augment}, {"batch", &batch}, {"bins", &bins}, {"classes", &classes},
        {"clip_frames", &clip_frames}, {"d_max", &d_max}, {"d_min", &d_min},
        {"decoder_lr", &decoder_lr}, {"decoder_steps", &decoder_steps},
        {"depth_eps", &depth_eps}, {"depth_scales", &depth_scales}, {"dice_smooth", &dice_smooth},
        {"dim", &dim}, {"eval_per_class", &eval_per_class}, {"event_threshold", &event_threshold},
        {"ff_dim", &ff_dim}, {"fps", &fps}, {"gradcheck_seeds", &gradcheck_seeds},
        {"gradcheck_tol", &gradcheck_tol}, {"head_hidden_dim", &head_hidden_dim},
        {"heads", &heads}, {"height", &height}, {"ignore_index", &ignore_index},
        {"image_first", &image_first}, {"lambda_cos", &lambda_cos}, {"lambda_nce", &lambda_nce},
        {"layers", &layers}, {"max_window", &max_window}, {"mu", &mu},
        {"noise_per_frame", &noise_per_frame}, {"patch", &patch}, {"peak_lr", &peak_lr},
        {"percentile", &percentile}, {"pretrain_steps", &pretrain_steps},
        {"rollout_context", &rollout_context}, {"rollout_horizon", &rollout_horizon},
        {"rollout_window", &rollout_window}, {"seed", &seed}, {"seg_ce_weight", &seg_ce_weight},
        {"seg_dice_weight", &seg_dice_weight}, {"sequence_frames", &sequence_frames},
        {"silog_lambda", &silog_lambda}, {"tau", &tau}, {"tokens_per_frame", &tokens_per_frame},
        {"train_per_class", &train_per_class}, {"train_window", &train_window},
        {"w_ms_grad", &w_ms_grad}, {"w_silog", &w_silog}, {"warmup_steps", &warmup_steps},
        {"weight_decay", &weight_decay}, {"width", &width},
    };
  }

  std::vector<std::size_t> scales() const {
    std::vector<std::size_t> out;
    std::stringstream ss(depth_scales);
    for (std::string tok; std::getline(ss, tok, ',');) {
      std::size_t v = 0;
      const auto r = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (r.ec != std::errc() || r.ptr != tok.data() + tok.size() || v == 0)
        throw ConfigError("depth_scales: '" + tok + "' is not a positive integer");
      out.push_back(v);
    }
    if (out.empty()) throw ConfigError("depth_scales must list at least one scale");
    return out;
  }

  AlignWeights align_weights() const { return {lambda_cos, lambda_nce, mu, tau}; }
  EncoderConfig encoder_config() const { return {height, width, 3, patch, dim}; }
  TransformerConfig transformer_config() const {
    return {layers, heads, dim, ff_dim, max_window, seed ^ 0x7472616e73ULL};
  }
  TrainSchedule train_schedule() const {
    return {pretrain_steps, warmup_steps, peak_lr, weight_decay, train_window, batch, seed ^ 0x707265ULL};
  }
  RolloutSpec rollout_spec() const { return {rollout_context, rollout_horizon, rollout_window}; }
  DepthRange depth_range() const { return {d_min, d_max}; }
  SegLossOptions seg_options() const {
    SegLossOptions o{seg_ce_weight, seg_dice_weight, dice_smooth, std::nullopt};
    if (ignore_index >= 0) o.ignore_index = static_cast<std::size_t>(ignore_index);
    return o;
  }
  InterleaveOrder interleave_order() const {
    return image_first ? InterleaveOrder::kImageFirst : InterleaveOrder::kEventFirst;
  }
  std::size_t tokens_per_step() const { return 2 * tokens_per_frame; }

  DatasetSpec dataset(bool eval, std::size_t frames) const {
    DatasetSpec d;
    d.classes = classes;
    d.per_class = eval ? eval_per_class : train_per_class;
    d.frames = frames;
    d.resolution = {height, width};
    d.fps = fps;
    d.threshold = event_threshold;
    d.noise_per_frame = noise_per_frame;
    d.seed = seed * 4 + (eval ? 2 : 1);
    return d;
  }

  /// Throws ConfigError naming the first violated precondition.
  void validate() const {
    auto req = [](bool ok, const std::string& msg) {
      if (!ok) throw ConfigError(msg);
    };
    req(height > 0 && width > 0 && height <= 1024 && width <= 1024, "height and width must be in [1, 1024]");
    req(classes >= 2 && classes <= kNumShapes, "classes must be in [2, 8]");
    req(train_per_class >= 1 && eval_per_class >= 2, "train_per_class >= 1 and eval_per_class >= 2 required");
    req(clip_frames >= 2 && sequence_frames >= 2, "clip_frames and sequence_frames must be >= 2");
    req(fps > 0.0 && event_threshold > 0.0, "fps and event_threshold must be > 0");
    req(percentile >= 1 && percentile <= 100, "percentile must be in [1, 100]");
    req(bins >= 1, "bins must be >= 1");
    req(patch >= 1 && height % patch == 0 && width % patch == 0, "patch must divide height and width");
    req(dim >= 1 && head_hidden_dim >= 1, "dim and head_hidden_dim must be >= 1");
    req(lambda_cos > 0.0 && lambda_nce > 0.0 && mu > 0.0 && tau > 0.0,
        "lambda_cos, lambda_nce, mu and tau must be > 0");
    req(align_batch >= 2, "align_batch must be >= 2");
    req(align_lr > 0.0 && align_weight_decay >= 0.0, "align_lr > 0 and align_weight_decay >= 0 required");
    const std::size_t q = (height / patch) * (width / patch);
    req(tokens_per_frame >= 1 && q % tokens_per_frame == 0, "tokens_per_frame must divide the patch count");
    req(layers >= 1 && heads >= 1 && ff_dim >= 1 && max_window >= 2, "transformer sizes must be positive");
    req(dim % heads == 0, "dim must be divisible by heads");
    req(peak_lr > 0.0 && weight_decay >= 0.0, "peak_lr > 0 and weight_decay >= 0 required");
    req(batch >= 1 && train_window >= 1 && train_window <= max_window, "train_window must be in [1, max_window]");
    const std::size_t seq_len = (sequence_frames - 1) * tokens_per_step();
    req(seq_len >= train_window + 1, "sequence_frames too small for train_window");
    req(rollout_window >= 1 && rollout_window <= max_window, "rollout_window must be in [1, max_window]");
    req(rollout_context >= 1 && rollout_context <= rollout_window, "rollout_context must be in [1, rollout_window]");
    req(rollout_context + rollout_horizon <= seq_len, "rollout_context + rollout_horizon exceeds the sequence");
    req(decoder_lr > 0.0, "decoder_lr must be > 0");
    req(seg_ce_weight >= 0.0 && seg_dice_weight >= 0.0 && seg_ce_weight + seg_dice_weight > 0.0,
        "segmentation weights must be >= 0 and not both 0");
    req(dice_smooth > 0.0, "dice_smooth must be > 0");
    req(ignore_index >= -1, "ignore_index must be -1 (off) or a class id");
    req(d_min > 0.0 && d_max > d_min, "depth range needs 0 < d_min < d_max");
    for (std::size_t s : scales())
      req(height % s == 0 && width % s == 0, "depth scale " + std::to_string(s) + " must divide height and width");
    req(silog_lambda >= 0.0 && silog_lambda <= 1.0, "silog_lambda must be in [0, 1]");
    req(w_silog >= 0.0 && w_ms_grad >= 0.0, "depth loss weights must be >= 0");
    req(depth_eps > 0.0, "depth_eps must be > 0");
    req(gradcheck_seeds >= 1 && gradcheck_tol > 0.0, "gradcheck_seeds >= 1 and gradcheck_tol > 0 required");
  }

  static std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }

  std::string serialize() const {
    std::ostringstream os;
    for (auto& [key, field] : const_cast<RunConfig*>(this)->fields()) {
      os << key << " = ";
      std::visit(
          [&](auto* p) {
            using T = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<T, double>)
              os << format_double(*p);
            else if constexpr (std::is_same_v<T, bool>)
              os << (*p ? "true" : "false");
            else
              os << *p;
          },
          field);
      os << '\n';
    }
    return os.str();
  }

  /// FNV-1a 64 of the serialized form, as 16 hex digits.
  std::string hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : serialize()) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }

  /// Applies one assignment; throws ConfigError on unknown keys or bad values.
  void set(const std::string& key, const std::string& value) {
    auto f = fields();
    auto it = f.find(key);
    if (it == f.end()) throw ConfigError("unknown config key '" + key + "'");
    auto bad = [&](const char* type) {
      return ConfigError("config key '" + key + "': '" + value + "' is not a valid " + type);
    };
    std::visit(
        [&](auto* p) {
          using T = std::remove_pointer_t<decltype(p)>;
          const char* b = value.data();
          const char* e = value.data() + value.size();
          if constexpr (std::is_same_v<T, std::string>) {
            *p = value;
          } else if constexpr (std::is_same_v<T, bool>) {
            if (value == "true" || value == "1") *p = true;
            else if (value == "false" || value == "0") *p = false;
            else throw bad("boolean");
          } else if constexpr (std::is_same_v<T, double>) {
            // strtod handles the %.17g round trip, including exponents
            char* end = nullptr;
            const double v = std::strtod(b, &end);
            if (value.empty() || end != e || !std::isfinite(v)) throw bad("finite number");
            *p = v;
          } else {
            T v{};
            const auto r = std::from_chars(b, e, v);
            if (value.empty() || r.ec != std::errc() || r.ptr != e) throw bad("integer");
            *p = v;
          }
        },
        it->second);
  }

  static RunConfig parse(const std::string& text) {
    RunConfig cfg;
    std::istringstream is(text);
    std::size_t line_no = 0;
    std::map<std::string, std::size_t> seen;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    for (std::string line; std::getline(is, line);) {
      ++line_no;
      line = trim(line);
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
      const std::string key = trim(line.substr(0, eq));
      if (seen.count(key))
        throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
      seen[key] = line_no;
      cfg.set(key, trim(line.substr(eq + 1)));
    }
    cfg.validate();
    return cfg;
  }

  static RunConfig load(const std::string& path) {
    std::string text;
    try {
      text = read_file(path);
    } catch (const IoError&) {
      throw ConfigError("cannot read config file " + path);
    }
    return parse(text);
  }
};

}  // namespace gep
