#pragma once

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mp/backbone.hpp"
#include "mp/data.hpp"
#include "mp/hash.hpp"
#include "mp/probe_head.hpp"
#include "mp/train.hpp"

// Run configuration, training driver, reports, checkpoints and ablation
// suites shared by the mpprobe CLI and the tests.

namespace mp {

using ojson = nlohmann::ordered_json;

inline constexpr std::string_view kReportSchema = "mp-run-report/1";
inline constexpr std::string_view kAblationSchema = "mp-ablation-report/1";
inline constexpr std::string_view kEvalSchema = "mp-eval-report/1";

/// Extents of a feature file that a model depends on.
struct DataShape {
  std::size_t dim = 0;
  std::size_t classes = 0;
  std::size_t tokens = 0;
  bool has_cls = false;

  static DataShape of(const FeatureFileHeader& h) {
    return {h.feature_dim, h.class_count, h.tokens_per_sample, h.has_cls != 0};
  }
  friend bool operator==(const DataShape&, const DataShape&) = default;
};

struct RunConfig {
  std::string command = "train";  // train | train-mpplus
  std::string features;
  std::string head = "mp";
  std::size_t d_hat = 0;  // 0 = largest multiple of 4h up to min(512, d), MHC3 heads only
  std::size_t h = 8;
  std::size_t gcp_dim = 0;  // 0 = min(128, d)
  std::string mode = "auto";  // cls | gap | auto
  std::size_t isqrt_iters = 5;
  TrainHyper train;
  double train_fraction = 0.8;
  // train-mpplus only
  std::size_t d_h = 8;
  bool psrp = true;
  std::size_t layers = 2;
  std::size_t attn_heads = 4;
  std::size_t ffn_expansion = 2;
  std::uint64_t backbone_seed = 0;

  bool mpplus() const { return command == "train-mpplus"; }

  ToyBackboneConfig backbone(const DataShape& s) const {
    return {layers, s.dim, attn_heads, s.tokens, ffn_expansion, backbone_seed};
  }
};

inline std::size_t auto_d_hat(std::size_t d, std::size_t h) {
  const std::size_t step = 4 * h;
  if (step == 0) return 0;
  return (std::min<std::size_t>(512, d) / step) * step;
}

inline bool head_config_uses_mhc3(const std::string& kind) {
  const HeadKind k = parse_head_kind(kind);
  return k == HeadKind::mhc3 || k == HeadKind::mp;
}

/// Fills the automatic fields; d_hat only for heads that use it. The toy backbone always supplies a CLS row.
inline RunConfig resolve(RunConfig cfg, const DataShape& s) {
  const bool has_cls = cfg.mpplus() || s.has_cls;
  if (cfg.mode == "auto") cfg.mode = has_cls ? "cls" : "gap";
  if (cfg.gcp_dim == 0) cfg.gcp_dim = std::min<std::size_t>(128, s.dim);
  if (cfg.d_hat == 0 && head_config_uses_mhc3(cfg.head)) {
    cfg.d_hat = auto_d_hat(s.dim, cfg.h);
    if (cfg.d_hat == 0 && head_config_uses_mhc3(cfg.head)) {
      throw ConfigError("no d_hat fits width " + std::to_string(s.dim) + " with h=" + std::to_string(cfg.h) +
                        " (needs a multiple of " + std::to_string(4 * cfg.h) + ")");
    }
  }
  return cfg;
}

inline HeadConfig head_config(const RunConfig& cfg, const DataShape& s) {
  HeadConfig hc;
  hc.kind = parse_head_kind(cfg.head);
  hc.d = s.dim;
  hc.classes = s.classes;
  hc.d_hat = cfg.d_hat;
  hc.h = cfg.h;
  hc.gcp_dim = cfg.gcp_dim;
  hc.mode = parse_mode(cfg.mode);
  hc.isqrt_iters = cfg.isqrt_iters;
  return hc;
}

/// Every invariant is checked here, before any training starts.
inline void validate(const RunConfig& cfg, const DataShape& s) {
  if (cfg.command != "train" && cfg.command != "train-mpplus") {
    throw ConfigError("unknown run command '" + cfg.command + "'");
  }
  if (s.classes < 2) throw ConfigError("feature file declares fewer than two classes");
  cfg.train.validate();
  if (!(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0)) {
    throw ConfigError("train fraction must lie in (0, 1)");
  }
  head_config(cfg, s).validate(cfg.mpplus() || s.has_cls);
  if (cfg.mpplus()) {
    cfg.backbone(s).validate();
    if (cfg.psrp && cfg.d_h == 0) throw ConfigError("PSRP hidden width d_h must be positive");
  }
}

inline ojson to_json(const RunConfig& c) {
  ojson j;
  j["command"] = c.command;
  j["features"] = c.features;
  j["head"] = {{"kind", c.head}, {"d_hat", c.d_hat}, {"h", c.h}, {"gcp_dim", c.gcp_dim},
               {"mode", c.mode}, {"isqrt_iters", c.isqrt_iters}};
  j["train"] = {{"epochs", c.train.epochs},
                {"batch", c.train.batch},
                {"batch_ref", c.train.batch_ref},
                {"lr", c.train.lr},
                {"weight_decay", c.train.weight_decay},
                {"warmup_frac", c.train.warmup_frac},
                {"lr_min", c.train.lr_min},
                {"seed", c.train.seed},
                {"train_fraction", c.train_fraction}};
  if (c.mpplus()) {
    j["mpplus"] = {{"d_h", c.d_h},
                   {"psrp", c.psrp},
                   {"layers", c.layers},
                   {"attn_heads", c.attn_heads},
                   {"ffn_expansion", c.ffn_expansion},
                   {"backbone_seed", c.backbone_seed}};
  }
  return j;
}

/// Inverse of to_json. Absent keys keep their defaults; wrong types are
/// configuration errors.
inline RunConfig run_config_from_json(const ojson& j) {
  try {
    RunConfig c;
    c.command = j.value("command", c.command);
    c.features = j.value("features", c.features);
    if (j.contains("head")) {
      const ojson& h = j.at("head");
      c.head = h.value("kind", c.head);
      c.d_hat = h.value("d_hat", c.d_hat);
      c.h = h.value("h", c.h);
      c.gcp_dim = h.value("gcp_dim", c.gcp_dim);
      c.mode = h.value("mode", c.mode);
      c.isqrt_iters = h.value("isqrt_iters", c.isqrt_iters);
    }
    if (j.contains("train")) {
      const ojson& t = j.at("train");
      c.train.epochs = t.value("epochs", c.train.epochs);
      c.train.batch = t.value("batch", c.train.batch);
      c.train.batch_ref = t.value("batch_ref", c.train.batch_ref);
      c.train.lr = t.value("lr", c.train.lr);
      c.train.weight_decay = t.value("weight_decay", c.train.weight_decay);
      c.train.warmup_frac = t.value("warmup_frac", c.train.warmup_frac);
      c.train.lr_min = t.value("lr_min", c.train.lr_min);
      c.train.seed = t.value("seed", c.train.seed);
      c.train_fraction = t.value("train_fraction", c.train_fraction);
    }
    if (j.contains("mpplus")) {
      const ojson& m = j.at("mpplus");
      c.d_h = m.value("d_h", c.d_h);
      c.psrp = m.value("psrp", c.psrp);
      c.layers = m.value("layers", c.layers);
      c.attn_heads = m.value("attn_heads", c.attn_heads);
      c.ffn_expansion = m.value("ffn_expansion", c.ffn_expansion);
      c.backbone_seed = m.value("backbone_seed", c.backbone_seed);
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  }
}

/// Git blob SHA-1 of the compact, key-sorted config JSON.
inline std::string config_hash(const RunConfig& c) {
  return git_blob_sha1(nlohmann::json::parse(to_json(c).dump()).dump());
}

// ---------------------------------------------------------------------------
// Model: probe head, plus frozen toy backbone and PSRP for train-mpplus
// ---------------------------------------------------------------------------

/// Per-sample inputs in the form the model consumes.
struct PreparedInputs {
  std::vector<TokenFeatures> features;  // plain heads and frozen-backbone runs
  std::vector<Tensor> raw;  // PSRP runs: word tokens fed to the backbone
  std::vector<std::uint32_t> labels;
};

class Model {
 public:
  static Model init(const RunConfig& cfg, const DataShape& s) {
    Model m;
    m.cfg_ = cfg;
    m.shape_ = s;
    m.head_ = ProbeHead::init(head_config(cfg, s), cfg.train.seed);
    if (cfg.mpplus()) {
      m.backbone_ = BackboneWeights::generate(cfg.backbone(s));
      if (cfg.psrp) m.psrp_ = PSRPParams::init(cfg.backbone(s), cfg.d_h, cfg.train.seed);
    }
    return m;
  }

  bool uses_psrp() const { return cfg_.mpplus() && cfg_.psrp; }

  std::vector<std::pair<std::string, Value>> named_params() const {
    auto out = head_.named_params();
    if (uses_psrp()) {
      for (auto& p : psrp_.named()) out.push_back(std::move(p));
    }
    return out;
  }

  std::vector<Value> params() const {
    std::vector<Value> out;
    for (const auto& [name, v] : named_params()) out.push_back(v);
    return out;
  }

  std::size_t head_params() const { return head_.param_count(); }
  std::size_t psrp_params() const { return uses_psrp() ? psrp_.param_count() : 0; }
  std::size_t closed_form_params() const {
    return head_.closed_form_param_count() + (uses_psrp() ? psrp_param_closed_form(cfg_.backbone(shape_), cfg_.d_h) : 0);
  }

  /// With `frozen`, backbone features are computed without PSRP.
  PreparedInputs prepare(const FeatureDataset& ds, bool frozen = false) const {
    PreparedInputs in;
    in.labels = ds.labels;
    if (uses_psrp() && !frozen) {
      for (std::size_t i = 0; i < ds.size(); ++i) in.raw.push_back(ds.tokens(i));
    } else if (cfg_.mpplus()) {
      NoGradGuard no_grad;
      for (std::size_t i = 0; i < ds.size(); ++i) {
        in.features.push_back(
            backbone_forward(Value::constant(backbone_->with_cls(ds.tokens(i))), *backbone_, Recalibration::none()));
      }
    } else {
      for (std::size_t i = 0; i < ds.size(); ++i) in.features.push_back(ds.sample(i));
    }
    return in;
  }

  Value logits(const PreparedInputs& in, std::size_t i) const {
    if (!in.raw.empty()) return mp_plus_forward(in.raw[i], *backbone_, psrp_, head_).logits;
    return head_.forward(in.features[i]).logits;
  }

  LogitFn logit_fn(const PreparedInputs& in) const {
    return [this, &in](std::size_t i) { return logits(in, i); };
  }

  const RunConfig& config() const { return cfg_; }
  const DataShape& shape() const { return shape_; }

 private:
  RunConfig cfg_;
  DataShape shape_;
  ProbeHead head_;
  std::optional<BackboneWeights> backbone_;
  PSRPParams psrp_;
};

// ---------------------------------------------------------------------------
// Checkpoints: "MPCK" envelope, little-endian like MPFT
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 4> kCheckpointMagic{'M', 'P', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  std::string config_hash;
  DataShape shape;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

inline Checkpoint make_checkpoint(const Model& m) {
  Checkpoint ck{m.config(), config_hash(m.config()), m.shape(), {}};
  for (const auto& [name, v] : m.named_params()) ck.tensors.emplace_back(name, v.data());
  return ck;
}

inline std::string encode_checkpoint(const Checkpoint& ck) {
  ojson meta;
  meta["config"] = to_json(ck.config);
  meta["config_hash"] = ck.config_hash;
  meta["data"] = {{"dim", ck.shape.dim}, {"classes", ck.shape.classes}, {"tokens", ck.shape.tokens},
                  {"has_cls", ck.shape.has_cls}};
  const std::string text = meta.dump();
  std::vector<char> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_le(out, kCheckpointVersion);
  detail::put_le(out, static_cast<std::uint64_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  detail::put_le(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    detail::put_le(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::put_le(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) detail::put_le(out, static_cast<std::uint64_t>(e));
    for (double v : t.storage()) detail::put_le(out, std::bit_cast<std::uint64_t>(v));
  }
  return {out.begin(), out.end()};
}

namespace detail {

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  template <class T>
  T le() {
    need(sizeof(T));
    const T v = get_le<T>(reinterpret_cast<const unsigned char*>(bytes_.data() + pos_));
    pos_ += sizeof(T);
    return v;
  }

  std::string_view take(std::uint64_t n) {
    need(n);
    const std::string_view s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > bytes_.size() - pos_) {
      throw CorruptionError("checkpoint truncated at byte " + std::to_string(pos_) + " (needs " + std::to_string(n) +
                            " more, " + std::to_string(bytes_.size() - pos_) + " left)");
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic.data(), 4) != 0) {
    throw DataError("not a model checkpoint (bad magic)");
  }
  detail::ByteReader r(bytes.substr(4));
  if (const auto v = r.le<std::uint32_t>(); v != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(v));
  }
  const std::string_view text = r.take(r.le<std::uint64_t>());
  Checkpoint ck;
  try {
    const ojson meta = ojson::parse(text);
    ck.config = run_config_from_json(meta.at("config"));
    ck.config_hash = meta.at("config_hash").get<std::string>();
    const ojson& d = meta.at("data");
    ck.shape = {d.at("dim").get<std::size_t>(), d.at("classes").get<std::size_t>(), d.at("tokens").get<std::size_t>(),
                d.at("has_cls").get<bool>()};
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("checkpoint metadata unreadable: ") + e.what());
  }
  if (config_hash(ck.config) != ck.config_hash) {
    throw CorruptionError("checkpoint config hash mismatch: stored " + ck.config_hash + ", computed " +
                          config_hash(ck.config));
  }
  const auto count = r.le<std::uint32_t>();
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name(r.take(r.le<std::uint32_t>()));
    const auto rank = r.le<std::uint32_t>();
    if (rank > 8) throw CorruptionError("tensor '" + name + "' has implausible rank " + std::to_string(rank));
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint32_t a = 0; a < rank; ++a) {
      shape.push_back(r.le<std::uint64_t>());
      if (shape.back() != 0 && numel > (UINT64_MAX / 8) / shape.back()) {
        throw CorruptionError("tensor '" + name + "' extents overflow");
      }
      numel *= shape.back();
    }
    const std::string_view raw = r.take(numel * 8);
    std::vector<double> values(numel);
    for (std::size_t i = 0; i < numel; ++i) {
      values[i] = std::bit_cast<double>(detail::get_le<std::uint64_t>(reinterpret_cast<const unsigned char*>(raw.data()) + 8 * i));
    }
    ck.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (!r.done()) throw CorruptionError("trailing bytes after checkpoint tensors");
  return ck;
}

/// Rebuilds the model and overwrites its parameters with the stored tensors.
inline Model restore(const Checkpoint& ck) {
  validate(ck.config, ck.shape);
  Model m = Model::init(ck.config, ck.shape);
  auto named = m.named_params();
  if (named.size() != ck.tensors.size()) {
    throw DataError("checkpoint holds " + std::to_string(ck.tensors.size()) + " tensors, model expects " +
                    std::to_string(named.size()));
  }
  for (std::size_t k = 0; k < named.size(); ++k) {
    auto& [name, v] = named[k];
    const auto& [stored_name, t] = ck.tensors[k];
    if (name != stored_name || v.shape() != t.shape()) {
      throw DataError("checkpoint tensor '" + stored_name + "' " + shape_string(t.shape()) + " does not match '" +
                      name + "' " + shape_string(v.shape()));
    }
    v.mutable_data() = t;
  }
  return m;
}

inline void write_bytes(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Training runs and reports
// ---------------------------------------------------------------------------

inline ojson eval_json(const EvalResult& r, bool per_class = false) {
  ojson j{{"accuracy", r.accuracy}, {"loss", r.loss}, {"samples", r.samples}};
  if (per_class) j["per_class_accuracy"] = r.per_class_accuracy;
  return j;
}

struct RunOutcome {
  RunConfig config;  // resolved
  ojson report;
  Checkpoint checkpoint;
  TrainResult result;
};

inline void require_nonempty(const FeatureDataset& ds) {
  if (ds.size() == 0) throw UsageError("feature file contains no samples");
}

/// Trains the configured model on the stratified train split and evaluates
/// on the rest. `features_sha1` is echoed so a report pins its input.
inline RunOutcome run_training(RunConfig cfg, const FeatureDataset& ds, const std::string& features_sha1) {
  const auto t0 = std::chrono::steady_clock::now();
  const DataShape shape = DataShape::of(ds.header);
  cfg = resolve(std::move(cfg), shape);
  validate(cfg, shape);
  require_nonempty(ds);
  const SplitIndices split = stratified_split(ds.labels, shape.classes, cfg.train_fraction, cfg.train.seed);
  const FeatureDataset train_ds = ds.subset(split.train);
  const FeatureDataset val_ds = ds.subset(split.val);

  Model model = Model::init(cfg, shape);
  const PreparedInputs train_in = model.prepare(train_ds);
  const PreparedInputs val_in = model.prepare(val_ds);
  std::optional<EvalResult> frozen_init;
  if (model.uses_psrp()) {
    const PreparedInputs frozen_val = model.prepare(val_ds, true);
    frozen_init = evaluate(model.logit_fn(frozen_val), frozen_val.labels, shape.classes);
  }
  TrainResult tr = train(model.logit_fn(train_in), train_in.labels, model.logit_fn(val_in), val_in.labels,
                         shape.classes, model.params(), cfg.train);
  const Schedule sched = make_schedule(cfg.train, train_in.labels.size());

  ojson rep;
  rep["schema"] = kReportSchema;
  rep["command"] = cfg.command;
  rep["config"] = to_json(cfg);
  rep["config_hash"] = config_hash(cfg);
  rep["data"] = {{"features", cfg.features}, {"sha1", features_sha1}, {"samples", ds.size()},
                 {"tokens", shape.tokens},   {"dim", shape.dim},       {"classes", shape.classes},
                 {"has_cls", shape.has_cls}};
  rep["split"] = {{"train", split.train.size()}, {"val", split.val.size()}};
  rep["params"] = {{"trainable", model.head_params() + model.psrp_params()},
                   {"head", model.head_params()},
                   {"psrp", model.psrp_params()},
                   {"closed_form", model.closed_form_params()}};
  rep["schedule"] = {{"total_steps", sched.total_steps},
                     {"warmup_steps", sched.warmup_steps},
                     {"lr_base", sched.lr_base},
                     {"lr_min", sched.lr_min}};
  rep["step0_loss"] = tr.step0_loss;
  rep["init_eval"] = eval_json(tr.init_eval);
  if (frozen_init) rep["frozen_init_eval"] = eval_json(*frozen_init);
  ojson epochs = ojson::array();
  for (const EpochRecord& e : tr.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"val_accuracy", e.val.accuracy},
                      {"val_loss", e.val.loss},
                      {"wall_ms", e.wall_ms}});
  }
  rep["epochs"] = std::move(epochs);
  rep["final"] = eval_json(tr.final_eval, true);
  rep["wall_ms_total"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return {cfg, std::move(rep), make_checkpoint(model), std::move(tr)};
}

/// Removes wall-clock fields so reports can be compared byte for byte.
inline ojson strip_wall_clock(ojson j) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end();) {
      if (it.key() == "wall_ms" || it.key() == "wall_ms_total") {
        it = j.erase(it);
      } else {
        *it = strip_wall_clock(*it);
        ++it;
      }
    }
  } else if (j.is_array()) {
    for (auto& e : j) e = strip_wall_clock(e);
  }
  return j;
}

// ---------------------------------------------------------------------------
// Evaluation of a saved model
// ---------------------------------------------------------------------------

/// Evaluates on the same validation split the run used, or on every sample.
inline EvalResult evaluate_checkpoint(const Checkpoint& ck, const FeatureDataset& ds, bool all_samples = false) {
  require_nonempty(ds);
  const DataShape s = DataShape::of(ds.header);
  const bool tokens_matter = ck.config.mpplus();
  if (s.dim != ck.shape.dim || s.classes != ck.shape.classes || (tokens_matter && s.tokens != ck.shape.tokens) ||
      (!ck.config.mpplus() && !s.has_cls && head_config(ck.config, ck.shape).needs_cls())) {
    throw ConfigError("model (config " + ck.config_hash.substr(0, 12) + ") expects d=" + std::to_string(ck.shape.dim) +
                      " C=" + std::to_string(ck.shape.classes) + (tokens_matter ? " N=" + std::to_string(ck.shape.tokens) : "") +
                      ", features have d=" + std::to_string(s.dim) + " C=" + std::to_string(s.classes) +
                      (tokens_matter ? " N=" + std::to_string(s.tokens) : "") + (s.has_cls ? "" : " without CLS"));
  }
  const Model m = restore(ck);
  FeatureDataset subset = ds;
  if (!all_samples) {
    subset = ds.subset(stratified_split(ds.labels, s.classes, ck.config.train_fraction, ck.config.train.seed).val);
  }
  const PreparedInputs in = m.prepare(subset);
  return evaluate(m.logit_fn(in), in.labels, s.classes);
}

// ---------------------------------------------------------------------------
// Ablation suites
// ---------------------------------------------------------------------------

enum class Suite { probing, dhat, dh };

inline Suite parse_suite(std::string_view s) {
  if (s == "probing") return Suite::probing;
  if (s == "dhat") return Suite::dhat;
  if (s == "dh") return Suite::dh;
  throw UsageError("unknown ablation suite '" + std::string(s) + "' (expected probing, dhat or dh)");
}

inline std::string_view suite_name(Suite s) {
  switch (s) {
    case Suite::probing: return "probing";
    case Suite::dhat: return "dhat";
    case Suite::dh: return "dh";
  }
  return "?";
}

/// Row order of the probing-representation table.
inline constexpr std::array<HeadKind, 7> kProbingRows{HeadKind::lp_cls, HeadKind::lp_gap,     HeadKind::gcp,
                                                      HeadKind::mhc3,   HeadKind::lp_cls_gap, HeadKind::cls_gcp,
                                                      HeadKind::mp};
inline constexpr std::array<std::size_t, 4> kDhatReference{128, 256, 384, 512};
inline constexpr std::size_t kReferenceWidth = 768;
inline constexpr std::array<std::size_t, 5> kDhValues{4, 8, 16, 32, 64};

/// Reference d_hat values scaled by d/768 and rounded to the nearest
/// multiple of 4h (at least 4h). Must stay within d and strictly increase.
inline std::vector<std::size_t> dhat_sweep(std::size_t d, std::size_t h) {
  if (h < 2) throw ConfigError("d_hat sweep needs h >= 2");
  const std::size_t step = 4 * h;
  std::vector<std::size_t> out;
  for (std::size_t ref : kDhatReference) {
    const double scaled = static_cast<double>(ref) * static_cast<double>(d) / static_cast<double>(kReferenceWidth);
    const auto k = std::max<long long>(1, std::llround(scaled / static_cast<double>(step)));
    out.push_back(static_cast<std::size_t>(k) * step);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] > d || (i > 0 && out[i] <= out[i - 1])) {
      throw ConfigError("width d=" + std::to_string(d) + " is too small for a strictly increasing d_hat sweep at h=" +
                        std::to_string(h) + " (scaled values must be distinct multiples of " + std::to_string(step) +
                        " up to d)");
    }
  }
  return out;
}

struct AblationRow {
  std::string label;
  RunConfig config;
};

inline std::vector<AblationRow> ablation_plan(Suite suite, const RunConfig& base, const DataShape& s) {
  std::vector<AblationRow> rows;
  switch (suite) {
    case Suite::probing:
      for (HeadKind k : kProbingRows) {
        RunConfig c = base;
        c.command = "train";
        c.head = std::string(head_kind_info(k).name);
        rows.push_back({std::string(head_kind_info(k).label), c});
      }
      break;
    case Suite::dhat:
      for (std::size_t v : dhat_sweep(s.dim, base.h)) {
        RunConfig c = base;
        c.command = "train";
        c.head = "mp";
        c.d_hat = v;
        rows.push_back({"d_hat=" + std::to_string(v), c});
      }
      break;
    case Suite::dh:
      for (std::size_t v : kDhValues) {
        RunConfig c = base;
        c.command = "train-mpplus";
        c.head = "mp";
        c.psrp = true;
        c.d_h = v;
        rows.push_back({"d_h=" + std::to_string(v), c});
      }
      break;
  }
  return rows;
}

struct AblationOutcome {
  ojson report;
  std::vector<RunOutcome> runs;
};

inline std::string format_ablation_table(const ojson& report) {
  std::ostringstream os;
  std::size_t w = 5;
  for (const auto& r : report.at("rows")) w = std::max(w, r.at("label").get<std::string>().size());
  os << std::left << std::setw(static_cast<int>(w)) << "row" << "  " << std::right << std::setw(10) << "params"
     << "  " << std::setw(8) << "val_acc" << '\n';
  for (const auto& r : report.at("rows")) {
    os << std::left << std::setw(static_cast<int>(w)) << r.at("label").get<std::string>() << "  " << std::right
       << std::setw(10) << r.at("params").get<std::size_t>() << "  " << std::setw(8) << std::fixed
       << std::setprecision(4) << r.at("val_accuracy").get<double>() << '\n';
  }
  return os.str();
}

inline AblationOutcome run_ablation(Suite suite, const RunConfig& base, const FeatureDataset& ds,
                                    const std::string& features_sha1) {
  const DataShape shape = DataShape::of(ds.header);
  const std::vector<AblationRow> plan = ablation_plan(suite, base, shape);
  for (const AblationRow& row : plan) validate(resolve(row.config, shape), shape);
  AblationOutcome out;
  out.report["schema"] = kAblationSchema;
  out.report["suite"] = suite_name(suite);
  out.report["data"] = {{"features", base.features}, {"sha1", features_sha1}};
  out.report["base_config"] = to_json(base);
  out.report["rows"] = ojson::array();
  for (const AblationRow& row : plan) {
    RunOutcome run = run_training(row.config, ds, features_sha1);
    out.report["rows"].push_back({{"label", row.label},
                                  {"head", run.config.head},
                                  {"d_hat", run.config.d_hat},
                                  {"h", run.config.h},
                                  {"d_h", run.config.mpplus() ? run.config.d_h : 0},
                                  {"params", run.report["params"]["trainable"]},
                                  {"val_accuracy", run.result.final_eval.accuracy},
                                  {"config_hash", run.report["config_hash"]},
                                  {"wall_ms", run.report["wall_ms_total"]}});
    out.runs.push_back(std::move(run));
  }
  return out;
}

}  // namespace mp
