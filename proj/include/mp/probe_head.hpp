#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mp/mp_head.hpp"

// Every probing representation compared in the ablations, expressed as a
// first-order branch plus a second-order branch whose logits are summed.

namespace mp {

enum class HeadKind { lp_cls, lp_gap, lp_cls_gap, gcp, bcnn, isqrt, mhc3, mp, cls_gcp, cls_bcnn, cls_isqrt };

enum class FirstBranch { none, cls, gap, cls_gap };
enum class SecondBranch { none, gcp, bcnn, isqrt, mhc3 };

struct HeadKindInfo {
  HeadKind kind;
  std::string_view name;  // CLI spelling
  std::string_view label;  // row label in ablation tables
};

inline constexpr std::array<HeadKindInfo, 11> kHeadKinds{{
    {HeadKind::lp_cls, "lp-cls", "CLS_token"},
    {HeadKind::lp_gap, "lp-gap", "GAP"},
    {HeadKind::lp_cls_gap, "lp-cls+gap", "CLS_token + GAP"},
    {HeadKind::gcp, "gcp", "GCP"},
    {HeadKind::bcnn, "bcnn", "B-CNN"},
    {HeadKind::isqrt, "isqrt", "iSQRT-COV"},
    {HeadKind::mhc3, "mhc3", "MHC3"},
    {HeadKind::mp, "mp", "MP"},
    {HeadKind::cls_gcp, "mp+cls-gcp", "CLS_token + GCP"},
    {HeadKind::cls_bcnn, "mp+cls-bcnn", "CLS_token + B-CNN"},
    {HeadKind::cls_isqrt, "mp+cls-isqrt", "CLS_token + iSQRT-COV"},
}};

inline const HeadKindInfo& head_kind_info(HeadKind kind) {
  for (const auto& info : kHeadKinds) {
    if (info.kind == kind) return info;
  }
  throw ConfigError("unknown head kind");
}

inline HeadKind parse_head_kind(std::string_view name) {
  for (const auto& info : kHeadKinds) {
    if (info.name == name) return info.kind;
  }
  throw ConfigError("unknown head kind '" + std::string(name) + "'");
}

inline std::string_view mode_name(FirstMomentMode m) { return m == FirstMomentMode::cls ? "cls" : "gap"; }

inline FirstMomentMode parse_mode(std::string_view name) {
  if (name == "cls") return FirstMomentMode::cls;
  if (name == "gap") return FirstMomentMode::gap;
  throw ConfigError("unknown first-moment mode '" + std::string(name) + "'");
}

struct HeadConfig {
  HeadKind kind = HeadKind::mp;
  std::size_t d = 0;
  std::size_t classes = 0;
  std::size_t d_hat = 512;
  std::size_t h = 8;
  std::size_t gcp_dim = 128;
  FirstMomentMode mode = FirstMomentMode::cls;  // first branch of `mp`
  std::size_t isqrt_iters = 5;
  double eps = 1e-6;

  FirstBranch first() const {
    switch (kind) {
      case HeadKind::lp_cls:
      case HeadKind::cls_gcp:
      case HeadKind::cls_bcnn:
      case HeadKind::cls_isqrt:
        return FirstBranch::cls;
      case HeadKind::lp_gap:
        return FirstBranch::gap;
      case HeadKind::lp_cls_gap:
        return FirstBranch::cls_gap;
      case HeadKind::mp:
        return mode == FirstMomentMode::cls ? FirstBranch::cls : FirstBranch::gap;
      default:
        return FirstBranch::none;
    }
  }

  SecondBranch second() const {
    switch (kind) {
      case HeadKind::gcp:
      case HeadKind::cls_gcp:
        return SecondBranch::gcp;
      case HeadKind::bcnn:
      case HeadKind::cls_bcnn:
        return SecondBranch::bcnn;
      case HeadKind::isqrt:
      case HeadKind::cls_isqrt:
        return SecondBranch::isqrt;
      case HeadKind::mhc3:
      case HeadKind::mp:
        return SecondBranch::mhc3;
      default:
        return SecondBranch::none;
    }
  }

  MHC3Config mhc3() const { return {d, d_hat, h, eps}; }

  std::size_t first_width() const {
    switch (first()) {
      case FirstBranch::none: return 0;
      case FirstBranch::cls_gap: return 2 * d;
      default: return d;
    }
  }

  std::size_t second_width() const {
    switch (second()) {
      case SecondBranch::none: return 0;
      case SecondBranch::mhc3: return mhc3().output_size();
      default: return gcp_dim * gcp_dim;
    }
  }

  bool needs_cls() const { return first() == FirstBranch::cls || first() == FirstBranch::cls_gap; }

  void validate(bool has_cls) const {
    if (d == 0) throw ConfigError("feature width must be positive");
    if (classes < 2) throw ConfigError("at least two classes are required");
    if (needs_cls() && !has_cls) {
      throw ConfigError("head '" + std::string(head_kind_info(kind).name) +
                        "' needs a CLS token but the features have none");
    }
    if (second() == SecondBranch::mhc3) mhc3().validate();
    if (second() != SecondBranch::none && second() != SecondBranch::mhc3 && gcp_dim == 0) {
      throw ConfigError("covariance reduction width must be positive");
    }
  }
};

class ProbeHead {
 public:
  /// Parameters drawn deterministically from `seed`. The `mp` kind draws
  /// exactly as MPHeadParams::init does.
  static ProbeHead init(const HeadConfig& cfg, std::uint64_t seed) {
    if (cfg.d == 0 || cfg.classes < 2) throw ConfigError("head needs positive width and >= 2 classes");
    ProbeHead head;
    head.cfg_ = cfg;
    const std::size_t c = cfg.classes;
    if (cfg.second() == SecondBranch::mhc3) {
      head.params_ = MPHeadParams::init(cfg.mhc3(), c, seed);
      if (cfg.first() == FirstBranch::none) {
        head.params_.w1 = Value();
        head.params_.b1 = Value();
      }
      return head;
    }
    CounterRng rng = CounterRng::derive(seed, rng_purpose::kHeadInit);
    if (cfg.second() != SecondBranch::none) {
      head.params_.reduce_w = fan_in_parameter({cfg.gcp_dim, cfg.d}, cfg.d, rng);
      head.params_.reduce_b = fan_in_parameter({cfg.gcp_dim}, cfg.d, rng);
      head.params_.w2 = zero_parameter({c, cfg.second_width()});
      head.params_.b2 = zero_parameter({c});
    }
    if (cfg.first() != FirstBranch::none) {
      head.params_.w1 = zero_parameter({c, cfg.first_width()});
      head.params_.b1 = zero_parameter({c});
    }
    return head;
  }

  MPOutput forward(const TokenFeatures& x) const {
    MPOutput out;
    switch (cfg_.first()) {
      case FirstBranch::none:
        break;
      case FirstBranch::cls:
        out.first_logits = lp_forward(first_moment(x, FirstMomentMode::cls), params_.w1, params_.b1);
        break;
      case FirstBranch::gap:
        out.first_logits = lp_forward(first_moment(x, FirstMomentMode::gap), params_.w1, params_.b1);
        break;
      case FirstBranch::cls_gap:
        out.first_logits = lp_forward(
            concat({first_moment(x, FirstMomentMode::cls), first_moment(x, FirstMomentMode::gap)}),
            params_.w1, params_.b1);
        break;
    }
    if (cfg_.second() != SecondBranch::none) {
      out.second_logits = linear(second_order(x), params_.w2, params_.b2);
    }
    if (out.first_logits && out.second_logits) {
      out.logits = add(out.first_logits, out.second_logits);
    } else {
      out.logits = out.first_logits ? out.first_logits : out.second_logits;
    }
    return out;
  }

  Value second_order(const TokenFeatures& x) const {
    switch (cfg_.second()) {
      case SecondBranch::mhc3:
        return mhc3(x, cfg_.mhc3(), params_);
      case SecondBranch::gcp:
        return gcp_forward(x, params_.reduce_w, params_.reduce_b, cfg_.eps);
      case SecondBranch::bcnn: {
        const Value x_hat = reduce_dim(x, params_.reduce_w, params_.reduce_b);
        return flatten(bcnn_signed_sqrt(matmul(transpose(x_hat), x_hat), cfg_.eps));
      }
      case SecondBranch::isqrt: {
        const Value x_hat = reduce_dim(x, params_.reduce_w, params_.reduce_b);
        const Value cov = scale(matmul(transpose(x_hat), x_hat), 1.0 / static_cast<double>(x.token_count()));
        return flatten(isqrt_cov(cov, cfg_.isqrt_iters));
      }
      case SecondBranch::none:
        break;
    }
    throw UsageError("head has no second-order branch");
  }

  std::vector<std::pair<std::string, Value>> named_params() const { return params_.named(); }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& [name, v] : params_.named()) n += v.size();
    return n;
  }

  /// Independent arithmetic over the configured extents.
  std::size_t closed_form_param_count() const {
    const std::size_t c = cfg_.classes;
    std::size_t n = 0;
    if (cfg_.first() != FirstBranch::none) n += c * cfg_.first_width() + c;
    switch (cfg_.second()) {
      case SecondBranch::none:
        break;
      case SecondBranch::mhc3:
        return mp_param_closed_form(cfg_.mhc3(), c) - (cfg_.first() == FirstBranch::none ? c * cfg_.d + c : 0);
      default:
        n += cfg_.gcp_dim * cfg_.d + cfg_.gcp_dim + c * cfg_.gcp_dim * cfg_.gcp_dim + c;
    }
    return n;
  }

  const HeadConfig& config() const { return cfg_; }
  const MPHeadParams& params() const { return params_; }
  MPHeadParams& params() { return params_; }

 private:
  HeadConfig cfg_;
  MPHeadParams params_;
};

}  // namespace mp
