#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mp/mp_head.hpp"
#include "mp/probe_head.hpp"

// A small frozen pre-LN transformer standing in for a pretrained backbone,
// with input-conditioned (PSRP) or static (SSF) recalibration of each FFN
// output.

namespace mp {

struct ToyBackboneConfig {
  std::size_t layers = 4;
  std::size_t width = 64;
  std::size_t attn_heads = 4;
  std::size_t tokens = 16;  // word tokens; one CLS row is prepended
  std::size_t ffn_expansion = 4;
  std::uint64_t seed = 0;

  void validate() const {
    if (layers == 0 || width == 0 || tokens == 0 || ffn_expansion == 0) {
      throw ConfigError("backbone extents must be positive");
    }
    if (attn_heads == 0 || width % attn_heads != 0) {
      throw ConfigError("backbone width " + std::to_string(width) + " is not divisible by " +
                        std::to_string(attn_heads) + " attention heads");
    }
  }
};

struct BlockWeights {
  Value ln1_gain, ln1_shift;
  Value qkv_w, qkv_b;  // [3d x d], [3d]
  Value proj_w, proj_b;
  Value ln2_gain, ln2_shift;
  Value fc1_w, fc1_b;  // [e d x d]
  Value fc2_w, fc2_b;  // [d x e d]
};

/// Frozen weights; nothing here requires gradients.
struct BackboneWeights {
  ToyBackboneConfig cfg;
  Tensor cls_token;  // [d]
  std::vector<BlockWeights> blocks;
  Value final_gain, final_shift;

  static BackboneWeights generate(const ToyBackboneConfig& cfg) {
    cfg.validate();
    CounterRng rng = CounterRng::derive(cfg.seed, rng_purpose::kBackbone);
    const std::size_t d = cfg.width, e = cfg.ffn_expansion * cfg.width;
    auto frozen = [&rng](Shape s, std::size_t fan_in) { return Value::constant(fan_in_uniform(std::move(s), fan_in, rng)); };
    auto ones = [](std::size_t n) { return Value::constant(Tensor::ones({n})); };
    auto zeros = [](std::size_t n) { return Value::constant(Tensor::zeros({n})); };
    BackboneWeights w;
    w.cfg = cfg;
    w.cls_token = fan_in_uniform({d}, 1, rng);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      BlockWeights b;
      b.ln1_gain = ones(d);
      b.ln1_shift = zeros(d);
      b.qkv_w = frozen({3 * d, d}, d);
      b.qkv_b = frozen({3 * d}, d);
      b.proj_w = frozen({d, d}, d);
      b.proj_b = frozen({d}, d);
      b.ln2_gain = ones(d);
      b.ln2_shift = zeros(d);
      b.fc1_w = frozen({e, d}, d);
      b.fc1_b = frozen({e}, d);
      b.fc2_w = frozen({d, e}, e);
      b.fc2_b = frozen({d}, e);
      w.blocks.push_back(std::move(b));
    }
    w.final_gain = ones(d);
    w.final_shift = zeros(d);
    return w;
  }

  /// Every frozen tensor, for immutability checks.
  std::vector<Value> all() const {
    std::vector<Value> out;
    for (const BlockWeights& b : blocks) {
      for (const Value* v : {&b.ln1_gain, &b.ln1_shift, &b.qkv_w, &b.qkv_b, &b.proj_w, &b.proj_b, &b.ln2_gain,
                             &b.ln2_shift, &b.fc1_w, &b.fc1_b, &b.fc2_w, &b.fc2_b}) {
        out.push_back(*v);
      }
    }
    out.push_back(final_gain);
    out.push_back(final_shift);
    return out;
  }

  /// Prepends the CLS embedding to [N x d] word tokens.
  Tensor with_cls(const Tensor& tokens) const {
    if (tokens.rank() != 2 || tokens.extent(1) != cfg.width) {
      throw DimensionError("backbone input " + shape_string(tokens.shape()) + " does not match width " +
                           std::to_string(cfg.width));
    }
    std::vector<double> data(cls_token.storage());
    data.insert(data.end(), tokens.storage().begin(), tokens.storage().end());
    return Tensor({tokens.extent(0) + 1, cfg.width}, std::move(data));
  }
};

struct PSRPLayer {
  Value w_down;  // [d_h x d], shared by both branches
  Value w_up1;  // [d x d_h], scale branch
  Value w_up2;  // [d x d_h], shift branch
};

struct PSRPParams {
  std::size_t d_h = 16;
  std::vector<PSRPLayer> layers;

  /// Fan-in uniform W_down, zero up-projections: identity at init.
  static PSRPParams init(const ToyBackboneConfig& cfg, std::size_t d_h, std::uint64_t seed) {
    if (d_h == 0) throw ConfigError("PSRP hidden width must be positive");
    CounterRng rng = CounterRng::derive(seed, rng_purpose::kPsrpInit);
    PSRPParams p;
    p.d_h = d_h;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      p.layers.push_back({fan_in_parameter({d_h, cfg.width}, cfg.width, rng), zero_parameter({cfg.width, d_h}),
                          zero_parameter({cfg.width, d_h})});
    }
    return p;
  }

  std::vector<std::pair<std::string, Value>> named() const {
    std::vector<std::pair<std::string, Value>> out;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string prefix = "psrp." + std::to_string(l) + ".";
      out.emplace_back(prefix + "w_down", layers[l].w_down);
      out.emplace_back(prefix + "w_up1", layers[l].w_up1);
      out.emplace_back(prefix + "w_up2", layers[l].w_up2);
    }
    return out;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& [name, v] : named()) n += v.size();
    return n;
  }
};

/// sum over layers of d d_h + 2 d_h d
inline std::size_t psrp_param_closed_form(const ToyBackboneConfig& cfg, std::size_t d_h) {
  return cfg.layers * (cfg.width * d_h + 2 * d_h * cfg.width);
}

struct SSFSite {
  Value gamma;  // [d]
  Value beta;  // [d]
};

struct SSFParams {
  std::vector<SSFSite> sites;

  /// gamma = 1, beta = 0 at every FFN site.
  static SSFParams identity(const ToyBackboneConfig& cfg) {
    SSFParams s;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      s.sites.push_back({Value::parameter(Tensor::ones({cfg.width})), zero_parameter({cfg.width})});
    }
    return s;
  }

  std::vector<std::pair<std::string, Value>> named() const {
    std::vector<std::pair<std::string, Value>> out;
    for (std::size_t l = 0; l < sites.size(); ++l) {
      out.emplace_back("ssf." + std::to_string(l) + ".gamma", sites[l].gamma);
      out.emplace_back("ssf." + std::to_string(l) + ".beta", sites[l].beta);
    }
    return out;
  }
};

/// Which recalibration, if any, is applied at the FFN outputs.
struct Recalibration {
  const PSRPParams* psrp = nullptr;
  const SSFParams* ssf = nullptr;

  static Recalibration none() { return {}; }
  static Recalibration with(const PSRPParams& p) { return {&p, nullptr}; }
  static Recalibration with(const SSFParams& s) { return {nullptr, &s}; }
};

/// Scaling w_l and shifting b_l for the layer input, both computed from one
/// shared ReLU(W_down x) activation. Per token, no biases.
inline std::pair<Value, Value> psrp_compute(const Value& x_l, const PSRPParams& p, std::size_t layer) {
  const PSRPLayer& lw = p.layers.at(layer);
  const Value hidden = relu(linear(x_l, lw.w_down));
  return {linear(hidden, lw.w_up1), linear(hidden, lw.w_up2)};
}

/// (w + 1) * f + b.
inline Value recalibrate(const Value& ffn_out, const Value& w, const Value& b) {
  return add(mul(add_scalar(w, 1.0), ffn_out), b);
}

inline Value ffn(const Value& x, const BlockWeights& b) {
  return linear(gelu(linear(x, b.fc1_w, b.fc1_b)), b.fc2_w, b.fc2_b);
}

/// FFN(LN(x_l)) recalibrated by the PSRP outputs for x_l.
inline Value psrp_apply(const Value& x_l, const BlockWeights& block, const PSRPParams& p, std::size_t layer) {
  const auto [w, b] = psrp_compute(x_l, p, layer);
  return recalibrate(ffn(layer_norm(x_l, block.ln2_gain, block.ln2_shift), block), w, b);
}

inline Value ssf_apply(const Value& x, const SSFSite& s) { return channel_affine(x, s.gamma, s.beta); }

inline Value self_attention(const Value& x, const BlockWeights& b, std::size_t heads) {
  const std::size_t d = x.shape()[1], dh = d / heads;
  const Value qkv = linear(x, b.qkv_w, b.qkv_b);
  std::vector<Value> outs;
  outs.reserve(heads);
  for (std::size_t i = 0; i < heads; ++i) {
    const Value q = slice_cols(qkv, i * dh, dh);
    const Value k = slice_cols(qkv, d + i * dh, dh);
    const Value v = slice_cols(qkv, 2 * d + i * dh, dh);
    const Value att = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh))));
    outs.push_back(matmul(att, v));
  }
  return linear(concat_cols(outs), b.proj_w, b.proj_b);
}

/// Runs the frozen stack on [(N+1) x d] input whose row 0 is the CLS token.
/// Recalibration acts on the FFN branch before its residual add.
inline TokenFeatures backbone_forward(const Value& x, const BackboneWeights& w,
                                      Recalibration recal = Recalibration::none(), std::uint32_t label = 0) {
  if (x.shape().size() != 2 || x.shape()[1] != w.cfg.width || x.shape()[0] < 2) {
    throw DimensionError("backbone input " + shape_string(x.shape()) + " does not match width " +
                         std::to_string(w.cfg.width));
  }
  Value h = x;
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    const BlockWeights& b = w.blocks[l];
    h = add(h, self_attention(layer_norm(h, b.ln1_gain, b.ln1_shift), b, w.cfg.attn_heads));
    Value f;
    if (recal.psrp) {
      f = psrp_apply(h, b, *recal.psrp, l);
    } else {
      f = ffn(layer_norm(h, b.ln2_gain, b.ln2_shift), b);
      if (recal.ssf) f = ssf_apply(f, recal.ssf->sites.at(l));
    }
    h = add(h, f);
  }
  h = layer_norm(h, w.final_gain, w.final_shift);
  const std::size_t n = h.shape()[0] - 1;
  return TokenFeatures{slice_rows(h, 1, n), select_row(h, 0), label};
}

/// PSRP-recalibrated backbone followed by a probing head.
inline MPOutput mp_plus_forward(const Tensor& tokens, const BackboneWeights& w, const PSRPParams& psrp,
                                const ProbeHead& head, std::uint32_t label = 0) {
  return head.forward(backbone_forward(Value::constant(w.with_cls(tokens)), w, Recalibration::with(psrp), label));
}

inline MPOutput mp_plus_forward(const Tensor& tokens, const BackboneWeights& w, const PSRPParams& psrp,
                                const MHC3Config& cfg, const MPHeadParams& head, FirstMomentMode mode) {
  return mp_forward(backbone_forward(Value::constant(w.with_cls(tokens)), w, Recalibration::with(psrp)), cfg,
                    head, mode);
}

}  // namespace mp
