#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mp/init.hpp"
#include "mp/ops.hpp"

// Moment probing head: a first-order branch (CLS token or token mean) and a
// second-order branch built from multi-head convolutional cross-covariance.

namespace mp {

/// One sample of frozen backbone output: N word tokens plus an optional
/// classification token kept out of the token rows.
struct TokenFeatures {
  Value tokens;  // [N x d]
  std::optional<Value> cls;  // [d]
  std::uint32_t label = 0;

  static TokenFeatures constant(Tensor tokens, std::optional<Tensor> cls = std::nullopt,
                                std::uint32_t label = 0) {
    if (tokens.rank() != 2 || tokens.extent(0) == 0 || tokens.extent(1) == 0) {
      throw DimensionError("token features must be a non-empty [N x d] matrix, got " +
                           shape_string(tokens.shape()));
    }
    TokenFeatures f{Value::constant(std::move(tokens)), std::nullopt, label};
    if (cls) {
      if (cls->shape() != Shape{f.dim()}) throw DimensionError("cls token width differs from tokens");
      f.cls = Value::constant(std::move(*cls));
    }
    return f;
  }

  std::size_t token_count() const { return tokens.shape()[0]; }
  std::size_t dim() const { return tokens.shape()[1]; }
};

struct MHC3Config {
  std::size_t d = 768;
  std::size_t d_hat = 512;
  std::size_t h = 8;
  double eps = 1e-6;

  std::size_t head_width() const { return d_hat / h; }
  std::size_t pooled_width() const { return d_hat / (4 * h); }
  /// (h - 1) * (d_hat / 4h)^2
  std::size_t output_size() const { return (h - 1) * pooled_width() * pooled_width(); }

  void validate() const {
    if (h < 2) throw ConfigError("MHC3 requires at least two heads");
    if (d_hat == 0 || d_hat % h != 0) {
      throw ConfigError("d_hat=" + std::to_string(d_hat) + " is not divisible by h=" + std::to_string(h));
    }
    if (head_width() % 4 != 0) {
      throw ConfigError("d_hat/h=" + std::to_string(head_width()) +
                        " must be divisible by 4 for two stride-2 convolutions");
    }
    if (d_hat > d) {
      throw ConfigError("d_hat=" + std::to_string(d_hat) + " exceeds input width d=" + std::to_string(d));
    }
  }
};

enum class FirstMomentMode { cls, gap };

/// Learnable parameters of the moment probing head.
struct MPHeadParams {
  Value reduce_w;  // [d_hat x d], the 1x1 convolution as a per-token linear map
  Value reduce_b;  // [d_hat]
  Value lra_k1;  // [(h-1) x (h-1) x 3 x 3]
  Value lra_b1;  // [h-1]
  Value lra_k2;
  Value lra_b2;
  Value w1;  // [C x d]
  Value b1;  // [C]
  Value w2;  // [C x S2]
  Value b2;  // [C]

  /// Fan-in uniform reduction and LRA kernels; zero classifiers, so the
  /// initial logits are all zero.
  static MPHeadParams init(const MHC3Config& cfg, std::size_t classes, std::uint64_t seed) {
    cfg.validate();
    CounterRng rng = CounterRng::derive(seed, rng_purpose::kHeadInit);
    const std::size_t g = cfg.h - 1;
    MPHeadParams p;
    p.reduce_w = fan_in_parameter({cfg.d_hat, cfg.d}, cfg.d, rng);
    p.reduce_b = fan_in_parameter({cfg.d_hat}, cfg.d, rng);
    p.lra_k1 = fan_in_parameter({g, g, 3, 3}, g * 9, rng);
    p.lra_b1 = fan_in_parameter({g}, g * 9, rng);
    p.lra_k2 = fan_in_parameter({g, g, 3, 3}, g * 9, rng);
    p.lra_b2 = fan_in_parameter({g}, g * 9, rng);
    p.w1 = zero_parameter({classes, cfg.d});
    p.b1 = zero_parameter({classes});
    p.w2 = zero_parameter({classes, cfg.output_size()});
    p.b2 = zero_parameter({classes});
    return p;
  }

  std::vector<std::pair<std::string, Value>> named() const {
    std::vector<std::pair<std::string, Value>> out;
    const std::pair<const char*, const Value*> all[] = {
        {"reduce_w", &reduce_w}, {"reduce_b", &reduce_b}, {"lra_k1", &lra_k1}, {"lra_b1", &lra_b1},
        {"lra_k2", &lra_k2},     {"lra_b2", &lra_b2},     {"w1", &w1},         {"b1", &b1},
        {"w2", &w2},             {"b2", &b2}};
    for (const auto& [name, v] : all) {
      if (*v) out.emplace_back(name, *v);
    }
    return out;
  }
};

/// X_hat = X reduce_w^T + reduce_b, row by row.
inline Value reduce_dim(const TokenFeatures& x, const Value& reduce_w, const Value& reduce_b) {
  if (x.dim() != reduce_w.shape()[1]) {
    throw DimensionError("reduce_dim: features have " + std::to_string(x.dim()) +
                         " columns, projection expects " + std::to_string(reduce_w.shape()[1]));
  }
  return linear(x.tokens, reduce_w, reduce_b);
}

inline Value reduce_dim(const TokenFeatures& x, const MPHeadParams& p) {
  return reduce_dim(x, p.reduce_w, p.reduce_b);
}

/// Contiguous column blocks H_1..H_h of X_hat.
inline std::vector<Value> split_heads(const Value& x_hat, std::size_t h) {
  detail::require_rank(x_hat, 2, "split_heads");
  const std::size_t width = x_hat.shape()[1];
  if (h == 0 || width % h != 0) {
    throw ConfigError("cannot split " + std::to_string(width) + " channels into " + std::to_string(h) +
                      " heads");
  }
  std::vector<Value> heads;
  heads.reserve(h);
  for (std::size_t i = 0; i < h; ++i) heads.push_back(slice_cols(x_hat, i * (width / h), width / h));
  return heads;
}

/// Z_i = H_i^T H_{i+1} / (||H_i^T H_{i+1}||_F + eps), i = 1..h-1. No 1/N
/// factor: the normalization removes the scale.
inline std::vector<Value> cross_cov_adjacent(const std::vector<Value>& heads, double eps = 1e-6) {
  if (heads.size() < 2) throw ConfigError("MHC3 requires at least two heads");
  for (const Value& hd : heads) {
    if (hd.shape() != heads[0].shape()) throw DimensionError("cross_cov_adjacent: head shapes differ");
  }
  std::vector<Value> z;
  z.reserve(heads.size() - 1);
  for (std::size_t i = 0; i + 1 < heads.size(); ++i) {
    z.push_back(frobenius_normalize(matmul(transpose(heads[i]), heads[i + 1]), eps));
  }
  return z;
}

/// Local representation aggregation: two stride-2 3x3 convolutions over the
/// (h-1)-channel cross-covariance stack with a GELU between, flattened.
inline Value lra(const Value& z_stack, const MPHeadParams& p) {
  detail::require_rank(z_stack, 3, "lra");
  const std::size_t q = z_stack.shape()[1];
  if (q % 4 != 0 || z_stack.shape()[2] != q) {
    throw ConfigError("lra: spatial extent " + shape_string(z_stack.shape()) +
                      " must be square and divisible by 4");
  }
  Value y = conv2d(z_stack, p.lra_k1, p.lra_b1, 2, 1);
  y = gelu(y);
  y = conv2d(y, p.lra_k2, p.lra_b2, 2, 1);
  return flatten(y);
}

/// Second-order representation of length (h-1)(d_hat/4h)^2.
inline Value mhc3(const TokenFeatures& x, const MHC3Config& cfg, const MPHeadParams& p) {
  cfg.validate();
  const Value x_hat = reduce_dim(x, p);
  return lra(stack(cross_cov_adjacent(split_heads(x_hat, cfg.h), cfg.eps)), p);
}

/// CLS vector verbatim, or the column mean of the word tokens.
inline Value first_moment(const TokenFeatures& x, FirstMomentMode mode) {
  if (mode == FirstMomentMode::cls) {
    if (!x.cls) throw InputError("first moment mode 'cls' requested but the sample has no CLS token");
    return *x.cls;
  }
  return mean_rows(x.tokens);
}

/// Linear probing: W m1 + b.
inline Value lp_forward(const Value& m1, const Value& w, const Value& b) {
  detail::require_rank(m1, 1, "lp_forward");
  return linear(m1, w, b);
}

struct MPOutput {
  Value logits;
  Value first_logits;
  Value second_logits;
};

/// Fused prediction W1 M1 + b1 + W2 MHC3(X) + b2, with both branch logits
/// exposed.
inline MPOutput mp_forward(const TokenFeatures& x, const MHC3Config& cfg, const MPHeadParams& p,
                           FirstMomentMode mode) {
  MPOutput out;
  out.first_logits = lp_forward(first_moment(x, mode), p.w1, p.b1);
  out.second_logits = linear(mhc3(x, cfg, p), p.w2, p.b2);
  out.logits = add(out.first_logits, out.second_logits);
  return out;
}

/// Plain global covariance pooling: flatten(l2(X_hat^T X_hat)).
inline Value gcp_forward(const TokenFeatures& x, const Value& reduce_w, const Value& reduce_b,
                         double eps = 1e-6) {
  const Value x_hat = reduce_dim(x, reduce_w, reduce_b);
  return flatten(frobenius_normalize(matmul(transpose(x_hat), x_hat), eps));
}

/// Bilinear-CNN post-normalization: signed square root, then l2.
inline Value bcnn_signed_sqrt(const Value& z, double eps = 1e-6) {
  return frobenius_normalize(signed_sqrt(z), eps);
}

/// Matrix square root of a symmetric PSD matrix by the coupled Newton-Schulz
/// iteration on the trace-normalized input, compensated by sqrt(trace).
inline Value isqrt_cov(const Value& a, std::size_t iters = 5) {
  detail::require_rank(a, 2, "isqrt_cov");
  const std::size_t q = a.shape()[0];
  if (a.shape()[1] != q) throw DimensionError("isqrt_cov needs a square matrix, got " + shape_string(a.shape()));
  double asym = 0.0;
  for (std::size_t i = 0; i < q; ++i)
    for (std::size_t j = 0; j < q; ++j) {
      const double d = a.data()(i, j) - a.data()(j, i);
      asym += d * d;
    }
  if (std::sqrt(asym) > 1e-8) throw InputError("isqrt_cov input is not symmetric");

  const Value tr = trace(a);
  if (tr.item() <= 0.0) throw InputError("isqrt_cov input has non-positive trace");
  Tensor three(Shape{q, q});
  for (std::size_t i = 0; i < q; ++i) three(i, i) = 3.0;
  const Value three_i = Value::constant(std::move(three));
  Value y = div_scalar_value(a, tr);
  Value z = Value::constant(Tensor::identity(q));
  for (std::size_t k = 0; k < iters; ++k) {
    const Value t = scale(sub(three_i, matmul(z, y)), 0.5);
    y = matmul(y, t);
    z = matmul(t, z);
  }
  return mul_scalar_value(y, sqrt(tr));
}

struct ParamCount {
  std::size_t counted = 0;
  std::size_t closed_form = 0;
};

/// d_hat d + d_hat + 2((h-1)^2 9 + (h-1)) + C d + C + C (h-1)(d_hat/4h)^2 + C
inline std::size_t mp_param_closed_form(const MHC3Config& cfg, std::size_t classes) {
  const std::size_t g = cfg.h - 1;
  const std::size_t s2 = g * (cfg.d_hat / (4 * cfg.h)) * (cfg.d_hat / (4 * cfg.h));
  return cfg.d_hat * cfg.d + cfg.d_hat + 2 * (g * g * 9 + g) + classes * cfg.d + classes +
         classes * s2 + classes;
}

/// Sum of all allocated parameter extents, next to the closed form.
inline ParamCount count_params(const MPHeadParams& p, const MHC3Config& cfg, std::size_t classes) {
  ParamCount c;
  for (const auto& [name, v] : p.named()) c.counted += v.size();
  c.closed_form = mp_param_closed_form(cfg, classes);
  return c;
}

}  // namespace mp
