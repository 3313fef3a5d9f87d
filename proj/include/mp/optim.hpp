#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "mp/autodiff.hpp"

namespace mp {

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

/// AdamW over a fixed, registered set of trainable leaves. Parameters outside
/// the set are never read or written.
class AdamW {
 public:
  AdamW(std::vector<Value> params, AdamWHyper hyper = {}) : params_(std::move(params)), hyper_(hyper) {
    for (const Value& p : params_) {
      if (!p.requires_grad()) throw UsageError("AdamW was given a parameter that does not require gradients");
      m_.push_back(Tensor::zeros(p.shape()));
      v_.push_back(Tensor::zeros(p.shape()));
    }
  }

  /// Decoupled decay theta -= lr*wd*theta, then the bias-corrected adaptive step.
  void step(double lr) {
    for (const Value& p : params_) {
      if (!p.has_grad()) throw UsageError("AdamW step with a parameter that has no gradient");
    }
    ++step_;
    const double c1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(step_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Value& p = params_[k];
      Tensor& theta = p.mutable_data();
      const Tensor& g = p.node()->grad;
      Tensor& m = m_[k];
      Tensor& v = v_[k];
      for (std::size_t i = 0; i < theta.size(); ++i) {
        if (hyper_.weight_decay != 0.0) theta[i] -= lr * hyper_.weight_decay * theta[i];
        m[i] = hyper_.beta1 * m[i] + (1.0 - hyper_.beta1) * g[i];
        v[i] = hyper_.beta2 * v[i] + (1.0 - hyper_.beta2) * g[i] * g[i];
        const double m_hat = m[i] / c1;
        const double v_hat = v[i] / c2;
        theta[i] -= lr * m_hat / (std::sqrt(v_hat) + hyper_.eps);
      }
    }
  }

  void zero_grad() {
    for (Value& p : params_) p.zero_grad();
  }

  std::size_t steps() const { return step_; }
  const std::vector<Value>& params() const { return params_; }
  const Tensor& first_moment(std::size_t k) const { return m_.at(k); }
  const Tensor& second_moment(std::size_t k) const { return v_.at(k); }

 private:
  std::vector<Value> params_;
  AdamWHyper hyper_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::size_t step_ = 0;
};

/// Linear warmup from 0 to lr_base, then cosine annealing to lr_min.
struct Schedule {
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;
  double lr_base = 1e-3;
  double lr_min = 1e-6;

  void validate() const {
    if (warmup_steps >= total_steps) {
      throw ConfigError("warmup_steps=" + std::to_string(warmup_steps) + " must be below total_steps=" +
                        std::to_string(total_steps));
    }
    if (lr_min > lr_base) throw ConfigError("lr_min exceeds lr_base");
  }
};

inline double lr_at(std::size_t step, const Schedule& s) {
  s.validate();
  if (step > s.total_steps) {
    throw UsageError("step " + std::to_string(step) + " beyond schedule of " + std::to_string(s.total_steps));
  }
  if (step < s.warmup_steps) {
    return s.lr_base * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  if (step == s.warmup_steps) return s.lr_base;
  if (step == s.total_steps) return s.lr_min;
  const double t = static_cast<double>(step - s.warmup_steps) / static_cast<double>(s.total_steps - s.warmup_steps);
  return s.lr_min + 0.5 * (s.lr_base - s.lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

inline double linear_scale_lr(double lr_ref, std::size_t batch, std::size_t batch_ref) {
  if (batch_ref == 0) throw ConfigError("reference batch size must be positive");
  return lr_ref * static_cast<double>(batch) / static_cast<double>(batch_ref);
}

}  // namespace mp
