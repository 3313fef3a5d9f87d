#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mp/autodiff.hpp"

namespace mp {

/// Compares reverse-mode gradients of a scalar function against central
/// differences, coordinate by coordinate. Returns the largest
/// |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
///
/// `f` must rebuild its graph from the current parameter values on every call.
inline double finite_diff_check(const std::function<Value()>& f, std::vector<Value> params,
                                double step = 1e-5) {
  for (Value& p : params) p.zero_grad();
  backward(f());
  double worst = 0.0;
  for (Value& p : params) {
    const Tensor analytic = p.grad();
    Tensor& theta = p.mutable_data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double saved = theta[i];
      theta[i] = saved + step;
      const double up = f().item();
      theta[i] = saved - step;
      const double down = f().item();
      theta[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double err =
          std::abs(analytic[i] - numeric) / std::max(1e-12, std::abs(analytic[i]) + std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace mp
