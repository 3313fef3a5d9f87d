#pragma once

#include <cmath>
#include <cstddef>

#include "mp/autodiff.hpp"
#include "mp/rng.hpp"

namespace mp {

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) entries.
inline Tensor fan_in_uniform(Shape shape, std::size_t fan_in, CounterRng& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& x : t.storage()) x = rng.uniform(-bound, bound);
  return t;
}

inline Value fan_in_parameter(Shape shape, std::size_t fan_in, CounterRng& rng) {
  return Value::parameter(fan_in_uniform(std::move(shape), fan_in, rng));
}

inline Value zero_parameter(Shape shape) { return Value::parameter(Tensor::zeros(std::move(shape))); }

}  // namespace mp
