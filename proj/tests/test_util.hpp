#pragma once

#include <cstdint>

#include "mp/mp_head.hpp"
#include "mp/rng.hpp"
#include "mp/tensor.hpp"

namespace mp::testing {

inline Tensor random_tensor(Shape shape, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& x : t.storage()) x = rng.uniform(lo, hi);
  return t;
}

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  CounterRng rng(seed * 7919 + 17);
  return random_tensor(std::move(shape), rng, lo, hi);
}

/// Overwrites every listed leaf with uniform draws so no gradient is
/// structurally zero.
inline void randomize(const std::vector<Value>& params, std::uint64_t seed, double lo = -0.5, double hi = 0.5) {
  CounterRng rng(seed * 104729 + 3);
  for (Value p : params) {
    if (!p) continue;
    for (double& x : p.mutable_data().storage()) x = rng.uniform(lo, hi);
  }
}

inline std::vector<Value> values_of(const std::vector<std::pair<std::string, Value>>& named) {
  std::vector<Value> out;
  for (const auto& [name, v] : named) out.push_back(v);
  return out;
}

}  // namespace mp::testing
