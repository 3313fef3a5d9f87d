#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace mp {

/// SplitMix64 finalizer.
constexpr std::uint64_t splitmix64_mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Counter-based SplitMix64: draw i (1-based) of stream `key` is
/// mix(key + i * 0x9e3779b97f4a7c15). Any draw can be recomputed from
/// (key, i) alone, which pins synthetic datasets across implementations.
class CounterRng {
 public:
  static constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;

  explicit CounterRng(std::uint64_t key) : key_(key) {}

  /// Independent stream for a (seed, purpose, index) triple.
  static CounterRng derive(std::uint64_t seed, std::uint64_t purpose, std::uint64_t index = 0) {
    return CounterRng(splitmix64_mix(splitmix64_mix(seed ^ splitmix64_mix(purpose)) + index));
  }

  std::uint64_t next_u64() { return splitmix64_mix(key_ + (++counter_) * kGamma); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer on [0, n) via the high half of a 128-bit product.
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  /// Standard normal by Box-Muller, consuming exactly two draws.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

namespace rng_purpose {
inline constexpr std::uint64_t kSynth = 1;
inline constexpr std::uint64_t kShuffle = 2;
inline constexpr std::uint64_t kSplit = 3;
inline constexpr std::uint64_t kHeadInit = 4;
inline constexpr std::uint64_t kBackbone = 5;
inline constexpr std::uint64_t kPsrpInit = 6;
inline constexpr std::uint64_t kClsWeights = 7;
}  // namespace rng_purpose

}  // namespace mp
