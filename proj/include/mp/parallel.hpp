#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace mp {

/// Worker cap for kernel-internal parallelism: MP_THREADS when set, else the
/// hardware concurrency.
inline std::size_t kernel_threads() {
  static const std::size_t n = [] {
    std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("MP_THREADS")) {
      try {
        const long v = std::stol(env);
        if (v >= 1) return static_cast<std::size_t>(v);
      } catch (...) {
      }
    }
    return hw;
  }();
  return n;
}

/// Runs fn(begin, end) over disjoint row ranges. Each output row is produced
/// by exactly one worker with a fixed inner order, so results do not depend
/// on the thread count.
template <class Fn>
void parallel_rows(std::size_t rows, std::size_t work_per_row, Fn&& fn) {
  constexpr std::size_t kMinWork = 1 << 16;
  const std::size_t threads = std::min(kernel_threads(), rows);
  if (threads <= 1 || rows * work_per_row < kMinWork) {
    fn(std::size_t{0}, rows);
    return;
  }
  std::vector<std::jthread> pool;
  const std::size_t chunk = (rows + threads - 1) / threads;
  for (std::size_t begin = 0; begin < rows; begin += chunk) {
    pool.emplace_back([&fn, begin, end = std::min(rows, begin + chunk)] { fn(begin, end); });
  }
}

}  // namespace mp
