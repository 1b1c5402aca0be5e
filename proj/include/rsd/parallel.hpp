#pragma once

// Data-parallel loop helpers. Every parallel kernel in the library writes
// into a per-index slot and reduces serially afterwards, so results are
// bit-identical to the serial reference regardless of thread count.

#include <cstdint>
#include <vector>

#include <omp.h>

namespace rsd::par {

enum class Mode { kSerial, kParallel };

template <typename Fn>
void for_each_index(std::int64_t n, Fn&& fn, Mode mode = Mode::kParallel) {
  if (mode == Mode::kSerial || n < 2) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) fn(i);
}

// Left-to-right sum; the order is fixed so the value never depends on how
// the per-index terms were produced.
inline double ordered_sum(const std::vector<double>& terms) {
  double s = 0.0;
  for (double t : terms) s += t;
  return s;
}

inline int max_threads() { return omp_get_max_threads(); }

}  // namespace rsd::par
