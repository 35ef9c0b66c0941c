#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace sdml {

inline std::size_t numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Loops with less total work than this run serial even when OpenMP is on;
// tiny loops lose more to fork/join than they gain.
inline constexpr std::size_t kParallelGrain = std::size_t{1} << 15;

inline int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

// Static-schedule parallel loop over [0, n). The body must write only to
// slot i, so the result is bitwise identical at any thread count.
template <class F>
void parallel_for(std::size_t n, std::size_t work_per_item, F&& body) {
#ifdef _OPENMP
  if (n > 1 && n * work_per_item >= kParallelGrain) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(n); ++i) {
      body(static_cast<std::size_t>(i));
    }
    return;
  }
#endif
  for (std::size_t i = 0; i < n; ++i) body(i);
}

}  // namespace sdml
