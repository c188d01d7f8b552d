#pragma once

#include <omp.h>

#include <algorithm>
#include <cstdlib>
#include <string>
#include <vector>

namespace madkin {

/// Thread cap from MK_THREADS (unset or invalid: OpenMP default).
inline int thread_cap() {
  const int def = omp_get_max_threads();
  const char* env = std::getenv("MK_THREADS");
  if (!env || !*env) return def;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) return def;
  return static_cast<int>(std::min<long>(v, 1024));
}

/// Fixed chunk size for reductions. Chunk boundaries never depend on the
/// thread count, so merged results are bit-identical across schedules.
inline constexpr std::size_t kChunk = 4096;

inline std::size_t chunk_count(std::size_t n) { return (n + kChunk - 1) / kChunk; }

/// Calls fn(begin, end, chunk) for every chunk, possibly in parallel.
template <class Fn>
void for_chunks(std::size_t n, Fn&& fn) {
  const std::size_t nc = chunk_count(n);
#pragma omp parallel for schedule(dynamic, 1) num_threads(thread_cap())
  for (std::size_t c = 0; c < nc; ++c) fn(c * kChunk, std::min(n, (c + 1) * kChunk), c);
}

/// Deterministic sum of per-index values.
template <class Fn>
double chunked_sum(std::size_t n, Fn&& value) {
  std::vector<double> part(chunk_count(n), 0.0);
  for_chunks(n, [&](std::size_t b, std::size_t e, std::size_t c) {
    double s = 0.0;
    for (std::size_t i = b; i < e; ++i) s += value(i);
    part[c] = s;
  });
  double s = 0.0;
  for (double p : part) s += p;
  return s;
}

}  // namespace madkin
