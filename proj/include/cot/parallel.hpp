#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace cot {

/// Worker cap. Reads COT_THREADS once per call; unset or invalid means
/// hardware concurrency.
inline std::size_t thread_count() {
  std::size_t hw = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("COT_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return static_cast<std::size_t>(v);
  }
  return hw;
}

/// Runs fn(i) for i in [begin, end). Work is split into contiguous chunks so
/// every index is processed by exactly one thread; callers that write only to
/// index-owned slots get results independent of the thread count.
template <class Fn>
void parallel_for(std::size_t begin, std::size_t end, std::size_t min_chunk, Fn&& fn) {
  if (end <= begin) return;
  const std::size_t n = end - begin;
  std::size_t workers = std::min(thread_count(), (n + min_chunk - 1) / std::max<std::size_t>(1, min_chunk));
  if (workers <= 1) {
    for (std::size_t i = begin; i < end; ++i) fn(i);
    return;
  }
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) {
    std::size_t lo = begin + w * chunk;
    std::size_t hi = std::min(end, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (std::size_t i = begin; i < std::min(end, begin + chunk); ++i) fn(i);
}

}  // namespace cot
