#pragma once

#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace slimmerge::detail {

inline unsigned thread_count() {
  if (const char* env = std::getenv("SLIMMERGE_THREADS")) {
    long n = std::strtol(env, nullptr, 10);
    if (n >= 1) return static_cast<unsigned>(n);
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

/// Runs fn(i) for i in [0, n). Work items must be independent; results go
/// into caller-preallocated slots so reductions stay deterministic.
/// `enabled` lets callers keep tiny workloads serial: thread spawn costs more
/// than the work itself below a few hundred kiloflops per item.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn, bool enabled = true) {
  const unsigned workers = enabled ? std::min<std::size_t>(thread_count(), n) : 1;
  if (workers <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace slimmerge::detail
