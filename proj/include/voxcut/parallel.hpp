#pragma once

#include <atomic>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace voxcut {

// Worker cap shared by every parallel section; VOXCUT_THREADS overrides the
// hardware default.
inline int worker_cap() {
  static const int cap = [] {
    if (const char* env = std::getenv("VOXCUT_THREADS")) {
      const int v = std::atoi(env);
      if (v > 0) return v;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
  }();
  return cap;
}

// Runs fn(i) for i in [0, n). Work items must not depend on execution order;
// anything order-sensitive belongs in a fixed-order reduction after the loop.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const int threads = std::min<std::size_t>(worker_cap(), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        fn(i);
      }
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace voxcut
