#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace rigidreg {

// Worker cap: RIGIDREG_THREADS if set, otherwise machine parallelism.
inline int max_threads() {
  if (const char* env = std::getenv("RIGIDREG_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Runs fn(i) for i in [0, n) on contiguous index blocks. Callers must write
// results into per-index slots; any cross-index reduction happens afterwards
// in index order, so the outcome is independent of the thread count.
inline void parallel_for(int n, const std::function<void(int)>& fn, int nthreads = 0) {
  if (n <= 0) return;
  int t = nthreads > 0 ? nthreads : max_threads();
  t = std::min(t, n);
  if (t <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::mutex err_mutex;
  std::exception_ptr first_error;
  std::vector<std::thread> workers;
  workers.reserve(static_cast<size_t>(t));
  for (int k = 0; k < t; ++k) {
    int lo = static_cast<int>(static_cast<long long>(n) * k / t);
    int hi = static_cast<int>(static_cast<long long>(n) * (k + 1) / t);
    workers.emplace_back([&, lo, hi]() {
      try {
        for (int i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace rigidreg
