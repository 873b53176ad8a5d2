#pragma once

#include <atomic>
#include <cstdint>
#include <exception>
#include <mutex>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace clk {

/// Parallel loop over [0, n). Every iteration must write to its own output
/// slot; with that discipline results are independent of the thread count.
/// The first exception thrown by any iteration is rethrown on the calling
/// thread (exceptions must not unwind out of an OpenMP region).
template <typename Func>
inline void parallel_for(std::int64_t n, Func&& f) {
#ifdef _OPENMP
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    if (failed.load(std::memory_order_relaxed)) continue;
    try {
      f(i);
    } catch (...) {
      const std::scoped_lock lock(error_mutex);
      if (!error) error = std::current_exception();
      failed.store(true, std::memory_order_relaxed);
    }
  }
  if (error) std::rethrow_exception(error);
#else
  for (std::int64_t i = 0; i < n; ++i) f(i);
#endif
}

/// Plain loop twin of parallel_for, kept as the reference path for tests
/// and benchmarks.
template <typename Func>
inline void serial_for(std::int64_t n, Func&& f) {
  for (std::int64_t i = 0; i < n; ++i) f(i);
}

inline int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

inline void set_threads(int n) {
#ifdef _OPENMP
  omp_set_num_threads(n);
#else
  (void)n;
#endif
}

}  // namespace clk
