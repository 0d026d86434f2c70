#pragma once

#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace grace {

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Work is assigned
/// by index stride, so results written to per-index slots are identical for
/// any worker count. The exception from the lowest failing index is
/// rethrown.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t w = std::min(workers, n);
  std::vector<std::exception_ptr> errors(n);
  {
    std::vector<std::jthread> pool;
    pool.reserve(w);
    for (std::size_t t = 0; t < w; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t i = t; i < n; i += w) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace grace
