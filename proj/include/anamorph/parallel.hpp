#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace anamorph {

/// Number of worker threads used when a caller passes 0.
inline std::size_t default_threads() {
  const auto n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : n;
}

/// Runs fn(row) for every row in [0, rows). Rows are split into contiguous
/// chunks; fn must only write state owned by its row, so results do not
/// depend on the thread count.
template <class Fn>
void parallel_rows(std::size_t rows, std::size_t threads, Fn&& fn) {
  if (threads == 0) threads = default_threads();
  threads = std::min(threads, rows);
  if (threads <= 1) {
    for (std::size_t r = 0; r < rows; ++r) fn(r);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  const std::size_t chunk = (rows + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        const std::size_t end = std::min(rows, (t + 1) * chunk);
        for (std::size_t r = t * chunk; r < end; ++r) fn(r);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace anamorph
