#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace sef {

// Runs fn(i) for i in [0, n) on up to `threads` workers using a static
// interleaved partition. Callers write results into per-index slots, so the
// outcome does not depend on the thread count.
template <class Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t used = std::min(workers, n);
  std::vector<std::exception_ptr> errors(used);
  std::vector<std::thread> pool;
  pool.reserve(used);
  for (std::size_t t = 0; t < used; ++t)
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += used) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace sef
