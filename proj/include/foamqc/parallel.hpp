#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace foamqc {

inline int default_jobs() { return std::max(1u, std::thread::hardware_concurrency()); }

// Calls fn(i) for i in [0, n) on up to `jobs` threads. The first exception
// (lowest index) is rethrown after all workers finish.
template <typename Fn>
void parallel_for(std::size_t n, int jobs, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, jobs)));
  std::vector<std::exception_ptr> errors(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next++) < n;) try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// Order-preserving map.
template <typename T, typename Fn>
auto parallel_map(const std::vector<T>& items, int jobs, Fn&& fn) {
  using R = decltype(fn(items.front()));
  std::vector<R> out(items.size());
  parallel_for(items.size(), jobs, [&](std::size_t i) { out[i] = fn(items[i]); });
  return out;
}

}  // namespace foamqc
