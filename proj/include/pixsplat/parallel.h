#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace pixsplat {

// Worker count used by every parallel pass. Defaults to the hardware
// concurrency; tests override it to check thread-count independence.
int thread_count();
void set_thread_count(int n);

// Keeps freed heap memory mapped (glibc only), so per-step image and fragment
// buffers reuse resident pages. A no-op elsewhere.
void retain_heap_memory();

// Calls fn(lo, hi) over disjoint chunks of [begin, end).
template <class Fn>
void parallel_for(std::size_t begin, std::size_t end, Fn&& fn, std::size_t grain = 1 << 14) {
  if (end <= begin) return;
  const std::size_t n = end - begin;
  const std::size_t workers =
      std::min<std::size_t>(std::size_t(thread_count()), (n + grain - 1) / grain);
  if (workers <= 1) {
    fn(begin, end);
    return;
  }
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t lo = begin + w * chunk;
    const std::size_t hi = std::min(end, lo + chunk);
    if (lo < hi) pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  fn(begin, std::min(end, begin + chunk));
}

}  // namespace pixsplat
