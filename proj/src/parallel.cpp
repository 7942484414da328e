#include "pixsplat/parallel.h"

#include <atomic>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace pixsplat {
namespace {
std::atomic<int> g_threads{0};
}

int thread_count() {
  const int n = g_threads.load(std::memory_order_relaxed);
  if (n > 0) return n;
  return std::max(1u, std::thread::hardware_concurrency());
}

void set_thread_count(int n) { g_threads.store(std::max(0, n), std::memory_order_relaxed); }

void retain_heap_memory() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

}  // namespace pixsplat
