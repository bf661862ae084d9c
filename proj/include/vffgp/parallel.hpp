#pragma once

#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace vffgp {

// Worker count for data-parallel loops: hardware concurrency, capped by the
// VFFGP_THREADS environment variable when set.
[[nodiscard]] inline int worker_count() {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  int n = int(hw);
  if (const char* env = std::getenv("VFFGP_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end != env && v >= 1 && v < n) n = int(v);
  }
  return n;
}

// The chunk grid depends only on n, never on the thread count, so chunked
// reductions accumulate in the same order no matter how many workers run.
[[nodiscard]] inline std::int64_t chunk_length(std::int64_t n) {
  const std::int64_t target_chunks = 64;
  std::int64_t c = (n + target_chunks - 1) / target_chunks;
  return c < 1024 ? 1024 : c;
}

[[nodiscard]] inline std::int64_t chunk_count(std::int64_t n) {
  if (n <= 0) return 0;
  const std::int64_t c = chunk_length(n);
  return (n + c - 1) / c;
}

// Runs fn(chunk_index, begin, end) over the fixed chunk grid of [0, n),
// possibly on multiple threads.  Callers wanting a reduction write per-chunk
// results into a chunk-indexed buffer and fold it sequentially afterwards.
template <class Fn>
inline void parallel_chunks(std::int64_t n, Fn&& fn) {
  const std::int64_t chunks = chunk_count(n);
  if (chunks == 0) return;
  const std::int64_t len = chunk_length(n);
  auto run_chunk = [&](std::int64_t c) {
    const std::int64_t lo = c * len;
    const std::int64_t hi = std::min(n, lo + len);
    fn(c, lo, hi);
  };

  const int workers = int(std::min<std::int64_t>(worker_count(), chunks));
  if (workers <= 1) {
    for (std::int64_t c = 0; c < chunks; ++c) run_chunk(c);
    return;
  }

  std::atomic<std::int64_t> next{0};
  std::mutex err_mutex;
  std::exception_ptr first_error;
  auto work = [&] {
    try {
      for (std::int64_t c = next.fetch_add(1); c < chunks; c = next.fetch_add(1)) run_chunk(c);
    } catch (...) {
      std::lock_guard<std::mutex> lock(err_mutex);
      if (!first_error) first_error = std::current_exception();
    }
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace vffgp
