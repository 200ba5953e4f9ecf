#pragma once

#include <atomic>
#include <cstdint>
#include <thread>
#include <vector>

namespace eqnet {

namespace detail {
inline int& thread_count_ref() {
  static int n = []() {
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
  }();
  return n;
}
}  // namespace detail

inline int num_threads() { return detail::thread_count_ref(); }
inline void set_num_threads(int n) { detail::thread_count_ref() = n < 1 ? 1 : n; }

/// Runs fn(chunk_index, lo, hi) over fixed-size chunks of [0, n). Chunk
/// boundaries depend only on `grain`, never on the worker count, so any
/// per-chunk partial results can be reduced in chunk order to give answers
/// that are independent of the number of threads.
template <class Fn>
void parallel_chunks(int64_t n, int64_t grain, Fn&& fn) {
  if (n <= 0) return;
  if (grain < 1) grain = 1;
  const int64_t n_chunks = (n + grain - 1) / grain;
  const int workers = static_cast<int>(std::min<int64_t>(num_threads(), n_chunks));
  if (workers <= 1) {
    for (int64_t c = 0; c < n_chunks; ++c) fn(c, c * grain, std::min(n, (c + 1) * grain));
    return;
  }
  std::atomic<int64_t> next{0};
  auto work = [&]() {
    for (;;) {
      const int64_t c = next.fetch_add(1);
      if (c >= n_chunks) break;
      fn(c, c * grain, std::min(n, (c + 1) * grain));
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (int t = 1; t < workers; ++t) pool.emplace_back(work);
  work();
  for (auto& th : pool) th.join();
}

/// Element-wise parallel loop; fn(i) must write disjoint outputs.
template <class Fn>
void parallel_for(int64_t n, Fn&& fn) {
  const int64_t grain = std::max<int64_t>(1, n / (4 * std::max(1, num_threads())));
  parallel_chunks(n, grain, [&](int64_t, int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) fn(i);
  });
}

}  // namespace eqnet
