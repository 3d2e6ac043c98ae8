// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace dgc {

/// Runs fn(i) for i in [0, count) over up to `threads` workers using a static
/// contiguous partition. Callers must only write disjoint state per index.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::jthread> workers;
  workers.reserve(threads);
  const std::size_t per = (count + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t begin = t * per;
    const std::size_t end = std::min(count, begin + per);
    if (begin >= end) break;
    workers.emplace_back([&, begin, end] {
      try {
        for (std::size_t i = begin; i < end; ++i) fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  workers.clear();
  if (failure) std::rethrow_exception(failure);
}

/// Batch reductions are split into chunks of this many samples regardless of
/// the worker count, then summed in chunk order. This keeps results
/// bit-identical for any thread count.
inline constexpr std::size_t kReduceChunk = 8;

inline std::size_t chunk_count(std::size_t batch) {
  return (batch + kReduceChunk - 1) / kReduceChunk;
}

}  // namespace dgc
