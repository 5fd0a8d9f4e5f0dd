// Fixed-partition parallel loops. The partition depends only on the problem
// size and chunk size, never on the thread count, so callers that reduce
// per-chunk partial results in chunk order get bit-identical sums for any
// number of threads.
#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace lmreloc {

[[nodiscard]] inline std::size_t chunk_count(std::size_t n, std::size_t chunk) {
  return chunk == 0 ? 0 : (n + chunk - 1) / chunk;
}

// Calls fn(chunk_index, begin, end) for every chunk of [0, n).
template <class Fn>
void for_each_chunk(std::size_t n, std::size_t chunk, int threads, Fn&& fn) {
  const std::size_t chunks = chunk_count(n, chunk);
  if (threads <= 1 || chunks <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) fn(c, c * chunk, std::min(n, (c + 1) * chunk));
    return;
  }
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(threads), chunks);
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t c = t; c < chunks; c += workers) {
        try {
          fn(c, c * chunk, std::min(n, (c + 1) * chunk));
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace lmreloc
