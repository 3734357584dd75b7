#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace curate {

/// Process-wide worker count used by the parallel stages. 0 or 1 = serial.
void set_worker_count(unsigned workers);
unsigned worker_count();

/// Runs body(chunk_index, begin, end) over [0, n) split into fixed chunks of
/// `chunk` items. Chunk boundaries do not depend on the worker count, so any
/// per-chunk partial result reduced in chunk order is bitwise reproducible.
template <typename Body>
void parallel_chunks(std::size_t n, std::size_t chunk, Body&& body) {
  if (n == 0) return;
  chunk = std::max<std::size_t>(chunk, 1);
  const std::size_t chunks = (n + chunk - 1) / chunk;
  const unsigned workers = std::min<std::size_t>(std::max(1u, worker_count()), chunks);
  auto run = [&](std::size_t c) { body(c, c * chunk, std::min(n, (c + 1) * chunk)); };
  if (workers <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) run(c);
    return;
  }
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t c = w; c < chunks; c += workers) run(c);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  pool.clear();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace curate
