#ifndef MTEM_PARALLEL_HPP_
#define MTEM_PARALLEL_HPP_

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace mtem {

/// Calls body(i) for i in [0, n) on up to `threads` workers pulling indices
/// from a shared counter. Results must be written to index-addressed slots;
/// the caller reduces them afterwards in index order. The first exception
/// thrown by any body is rethrown after all workers stop.
template <typename Body>
void parallel_for(std::size_t n, unsigned threads, Body &&body) {
  if (n == 0) {
    return;
  }
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n)));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      body(i);
    }
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n || failed.load()) {
        return;
      }
      try {
        body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) {
          error = std::current_exception();
        }
        failed.store(true);
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    pool.reserve(threads);
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back(worker);
    }
  }
  if (error) {
    std::rethrow_exception(error);
  }
}

inline unsigned hardware_threads() {
  return std::max(1u, std::thread::hardware_concurrency());
}

} // namespace mtem

#endif // MTEM_PARALLEL_HPP_
