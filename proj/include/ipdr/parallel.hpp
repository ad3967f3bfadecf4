#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace ipdr {

/// Process-wide worker cap. 0 means "not configured": IPDR_THREADS is
/// consulted, then hardware concurrency.
inline std::atomic<std::size_t>& thread_cap() {
  static std::atomic<std::size_t> cap{0};
  return cap;
}

inline std::size_t worker_count() {
  std::size_t cap = thread_cap().load();
  if (cap == 0) {
    if (const char* env = std::getenv("IPDR_THREADS")) {
      try {
        const long v = std::stol(env);
        if (v > 0) cap = static_cast<std::size_t>(v);
      } catch (...) {
      }
    }
  }
  if (cap == 0) cap = std::max<unsigned>(1u, std::thread::hardware_concurrency());
  return cap;
}

/// Runs body(begin, end) over disjoint contiguous blocks of [0, n). Bodies must
/// write only to locations owned by their block, which keeps results
/// independent of the worker count.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body) {
  const std::size_t workers = std::min(worker_count(), n);
  if (workers <= 1) {
    if (n) body(0, n);
    return;
  }
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  std::exception_ptr err;
  std::mutex err_mu;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t b = w * chunk, e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&, b, e] {
      try {
        body(b, e);
      } catch (...) {
        std::lock_guard<std::mutex> lk(err_mu);
        if (!err) err = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace ipdr
