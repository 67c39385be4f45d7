#include "iconforge/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace iconforge {
namespace {

int initial_worker_count() {
  if (const char* env = std::getenv("ICONFORGE_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::atomic<int>& worker_setting() {
  static std::atomic<int> n{initial_worker_count()};
  return n;
}

}  // namespace

int worker_count() { return worker_setting().load(); }

void set_worker_count(int n) { worker_setting().store(std::max(1, n)); }

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body,
                  std::size_t min_per_worker) {
  const std::size_t max_workers =
      std::max<std::size_t>(1, n / std::max<std::size_t>(1, min_per_worker));
  const std::size_t workers =
      std::min<std::size_t>(static_cast<std::size_t>(worker_count()), max_workers);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = n * w / workers;
    const std::size_t end = n * (w + 1) / workers;
    pool.emplace_back([&body, begin, end] {
      for (std::size_t i = begin; i < end; ++i) body(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace iconforge
