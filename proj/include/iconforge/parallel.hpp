#pragma once

#include <cstddef>
#include <functional>

namespace iconforge {

// Worker cap: ICONFORGE_THREADS if set and positive, else hardware concurrency.
int worker_count();

// Overrides the worker cap for the current process (1 = single-threaded mode).
void set_worker_count(int n);

// Runs body(i) for i in [0, n). Iterations must write disjoint memory; the
// result never depends on the number of workers.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body,
                  std::size_t min_per_worker = 1);

}  // namespace iconforge
