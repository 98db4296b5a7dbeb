#pragma once

#include <cstdint>
#include <functional>

namespace voxrel {

// Global worker count for parallel_for. 1 = fully serial.
void set_thread_count(int n);
int thread_count();

// Runs fn(i) for i in [0, n). Tasks must write disjoint outputs; under that
// contract results are identical for any thread count.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

}  // namespace voxrel
