#pragma once

#include <cstddef>
#include <functional>

namespace viral {

/// Worker cap: VIRAL_LAB_THREADS if set to a positive integer, otherwise the
/// hardware concurrency (at least 1).
std::size_t worker_count();

/// Runs fn(i) for i in [0, n) over up to worker_count() threads. Each index
/// is visited exactly once; callers write results by index so the outcome
/// never depends on scheduling. The first exception thrown is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace viral
