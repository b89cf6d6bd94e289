#pragma once

#include <cstddef>
#include <functional>

namespace flowe {

/// Worker cap: FLOWE_THREADS if set (>= 1), else the hardware concurrency.
std::size_t worker_count();

/// Runs fn(0..n-1) on up to worker_count() threads. Work items must write
/// to disjoint outputs; callers reduce afterwards in index order. The first
/// exception thrown by any item is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace flowe
