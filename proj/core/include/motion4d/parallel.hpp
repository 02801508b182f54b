#pragma once

#include <cstddef>
#include <functional>

namespace motion4d {

// Worker count from MOTION4D_THREADS (0 or unset = hardware concurrency).
int thread_count();

// Runs body(i) for i in [0, n). Each index must write only its own output so
// that results do not depend on the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

// Fixed partition used for reductions into shared accumulators: the number of
// chunks never depends on the worker count, so merge order is stable.
inline constexpr std::size_t kReductionChunks = 8;

}  // namespace motion4d
