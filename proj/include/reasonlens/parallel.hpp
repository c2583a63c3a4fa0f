#pragma once

#include <cstddef>
#include <functional>

namespace reasonlens {

// Worker count used by parallel_for. Defaults to $REASONLENS_THREADS, else 1.
std::size_t thread_count();
void set_thread_count(std::size_t n);

// Runs fn(i) for i in [0, n). Each index is handled exactly once; callers write
// results into per-index slots so output never depends on scheduling.
// The first exception thrown by any worker is rethrown on the calling thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace reasonlens
