#pragma once

#include <cstddef>
#include <functional>

namespace mmdyn {

/// Worker count: LF_THREADS when set to a positive integer, otherwise the
/// hardware concurrency (at least 1).
std::size_t worker_count();

/// Runs fn(i) for i in [0, n) on up to worker_count() threads. Work is split
/// into contiguous blocks; the first exception thrown is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace mmdyn
