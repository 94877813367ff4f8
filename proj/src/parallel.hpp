#pragma once

#include <cstddef>
#include <functional>
#include <vector>

namespace krct {

/// Number of worker threads: min(hardware, KERNEL_RCT_THREADS if set).
int thread_budget();

/// Runs fn(i) for i in [0, n) across the thread budget. Work items must
/// write only to their own slot of any shared output so that results do
/// not depend on scheduling. Exceptions are captured and rethrown once
/// all workers have joined.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

/// Pairwise (cascade) summation; bitwise independent of thread count as
/// long as the input order is deterministic.
double pairwise_sum(const double* data, std::size_t n);

inline double pairwise_sum(const std::vector<double>& v) {
  return pairwise_sum(v.data(), v.size());
}

}  // namespace krct
