#pragma once

#include <cstdint>
#include <functional>

namespace gavatar {

/// Worker count: GAVATAR_THREADS when set (>= 1), else hardware concurrency.
int worker_count();

/// Runs fn(i) for i in [0, n) over up to worker_count() threads. Each index is
/// processed by exactly one worker; callers write to disjoint outputs.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn);

}  // namespace gavatar
