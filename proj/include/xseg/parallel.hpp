#pragma once

#include <cstddef>
#include <functional>

namespace xseg {

/// Worker cap read once from XSEG_THREADS (default 1). Values < 1 are treated as 1.
std::size_t worker_threads();

/// Overrides XSEG_THREADS for the rest of the process.
void set_worker_threads(std::size_t n);

/// Runs fn(i) for i in [0, count). Each index must write to disjoint memory; the
/// result is then independent of the thread count.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn);

}  // namespace xseg
