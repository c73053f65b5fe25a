// Minimal blocked parallel-for. Work is split into contiguous index ranges so
// that any per-index computation stays independent of the split; reductions
// are always performed by the caller in a fixed order.

#pragma once

#include <cstddef>
#include <functional>

namespace streg {

/// Global worker cap (CLI --threads). Defaults to hardware concurrency.
int max_threads();
void set_max_threads(int n);

/// Invoke fn(begin, end) over a partition of [0, n). Runs inline when the
/// range is small or only one worker is available.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn);

} // namespace streg
