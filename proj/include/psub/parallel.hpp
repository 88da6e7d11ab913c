#pragma once

#include <cstddef>
#include <functional>

namespace psub {

/// Worker count from PSUB_THREADS; 0 or unset means hardware concurrency.
unsigned thread_count();

/// Calls fn(i) for i in [0, n) across thread_count() workers. Callers write
/// into slot i only, so results come back in index order whatever the
/// completion order. The first exception thrown by any call is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace psub
