#pragma once

#include <cstdint>
#include <functional>

namespace ralgen {

// Worker count: RALGEN_THREADS env var if set, else hardware concurrency
// capped at 4. Read once per process.
int worker_count();

// Runs fn(i) for i in [0, n). Work is split into contiguous chunks; each
// index writes only its own outputs, so results are identical for any
// thread count. Falls back to a plain loop when n is small or one worker.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

}  // namespace ralgen
