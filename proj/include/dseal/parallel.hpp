#pragma once

#include <cstdint>
#include <functional>

namespace dseal {

// Process-wide worker count. 1 in strict deterministic mode. All parallel
// loops in the project partition work statically and write disjoint slots,
// so results are bitwise identical at any thread count; strict mode simply
// removes scheduling jitter from timings and forces single-threaded BLAS.
void set_num_threads(int n);
int num_threads();

// Force single-threaded execution everywhere (also pins BLAS to 1 thread).
void enter_strict_mode();
bool strict_mode();

// Static partition of [0, n) over the worker pool; fn(i) must only touch
// state owned by index i.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

}  // namespace dseal
