#pragma once

#include <cstddef>
#include <functional>

namespace moss {

/// Worker count for the parallel kernels. threads == 1 is the sequential,
/// bitwise-reproducible mode.
struct Exec {
  int threads = 1;

  static Exec sequential() { return Exec{1}; }
};

/// Splits [0, n) into at most exec.threads contiguous chunks and runs
/// body(begin, end) on each. Chunk boundaries depend only on (n, threads).
void parallel_for(std::size_t n, const Exec& exec, const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace moss
