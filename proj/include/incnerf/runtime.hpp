#pragma once

#include <Eigen/Core>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace incnerf {

// Process-level tuning for training workloads. Large tape buffers churn every
// iteration; keeping them on the heap free list instead of mmap avoids
// refaulting hundreds of MB per batch. Ray-chunk threads carry the
// parallelism, so Eigen's own GEMM threading stays off.
inline void tune_runtime() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  Eigen::setNbThreads(1);
}

}  // namespace incnerf
