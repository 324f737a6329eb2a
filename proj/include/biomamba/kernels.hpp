// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <span>
#include <vector>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace biomamba::kernels {

// Thread budget from BIOMAMBA_THREADS (0 or unset = runtime default).
// Work is always split by output rows, so results do not depend on the
// number of threads.
inline int thread_budget() {
  static const int budget = [] {
    const char* env = std::getenv("BIOMAMBA_THREADS");
    int n = env ? std::atoi(env) : 0;
#if defined(_OPENMP)
    if (n <= 0) n = omp_get_max_threads();
#else
    n = 1;
#endif
    return std::max(n, 1);
  }();
  return budget;
}

template <class F>
void parallel_rows(std::size_t rows, std::size_t min_rows_per_thread, F&& body) {
#if defined(_OPENMP)
  const int threads = thread_budget();
  if (threads > 1 && rows >= 2 * min_rows_per_thread) {
#pragma omp parallel for schedule(static) num_threads(threads)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(rows); ++i) body(static_cast<std::size_t>(i));
    return;
  }
#endif
  (void)min_rows_per_thread;
  for (std::size_t i = 0; i < rows; ++i) body(i);
}

// C[m x n] (+)= A[m x k] * B[k x n], row-major. Each C entry accumulates
// over k in increasing order.
template <class T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* __restrict a, const T* __restrict b,
             T* __restrict c, bool accumulate) {
  constexpr std::size_t kRowBlock = 4;
  const std::size_t blocks = (m + kRowBlock - 1) / kRowBlock;
  parallel_rows(blocks, 4, [&](std::size_t blk) {
    const std::size_t i0 = blk * kRowBlock;
    const std::size_t i1 = std::min(m, i0 + kRowBlock);
    if (!accumulate)
      for (std::size_t i = i0; i < i1; ++i) std::fill(c + i * n, c + (i + 1) * n, T(0));
    if (i1 - i0 == kRowBlock) {
      T* c0 = c + (i0 + 0) * n;
      T* c1 = c + (i0 + 1) * n;
      T* c2 = c + (i0 + 2) * n;
      T* c3 = c + (i0 + 3) * n;
      const T* a0 = a + (i0 + 0) * k;
      const T* a1 = a + (i0 + 1) * k;
      const T* a2 = a + (i0 + 2) * k;
      const T* a3 = a + (i0 + 3) * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) {
          const T bv = brow[j];
          c0[j] += v0 * bv;
          c1[j] += v1 * bv;
          c2[j] += v2 * bv;
          c3[j] += v3 * bv;
        }
      }
    } else {
      for (std::size_t i = i0; i < i1; ++i) {
        T* ci = c + i * n;
        const T* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
          const T v = ai[p];
          const T* brow = b + p * n;
          for (std::size_t j = 0; j < n; ++j) ci[j] += v * brow[j];
        }
      }
    }
  });
}

template <class T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  constexpr std::size_t kTile = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += kTile)
    for (std::size_t j0 = 0; j0 < cols; j0 += kTile)
      for (std::size_t i = i0; i < std::min(rows, i0 + kTile); ++i)
        for (std::size_t j = j0; j < std::min(cols, j0 + kTile); ++j) dst[j * rows + i] = src[i * cols + j];
}

// C[m x n] (+)= A[m x k] * B[n x k]^T
template <class T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
  std::vector<T> bt(k * n);
  transpose(n, k, b, bt.data());
  gemm_nn(m, k, n, a, bt.data(), c, accumulate);
}

// C[m x n] (+)= A[k x m]^T * B[k x n]
template <class T>
void gemm_tn(std::size_t k, std::size_t m, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
  std::vector<T> at(k * m);
  transpose(k, m, a, at.data());
  gemm_nn(m, k, n, at.data(), b, c, accumulate);
}

}  // namespace biomamba::kernels
