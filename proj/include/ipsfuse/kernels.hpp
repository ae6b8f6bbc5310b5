#pragma once

#include <cstddef>

#include "ipsfuse/parallel.hpp"

namespace ipsfuse {

// Dense row-major matmul kernels. All parallelize over disjoint output rows
// with a sequential inner reduction, so results do not depend on the worker
// count. `accumulate` selects C += vs C =.

// C[M x N] = A[M x K] * B[K x N]
template <typename T>
void mm_nn(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C,
           bool accumulate = false) {
  parallel_for(M, [&](std::size_t i0, std::size_t i1) {
    for (std::size_t i = i0; i < i1; ++i) {
      T* crow = C + i * N;
      if (!accumulate) {
        for (std::size_t j = 0; j < N; ++j) crow[j] = T(0);
      }
      const T* arow = A + i * K;
      for (std::size_t k = 0; k < K; ++k) {
        const T a = arow[k];
        const T* brow = B + k * N;
        for (std::size_t j = 0; j < N; ++j) crow[j] += a * brow[j];
      }
    }
  });
}

// dot product with fixed lane structure; the lane array vectorizes without
// any reassociation flags and keeps results reproducible
template <typename T>
T dot_lanes(const T* a, const T* b, std::size_t n) {
  constexpr std::size_t W = 16;
  T lane[W] = {};
  std::size_t k = 0;
  for (; k + W <= n; k += W)
    for (std::size_t j = 0; j < W; ++j) lane[j] += a[k + j] * b[k + j];
  T acc = T(0);
  for (std::size_t j = 0; j < W; ++j) acc += lane[j];
  for (; k < n; ++k) acc += a[k] * b[k];
  return acc;
}

// C[M x N] = A[M x K] * B^T, B stored [N x K]
template <typename T>
void mm_nt(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C,
           bool accumulate = false) {
  parallel_for(M, [&](std::size_t i0, std::size_t i1) {
    for (std::size_t i = i0; i < i1; ++i) {
      const T* arow = A + i * K;
      T* crow = C + i * N;
      for (std::size_t j = 0; j < N; ++j) {
        T acc = dot_lanes(arow, B + j * K, K);
        crow[j] = accumulate ? crow[j] + acc : acc;
      }
    }
  });
}

// C[M x N] = A^T * B, A stored [K x M], B stored [K x N]
template <typename T>
void mm_tn(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C,
           bool accumulate = false) {
  parallel_for(M, [&](std::size_t i0, std::size_t i1) {
    if (!accumulate) {
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = 0; j < N; ++j) C[i * N + j] = T(0);
    }
    for (std::size_t k = 0; k < K; ++k) {
      const T* arow = A + k * M;
      const T* brow = B + k * N;
      for (std::size_t i = i0; i < i1; ++i) {
        const T a = arow[i];
        T* crow = C + i * N;
        for (std::size_t j = 0; j < N; ++j) crow[j] += a * brow[j];
      }
    }
  });
}

enum class Padding { zero, reflect };

// Maps a padded coordinate to a source index; -1 means outside (zero pad).
// Reflection mirrors about the edge pixel: indices -1,-2,... map to 0,1,...
inline long pad_index(long q, long n, Padding mode) {
  if (q >= 0 && q < n) return q;
  if (mode == Padding::zero) return -1;
  if (q < 0) q = -q - 1;
  if (q >= n) q = 2 * n - q - 1;
  return q;
}

}  // namespace ipsfuse
