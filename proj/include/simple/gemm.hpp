#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace simple {

// Deterministic matrix kernels. Each output element is accumulated in a fixed
// order by exactly one thread, so results are bit-identical across thread
// counts and independent of how many rows are in the batch. That property is
// load-bearing: batched and per-sample forward passes must agree bit-for-bit.

inline constexpr int64_t kParallelFlopThreshold = 1 << 16;

/// C[m,n] += A[m,k] * B[k,n], all row-major.
template <typename T>
void gemm_ab(int64_t M, int64_t K, int64_t N, const T* A, const T* B, T* C) {
    const bool par = M * K * N >= kParallelFlopThreshold;
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < M; ++i) {
        T* c = C + i * N;
        const T* a = A + i * K;
        for (int64_t k = 0; k < K; ++k) {
            const T aik = a[k];
            const T* b = B + k * N;
            for (int64_t j = 0; j < N; ++j) c[j] += aik * b[j];
        }
    }
}

/// C[k,n] += A^T B for A[m,k], B[m,n]. Accumulates per fixed 512-row block
/// into scratch, then reduces blocks in index order: one streaming pass over
/// A and B, still deterministic for any thread count.
template <typename T>
void gemm_atb(int64_t M, int64_t K, int64_t N, const T* A, const T* B, T* C) {
    constexpr int64_t kBlock = 512;
    const int64_t nblocks = (M + kBlock - 1) / kBlock;
    if (nblocks <= 1) {
        for (int64_t m = 0; m < M; ++m) {
            const T* a = A + m * K;
            const T* b = B + m * N;
            for (int64_t k = 0; k < K; ++k) {
                const T amk = a[k];
                T* c = C + k * N;
                for (int64_t j = 0; j < N; ++j) c[j] += amk * b[j];
            }
        }
        return;
    }
    std::vector<T> scratch(static_cast<size_t>(nblocks) * K * N, T(0));
#pragma omp parallel for schedule(static)
    for (int64_t blk = 0; blk < nblocks; ++blk) {
        T* s = scratch.data() + blk * K * N;
        const int64_t m1 = std::min(M, (blk + 1) * kBlock);
        for (int64_t m = blk * kBlock; m < m1; ++m) {
            const T* a = A + m * K;
            const T* b = B + m * N;
            for (int64_t k = 0; k < K; ++k) {
                const T amk = a[k];
                T* c = s + k * N;
                for (int64_t j = 0; j < N; ++j) c[j] += amk * b[j];
            }
        }
    }
    for (int64_t blk = 0; blk < nblocks; ++blk) {
        const T* s = scratch.data() + blk * K * N;
        for (int64_t i = 0; i < K * N; ++i) C[i] += s[i];
    }
}

/// C[m,n] += A B^T for A[m,k], B[n,k]. Dot products over contiguous rows;
/// eight explicit accumulator chains so the compiler can vectorize without
/// reassociating (order stays fixed).
template <typename T>
void gemm_abt(int64_t M, int64_t K, int64_t N, const T* A, const T* B, T* C) {
    const bool par = M * K * N >= kParallelFlopThreshold;
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < M; ++i) {
        const T* a = A + i * K;
        T* c = C + i * N;
        for (int64_t j = 0; j < N; ++j) {
            const T* b = B + j * K;
            T s0 = 0, s1 = 0, s2 = 0, s3 = 0, s4 = 0, s5 = 0, s6 = 0, s7 = 0;
            int64_t k = 0;
            for (; k + 8 <= K; k += 8) {
                s0 += a[k + 0] * b[k + 0];
                s1 += a[k + 1] * b[k + 1];
                s2 += a[k + 2] * b[k + 2];
                s3 += a[k + 3] * b[k + 3];
                s4 += a[k + 4] * b[k + 4];
                s5 += a[k + 5] * b[k + 5];
                s6 += a[k + 6] * b[k + 6];
                s7 += a[k + 7] * b[k + 7];
            }
            T tail = 0;
            for (; k < K; ++k) tail += a[k] * b[k];
            c[j] += ((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7)) + tail;
        }
    }
}

}  // namespace simple
