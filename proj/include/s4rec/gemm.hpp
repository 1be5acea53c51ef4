#pragma once

#include <cstdint>
#include <vector>

#include "s4rec/parallel.hpp"

namespace s4rec {

// Striped 4-accumulator dot product, double accumulation. The stripe order is
// fixed, so results are bit-identical at any thread count and batch size.
template <typename S>
inline double dot_acc(const S* a, const S* b, int64_t k) {
    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
    int64_t i = 0;
    for (; i + 4 <= k; i += 4) {
        a0 += static_cast<double>(a[i]) * static_cast<double>(b[i]);
        a1 += static_cast<double>(a[i + 1]) * static_cast<double>(b[i + 1]);
        a2 += static_cast<double>(a[i + 2]) * static_cast<double>(b[i + 2]);
        a3 += static_cast<double>(a[i + 3]) * static_cast<double>(b[i + 3]);
    }
    for (; i < k; ++i) a0 += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return (a0 + a1) + (a2 + a3);
}

// C (M x N) = A (M x K) * B^T, with B stored row-major (N x K).
// accumulate=true adds into C instead of overwriting.
template <typename S>
inline void gemm_nt(const S* A, int64_t M, int64_t K, const S* B, int64_t N, S* C,
                    bool accumulate) {
    parallel_for(M, [=](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
            const S* arow = A + i * K;
            S* crow = C + i * N;
            for (int64_t j = 0; j < N; ++j) {
                const double d = dot_acc(arow, B + j * K, K);
                crow[j] = accumulate ? static_cast<S>(static_cast<double>(crow[j]) + d)
                                     : static_cast<S>(d);
            }
        }
    });
}

// C (M x K) = A (M x N) * B (N x K), row-axpy form with a per-row double
// accumulator so the j-reduction happens in 64-bit.
template <typename S>
inline void gemm_nn(const S* A, int64_t M, int64_t N, const S* B, int64_t K, S* C,
                    bool accumulate) {
    parallel_for(M, [=](int64_t i0, int64_t i1) {
        std::vector<double> scratch(static_cast<size_t>(K));
        for (int64_t i = i0; i < i1; ++i) {
            for (auto& s : scratch) s = 0.0;
            const S* arow = A + i * N;
            for (int64_t j = 0; j < N; ++j) {
                const double s = static_cast<double>(arow[j]);
                if (s == 0.0) continue;
                const S* brow = B + j * K;
                for (int64_t k = 0; k < K; ++k) scratch[static_cast<size_t>(k)] += s * static_cast<double>(brow[k]);
            }
            S* crow = C + i * K;
            if (accumulate) {
                for (int64_t k = 0; k < K; ++k)
                    crow[k] = static_cast<S>(static_cast<double>(crow[k]) + scratch[static_cast<size_t>(k)]);
            } else {
                for (int64_t k = 0; k < K; ++k) crow[k] = static_cast<S>(scratch[static_cast<size_t>(k)]);
            }
        }
    });
}

// Blocked transpose: At (N x M) = A^T for A (M x N).
template <typename S>
inline void transpose_pack(const S* A, int64_t M, int64_t N, S* At) {
    constexpr int64_t BLK = 32;
    for (int64_t ib = 0; ib < M; ib += BLK) {
        const int64_t ie = ib + BLK < M ? ib + BLK : M;
        for (int64_t jb = 0; jb < N; jb += BLK) {
            const int64_t je = jb + BLK < N ? jb + BLK : N;
            for (int64_t i = ib; i < ie; ++i)
                for (int64_t j = jb; j < je; ++j) At[j * M + i] = A[i * N + j];
        }
    }
}

// C (N x K) = A^T (N x M) * B (M x K) for A stored (M x N). Packs A^T once,
// then reuses the nn kernel.
template <typename S>
inline void gemm_tn(const S* A, int64_t M, int64_t N, const S* B, int64_t K, S* C,
                    bool accumulate) {
    std::vector<S> at(static_cast<size_t>(M * N));
    transpose_pack(A, M, N, at.data());
    gemm_nn(at.data(), N, M, B, K, C, accumulate);
}

}  // namespace s4rec
