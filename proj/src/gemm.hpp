#pragma once

#include <cstddef>
#include <vector>

namespace smvit::detail {

// C[M,N] += op(A) * op(B), row-major. A is [M,K] (or [K,M] when trans_a),
// B is [K,N] (or [N,K] when trans_b). Loop orders keep the innermost loop
// contiguous and the accumulation order fixed.
template <typename T>
void gemm_acc(bool trans_a, bool trans_b, std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B,
              T* C) {
  std::vector<T> bt;
  if (trans_b) {
    bt.resize(K * N);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < K; ++k) bt[k * N + n] = B[n * K + k];
    B = bt.data();
  }
  if (!trans_a) {
    for (std::size_t i = 0; i < M; ++i) {
      T* c = C + i * N;
      const T* a = A + i * K;
      for (std::size_t k = 0; k < K; ++k) {
        const T av = a[k];
        const T* b = B + k * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
      }
    }
  } else {
    for (std::size_t k = 0; k < K; ++k) {
      const T* a = A + k * M;
      const T* b = B + k * N;
      for (std::size_t i = 0; i < M; ++i) {
        const T av = a[i];
        T* c = C + i * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
      }
    }
  }
}

}  // namespace smvit::detail
