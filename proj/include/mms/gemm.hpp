#pragma once

namespace mms {

// Row-major GEMM: C = alpha * op(A) * op(B) + beta * C. Backed by OpenBLAS
// (pinned to one thread so results are reproducible run to run).
template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda,
          const T* b, int ldb, T beta, T* c, int ldc);

}  // namespace mms
