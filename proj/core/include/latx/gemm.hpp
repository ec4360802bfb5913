#pragma once

#include <cstdint>

namespace latx::detail {

// C = alpha * op(A) * op(B) + beta * C, row-major.
// op(A) is [M,K], op(B) is [K,N]. Parallelised over rows of C only, so the
// accumulation order per output element is fixed and results are identical
// for any thread count.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
          const double* a, int lda, const double* b, int ldb, double beta,
          double* c, int ldc);

void set_threads(int n);
int get_threads();

}  // namespace latx::detail
