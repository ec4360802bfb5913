#include "latx/gemm.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace latx::detail {

namespace {
int g_threads = 0;  // 0 = library default
}

void set_threads(int n) {
  g_threads = n;
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#endif
}

int get_threads() {
#ifdef _OPENMP
  return g_threads > 0 ? g_threads : omp_get_max_threads();
#else
  return 1;
#endif
}

namespace {

// Row-major micro kernel: C[m,:] accumulates A[m,k] * B[k,:], k unrolled by 4.
void kernel_rows(const double* a, const double* b, double* c, int m0, int m1,
                 int n, int k) {
  const int k4 = k & ~3;
  for (int m = m0; m < m1; ++m) {
    double* crow = c + static_cast<size_t>(m) * n;
    const double* arow = a + static_cast<size_t>(m) * k;
    int kk = 0;
    for (; kk < k4; kk += 4) {
      const double a0 = arow[kk], a1 = arow[kk + 1], a2 = arow[kk + 2], a3 = arow[kk + 3];
      const double* b0 = b + static_cast<size_t>(kk) * n;
      const double* b1 = b0 + n;
      const double* b2 = b1 + n;
      const double* b3 = b2 + n;
      for (int j = 0; j < n; ++j) crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
    }
    for (; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = b + static_cast<size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void transpose_into(const double* src, int rows, int cols, int ld, double* dst) {
  // dst is [cols, rows]
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) dst[static_cast<size_t>(c) * rows + r] = src[static_cast<size_t>(r) * ld + c];
}

}  // namespace

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
          const double* a, int lda, const double* b, int ldb, double beta,
          double* c, int ldc) {
  if (m == 0 || n == 0) return;

  // Pack operands into contiguous row-major [M,K] and [K,N].
  std::vector<double> abuf, bbuf;
  const double* ap = a;
  if (trans_a) {
    abuf.resize(static_cast<size_t>(m) * k);
    transpose_into(a, k, m, lda, abuf.data());  // a is [K,M] stored with ld=lda
    ap = abuf.data();
  } else if (lda != k) {
    abuf.resize(static_cast<size_t>(m) * k);
    for (int r = 0; r < m; ++r)
      std::memcpy(abuf.data() + static_cast<size_t>(r) * k, a + static_cast<size_t>(r) * lda,
                  sizeof(double) * k);
    ap = abuf.data();
  }
  const double* bp = b;
  if (trans_b) {
    bbuf.resize(static_cast<size_t>(k) * n);
    transpose_into(b, n, k, ldb, bbuf.data());  // b is [N,K]
    bp = bbuf.data();
  } else if (ldb != n) {
    bbuf.resize(static_cast<size_t>(k) * n);
    for (int r = 0; r < k; ++r)
      std::memcpy(bbuf.data() + static_cast<size_t>(r) * n, b + static_cast<size_t>(r) * ldb,
                  sizeof(double) * n);
    bp = bbuf.data();
  }

  std::vector<double> cbuf;
  double* cp = c;
  const bool packed_c = (ldc != n);
  if (packed_c) {
    cbuf.assign(static_cast<size_t>(m) * n, 0.0);
    if (beta != 0.0)
      for (int r = 0; r < m; ++r)
        std::memcpy(cbuf.data() + static_cast<size_t>(r) * n, c + static_cast<size_t>(r) * ldc,
                    sizeof(double) * n);
    cp = cbuf.data();
  }

  if (beta == 0.0) {
    std::memset(cp, 0, sizeof(double) * static_cast<size_t>(m) * n);
  } else if (beta != 1.0) {
    for (size_t i = 0; i < static_cast<size_t>(m) * n; ++i) cp[i] *= beta;
  }

  std::vector<double> asc;
  if (alpha != 1.0) {
    asc.resize(static_cast<size_t>(m) * k);
    for (size_t i = 0; i < asc.size(); ++i) asc[i] = ap[i] * alpha;
    ap = asc.data();
  }

#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (static_cast<int64_t>(m) * n * k > 65536)
#endif
  for (int m0 = 0; m0 < m; m0 += 8) {
    kernel_rows(ap, bp, cp, m0, std::min(m, m0 + 8), n, k);
  }

  if (packed_c) {
    for (int r = 0; r < m; ++r)
      std::memcpy(c + static_cast<size_t>(r) * ldc, cp + static_cast<size_t>(r) * n,
                  sizeof(double) * n);
  }
}

}  // namespace latx::detail
