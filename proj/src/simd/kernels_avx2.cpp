// Compiled with -mavx2 -mfma. Nothing in here may run before the dispatcher
// has confirmed CPU support.
#include <immintrin.h>

#include "gtta/simd/kernels.hpp"

namespace gtta::simd {
namespace {

// 4 x 8 register tile: 8 ymm accumulators, two B loads and four broadcasts per k.
// Element (row i, step r) of A sits at a[i * lda + r * step].
inline void tile_4x8(std::size_t k, const double* a, std::size_t lda, std::size_t step, const double* b,
                     std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  __m256d c00, c01, c10, c11, c20, c21, c30, c31;
  if (accumulate) {
    c00 = _mm256_loadu_pd(c);
    c01 = _mm256_loadu_pd(c + 4);
    c10 = _mm256_loadu_pd(c + ldc);
    c11 = _mm256_loadu_pd(c + ldc + 4);
    c20 = _mm256_loadu_pd(c + 2 * ldc);
    c21 = _mm256_loadu_pd(c + 2 * ldc + 4);
    c30 = _mm256_loadu_pd(c + 3 * ldc);
    c31 = _mm256_loadu_pd(c + 3 * ldc + 4);
  } else {
    c00 = c01 = c10 = c11 = c20 = c21 = c30 = c31 = _mm256_setzero_pd();
  }
  const double* a0 = a;
  const double* a1 = a + lda;
  const double* a2 = a + 2 * lda;
  const double* a3 = a + 3 * lda;
  for (std::size_t r = 0; r < k; ++r) {
    const __m256d b0 = _mm256_loadu_pd(b + r * ldb);
    const __m256d b1 = _mm256_loadu_pd(b + r * ldb + 4);
    __m256d av = _mm256_broadcast_sd(a0 + r * step);
    c00 = _mm256_fmadd_pd(av, b0, c00);
    c01 = _mm256_fmadd_pd(av, b1, c01);
    av = _mm256_broadcast_sd(a1 + r * step);
    c10 = _mm256_fmadd_pd(av, b0, c10);
    c11 = _mm256_fmadd_pd(av, b1, c11);
    av = _mm256_broadcast_sd(a2 + r * step);
    c20 = _mm256_fmadd_pd(av, b0, c20);
    c21 = _mm256_fmadd_pd(av, b1, c21);
    av = _mm256_broadcast_sd(a3 + r * step);
    c30 = _mm256_fmadd_pd(av, b0, c30);
    c31 = _mm256_fmadd_pd(av, b1, c31);
  }
  _mm256_storeu_pd(c, c00);
  _mm256_storeu_pd(c + 4, c01);
  _mm256_storeu_pd(c + ldc, c10);
  _mm256_storeu_pd(c + ldc + 4, c11);
  _mm256_storeu_pd(c + 2 * ldc, c20);
  _mm256_storeu_pd(c + 2 * ldc + 4, c21);
  _mm256_storeu_pd(c + 3 * ldc, c30);
  _mm256_storeu_pd(c + 3 * ldc + 4, c31);
}

// One output row over columns [j0, n): 4-wide vectors then a scalar tail.
inline void row_strip(std::size_t j0, std::size_t n, std::size_t k, const double* arow, std::size_t step,
                      const double* b, std::size_t ldb, double* crow, bool accumulate) {
  std::size_t j = j0;
  for (; j + 4 <= n; j += 4) {
    __m256d acc = accumulate ? _mm256_loadu_pd(crow + j) : _mm256_setzero_pd();
    for (std::size_t r = 0; r < k; ++r) {
      acc = _mm256_fmadd_pd(_mm256_broadcast_sd(arow + r * step), _mm256_loadu_pd(b + r * ldb + j), acc);
    }
    _mm256_storeu_pd(crow + j, acc);
  }
  for (; j < n; ++j) {
    double acc = accumulate ? crow[j] : 0.0;
    for (std::size_t r = 0; r < k; ++r) acc += arow[r * step] * b[r * ldb + j];
    crow[j] = acc;
  }
}

// Shared driver: row i of A starts at a + i * row_stride, steps by `step`.
void gemm_strided(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t row_stride,
                  std::size_t step, const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  const std::size_t n8 = n - n % 8;
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    for (std::size_t j = 0; j < n8; j += 8) {
      tile_4x8(k, a + i * row_stride, row_stride, step, b + j, ldb, c + i * ldc + j, ldc, accumulate);
    }
    if (n8 < n) {
      for (std::size_t ii = i; ii < i + 4; ++ii) {
        row_strip(n8, n, k, a + ii * row_stride, step, b, ldb, c + ii * ldc, accumulate);
      }
    }
  }
  for (; i < m; ++i) row_strip(0, n, k, a + i * row_stride, step, b, ldb, c + i * ldc, accumulate);
}

void gemm_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
               const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  gemm_strided(m, n, k, a, lda, 1, b, ldb, c, ldc, accumulate);
}

void gemm_tn_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  gemm_strided(m, n, k, a, 1, lda, b, ldb, c, ldc, accumulate);
}

inline double hsum(__m256d v) {
  alignas(32) double lanes[4];
  _mm256_store_pd(lanes, v);
  return (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
}

double dot_avx2(const double* a, const double* b, std::size_t n);

// 2 x 4 block of dot products sharing the A and B row loads.
void gemm_nt_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  const std::size_t k4 = k - k % 4;
  std::size_t i = 0;
  for (; i + 2 <= m; i += 2) {
    const double* a0 = a + i * lda;
    const double* a1 = a0 + lda;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      const double* bj[4] = {b + j * ldb, b + (j + 1) * ldb, b + (j + 2) * ldb, b + (j + 3) * ldb};
      __m256d acc[2][4];
      for (auto& row : acc)
        for (auto& v : row) v = _mm256_setzero_pd();
      for (std::size_t r = 0; r < k4; r += 4) {
        const __m256d x0 = _mm256_loadu_pd(a0 + r);
        const __m256d x1 = _mm256_loadu_pd(a1 + r);
        for (int t = 0; t < 4; ++t) {
          const __m256d y = _mm256_loadu_pd(bj[t] + r);
          acc[0][t] = _mm256_fmadd_pd(x0, y, acc[0][t]);
          acc[1][t] = _mm256_fmadd_pd(x1, y, acc[1][t]);
        }
      }
      for (int t = 0; t < 4; ++t) {
        double s0 = hsum(acc[0][t]);
        double s1 = hsum(acc[1][t]);
        for (std::size_t r = k4; r < k; ++r) {
          s0 += a0[r] * bj[t][r];
          s1 += a1[r] * bj[t][r];
        }
        double* c0 = c + i * ldc + j + t;
        double* c1 = c0 + ldc;
        *c0 = accumulate ? *c0 + s0 : s0;
        *c1 = accumulate ? *c1 + s1 : s1;
      }
    }
    for (; j < n; ++j) {
      for (std::size_t ii = i; ii < i + 2; ++ii) {
        const double s = dot_avx2(a + ii * lda, b + j * ldb, k);
        double* cc = c + ii * ldc + j;
        *cc = accumulate ? *cc + s : s;
      }
    }
  }
  for (; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double s = dot_avx2(a + i * lda, b + j * ldb, k);
      double* cc = c + i * ldc + j;
      *cc = accumulate ? *cc + s : s;
    }
  }
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  }
  alignas(32) double lanes[4];
  _mm256_store_pd(lanes, _mm256_add_pd(acc0, acc1));
  double s = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d av = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

namespace detail {
const KernelTable& avx2_table() noexcept {
  static const KernelTable table{"avx2", &gemm_avx2, &gemm_nt_avx2, &gemm_tn_avx2, &dot_avx2, &axpy_avx2};
  return table;
}
}  // namespace detail

}  // namespace gtta::simd
