#include "gtta/simd/kernels.hpp"

namespace gtta::simd {
namespace {

void gemm_scalar(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                 const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * ldc;
    if (!accumulate) {
      for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    }
    const double* arow = a + i * lda;
    for (std::size_t r = 0; r < k; ++r) {
      const double av = arow[r];
      const double* brow = b + r * ldb;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nt_scalar(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                    const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < k; ++r) s += a[i * lda + r] * b[j * ldb + r];
      c[i * ldc + j] = accumulate ? c[i * ldc + j] + s : s;
    }
  }
}

void gemm_tn_scalar(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                    const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] = 0.0;
  }
  for (std::size_t r = 0; r < k; ++r) {
    const double* brow = b + r * ldb;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a[r * lda + i];
      double* crow = c + i * ldc;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

double dot_scalar(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

const KernelTable& scalar_kernels() noexcept {
  static const KernelTable table{"scalar", &gemm_scalar, &gemm_nt_scalar, &gemm_tn_scalar, &dot_scalar, &axpy_scalar};
  return table;
}

}  // namespace gtta::simd
