#pragma once

#include <cstddef>

namespace gtta::simd {

// Dense double-precision inner loops. Every table entry has a scalar reference
// and may have a vectorized variant; the active table is picked once per
// process from the CPU feature set (override with GTTA_SIMD=scalar).
struct KernelTable {
  const char* name;

  // C[m x n] = (accumulate ? C : 0) + A[m x k] * B[k x n], row-major with
  // leading dimensions lda/ldb/ldc.
  void (*gemm)(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
               const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);
  // C[m x n] (+)= A[m x k] * B^T with B stored [n x k].
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);
  // C[m x n] (+)= A^T * B[k x n] with A stored [k x m].
  void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);

  double (*dot)(const double* a, const double* b, std::size_t n);

  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
};

const KernelTable& scalar_kernels() noexcept;

// nullptr when the binary was built without AVX2 support or the CPU lacks
// AVX2+FMA.
const KernelTable* avx2_kernels() noexcept;

const KernelTable& active_kernels() noexcept;

}  // namespace gtta::simd
