#pragma once

#include <cblas.h>

#include <cstddef>

namespace mat::blas {

// Row-major C = alpha * op(A) * op(B) + beta * C. Large products go to
// OpenBLAS; tiny ones (per-head attention) use a plain loop, which avoids the
// call overhead. The path depends only on the sizes, so results for a given
// shape are reproducible.

template <class T>
void naive_gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, T alpha,
                const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c,
                std::size_t ldc) {
  if (!ta && tb) {
    // Both operands are read along contiguous rows: plain dot products.
    for (std::size_t i = 0; i < m; ++i) {
      const T* arow = a + i * lda;
      T* crow = c + i * ldc;
      for (std::size_t j = 0; j < n; ++j) {
        const T* brow = b + j * ldb;
        T acc{0};
        for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        crow[j] = (beta == T{0} ? T{0} : beta * crow[j]) + alpha * acc;
      }
    }
    return;
  }
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * ldc;
    if (beta == T{0}) {
      for (std::size_t j = 0; j < n; ++j) crow[j] = T{0};
    } else if (beta != T{1}) {
      for (std::size_t j = 0; j < n; ++j) crow[j] *= beta;
    }
    for (std::size_t p = 0; p < k; ++p) {
      const T av = alpha * (ta ? a[p * lda + i] : a[i * lda + p]);
      if (tb) {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * ldb + p];
      } else {
        const T* brow = b + p * ldb;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

inline void blas_gemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda,
                      const float* b, int ldb, float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
              k, alpha, a, lda, b, ldb, beta, c, ldc);
}

inline void blas_gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a,
                      int lda, const double* b, int ldb, double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
              k, alpha, a, lda, b, ldb, beta, c, ldc);
}

inline constexpr std::size_t kSmallGemmWork = 8192;

template <class T>
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
  if (m * n * k <= kSmallGemmWork) {
    naive_gemm(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
    return;
  }
  blas_gemm(ta, tb, static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
            static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

}  // namespace mat::blas
