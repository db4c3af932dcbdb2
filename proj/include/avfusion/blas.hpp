#pragma once

// Thin row-major GEMM shim. float goes to CBLAS; double goes to Eigen,
// because the AVX-512 dgemm kernels of OpenBLAS 0.3.20 return wrong
// results for some wide shapes (n around 400, m >= 8) on Cooper Lake.

#include <cblas.h>

#include <Eigen/Core>

#include <cstddef>

namespace avf::blas {

template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc);

template <>
inline void gemm<float>(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, float alpha,
                        const float* a, std::size_t lda, const float* b, std::size_t ldb, float beta, float* c,
                        std::size_t ldc) {
  if (m == 0 || n == 0) return;
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda), b,
              static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

template <>
inline void gemm<double>(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
                         const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta, double* c,
                         std::size_t ldc) {
  if (m == 0 || n == 0) return;
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Stride = Eigen::OuterStride<>;
  using CMap = Eigen::Map<const Mat, 0, Stride>;
  const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  Eigen::Map<Mat, 0, Stride> cm(c, ei(m), ei(n), Stride(ei(ldc)));
  if (beta == 0.0)
    cm.setZero();
  else if (beta != 1.0)
    cm *= beta;
  if (k == 0) return;
  const CMap am(a, trans_a ? ei(k) : ei(m), trans_a ? ei(m) : ei(k), Stride(ei(lda)));
  const CMap bm(b, trans_b ? ei(n) : ei(k), trans_b ? ei(k) : ei(n), Stride(ei(ldb)));
  if (trans_a && trans_b)
    cm.noalias() += alpha * am.transpose() * bm.transpose();
  else if (trans_a)
    cm.noalias() += alpha * am.transpose() * bm;
  else if (trans_b)
    cm.noalias() += alpha * am * bm.transpose();
  else
    cm.noalias() += alpha * am * bm;
}

}  // namespace avf::blas
