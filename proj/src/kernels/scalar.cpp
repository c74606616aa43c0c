#include <cmath>

#include "gscollab/kernels/kernels.hpp"

namespace gscollab::kernels {
namespace {

void gaussian_row_scalar(const RowQuadratic& row, std::size_t n, double* out) {
  for (std::size_t i = 0; i < n; ++i) {
    const double t = row.t0 + static_cast<double>(i) * row.step;
    const double q = row.q0 + t * (row.q1 + row.q2 * t);
    out[i] = q <= row.cutoff_sq ? row.amplitude * std::exp(-0.5 * q) : 0.0;
  }
}

void axpy_scalar(std::size_t n, double alpha, const double* x, double* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

double dot_scalar(std::size_t n, const double* x, const double* y) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

void gemm_nt_scalar(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                    const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * lda + p] * b[j * ldb + p];
      c[i * ldc + j] = accumulate ? c[i * ldc + j] + acc : acc;
    }
  }
}

void gemm_nn_scalar(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                    const double* b, std::size_t ldb, double* c, std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * lda + p];
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] += aip * b[p * ldb + j];
    }
  }
}

void gemm_tn_scalar(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                    const double* b, std::size_t ldb, double* c, std::size_t ldc) {
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t i = 0; i < m; ++i) {
      const double api = a[p * lda + i];
      if (api == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] += api * b[p * ldb + j];
    }
  }
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table{Isa::Scalar,      "scalar",       gaussian_row_scalar, axpy_scalar,
                                 dot_scalar,       gemm_nt_scalar, gemm_nn_scalar,      gemm_tn_scalar};
  return table;
}

}  // namespace gscollab::kernels
