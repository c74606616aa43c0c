#pragma once

// Data-parallel inner loops. Each entry has a scalar reference
// implementation and, on x86-64, an AVX2+FMA variant. The active table is
// chosen once at first use from the CPU's capabilities; the environment
// variable GSCOLLAB_KERNELS=scalar|avx2 overrides the choice.

#include <cstddef>
#include <string_view>

namespace gscollab::kernels {

/// Gaussian weights along one grid row. For sample i the offset from the
/// mean along the row axis is t_i = t0 + i * step and the squared
/// Mahalanobis distance is q_i = q0 + t_i * (q1 + q2 * t_i). The kernel
/// writes out[i] = amplitude * exp(-q_i / 2) when q_i <= cutoff_sq, else 0.
struct RowQuadratic {
  double q0 = 0.0;
  double q1 = 0.0;
  double q2 = 0.0;
  double t0 = 0.0;
  double step = 1.0;
  double amplitude = 1.0;
  double cutoff_sq = 0.0;
};

using GaussianRowFn = void (*)(const RowQuadratic& row, std::size_t n, double* out);
/// y += alpha * x
using AxpyFn = void (*)(std::size_t n, double alpha, const double* x, double* y);
using DotFn = double (*)(std::size_t n, const double* x, const double* y);
/// C(m x n) (+)= A(m x k) * B(n x k)^T. Row-major with leading dimensions.
using GemmNtFn = void (*)(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                          const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);
/// C(m x n) += A(m x k) * B(k x n).
using GemmNnFn = void (*)(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                          const double* b, std::size_t ldb, double* c, std::size_t ldc);
/// C(m x n) += A(k x m)^T * B(k x n).
using GemmTnFn = void (*)(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                          const double* b, std::size_t ldb, double* c, std::size_t ldc);

enum class Isa { Scalar, Avx2 };

struct KernelTable {
  Isa isa;
  std::string_view name;
  GaussianRowFn gaussian_row;
  AxpyFn axpy;
  DotFn dot;
  GemmNtFn gemm_nt;
  GemmNnFn gemm_nn;
  GemmTnFn gemm_tn;
};

const KernelTable& scalar_table();
/// nullptr when the library was built without the AVX2 translation unit.
const KernelTable* avx2_table();

bool isa_supported(Isa isa);
Isa best_isa();

/// The active table.
const KernelTable& active();
/// Switches the active table; throws InvalidArgument if the ISA is not
/// available on this build or CPU.
void select(Isa isa);

/// RAII override of the active table, restored on destruction.
class ScopedIsa {
 public:
  explicit ScopedIsa(Isa isa);
  ~ScopedIsa();
  ScopedIsa(const ScopedIsa&) = delete;
  ScopedIsa& operator=(const ScopedIsa&) = delete;

 private:
  Isa previous_;
};

}  // namespace gscollab::kernels
