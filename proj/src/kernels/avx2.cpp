// Compiled with -mavx2 -mfma; only reached after a runtime CPU check.
#include <immintrin.h>

#include <cmath>

#include "gscollab/kernels/kernels.hpp"

namespace gscollab::kernels {
namespace {

// exp(x) for x in [-708, 0] to ~1 ulp: x = n ln2 + r with |r| <= ln2/2,
// degree-13 Taylor polynomial for e^r, scale by 2^n through the exponent.
inline __m256d exp_nonpositive(__m256d x) {
  const __m256d lo = _mm256_set1_pd(-708.0);
  x = _mm256_max_pd(x, lo);
  const __m256d log2e = _mm256_set1_pd(1.4426950408889634074);
  const __m256d ln2_hi = _mm256_set1_pd(6.93145751953125e-1);
  const __m256d ln2_lo = _mm256_set1_pd(1.42860682030941723212e-6);
  const __m256d n = _mm256_round_pd(_mm256_mul_pd(x, log2e), _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
  __m256d r = _mm256_fnmadd_pd(n, ln2_hi, x);
  r = _mm256_fnmadd_pd(n, ln2_lo, r);

  static constexpr double kInvFact[] = {
      1.0 / 6227020800.0, 1.0 / 479001600.0, 1.0 / 39916800.0, 1.0 / 3628800.0, 1.0 / 362880.0,
      1.0 / 40320.0,      1.0 / 5040.0,      1.0 / 720.0,      1.0 / 120.0,     1.0 / 24.0,
      1.0 / 6.0,          0.5,               1.0,              1.0};
  __m256d p = _mm256_set1_pd(kInvFact[0]);
  for (int i = 1; i < 14; ++i) p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(kInvFact[i]));

  // 2^n with n in [-1022, 0].
  const __m128i ni = _mm256_cvtpd_epi32(n);
  const __m256i e = _mm256_slli_epi64(_mm256_add_epi64(_mm256_cvtepi32_epi64(ni), _mm256_set1_epi64x(1023)), 52);
  return _mm256_mul_pd(p, _mm256_castsi256_pd(e));
}

void gaussian_row_avx2(const RowQuadratic& row, std::size_t n, double* out) {
  const __m256d q0 = _mm256_set1_pd(row.q0);
  const __m256d q1 = _mm256_set1_pd(row.q1);
  const __m256d q2 = _mm256_set1_pd(row.q2);
  const __m256d step = _mm256_set1_pd(row.step);
  const __m256d amp = _mm256_set1_pd(row.amplitude);
  const __m256d cutoff = _mm256_set1_pd(row.cutoff_sq);
  const __m256d neg_half = _mm256_set1_pd(-0.5);
  const __m256d lane = _mm256_set_pd(3.0, 2.0, 1.0, 0.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d idx = _mm256_add_pd(_mm256_set1_pd(static_cast<double>(i)), lane);
    const __m256d t = _mm256_fmadd_pd(idx, step, _mm256_set1_pd(row.t0));
    const __m256d q = _mm256_fmadd_pd(t, _mm256_fmadd_pd(q2, t, q1), q0);
    const __m256d w = _mm256_mul_pd(amp, exp_nonpositive(_mm256_mul_pd(neg_half, q)));
    const __m256d keep = _mm256_cmp_pd(q, cutoff, _CMP_LE_OQ);
    _mm256_storeu_pd(out + i, _mm256_and_pd(w, keep));
  }
  for (; i < n; ++i) {
    const double t = row.t0 + static_cast<double>(i) * row.step;
    const double q = row.q0 + t * (row.q1 + row.q2 * t);
    out[i] = q <= row.cutoff_sq ? row.amplitude * std::exp(-0.5 * q) : 0.0;
  }
}

void axpy_avx2(std::size_t n, double alpha, const double* x, double* y) {
  const __m256d a = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(a, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

double dot_avx2(std::size_t n, const double* x, const double* y) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

void gemm_nt_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * lda;
    double* ci = c + i * ldc;
    std::size_t j = 0;
    // One row of A against four rows of B.
    for (; j + 4 <= n; j += 4) {
      const double* b0 = b + j * ldb;
      const double* b1 = b0 + ldb;
      const double* b2 = b1 + ldb;
      const double* b3 = b2 + ldb;
      __m256d s0 = _mm256_setzero_pd(), s1 = _mm256_setzero_pd();
      __m256d s2 = _mm256_setzero_pd(), s3 = _mm256_setzero_pd();
      std::size_t p = 0;
      for (; p + 4 <= k; p += 4) {
        const __m256d av = _mm256_loadu_pd(ai + p);
        s0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b0 + p), s0);
        s1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b1 + p), s1);
        s2 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b2 + p), s2);
        s3 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b3 + p), s3);
      }
      double r0 = hsum(s0), r1 = hsum(s1), r2 = hsum(s2), r3 = hsum(s3);
      for (; p < k; ++p) {
        r0 += ai[p] * b0[p];
        r1 += ai[p] * b1[p];
        r2 += ai[p] * b2[p];
        r3 += ai[p] * b3[p];
      }
      if (accumulate) {
        ci[j] += r0, ci[j + 1] += r1, ci[j + 2] += r2, ci[j + 3] += r3;
      } else {
        ci[j] = r0, ci[j + 1] = r1, ci[j + 2] = r2, ci[j + 3] = r3;
      }
    }
    for (; j < n; ++j) {
      const double r = dot_avx2(k, ai, b + j * ldb);
      ci[j] = accumulate ? ci[j] + r : r;
    }
  }
}

void gemm_nn_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double* c, std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * lda + p];
      if (aip == 0.0) continue;
      axpy_avx2(n, aip, b + p * ldb, c + i * ldc);
    }
  }
}

void gemm_tn_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double* c, std::size_t ldc) {
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t i = 0; i < m; ++i) {
      const double api = a[p * lda + i];
      if (api == 0.0) continue;
      axpy_avx2(n, api, b + p * ldb, c + i * ldc);
    }
  }
}

}  // namespace

const KernelTable* avx2_table() {
  static const KernelTable table{Isa::Avx2, "avx2",       gaussian_row_avx2, axpy_avx2,
                                 dot_avx2,  gemm_nt_avx2, gemm_nn_avx2,      gemm_tn_avx2};
  return &table;
}

}  // namespace gscollab::kernels
