// SPDX-License-Identifier: Apache-2.0
// AVX2+FMA variants of the hot kernels. This translation unit is the only
// one compiled with -mavx2 -mfma; callers must route through the dispatch
// table so unsupported machines never reach this code.
#include <algorithm>
#include <cmath>
#include <immintrin.h>

#include "arbor/kernels.hpp"

namespace arbor::kernels {
namespace avx2 {

namespace {

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d shuf = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, shuf));
}

}  // namespace

void gemm_nn(const double* a, const double* b, double* c, std::int64_t m,
             std::int64_t k, std::int64_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  const std::int64_t n4 = n & ~std::int64_t(3);
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      if (av == 0.0) continue;
      const double* brow = b + kk * n;
      const __m256d avv = _mm256_set1_pd(av);
      std::int64_t j = 0;
      for (; j < n4; j += 4) {
        __m256d cv = _mm256_loadu_pd(crow + j);
        cv = _mm256_fmadd_pd(avv, _mm256_loadu_pd(brow + j), cv);
        _mm256_storeu_pd(crow + j, cv);
      }
      for (; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nt(const double* a, const double* b, double* c, std::int64_t m,
             std::int64_t k, std::int64_t n, bool accumulate) {
  const std::int64_t k4 = k & ~std::int64_t(3);
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      __m256d acc = _mm256_setzero_pd();
      std::int64_t kk = 0;
      for (; kk < k4; kk += 4)
        acc = _mm256_fmadd_pd(_mm256_loadu_pd(arow + kk),
                              _mm256_loadu_pd(brow + kk), acc);
      double tail = 0.0;
      for (; kk < k; ++kk) tail += arow[kk] * brow[kk];
      const double val = hsum(acc) + tail;
      crow[j] = accumulate ? crow[j] + val : val;
    }
  }
}

void gemm_tn(const double* a, const double* b, double* c, std::int64_t m,
             std::int64_t k, std::int64_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + k * n, 0.0);
  const std::int64_t n4 = n & ~std::int64_t(3);
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      if (av == 0.0) continue;
      double* crow = c + kk * n;
      const __m256d avv = _mm256_set1_pd(av);
      std::int64_t j = 0;
      for (; j < n4; j += 4) {
        __m256d cv = _mm256_loadu_pd(crow + j);
        cv = _mm256_fmadd_pd(avv, _mm256_loadu_pd(brow + j), cv);
        _mm256_storeu_pd(crow + j, cv);
      }
      for (; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void add(const double* x, const double* y, double* out, std::int64_t n) {
  std::int64_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i,
                     _mm256_add_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) out[i] = x[i] + y[i];
}

void axpy(double alpha, const double* x, double* y, std::int64_t n) {
  const __m256d av = _mm256_set1_pd(alpha);
  std::int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d yv = _mm256_loadu_pd(y + i);
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), yv));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale(double alpha, double* x, std::int64_t n) {
  const __m256d av = _mm256_set1_pd(alpha);
  std::int64_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(x + i, _mm256_mul_pd(av, _mm256_loadu_pd(x + i)));
  for (; i < n; ++i) x[i] *= alpha;
}

void leaky_relu(const double* x, double* out, std::int64_t n, double slope) {
  const __m256d zero = _mm256_setzero_pd();
  const __m256d sl = _mm256_set1_pd(slope);
  std::int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d xv = _mm256_loadu_pd(x + i);
    __m256d mask = _mm256_cmp_pd(xv, zero, _CMP_GT_OQ);
    _mm256_storeu_pd(out + i,
                     _mm256_blendv_pd(_mm256_mul_pd(sl, xv), xv, mask));
  }
  for (; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : slope * x[i];
}

void leaky_relu_grad(const double* x, const double* gout, double* gin,
                     std::int64_t n, double slope) {
  const __m256d zero = _mm256_setzero_pd();
  const __m256d sl = _mm256_set1_pd(slope);
  std::int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d xv = _mm256_loadu_pd(x + i);
    __m256d gv = _mm256_loadu_pd(gout + i);
    __m256d mask = _mm256_cmp_pd(xv, zero, _CMP_GT_OQ);
    __m256d acc = _mm256_loadu_pd(gin + i);
    _mm256_storeu_pd(gin + i,
                     _mm256_add_pd(acc, _mm256_blendv_pd(_mm256_mul_pd(sl, gv), gv, mask)));
  }
  for (; i < n; ++i) gin[i] += x[i] > 0.0 ? gout[i] : slope * gout[i];
}

void softmax_rows(const double* x, double* out, std::int64_t rows,
                  std::int64_t cols) {
  // exp() dominates; vectorising the max/sum passes is not worth a custom
  // exp approximation that would break scalar equivalence.
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xi = x + r * cols;
    double* oi = out + r * cols;
    double mx = xi[0];
    for (std::int64_t j = 1; j < cols; ++j) mx = std::max(mx, xi[j]);
    double total = 0.0;
    for (std::int64_t j = 0; j < cols; ++j) {
      oi[j] = std::exp(xi[j] - mx);
      total += oi[j];
    }
    const double inv = 1.0 / total;
    scale(inv, oi, cols);
  }
}

double sum(const double* x, std::int64_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::int64_t i = 0;
  for (; i + 4 <= n; i += 4) acc = _mm256_add_pd(acc, _mm256_loadu_pd(x + i));
  double tail = 0.0;
  for (; i < n; ++i) tail += x[i];
  return hsum(acc) + tail;
}

double dot(const double* x, const double* y, std::int64_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::int64_t i = 0;
  for (; i + 4 <= n; i += 4)
    acc = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc);
  double tail = 0.0;
  for (; i < n; ++i) tail += x[i] * y[i];
  return hsum(acc) + tail;
}

}  // namespace avx2

const KernelTable& avx2_table() {
  static const KernelTable table = {
      "avx2",
      avx2::gemm_nn,
      avx2::gemm_nt,
      avx2::gemm_tn,
      avx2::add,
      avx2::axpy,
      avx2::scale,
      avx2::leaky_relu,
      avx2::leaky_relu_grad,
      avx2::softmax_rows,
      avx2::sum,
      avx2::dot,
  };
  return table;
}

}  // namespace arbor::kernels
