// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>

#include "arbor/kernels.hpp"

namespace arbor::kernels {
namespace scalar {

void gemm_nn(const double* a, const double* b, double* c, std::int64_t m,
             std::int64_t k, std::int64_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      if (av == 0.0) continue;
      const double* brow = b + kk * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nt(const double* a, const double* b, double* c, std::int64_t m,
             std::int64_t k, std::int64_t n, bool accumulate) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      crow[j] = accumulate ? crow[j] + acc : acc;
    }
  }
}

void gemm_tn(const double* a, const double* b, double* c, std::int64_t m,
             std::int64_t k, std::int64_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + k * n, 0.0);
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      if (av == 0.0) continue;
      double* crow = c + kk * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void add(const double* x, const double* y, double* out, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) out[i] = x[i] + y[i];
}

void axpy(double alpha, const double* x, double* y, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale(double alpha, double* x, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) x[i] *= alpha;
}

void leaky_relu(const double* x, double* out, std::int64_t n, double slope) {
  for (std::int64_t i = 0; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : slope * x[i];
}

void leaky_relu_grad(const double* x, const double* gout, double* gin,
                     std::int64_t n, double slope) {
  for (std::int64_t i = 0; i < n; ++i)
    gin[i] += x[i] > 0.0 ? gout[i] : slope * gout[i];
}

void softmax_rows(const double* x, double* out, std::int64_t rows,
                  std::int64_t cols) {
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
    for (std::int64_t j = 0; j < cols; ++j) oi[j] *= inv;
  }
}

double sum(const double* x, std::int64_t n) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

double dot(const double* x, const double* y, std::int64_t n) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

}  // namespace scalar

const KernelTable& scalar_table() {
  static const KernelTable table = {
      "scalar",
      scalar::gemm_nn,
      scalar::gemm_nt,
      scalar::gemm_tn,
      scalar::add,
      scalar::axpy,
      scalar::scale,
      scalar::leaky_relu,
      scalar::leaky_relu_grad,
      scalar::softmax_rows,
      scalar::sum,
      scalar::dot,
  };
  return table;
}

}  // namespace arbor::kernels
