// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

namespace arbor::kernels {

// Numeric inner loops behind the interpreter. Every kernel has a scalar
// reference implementation and may have an AVX2 variant; the active table
// is chosen once at startup from CPUID (override with ARBOR_KERNELS=scalar).
// Variants are equivalence-tested against the scalar reference.

struct KernelTable {
  const char* name;

  // C[m,n] (+)= A[m,k] * B[k,n]; B accessed transposed when trans_b.
  void (*gemm_nn)(const double* a, const double* b, double* c, std::int64_t m,
                  std::int64_t k, std::int64_t n, bool accumulate);
  // C[m,n] (+)= A[m,k] * B[n,k]^T.
  void (*gemm_nt)(const double* a, const double* b, double* c, std::int64_t m,
                  std::int64_t k, std::int64_t n, bool accumulate);
  // C[k,n] (+)= A[m,k]^T * B[m,n].
  void (*gemm_tn)(const double* a, const double* b, double* c, std::int64_t m,
                  std::int64_t k, std::int64_t n, bool accumulate);

  void (*add)(const double* x, const double* y, double* out, std::int64_t n);
  void (*axpy)(double alpha, const double* x, double* y, std::int64_t n);
  void (*scale)(double alpha, double* x, std::int64_t n);
  void (*leaky_relu)(const double* x, double* out, std::int64_t n, double slope);
  // Accumulates into gin (backward passes sum over consumers).
  void (*leaky_relu_grad)(const double* x, const double* gout, double* gin,
                          std::int64_t n, double slope);
  // Row-wise softmax over the last dimension.
  void (*softmax_rows)(const double* x, double* out, std::int64_t rows,
                       std::int64_t cols);
  double (*sum)(const double* x, std::int64_t n);
  double (*dot)(const double* x, const double* y, std::int64_t n);
};

const KernelTable& active();
const KernelTable& scalar_table();
bool avx2_supported();

}  // namespace arbor::kernels
