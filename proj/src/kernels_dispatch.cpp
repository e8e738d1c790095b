// SPDX-License-Identifier: Apache-2.0
#include <cstdlib>
#include <cstring>

#include "arbor/kernels.hpp"

namespace arbor::kernels {

const KernelTable& avx2_table();  // kernels_avx2.cpp

bool avx2_supported() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

namespace {

const KernelTable& choose() {
  const char* forced = std::getenv("ARBOR_KERNELS");
  if (forced && std::strcmp(forced, "scalar") == 0) return scalar_table();
  if (avx2_supported()) return avx2_table();
  return scalar_table();
}

}  // namespace

const KernelTable& active() {
  static const KernelTable& table = choose();
  return table;
}

}  // namespace arbor::kernels
