// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <vector>

#include <doctest.h>

#include "arbor/kernels.hpp"
#include "arbor/rng.hpp"

using namespace arbor;
namespace kn = arbor::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

bool close(const std::vector<double>& a, const std::vector<double>& b,
           double tol = 1e-12) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max({1.0, std::abs(a[i]), std::abs(b[i])});
    if (std::abs(a[i] - b[i]) > tol * scale) return false;
  }
  return true;
}

}  // namespace

// The dispatched table must agree with the scalar reference on random
// inputs. On machines without AVX2 both tables are the same object and the
// checks are trivially true.
TEST_CASE("dispatched kernels match the scalar reference") {
  const auto& scalar = kn::scalar_table();
  const auto& fast = kn::active();
  Rng rng(99);

  SUBCASE("gemm variants") {
    for (int trial = 0; trial < 30; ++trial) {
      const std::int64_t m = 1 + rng.uniform_int(17);
      const std::int64_t k = 1 + rng.uniform_int(23);
      const std::int64_t n = 1 + rng.uniform_int(19);
      auto a = random_vec(static_cast<std::size_t>(m * k), rng);
      auto b_nn = random_vec(static_cast<std::size_t>(k * n), rng);
      auto b_nt = random_vec(static_cast<std::size_t>(n * k), rng);
      auto b_tn = random_vec(static_cast<std::size_t>(m * n), rng);

      std::vector<double> c1(static_cast<std::size_t>(m * n), 1.0), c2 = c1;
      scalar.gemm_nn(a.data(), b_nn.data(), c1.data(), m, k, n, true);
      fast.gemm_nn(a.data(), b_nn.data(), c2.data(), m, k, n, true);
      CHECK(close(c1, c2));

      std::vector<double> d1(static_cast<std::size_t>(m * n), 0.5), d2 = d1;
      scalar.gemm_nt(a.data(), b_nt.data(), d1.data(), m, k, n, true);
      fast.gemm_nt(a.data(), b_nt.data(), d2.data(), m, k, n, true);
      CHECK(close(d1, d2));

      std::vector<double> e1(static_cast<std::size_t>(k * n), 0.0), e2 = e1;
      scalar.gemm_tn(a.data(), b_tn.data(), e1.data(), m, k, n, false);
      fast.gemm_tn(a.data(), b_tn.data(), e2.data(), m, k, n, false);
      CHECK(close(e1, e2));
    }
  }

  SUBCASE("elementwise and reductions") {
    for (std::size_t n : {1ul, 3ul, 4ul, 7ul, 64ul, 1001ul}) {
      auto x = random_vec(n, rng);
      auto y = random_vec(n, rng);

      std::vector<double> o1(n), o2(n);
      scalar.add(x.data(), y.data(), o1.data(), static_cast<std::int64_t>(n));
      fast.add(x.data(), y.data(), o2.data(), static_cast<std::int64_t>(n));
      CHECK(close(o1, o2));

      auto y1 = y, y2 = y;
      scalar.axpy(0.37, x.data(), y1.data(), static_cast<std::int64_t>(n));
      fast.axpy(0.37, x.data(), y2.data(), static_cast<std::int64_t>(n));
      CHECK(close(y1, y2));

      auto s1 = x, s2 = x;
      scalar.scale(-1.25, s1.data(), static_cast<std::int64_t>(n));
      fast.scale(-1.25, s2.data(), static_cast<std::int64_t>(n));
      CHECK(close(s1, s2));

      scalar.leaky_relu(x.data(), o1.data(), static_cast<std::int64_t>(n), 0.01);
      fast.leaky_relu(x.data(), o2.data(), static_cast<std::int64_t>(n), 0.01);
      CHECK(close(o1, o2));

      scalar.leaky_relu_grad(x.data(), y.data(), o1.data(),
                             static_cast<std::int64_t>(n), 0.01);
      fast.leaky_relu_grad(x.data(), y.data(), o2.data(),
                           static_cast<std::int64_t>(n), 0.01);
      CHECK(close(o1, o2));

      CHECK(scalar.sum(x.data(), static_cast<std::int64_t>(n)) ==
            doctest::Approx(fast.sum(x.data(), static_cast<std::int64_t>(n)))
                .epsilon(1e-12));
      CHECK(scalar.dot(x.data(), y.data(), static_cast<std::int64_t>(n)) ==
            doctest::Approx(fast.dot(x.data(), y.data(), static_cast<std::int64_t>(n)))
                .epsilon(1e-12));
    }
  }

  SUBCASE("softmax rows") {
    for (int trial = 0; trial < 10; ++trial) {
      const std::int64_t rows = 1 + rng.uniform_int(9);
      const std::int64_t cols = 1 + rng.uniform_int(33);
      auto x = random_vec(static_cast<std::size_t>(rows * cols), rng);
      std::vector<double> o1(x.size()), o2(x.size());
      scalar.softmax_rows(x.data(), o1.data(), rows, cols);
      fast.softmax_rows(x.data(), o2.data(), rows, cols);
      CHECK(close(o1, o2));
      for (std::int64_t r = 0; r < rows; ++r) {
        double total = 0.0;
        for (std::int64_t c = 0; c < cols; ++c) total += o1[static_cast<std::size_t>(r * cols + c)];
        CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("gemm reference correctness on a hand case") {
  // (2x3) x (3x2)
  const double a[] = {1, 2, 3, 4, 5, 6};
  const double b[] = {7, 8, 9, 10, 11, 12};
  double c[4];
  kn::scalar_table().gemm_nn(a, b, c, 2, 3, 2, false);
  CHECK(c[0] == 58);
  CHECK(c[1] == 64);
  CHECK(c[2] == 139);
  CHECK(c[3] == 154);

  // A (2x3), B stored as (2x3), C = A B^T is 2x2.
  double ct[4];
  kn::scalar_table().gemm_nt(a, b, ct, 2, 3, 2, false);
  CHECK(ct[0] == 1 * 7 + 2 * 8 + 3 * 9);
  CHECK(ct[1] == 1 * 10 + 2 * 11 + 3 * 12);

  // C = A^T B with A (2x3), B (2x2) gives 3x2.
  const double b2[] = {1, 2, 3, 4};
  double ctn[6];
  kn::scalar_table().gemm_tn(a, b2, ctn, 2, 3, 2, false);
  CHECK(ctn[0] == 1 * 1 + 4 * 3);
  CHECK(ctn[1] == 1 * 2 + 4 * 4);
  CHECK(ctn[4] == 3 * 1 + 6 * 3);
}
