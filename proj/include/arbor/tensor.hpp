// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace arbor {

// Dense row-major tensor with a leading batch dimension. 64-bit storage by
// default so finite-difference gradient checks are meaningful.
struct Tensor {
  std::vector<std::int64_t> dims;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> d)
      : dims(std::move(d)),
        data(static_cast<std::size_t>(std::accumulate(
                 dims.begin(), dims.end(), std::int64_t(1),
                 [](std::int64_t a, std::int64_t b) { return a * b; })),
             0.0) {}

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  std::int64_t batch() const { return dims.empty() ? 0 : dims[0]; }
  // Elements per batch item.
  std::int64_t inner() const { return batch() ? size() / batch() : 0; }

  double* ptr() { return data.data(); }
  const double* ptr() const { return data.data(); }

  bool same_shape(const Tensor& o) const { return dims == o.dims; }
  std::string shape_string() const;
};

Tensor zeros_like(const Tensor& t);

}  // namespace arbor
