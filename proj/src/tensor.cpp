// SPDX-License-Identifier: Apache-2.0
#include "arbor/tensor.hpp"

#include <sstream>

namespace arbor {

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) os << ",";
    os << dims[i];
  }
  os << ")";
  return os.str();
}

Tensor zeros_like(const Tensor& t) { return Tensor(t.dims); }

}  // namespace arbor
