// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "arbor/shape.hpp"
#include "arbor/tensor.hpp"

namespace arbor {

struct Dataset {
  Tensor inputs;                 // (N, ...feature dims)
  std::vector<int> labels;       // N entries in [0, classes)
};

// Built-in deterministic classification tasks. Regeneration from
// (task_id, seed) is byte-identical.
struct SyntheticTask {
  std::string task_id;
  std::uint64_t seed = 0;
  ShapeState input_state;
  int num_classes = 0;
  Dataset train;  // 2048 samples
  Dataset val;    // 512 samples
};

// task_id is one of:
//   im-patterns  3x16x16 images, 4 classes of 2D sinusoid orientation
//   col-motifs   32x8 token sequences, 5 classes of planted motifs
//   1d-waves     64x1 sequences, 3 classes of base frequency
// Throws std::invalid_argument for unknown ids.
SyntheticTask make_synthetic_task(const std::string& task_id, std::uint64_t seed);

std::vector<std::string> synthetic_task_ids();

}  // namespace arbor
