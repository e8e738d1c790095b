// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "arbor/tree.hpp"

namespace arbor {

// Hand-built derivation trees of known architectures, used as evolution
// seeds and as executable documentation of what the grammar can express.
struct SeedDescriptor {
  std::string name;
  std::string description;
  ShapeState default_input;
  int default_classes = 10;
  std::function<ArchitectureTree(const ShapeState&)> builder;
  // Published parameter total and relative tolerance, when one is pinned.
  std::optional<std::pair<std::int64_t, double>> reference_params;
};

const std::vector<SeedDescriptor>& seed_library();
const SeedDescriptor* find_seed(const std::string& name);

// Builds a seed for its default (or a caller-provided) input state; shapes
// come back inferred.
ArchitectureTree build_seed(const std::string& name,
                            std::optional<ShapeState> input = std::nullopt,
                            std::optional<HeadDescriptor> head = std::nullopt);

// The traditional convolutional block with a skip connection; requires the
// input channel count to equal `channels` so the residual add typechecks.
ArchitectureTree conv_block_skip_seed(int channels, const ShapeState& input);

// Stem convolution to `width` channels followed by the skip block; runs on
// any Im input, used to seed evolution on image tasks.
ArchitectureTree conv_net_seed(int width, const ShapeState& input);

ArchitectureTree resnet18_seed(const ShapeState& input);
ArchitectureTree wrn16_4_seed(const ShapeState& input);
ArchitectureTree vit_seed(const ShapeState& input);
ArchitectureTree mixer_seed(const ShapeState& input);

}  // namespace arbor
