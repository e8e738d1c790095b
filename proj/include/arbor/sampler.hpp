// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <vector>

#include "arbor/grammar.hpp"
#include "arbor/rng.hpp"
#include "arbor/tree.hpp"

namespace arbor {

struct SampleLimits {
  std::int64_t max_nodes = 2000;
  std::int64_t max_parameters = 50'000'000;
  std::int64_t max_feature_elements = std::int64_t(1) << 24;
  int max_backtracks = 10'000;
  int max_mutation_retries = 50;
  std::int64_t max_depth = 100'000;

  ResourceLimits resource_limits() const {
    return ResourceLimits{max_nodes, max_parameters, max_feature_elements,
                          max_depth};
  }
};

// Probability-weighted sampling with backtracking. At every decision point
// the applicable rules are drawn without replacement in probability-
// proportional order (Gumbel-top-k); a shape or budget failure discards the
// current choice and takes the next untried rule, and a node whose rules
// are exhausted fails up to its parent's choice. Returns nullopt when the
// backtrack budget runs out; never returns an invalid tree.
std::optional<ArchitectureTree> sample(const Grammar& grammar,
                                       const ShapeState& input_state, Rng& rng,
                                       const SampleLimits& limits = {});

// Three-step mutation: pick a node uniformly at random, regenerate the
// subtree rooted there from the node's inherited shape state, revalidate
// the whole tree. Retries up to limits.max_mutation_retries before giving
// up (nullopt).
std::optional<ArchitectureTree> mutate(const ArchitectureTree& tree,
                                       const Grammar& grammar, Rng& rng,
                                       const SampleLimits& limits = {});

// Deterministic-target variant used by mutate() and by tests.
std::optional<ArchitectureTree> mutate_at(const ArchitectureTree& tree,
                                          int node_id, const Grammar& grammar,
                                          Rng& rng,
                                          const SampleLimits& limits = {});

// n independent valid samples; throws std::runtime_error if an individual
// cannot be produced after internal retries.
std::vector<ArchitectureTree> random_population(const Grammar& grammar,
                                                const ShapeState& input_state,
                                                int n, Rng& rng,
                                                const SampleLimits& limits = {});

}  // namespace arbor
