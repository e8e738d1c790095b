// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "arbor/grammar.hpp"
#include "arbor/shape.hpp"

namespace arbor {

// One node of a derivation tree. Internal nodes carry a nonterminal symbol
// and the index of the production rule chosen for it; leaves carry the
// terminal operation. Nodes are plain values, so copying a node deep-copies
// the subtree.
//
// Children follow the chosen rule's right-hand side, with one exception:
// a branching module with b=2 stores two inner-module children
// [B, M, M, A], while b in {4,8} stores the shared inner module once
// [B, M, A] and replicates it logically at interpretation time.
struct DerivationNode {
  Symbol symbol;
  int rule_index = -1;  // -1 for leaves
  std::vector<DerivationNode> children;
  std::optional<ShapeState> in_state;
  std::optional<ShapeState> out_state;
  int node_id = 0;

  bool is_leaf() const { return std::holds_alternative<TerminalSpec>(symbol); }
  const TerminalSpec& terminal() const { return std::get<TerminalSpec>(symbol); }
  Nonterminal nonterminal() const { return std::get<Nonterminal>(symbol); }
};

enum class TaskKind { Classification, Dense };

const char* task_kind_name(TaskKind k);

// What the fixed network head should produce: a logit vector for
// classification, or a channel-mapped spatial map for dense prediction.
struct HeadDescriptor {
  TaskKind kind = TaskKind::Classification;
  int num_classes = 0;
  std::vector<std::int64_t> target_shape;  // dense: (C, H, W)

  bool operator==(const HeadDescriptor&) const = default;
};

struct ArchitectureTree {
  DerivationNode root;
  ShapeState input_state;
  HeadDescriptor head;
  GrammarVariant variant = GrammarVariant::TwoD;
  double stop_probability = 0.32;
};

// Depth-first preorder node-id assignment. Call after any structural edit;
// ids are only stable within one tree value.
void renumber_nodes(ArchitectureTree& tree);

std::size_t node_count(const ArchitectureTree& tree);
int tree_depth(const ArchitectureTree& tree);

DerivationNode* find_node(ArchitectureTree& tree, int node_id);
const DerivationNode* find_node(const ArchitectureTree& tree, int node_id);

struct InferError {
  int node_id = -1;
  ShapeError cause;
  std::string to_string() const;
};

// Annotates every node with in/out shape states by threading the input
// state through the module structure. On failure reports the offending
// node and the shape-level cause.
ShapeResult<ShapeState> infer_shapes(ArchitectureTree& tree);
ShapeResult<ShapeState> infer_shapes(ArchitectureTree& tree, InferError& err_out);

struct LeafStringOptions {
  bool hyperparams = true;        // "im2col(k=3,s=1,p=1)" vs "im2col"
  bool replication_markers = true;  // wrap b in {4,8} shared subtrees in xN[ ... ]
};

// Depth-first left-to-right leaf sequence. Shared branches of b in {4,8}
// modules appear once, wrapped in replication markers when enabled.
std::vector<std::string> leaves_string(const ArchitectureTree& tree,
                                       const LeafStringOptions& opts = {});

// Leaf terminals in execution order (stored convention, no replication).
std::vector<const DerivationNode*> leaf_nodes(const ArchitectureTree& tree);

// Lossless JSON round trip ("tree_schema": 1). Deserialization throws
// std::runtime_error with a node path on malformed input.
std::string serialize(const ArchitectureTree& tree);
ArchitectureTree deserialize(const std::string& text);

// FNV-1a hash of the canonical serialization; used as the fitness-cache
// and history key.
std::uint64_t tree_hash(const ArchitectureTree& tree);
std::string tree_hash_hex(const ArchitectureTree& tree);

struct ResourceLimits {
  std::int64_t max_nodes = 2000;
  std::int64_t max_parameters = 50'000'000;
  std::int64_t max_feature_elements = std::int64_t(1) << 24;
  std::int64_t max_depth = 100'000;
};

struct Diagnostic {
  enum class Kind { RuleConformance, GuardViolation, ShapeInference, Resource };
  Kind kind;
  int node_id = -1;
  std::string message;
};

struct ValidationReport {
  std::vector<Diagnostic> diagnostics;
  bool ok() const { return diagnostics.empty(); }
  std::string to_string() const;
};

// Checks rule conformance against the grammar (guards re-evaluated on the
// inferred states), shape inference, and resource limits. Collects all
// violations rather than stopping at the first.
ValidationReport validate(const ArchitectureTree& tree, const Grammar& grammar,
                          const ResourceLimits& limits = {});

// Collapses routing modules whose three slots all reduce to the identity
// (including permutation chains that compose to the identity) and
// sequential modules with an identity half. The result is grammar-valid
// and computes the same function.
ArchitectureTree simplify_identities(const ArchitectureTree& tree,
                                     const Grammar& grammar);

// Total learnable scalars: per-leaf counts with b in {4,8} branches
// counted once per replica, plus the head.
std::int64_t count_parameters(const ArchitectureTree& tree);
std::int64_t head_parameter_count(const ArchitectureTree& tree);

// Leaf count helpers for the complexity statistics: `stored` counts each
// shared branch once (matching expected_string_length's convention),
// `expanded` multiplies b in {4,8} subtrees out to the architecture string.
std::int64_t leaf_count_stored(const ArchitectureTree& tree);
std::int64_t leaf_count_expanded(const ArchitectureTree& tree);
std::int64_t nonterminal_count_stored(const ArchitectureTree& tree);
// Per-tree mean branching factor over branching nodes; 1 if none.
double mean_branching_factor(const ArchitectureTree& tree);

// Per-terminal occurrence counts over the expanded architecture string.
std::vector<std::pair<std::string, std::int64_t>> leaf_histogram(
    const ArchitectureTree& tree);

}  // namespace arbor
