// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "arbor/shape.hpp"

namespace arbor {

// Nonterminal symbols. S is the unique start symbol and never appears on a
// right-hand side. The 1D grammar variant has no P; its routing rule reuses
// R on both ends.
enum class Nonterminal { S, M, B, A, P, R, C };

const char* nonterminal_name(Nonterminal nt);
std::optional<Nonterminal> nonterminal_from_name(const std::string& name);

enum class OpKind {
  Identity,
  Clone,
  Group,
  Matmul,
  Add,
  Concat,
  Im2col,
  Col2im,
  Permute,
  Linear,
  Norm,
  Relu,
  Softmax,
  PosEnc,
  Conv1d,
};

const char* op_kind_name(OpKind k);
std::optional<OpKind> op_kind_from_name(const std::string& name);

// A terminal operation with its hyperparameters. Immutable once built; the
// populated fields depend on the kind (b for clone/group/concat, dim for
// group/concat, k/s/p for im2col and conv1d, d for linear/conv1d, scaled
// for matmul, order for permute).
struct TerminalSpec {
  OpKind kind = OpKind::Identity;
  int b = 0;
  int dim = 0;
  int k = 0, s = 0, p = 0;
  int d = 0;
  bool scaled = false;
  std::vector<int> order;  // 1-indexed over non-batch dims

  bool operator==(const TerminalSpec&) const = default;

  bool is_branching() const { return kind == OpKind::Clone || kind == OpKind::Group; }
  bool is_aggregation() const {
    return kind == OpKind::Matmul || kind == OpKind::Add || kind == OpKind::Concat;
  }
  // Canonical display form, e.g. "im2col(k=3,s=1,p=1)".
  std::string name() const;
};

TerminalSpec identity_op();
TerminalSpec clone_op(int b);
TerminalSpec group_op(int dim, int b);
TerminalSpec matmul_op(bool scaled);
TerminalSpec add_op();
TerminalSpec concat_op(int dim, int b);
TerminalSpec im2col_op(int k, int s, int p);
TerminalSpec col2im_op();
TerminalSpec permute_op(std::vector<int> order);
TerminalSpec linear_op(int d);
TerminalSpec norm_op();
TerminalSpec relu_op();
TerminalSpec softmax_op();
TerminalSpec pos_enc_op();
TerminalSpec conv1d_op(int k, int s, int p, int d);

using Symbol = std::variant<Nonterminal, TerminalSpec>;

// Guard over the sampling parameters. Guards only inspect the feature mode
// and the branching factor; anything that depends on actual tensor extents
// (divisibility, matmul compatibility) is checked by the shape transfer.
struct Guard {
  std::optional<Mode> mode;
  std::optional<int> branching_factor;

  bool accepts(const ShapeState& state) const {
    if (mode && state.mode != *mode) return false;
    if (branching_factor && state.branching_factor != *branching_factor) return false;
    return true;
  }
  bool trivial() const { return !mode && !branching_factor; }
};

struct ProductionRule {
  Nonterminal lhs;
  Guard guard;
  std::vector<Symbol> rhs;
  double probability = 0.0;  // within the lhs family, before guard renormalisation
};

enum class GrammarVariant { TwoD, OneD };

const char* grammar_variant_name(GrammarVariant v);

struct Grammar {
  GrammarVariant variant = GrammarVariant::TwoD;
  double stop_probability = 0.32;
  std::vector<ProductionRule> rules;

  // Rule ids for a given lhs, in canonical order.
  std::vector<int> rules_for(Nonterminal nt) const;
  const std::vector<Nonterminal>& nonterminals() const;
};

// Builds the full grammar for a variant. The 2D variant carries the
// complete hyperparameter option lists (12 branching, 12 aggregation,
// 7 im2col geometries, 6 permute orders plus identity, 8 linear widths,
// norm/relu/softmax/pos-enc/identity). The 1D variant drops im2col/col2im
// and the third tensor dimension everywhere, merges P into R, and adds the
// 16 conv1d options as computation functions.
Grammar build_grammar(GrammarVariant variant, double stop_probability);

struct WeightedRule {
  int rule_id;
  double probability;  // renormalised over the applicable set
};

// Rules for `nt` whose guard accepts `state`, probabilities renormalised to
// sum to 1. An empty list is a valid result (dead end for backtracking).
std::vector<WeightedRule> applicable_rules(const Grammar& grammar, Nonterminal nt,
                                           const ShapeState& state);

// Square matrix over grammar.nonterminals(): entry (X,Y) is the expected
// number of Y symbols produced by one expansion of X. The branching-module
// rule is expanded per branching factor: b=2 contributes two inner-module
// occurrences, b in {4,8} contribute one (the repeated subtree is a single
// derivation).
struct ExpectationMatrix {
  std::vector<Nonterminal> index;
  std::vector<std::vector<double>> entries;

  double at(Nonterminal row, Nonterminal col) const;
};

ExpectationMatrix expectation_matrix(const Grammar& grammar);

// Spectral radius of the expectation matrix (power iteration, relative
// tolerance 1e-10). Sub-critical (< 1) grammars terminate almost surely.
double branching_rate(const Grammar& grammar);

using GrammarFamily = std::function<Grammar(double stop_probability)>;

struct CriticalPoint {
  double stop_probability = 0.0;
  bool always_subcritical = false;
};

// Bisection for branching_rate == 1 over stop_probability, tolerance 1e-6.
CriticalPoint critical_stop_probability(const GrammarFamily& family);

// Expected number of terminal leaves of a derivation from S, using the same
// branching-factor expansion convention as expectation_matrix. Throws
// std::domain_error("divergent expectation") for super-critical grammars.
double expected_string_length(const Grammar& grammar);

// JSON dump of the full rule set ("grammar_schema": 1).
std::string grammar_to_json(const Grammar& grammar);

}  // namespace arbor
