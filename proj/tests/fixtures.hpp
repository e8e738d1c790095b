// SPDX-License-Identifier: Apache-2.0
// Shared fixture builders for interpreter and search tests: assemble small
// grammar-conformant trees without going through the sampler.
#pragma once

#include <doctest.h>

#include "arbor/tree.hpp"

namespace arbor::testing {

inline int family_rule(const Grammar& g, Nonterminal lhs, const TerminalSpec& t) {
  for (int id : g.rules_for(lhs)) {
    const auto& rhs = g.rules[id].rhs;
    if (rhs.size() == 1 && std::holds_alternative<TerminalSpec>(rhs[0]) &&
        std::get<TerminalSpec>(rhs[0]) == t)
      return id;
  }
  REQUIRE(false);
  return -1;
}

inline int module_rule(const Grammar& g, Nonterminal lhs, std::size_t arity,
                       bool branching = false) {
  for (int id : g.rules_for(lhs)) {
    const auto& rhs = g.rules[id].rhs;
    if (arity == 1 && rhs.size() == 1 && std::holds_alternative<Nonterminal>(rhs[0]))
      return id;
    if (arity == 2 && rhs.size() == 2) return id;
    if (arity == 3 && rhs.size() == 3 &&
        (std::get<Nonterminal>(rhs[0]) == Nonterminal::B) == branching)
      return id;
  }
  REQUIRE(false);
  return -1;
}

inline DerivationNode family_node(const Grammar& g, Nonterminal nt,
                                  const TerminalSpec& t) {
  DerivationNode leaf;
  leaf.symbol = t;
  DerivationNode fam;
  fam.symbol = nt;
  fam.rule_index = family_rule(g, nt, t);
  fam.children.push_back(std::move(leaf));
  return fam;
}

inline DerivationNode comp_module(const Grammar& g, const TerminalSpec& t) {
  DerivationNode m;
  m.symbol = Nonterminal::M;
  m.rule_index = module_rule(g, Nonterminal::M, 1);
  m.children.push_back(family_node(g, Nonterminal::C, t));
  return m;
}

inline DerivationNode routing_module(const Grammar& g, const TerminalSpec& p,
                                     DerivationNode inner, const TerminalSpec& r) {
  const bool one_d = g.variant == GrammarVariant::OneD;
  DerivationNode m;
  m.symbol = Nonterminal::M;
  m.rule_index = module_rule(g, Nonterminal::M, 3, false);
  m.children.push_back(
      family_node(g, one_d ? Nonterminal::R : Nonterminal::P, p));
  m.children.push_back(std::move(inner));
  m.children.push_back(family_node(g, Nonterminal::R, r));
  return m;
}

inline DerivationNode branch2_module(const Grammar& g, DerivationNode m1,
                                     DerivationNode m2, const TerminalSpec& b,
                                     const TerminalSpec& a) {
  DerivationNode m;
  m.symbol = Nonterminal::M;
  m.rule_index = module_rule(g, Nonterminal::M, 3, true);
  m.children.push_back(family_node(g, Nonterminal::B, b));
  m.children.push_back(std::move(m1));
  m.children.push_back(std::move(m2));
  m.children.push_back(family_node(g, Nonterminal::A, a));
  return m;
}

inline DerivationNode shared_branch_module(const Grammar& g, DerivationNode inner,
                                           const TerminalSpec& b,
                                           const TerminalSpec& a) {
  DerivationNode m;
  m.symbol = Nonterminal::M;
  m.rule_index = module_rule(g, Nonterminal::M, 3, true);
  m.children.push_back(family_node(g, Nonterminal::B, b));
  m.children.push_back(std::move(inner));
  m.children.push_back(family_node(g, Nonterminal::A, a));
  return m;
}

inline ArchitectureTree two_module_tree(const Grammar& g, DerivationNode left,
                                        DerivationNode right,
                                        const ShapeState& input, int classes) {
  ArchitectureTree tree;
  tree.variant = g.variant;
  tree.stop_probability = g.stop_probability;
  tree.input_state = input;
  tree.head.kind = TaskKind::Classification;
  tree.head.num_classes = classes;
  tree.root.symbol = Nonterminal::S;
  tree.root.rule_index = module_rule(g, Nonterminal::S, 2);
  tree.root.children.push_back(std::move(left));
  tree.root.children.push_back(std::move(right));
  renumber_nodes(tree);
  REQUIRE(infer_shapes(tree).ok());
  return tree;
}

}  // namespace arbor::testing
