// SPDX-License-Identifier: Apache-2.0
#include "arbor/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace arbor {

namespace {

struct SampleContext {
  const Grammar& grammar;
  Rng& rng;
  const SampleLimits& limits;
  std::int64_t nodes = 0;
  std::int64_t params = 0;
  int backtracks = 0;
  bool exhausted = false;

  bool spend_backtrack() {
    if (++backtracks > limits.max_backtracks) {
      exhausted = true;
      return false;
    }
    return true;
  }
};

// Rule ids in probability-proportional order without replacement.
std::vector<int> gumbel_order(const std::vector<WeightedRule>& options, Rng& rng) {
  std::vector<std::pair<double, int>> keyed;
  keyed.reserve(options.size());
  for (const auto& wr : options) {
    double u = rng.uniform_pos();
    double key = std::log(wr.probability) - std::log(-std::log(u));
    keyed.emplace_back(key, wr.rule_id);
  }
  std::sort(keyed.begin(), keyed.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<int> order;
  order.reserve(keyed.size());
  for (const auto& [key, id] : keyed) order.push_back(id);
  return order;
}

bool state_within_budget(const ShapeState& s, const SampleLimits& limits) {
  return s.elements() <= limits.max_feature_elements;
}

DerivationNode make_family_node(Nonterminal nt, int rule_id,
                                const TerminalSpec& term, const ShapeState& in,
                                const ShapeState& out) {
  DerivationNode leaf;
  leaf.symbol = term;
  leaf.in_state = in;
  leaf.out_state = out;
  DerivationNode fam;
  fam.symbol = nt;
  fam.rule_index = rule_id;
  fam.in_state = in;
  fam.out_state = out;
  fam.children.push_back(std::move(leaf));
  return fam;
}

struct Expansion {
  DerivationNode node;
  ShapeState out_state;
};

class Sampler {
 public:
  explicit Sampler(SampleContext& ctx) : ctx_(ctx) {}

  std::optional<Expansion> expand(Nonterminal nt, const ShapeState& state,
                                  std::int64_t depth,
                                  std::int64_t param_multiplier) {
    if (ctx_.exhausted) return std::nullopt;
    if (depth > ctx_.limits.max_depth) return std::nullopt;

    auto options = applicable_rules(ctx_.grammar, nt, state);
    if (options.empty()) return std::nullopt;
    auto order = gumbel_order(options, ctx_.rng);

    for (std::size_t i = 0; i < order.size(); ++i) {
      if (ctx_.exhausted) return std::nullopt;
      const std::int64_t nodes_mark = ctx_.nodes;
      const std::int64_t params_mark = ctx_.params;
      auto attempt = try_rule(nt, order[i], state, depth, param_multiplier);
      if (attempt) return attempt;
      ctx_.nodes = nodes_mark;
      ctx_.params = params_mark;
      // Discarding a decision consumes backtrack budget, except when the
      // node had no untried alternatives anyway.
      if (i + 1 < order.size() && !ctx_.spend_backtrack()) return std::nullopt;
    }
    return std::nullopt;
  }

 private:
  SampleContext& ctx_;

  bool take_nodes(std::int64_t n) {
    ctx_.nodes += n;
    return ctx_.nodes <= ctx_.limits.max_nodes;
  }

  bool take_params(std::int64_t p) {
    ctx_.params += p;
    return ctx_.params <= ctx_.limits.max_parameters;
  }

  std::optional<Expansion> try_rule(Nonterminal nt, int rule_id,
                                    const ShapeState& state, std::int64_t depth,
                                    std::int64_t param_multiplier) {
    const ProductionRule& rule = ctx_.grammar.rules[rule_id];

    // Terminal family (B is handled inside the branching module).
    if (rule.rhs.size() == 1 && std::holds_alternative<TerminalSpec>(rule.rhs[0])) {
      const TerminalSpec& term = std::get<TerminalSpec>(rule.rhs[0]);
      auto tr = transfer(term, state);
      if (!tr) return std::nullopt;
      const ShapeState& out = tr.value().output_states[0];
      if (!state_within_budget(out, ctx_.limits)) return std::nullopt;
      if (!take_params(param_multiplier * tr.value().param_count))
        return std::nullopt;
      if (!take_nodes(2)) return std::nullopt;
      return Expansion{make_family_node(nt, rule_id, term, state, out), out};
    }

    // Computation module M -> C.
    if (rule.rhs.size() == 1) {
      auto inner = expand(Nonterminal::C, state, depth + 1, param_multiplier);
      if (!inner) return std::nullopt;
      if (!take_nodes(1)) return std::nullopt;
      DerivationNode node;
      node.symbol = nt;
      node.rule_index = rule_id;
      node.in_state = state;
      node.out_state = inner->out_state;
      ShapeState out = inner->out_state;
      node.children.push_back(std::move(inner->node));
      return Expansion{std::move(node), out};
    }

    // Sequential module.
    if (rule.rhs.size() == 2) {
      auto first = expand(Nonterminal::M, state, depth + 1, param_multiplier);
      if (!first) return std::nullopt;
      auto second =
          expand(Nonterminal::M, first->out_state, depth + 1, param_multiplier);
      if (!second) return std::nullopt;
      if (!take_nodes(1)) return std::nullopt;
      DerivationNode node;
      node.symbol = nt;
      node.rule_index = rule_id;
      node.in_state = state;
      node.out_state = second->out_state;
      ShapeState out = second->out_state;
      node.children.push_back(std::move(first->node));
      node.children.push_back(std::move(second->node));
      return Expansion{std::move(node), out};
    }

    if (std::get<Nonterminal>(rule.rhs[0]) == Nonterminal::B)
      return try_branching(nt, rule_id, state, depth, param_multiplier);
    return try_routing(nt, rule_id, state, depth, param_multiplier);
  }

  std::optional<Expansion> try_branching(Nonterminal nt, int rule_id,
                                         const ShapeState& state,
                                         std::int64_t depth,
                                         std::int64_t param_multiplier) {
    auto b_options = applicable_rules(ctx_.grammar, Nonterminal::B, state);
    if (b_options.empty()) return std::nullopt;
    auto b_order = gumbel_order(b_options, ctx_.rng);

    for (std::size_t bi = 0; bi < b_order.size(); ++bi) {
      if (ctx_.exhausted) return std::nullopt;
      const std::int64_t nodes_mark = ctx_.nodes;
      const std::int64_t params_mark = ctx_.params;
      auto attempt = try_branching_option(nt, rule_id, b_order[bi], state, depth,
                                          param_multiplier);
      if (attempt) return attempt;
      ctx_.nodes = nodes_mark;
      ctx_.params = params_mark;
      if (bi + 1 < b_order.size() && !ctx_.spend_backtrack()) return std::nullopt;
    }
    return std::nullopt;
  }

  std::optional<Expansion> try_branching_option(Nonterminal nt, int rule_id,
                                                int b_rule_id,
                                                const ShapeState& state,
                                                std::int64_t depth,
                                                std::int64_t param_multiplier) {
    const TerminalSpec& bterm =
        std::get<TerminalSpec>(ctx_.grammar.rules[b_rule_id].rhs[0]);
    auto tr = transfer(bterm, state);
    if (!tr) return std::nullopt;
    const ShapeState branch_in = tr.value().output_states[0];
    if (!state_within_budget(branch_in, ctx_.limits)) return std::nullopt;

    const int b = bterm.b;
    const int stored = b == 2 ? 2 : 1;
    const std::int64_t inner_multiplier =
        stored == 1 ? param_multiplier * b : param_multiplier;

    std::vector<Expansion> inner;
    for (int i = 0; i < stored; ++i) {
      auto m = expand(Nonterminal::M, branch_in, depth + 1, inner_multiplier);
      if (!m) return std::nullopt;
      inner.push_back(std::move(*m));
    }

    std::vector<ShapeState> expanded;
    for (const auto& e : inner) expanded.push_back(e.out_state);
    if (stored == 1)
      expanded.assign(static_cast<std::size_t>(b), inner[0].out_state);

    auto a_options = applicable_rules(ctx_.grammar, Nonterminal::A, expanded[0]);
    if (a_options.empty()) return std::nullopt;
    auto a_order = gumbel_order(a_options, ctx_.rng);

    for (std::size_t ai = 0; ai < a_order.size(); ++ai) {
      const TerminalSpec& aterm =
          std::get<TerminalSpec>(ctx_.grammar.rules[a_order[ai]].rhs[0]);
      auto agg = aggregate_shape(aterm, expanded);
      if (agg && state_within_budget(agg.value(), ctx_.limits)) {
        ShapeState out = agg.value();
        out.branching_factor = state.branching_factor;
        if (!take_nodes(1 + 2 + 2)) return std::nullopt;  // module + B + A pairs
        DerivationNode node;
        node.symbol = nt;
        node.rule_index = rule_id;
        node.in_state = state;
        node.out_state = out;
        node.children.push_back(
            make_family_node(Nonterminal::B, b_rule_id, bterm, state, branch_in));
        for (auto& e : inner) node.children.push_back(std::move(e.node));
        node.children.push_back(make_family_node(Nonterminal::A, a_order[ai],
                                                 aterm, expanded[0], out));
        return Expansion{std::move(node), out};
      }
      if (ai + 1 < a_order.size() && !ctx_.spend_backtrack()) return std::nullopt;
    }
    return std::nullopt;
  }

  std::optional<Expansion> try_routing(Nonterminal nt, int rule_id,
                                       const ShapeState& state,
                                       std::int64_t depth,
                                       std::int64_t param_multiplier) {
    const ProductionRule& rule = ctx_.grammar.rules[rule_id];
    const Nonterminal head_nt = std::get<Nonterminal>(rule.rhs[0]);
    const Nonterminal tail_nt = std::get<Nonterminal>(rule.rhs[2]);

    auto head = expand(head_nt, state, depth + 1, param_multiplier);
    if (!head) return std::nullopt;
    auto mid = expand(Nonterminal::M, head->out_state, depth + 1, param_multiplier);
    if (!mid) return std::nullopt;
    auto tail = expand(tail_nt, mid->out_state, depth + 1, param_multiplier);
    if (!tail) return std::nullopt;
    if (!take_nodes(1)) return std::nullopt;

    DerivationNode node;
    node.symbol = nt;
    node.rule_index = rule_id;
    node.in_state = state;
    node.out_state = tail->out_state;
    ShapeState out = tail->out_state;
    node.children.push_back(std::move(head->node));
    node.children.push_back(std::move(mid->node));
    node.children.push_back(std::move(tail->node));
    return Expansion{std::move(node), out};
  }
};

}  // namespace

std::optional<ArchitectureTree> sample(const Grammar& grammar,
                                       const ShapeState& input_state, Rng& rng,
                                       const SampleLimits& limits) {
  if (!input_state.well_formed()) return std::nullopt;
  if (grammar.variant == GrammarVariant::OneD && input_state.mode != Mode::Col)
    return std::nullopt;

  SampleContext ctx{grammar, rng, limits};
  Sampler sampler(ctx);
  auto root = sampler.expand(Nonterminal::S, input_state, 0, 1);
  if (!root) return std::nullopt;

  ArchitectureTree tree;
  tree.root = std::move(root->node);
  tree.input_state = input_state;
  tree.variant = grammar.variant;
  tree.stop_probability = grammar.stop_probability;
  renumber_nodes(tree);
  return tree;
}

namespace {

const DerivationNode* find_parent_rec(const DerivationNode& node, int child_id) {
  for (const auto& c : node.children) {
    if (c.node_id == child_id) return &node;
    if (const auto* p = find_parent_rec(c, child_id)) return p;
  }
  return nullptr;
}

// Aggregation targets need the sibling branch outputs expanded to the full
// branching factor.
std::vector<ShapeState> branch_outputs_for(const DerivationNode& module) {
  const TerminalSpec& bterm = module.children[0].children[0].terminal();
  std::vector<ShapeState> outs;
  for (std::size_t i = 1; i + 1 < module.children.size(); ++i)
    outs.push_back(*module.children[i].out_state);
  if (outs.size() == 1 && bterm.b > 2)
    outs.assign(static_cast<std::size_t>(bterm.b), outs[0]);
  return outs;
}

}  // namespace

std::optional<ArchitectureTree> mutate_at(const ArchitectureTree& tree,
                                          int node_id, const Grammar& grammar,
                                          Rng& rng, const SampleLimits& limits) {
  ArchitectureTree out = tree;
  if (!out.root.out_state) {
    if (!infer_shapes(out)) return std::nullopt;
  }

  DerivationNode* target = find_node(out, node_id);
  if (!target) return std::nullopt;

  // A terminal leaf is resampled through the family node that owns it.
  if (target->is_leaf()) {
    const DerivationNode* parent = find_parent_rec(out.root, node_id);
    if (!parent) return std::nullopt;
    target = find_node(out, parent->node_id);
  }

  const ShapeState in_state =
      target->in_state ? *target->in_state : out.input_state;
  const Nonterminal nt = target->nonterminal();

  switch (nt) {
    case Nonterminal::S:
    case Nonterminal::M: {
      SampleContext ctx{grammar, rng, limits};
      Sampler sampler(ctx);
      auto fresh = sampler.expand(nt, in_state, 0, 1);
      if (!fresh) return std::nullopt;
      *target = std::move(fresh->node);
      break;
    }
    case Nonterminal::A: {
      const DerivationNode* module = find_parent_rec(out.root, target->node_id);
      if (!module) return std::nullopt;
      auto states = branch_outputs_for(*module);
      auto options = applicable_rules(grammar, Nonterminal::A, in_state);
      if (options.empty()) return std::nullopt;
      bool done = false;
      for (int rule_id : gumbel_order(options, rng)) {
        const TerminalSpec& term = std::get<TerminalSpec>(grammar.rules[rule_id].rhs[0]);
        auto agg = aggregate_shape(term, states);
        if (!agg || !state_within_budget(agg.value(), limits)) continue;
        ShapeState agg_out = agg.value();
        agg_out.branching_factor = in_state.branching_factor;
        *target = make_family_node(Nonterminal::A, rule_id, term, in_state, agg_out);
        done = true;
        break;
      }
      if (!done) return std::nullopt;
      break;
    }
    default: {  // B, P, R, C: re-draw the terminal option
      auto options = applicable_rules(grammar, nt, in_state);
      if (options.empty()) return std::nullopt;
      bool done = false;
      for (int rule_id : gumbel_order(options, rng)) {
        const TerminalSpec& term = std::get<TerminalSpec>(grammar.rules[rule_id].rhs[0]);
        auto tr = transfer(term, in_state);
        if (!tr || !state_within_budget(tr.value().output_states[0], limits))
          continue;
        *target = make_family_node(nt, rule_id, term, in_state,
                                   tr.value().output_states[0]);
        done = true;
        break;
      }
      if (!done) return std::nullopt;
      break;
    }
  }

  renumber_nodes(out);
  if (!infer_shapes(out)) return std::nullopt;
  return out;
}

std::optional<ArchitectureTree> mutate(const ArchitectureTree& tree,
                                       const Grammar& grammar, Rng& rng,
                                       const SampleLimits& limits) {
  ArchitectureTree annotated = tree;
  if (!annotated.root.out_state) {
    if (!infer_shapes(annotated)) return std::nullopt;
  }
  const std::size_t total = node_count(annotated);

  for (int attempt = 0; attempt < limits.max_mutation_retries; ++attempt) {
    int node_id = static_cast<int>(rng.uniform_int(total));
    auto candidate = mutate_at(annotated, node_id, grammar, rng, limits);
    if (!candidate) continue;
    if (validate(*candidate, grammar, limits.resource_limits()).ok())
      return candidate;
  }
  return std::nullopt;
}

std::vector<ArchitectureTree> random_population(const Grammar& grammar,
                                                const ShapeState& input_state,
                                                int n, Rng& rng,
                                                const SampleLimits& limits) {
  std::vector<ArchitectureTree> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    std::optional<ArchitectureTree> tree;
    for (int attempt = 0; attempt < 100 && !tree; ++attempt) {
      Rng child = rng.split();
      tree = sample(grammar, input_state, child, limits);
    }
    if (!tree)
      throw std::runtime_error("sampling failed after 100 attempts for individual " +
                               std::to_string(i));
    out.push_back(std::move(*tree));
  }
  return out;
}

}  // namespace arbor
