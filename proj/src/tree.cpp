// SPDX-License-Identifier: Apache-2.0
#include "arbor/tree.hpp"

#include <algorithm>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace arbor {

using nlohmann::json;

const char* task_kind_name(TaskKind k) {
  return k == TaskKind::Classification ? "classification" : "dense";
}

namespace {

void renumber_rec(DerivationNode& node, int& next_id) {
  node.node_id = next_id++;
  for (auto& c : node.children) renumber_rec(c, next_id);
}

std::size_t count_rec(const DerivationNode& node) {
  std::size_t n = 1;
  for (const auto& c : node.children) n += count_rec(c);
  return n;
}

int depth_rec(const DerivationNode& node) {
  int d = 0;
  for (const auto& c : node.children) d = std::max(d, depth_rec(c));
  return d + 1;
}

DerivationNode* find_rec(DerivationNode& node, int id) {
  if (node.node_id == id) return &node;
  for (auto& c : node.children)
    if (auto* f = find_rec(c, id)) return f;
  return nullptr;
}

// Module-rule classification by rhs pattern.
enum class RuleShape { Sequential, Branching, Routing, Computation, TerminalFamily };

RuleShape rule_shape(const ProductionRule& rule) {
  if (rule.rhs.size() == 1 && std::holds_alternative<TerminalSpec>(rule.rhs[0]))
    return RuleShape::TerminalFamily;
  if (rule.rhs.size() == 1) return RuleShape::Computation;
  if (rule.rhs.size() == 2) return RuleShape::Sequential;
  if (std::get<Nonterminal>(rule.rhs[0]) == Nonterminal::B)
    return RuleShape::Branching;
  return RuleShape::Routing;
}

const TerminalSpec* family_leaf(const DerivationNode& node) {
  if (node.children.size() == 1 && node.children[0].is_leaf())
    return &node.children[0].terminal();
  return nullptr;
}

}  // namespace

void renumber_nodes(ArchitectureTree& tree) {
  int next = 0;
  renumber_rec(tree.root, next);
}

std::size_t node_count(const ArchitectureTree& tree) { return count_rec(tree.root); }

int tree_depth(const ArchitectureTree& tree) { return depth_rec(tree.root); }

DerivationNode* find_node(ArchitectureTree& tree, int node_id) {
  return find_rec(tree.root, node_id);
}

const DerivationNode* find_node(const ArchitectureTree& tree, int node_id) {
  return find_rec(const_cast<DerivationNode&>(tree.root), node_id);
}

std::string InferError::to_string() const {
  return "node " + std::to_string(node_id) + ": " +
         shape_error_name(cause.code) + ": " + cause.message;
}

namespace {

struct InferWalker {
  InferError* err = nullptr;

  ShapeResult<ShapeState> fail(const DerivationNode& node, ShapeError cause) {
    if (err && err->node_id < 0) *err = InferError{node.node_id, cause};
    return cause;
  }

  // One-to-one terminal under a family node (P, R or C).
  ShapeResult<ShapeState> leaf_transfer(DerivationNode& family,
                                        const ShapeState& in) {
    DerivationNode& leaf = family.children[0];
    auto tr = transfer(leaf.terminal(), in);
    if (!tr) return fail(leaf, tr.error());
    family.in_state = leaf.in_state = in;
    family.out_state = leaf.out_state = tr.value().output_states[0];
    return tr.value().output_states[0];
  }

  ShapeResult<ShapeState> infer(DerivationNode& node, const ShapeState& in) {
    node.in_state = in;
    if (node.is_leaf()) {
      // Leaves are reached through their family nodes; a bare call means a
      // malformed tree.
      return fail(node, ShapeError{ShapeErrorCode::ModeViolation,
                                   "dangling terminal leaf"});
    }

    switch (node.nonterminal()) {
      case Nonterminal::P:
      case Nonterminal::R:
      case Nonterminal::C:
        return leaf_transfer(node, in);
      default: break;
    }

    // Module node (S or M). Distinguish by child pattern.
    auto& ch = node.children;
    if (ch.size() == 1) {  // computation module
      auto out = infer(ch[0], in);
      if (!out) return out;
      node.out_state = out.value();
      return out;
    }
    if (ch.size() == 2) {  // sequential module
      auto mid = infer(ch[0], in);
      if (!mid) return mid;
      auto out = infer(ch[1], mid.value());
      if (!out) return out;
      node.out_state = out.value();
      return out;
    }
    if (std::holds_alternative<Nonterminal>(ch[0].symbol) &&
        ch[0].nonterminal() == Nonterminal::B) {
      // Branching module: [B, M, A] or [B, M, M, A].
      DerivationNode& bnode = ch[0];
      const TerminalSpec* bterm = family_leaf(bnode);
      if (!bterm)
        return fail(bnode, ShapeError{ShapeErrorCode::ModeViolation,
                                      "branching node without terminal"});
      auto tr = transfer(*bterm, in);
      if (!tr) return fail(bnode.children[0], tr.error());
      bnode.in_state = bnode.children[0].in_state = in;
      ShapeState branch_in = tr.value().output_states[0];
      bnode.out_state = bnode.children[0].out_state = branch_in;

      const int b = bterm->b;
      const std::size_t stored = ch.size() - 2;  // inner module children
      std::vector<ShapeState> branch_out;
      for (std::size_t i = 1; i + 1 < ch.size(); ++i) {
        auto out = infer(ch[i], branch_in);
        if (!out) return out;
        branch_out.push_back(out.value());
      }
      std::vector<ShapeState> expanded;
      if (stored == 1)
        expanded.assign(static_cast<std::size_t>(b), branch_out[0]);
      else
        expanded = branch_out;

      DerivationNode& anode = ch.back();
      const TerminalSpec* aterm = family_leaf(anode);
      if (!aterm)
        return fail(anode, ShapeError{ShapeErrorCode::ModeViolation,
                                      "aggregation node without terminal"});
      auto agg = aggregate_shape(*aterm, expanded);
      if (!agg) return fail(anode.children[0], agg.error());
      ShapeState out = agg.value();
      out.branching_factor = in.branching_factor;  // leave the branch scope
      anode.in_state = anode.children[0].in_state = expanded[0];
      anode.out_state = anode.children[0].out_state = out;
      node.out_state = out;
      return out;
    }
    // Routing module: [P, M, R] (2D) or [R, M, R] (1D).
    auto head = infer(ch[0], in);
    if (!head) return head;
    auto mid = infer(ch[1], head.value());
    if (!mid) return mid;
    auto out = infer(ch[2], mid.value());
    if (!out) return out;
    node.out_state = out.value();
    return out;
  }
};

}  // namespace

ShapeResult<ShapeState> infer_shapes(ArchitectureTree& tree, InferError& err_out) {
  err_out = InferError{};
  InferWalker w;
  w.err = &err_out;
  return w.infer(tree.root, tree.input_state);
}

ShapeResult<ShapeState> infer_shapes(ArchitectureTree& tree) {
  InferError ignored;
  return infer_shapes(tree, ignored);
}

namespace {

void leaves_rec(const DerivationNode& node, const LeafStringOptions& opts,
                std::vector<std::string>& out) {
  if (node.is_leaf()) {
    const auto& t = node.terminal();
    out.push_back(opts.hyperparams ? t.name() : op_kind_name(t.kind));
    return;
  }
  const auto& ch = node.children;
  const bool branching = !ch.empty() && !ch[0].is_leaf() &&
                         std::holds_alternative<Nonterminal>(ch[0].symbol) &&
                         ch[0].nonterminal() == Nonterminal::B;
  if (branching && ch.size() == 3) {
    const TerminalSpec* bterm = family_leaf(ch[0]);
    const int b = bterm ? bterm->b : 0;
    leaves_rec(ch[0], opts, out);
    if (opts.replication_markers && b > 2)
      out.push_back("x" + std::to_string(b) + "[");
    leaves_rec(ch[1], opts, out);
    if (opts.replication_markers && b > 2) out.push_back("]");
    leaves_rec(ch[2], opts, out);
    return;
  }
  for (const auto& c : ch) leaves_rec(c, opts, out);
}

void leaf_nodes_rec(const DerivationNode& node,
                    std::vector<const DerivationNode*>& out) {
  if (node.is_leaf()) {
    out.push_back(&node);
    return;
  }
  for (const auto& c : node.children) leaf_nodes_rec(c, out);
}

}  // namespace

std::vector<std::string> leaves_string(const ArchitectureTree& tree,
                                       const LeafStringOptions& opts) {
  std::vector<std::string> out;
  leaves_rec(tree.root, opts, out);
  return out;
}

std::vector<const DerivationNode*> leaf_nodes(const ArchitectureTree& tree) {
  std::vector<const DerivationNode*> out;
  leaf_nodes_rec(tree.root, out);
  return out;
}

namespace {

json terminal_hyperparams(const TerminalSpec& t) {
  json h = json::object();
  switch (t.kind) {
    case OpKind::Clone: h["b"] = t.b; break;
    case OpKind::Group:
    case OpKind::Concat:
      h["dim"] = t.dim;
      h["b"] = t.b;
      break;
    case OpKind::Matmul: h["scaled"] = t.scaled; break;
    case OpKind::Im2col:
      h["k"] = t.k;
      h["s"] = t.s;
      h["p"] = t.p;
      break;
    case OpKind::Conv1d:
      h["k"] = t.k;
      h["s"] = t.s;
      h["p"] = t.p;
      h["d"] = t.d;
      break;
    case OpKind::Linear: h["d"] = t.d; break;
    case OpKind::Permute: h["o"] = t.order; break;
    default: break;
  }
  return h;
}

json node_to_json(const DerivationNode& node) {
  json j;
  j["node_id"] = node.node_id;
  if (node.is_leaf()) {
    const auto& t = node.terminal();
    j["symbol"] = op_kind_name(t.kind);
    j["hyperparams"] = terminal_hyperparams(t);
  } else {
    j["symbol"] = nonterminal_name(node.nonterminal());
    j["rule_index"] = node.rule_index;
    json ch = json::array();
    for (const auto& c : node.children) ch.push_back(node_to_json(c));
    j["children"] = std::move(ch);
  }
  return j;
}

[[noreturn]] void parse_fail(const std::string& path, const std::string& what) {
  throw std::runtime_error("tree parse error at " + path + ": " + what);
}

int get_int(const json& j, const char* key, const std::string& path) {
  if (!j.contains(key) || !j[key].is_number_integer())
    parse_fail(path, std::string("missing integer field '") + key + "'");
  return j[key].get<int>();
}

TerminalSpec terminal_from_json(const std::string& name, const json& h,
                                const std::string& path) {
  auto kind = op_kind_from_name(name);
  if (!kind) parse_fail(path, "unknown terminal name '" + name + "'");
  switch (*kind) {
    case OpKind::Identity: return identity_op();
    case OpKind::Clone: return clone_op(get_int(h, "b", path));
    case OpKind::Group:
      return group_op(get_int(h, "dim", path), get_int(h, "b", path));
    case OpKind::Matmul: {
      if (!h.contains("scaled") || !h["scaled"].is_boolean())
        parse_fail(path, "matmul requires boolean 'scaled'");
      return matmul_op(h["scaled"].get<bool>());
    }
    case OpKind::Add: return add_op();
    case OpKind::Concat:
      return concat_op(get_int(h, "dim", path), get_int(h, "b", path));
    case OpKind::Im2col:
      return im2col_op(get_int(h, "k", path), get_int(h, "s", path),
                       get_int(h, "p", path));
    case OpKind::Col2im: return col2im_op();
    case OpKind::Permute: {
      if (!h.contains("o") || !h["o"].is_array())
        parse_fail(path, "permute requires order array 'o'");
      std::vector<int> order;
      for (const auto& x : h["o"]) order.push_back(x.get<int>());
      return permute_op(order);
    }
    case OpKind::Linear: return linear_op(get_int(h, "d", path));
    case OpKind::Norm: return norm_op();
    case OpKind::Relu: return relu_op();
    case OpKind::Softmax: return softmax_op();
    case OpKind::PosEnc: return pos_enc_op();
    case OpKind::Conv1d:
      return conv1d_op(get_int(h, "k", path), get_int(h, "s", path),
                       get_int(h, "p", path), get_int(h, "d", path));
  }
  parse_fail(path, "unhandled terminal");
}

DerivationNode node_from_json(const json& j, const std::string& path) {
  if (!j.is_object()) parse_fail(path, "node is not an object");
  if (!j.contains("symbol") || !j["symbol"].is_string())
    parse_fail(path, "missing symbol");
  DerivationNode node;
  node.node_id = j.value("node_id", 0);
  const std::string sym = j["symbol"].get<std::string>();
  if (auto nt = nonterminal_from_name(sym)) {
    node.symbol = *nt;
    node.rule_index = get_int(j, "rule_index", path);
    if (!j.contains("children") || !j["children"].is_array())
      parse_fail(path, "internal node without children");
    int i = 0;
    for (const auto& cj : j["children"]) {
      node.children.push_back(
          node_from_json(cj, path + ".children[" + std::to_string(i) + "]"));
      ++i;
    }
  } else {
    node.symbol =
        terminal_from_json(sym, j.value("hyperparams", json::object()), path);
  }
  return node;
}

}  // namespace

std::string serialize(const ArchitectureTree& tree) {
  json j;
  j["tree_schema"] = 1;
  j["variant"] = grammar_variant_name(tree.variant);
  j["stop_probability"] = tree.stop_probability;
  json in;
  in["shape"] = tree.input_state.shape;
  in["mode"] = mode_name(tree.input_state.mode);
  in["b"] = tree.input_state.branching_factor;
  j["input_state"] = std::move(in);
  json head;
  head["task"] = task_kind_name(tree.head.kind);
  if (tree.head.kind == TaskKind::Classification)
    head["num_classes"] = tree.head.num_classes;
  else
    head["target_shape"] = tree.head.target_shape;
  j["head"] = std::move(head);
  j["root"] = node_to_json(tree.root);
  return j.dump();
}

ArchitectureTree deserialize(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("tree parse error: ") + e.what());
  }
  if (!j.contains("tree_schema") || !j["tree_schema"].is_number_integer())
    parse_fail("$", "missing tree_schema");
  if (j["tree_schema"].get<int>() != 1)
    throw std::runtime_error("unsupported schema version " +
                             j["tree_schema"].dump());

  ArchitectureTree tree;
  const std::string variant = j.value("variant", "2d");
  tree.variant = variant == "1d" ? GrammarVariant::OneD : GrammarVariant::TwoD;
  tree.stop_probability = j.value("stop_probability", 0.32);

  if (!j.contains("input_state")) parse_fail("$", "missing input_state");
  const json& in = j["input_state"];
  tree.input_state.shape.clear();
  for (const auto& d : in.at("shape")) tree.input_state.shape.push_back(d.get<std::int64_t>());
  tree.input_state.mode = in.value("mode", "im") == std::string("col") ? Mode::Col : Mode::Im;
  tree.input_state.branching_factor = in.value("b", 1);

  if (!j.contains("head")) parse_fail("$", "missing head");
  const json& head = j["head"];
  if (head.value("task", "classification") == std::string("dense")) {
    tree.head.kind = TaskKind::Dense;
    for (const auto& d : head.at("target_shape"))
      tree.head.target_shape.push_back(d.get<std::int64_t>());
  } else {
    tree.head.kind = TaskKind::Classification;
    tree.head.num_classes = head.value("num_classes", 0);
  }

  if (!j.contains("root")) parse_fail("$", "missing root");
  tree.root = node_from_json(j["root"], "root");
  return tree;
}

std::uint64_t tree_hash(const ArchitectureTree& tree) {
  const std::string s = serialize(tree);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string tree_hash_hex(const ArchitectureTree& tree) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(tree_hash(tree)));
  return buf;
}

std::string ValidationReport::to_string() const {
  std::ostringstream os;
  for (const auto& d : diagnostics)
    os << "node " << d.node_id << ": " << d.message << "\n";
  return os.str();
}

namespace {

struct Validator {
  const Grammar& grammar;
  ValidationReport& report;

  void diag(Diagnostic::Kind kind, int node_id, std::string msg) {
    report.diagnostics.push_back({kind, node_id, std::move(msg)});
  }

  void check_node(const DerivationNode& node) {
    if (node.is_leaf()) return;
    if (node.rule_index < 0 ||
        node.rule_index >= static_cast<int>(grammar.rules.size())) {
      diag(Diagnostic::Kind::RuleConformance, node.node_id,
           "rule index " + std::to_string(node.rule_index) + " out of range");
      return;
    }
    const ProductionRule& rule = grammar.rules[node.rule_index];
    if (rule.lhs != node.nonterminal()) {
      diag(Diagnostic::Kind::RuleConformance, node.node_id,
           std::string("rule lhs ") + nonterminal_name(rule.lhs) +
               " does not match node symbol " +
               nonterminal_name(node.nonterminal()));
      return;
    }

    // Guards are re-evaluated against the inferred input state.
    if (node.in_state && !rule.guard.accepts(*node.in_state)) {
      diag(Diagnostic::Kind::GuardViolation, node.node_id,
           "guard rejects state " + node.in_state->to_string() + " for " +
               nonterminal_name(rule.lhs));
    }

    switch (rule_shape(rule)) {
      case RuleShape::TerminalFamily: {
        const TerminalSpec& expected = std::get<TerminalSpec>(rule.rhs[0]);
        const TerminalSpec* leaf = family_leaf(node);
        if (!leaf) {
          diag(Diagnostic::Kind::RuleConformance, node.node_id,
               "terminal family node without leaf child");
        } else if (!(*leaf == expected)) {
          diag(Diagnostic::Kind::RuleConformance, node.node_id,
               "leaf " + leaf->name() + " does not match rule option " +
                   expected.name());
        }
        break;
      }
      case RuleShape::Branching: {
        const TerminalSpec* bterm =
            node.children.empty() ? nullptr : family_leaf(node.children[0]);
        int b = bterm ? bterm->b : 0;
        std::size_t expected = b == 2 ? 4 : 3;
        if (node.children.size() != expected) {
          diag(Diagnostic::Kind::RuleConformance, node.node_id,
               "branching module with b=" + std::to_string(b) + " stores " +
                   std::to_string(node.children.size()) + " children");
          break;
        }
        check_child_symbol(node, 0, Nonterminal::B);
        for (std::size_t i = 1; i + 1 < node.children.size(); ++i)
          check_child_symbol(node, i, Nonterminal::M);
        check_child_symbol(node, node.children.size() - 1, Nonterminal::A);
        break;
      }
      default: {
        if (node.children.size() != rule.rhs.size()) {
          diag(Diagnostic::Kind::RuleConformance, node.node_id,
               "children count " + std::to_string(node.children.size()) +
                   " does not match rule arity " +
                   std::to_string(rule.rhs.size()));
          break;
        }
        for (std::size_t i = 0; i < rule.rhs.size(); ++i)
          check_child_symbol(node, i, std::get<Nonterminal>(rule.rhs[i]));
        break;
      }
    }
    for (const auto& c : node.children) check_node(c);
  }

  void check_child_symbol(const DerivationNode& node, std::size_t i,
                          Nonterminal expected) {
    const DerivationNode& c = node.children[i];
    if (c.is_leaf() || c.nonterminal() != expected) {
      diag(Diagnostic::Kind::RuleConformance, c.node_id,
           std::string("expected ") + nonterminal_name(expected) +
               " at position " + std::to_string(i));
    }
  }
};

std::int64_t params_rec(const DerivationNode& node, std::int64_t multiplier,
                        bool& missing_states) {
  if (node.is_leaf()) {
    if (node.terminal().is_aggregation()) return 0;
    if (!node.in_state) {
      missing_states = true;
      return 0;
    }
    auto tr = transfer(node.terminal(), *node.in_state);
    if (!tr) {
      missing_states = true;
      return 0;
    }
    return multiplier * tr.value().param_count;
  }
  const auto& ch = node.children;
  const bool branching = ch.size() >= 3 && !ch[0].is_leaf() &&
                         std::holds_alternative<Nonterminal>(ch[0].symbol) &&
                         ch[0].nonterminal() == Nonterminal::B;
  std::int64_t total = 0;
  if (branching && ch.size() == 3) {
    const TerminalSpec* bterm = family_leaf(ch[0]);
    const std::int64_t b = bterm ? bterm->b : 1;
    total += params_rec(ch[0], multiplier, missing_states);
    total += params_rec(ch[1], multiplier * b, missing_states);
    total += params_rec(ch[2], multiplier, missing_states);
    return total;
  }
  for (const auto& c : ch) total += params_rec(c, multiplier, missing_states);
  return total;
}

std::int64_t max_state_elements(const DerivationNode& node) {
  std::int64_t m = 0;
  if (node.in_state) m = std::max(m, node.in_state->elements());
  if (node.out_state) m = std::max(m, node.out_state->elements());
  for (const auto& c : node.children) m = std::max(m, max_state_elements(c));
  return m;
}

}  // namespace

std::int64_t head_parameter_count(const ArchitectureTree& tree) {
  if (!tree.root.out_state) return 0;
  const ShapeState& feat = *tree.root.out_state;
  if (tree.head.kind == TaskKind::Classification) {
    std::int64_t d = feat.mode == Mode::Im ? feat.shape[0] : feat.shape[1];
    return d * tree.head.num_classes + tree.head.num_classes;
  }
  std::int64_t c_in = feat.mode == Mode::Im ? feat.shape[0] : 1;
  std::int64_t c_out = tree.head.target_shape.empty() ? 1 : tree.head.target_shape[0];
  return c_in * c_out + c_out;
}

std::int64_t count_parameters(const ArchitectureTree& tree) {
  bool missing = false;
  std::int64_t backbone = params_rec(tree.root, 1, missing);
  if (missing)
    throw std::logic_error("count_parameters requires inferred shapes");
  return backbone + head_parameter_count(tree);
}

ValidationReport validate(const ArchitectureTree& tree, const Grammar& grammar,
                          const ResourceLimits& limits) {
  ValidationReport report;

  if (tree.root.is_leaf() || tree.root.nonterminal() != Nonterminal::S)
    report.diagnostics.push_back(
        {Diagnostic::Kind::RuleConformance, tree.root.node_id,
         "root symbol must be S"});
  if (!tree.input_state.well_formed())
    report.diagnostics.push_back(
        {Diagnostic::Kind::ShapeInference, -1, "malformed input state"});

  // Work on a copy so validation does not mutate annotations.
  ArchitectureTree annotated = tree;
  InferError ierr;
  auto inferred = infer_shapes(annotated, ierr);
  if (!inferred)
    report.diagnostics.push_back({Diagnostic::Kind::ShapeInference,
                                  ierr.node_id, ierr.to_string()});

  Validator v{grammar, report};
  v.check_node(annotated.root);

  const std::int64_t nodes = static_cast<std::int64_t>(node_count(annotated));
  if (nodes > limits.max_nodes)
    report.diagnostics.push_back(
        {Diagnostic::Kind::Resource, -1,
         "node count " + std::to_string(nodes) + " exceeds limit " +
             std::to_string(limits.max_nodes)});
  const std::int64_t depth = tree_depth(annotated);
  if (depth > limits.max_depth)
    report.diagnostics.push_back(
        {Diagnostic::Kind::Resource, -1,
         "depth " + std::to_string(depth) + " exceeds limit " +
             std::to_string(limits.max_depth)});

  if (inferred) {
    std::int64_t elems = max_state_elements(annotated.root);
    if (elems > limits.max_feature_elements)
      report.diagnostics.push_back(
          {Diagnostic::Kind::Resource, -1,
           "feature elements " + std::to_string(elems) + " exceed limit " +
               std::to_string(limits.max_feature_elements)});
    std::int64_t params = count_parameters(annotated);
    if (params > limits.max_parameters)
      report.diagnostics.push_back(
          {Diagnostic::Kind::Resource, -1,
           "parameter count " + std::to_string(params) + " exceeds limit " +
               std::to_string(limits.max_parameters)});
  }
  return report;
}

namespace {

bool is_identity_perm(const std::vector<int>& order) {
  for (std::size_t i = 0; i < order.size(); ++i)
    if (order[i] != static_cast<int>(i) + 1) return false;
  return true;
}

// Permutation carried by a routing-slot terminal, if it is identity or
// permute; nullopt otherwise.
std::optional<std::vector<int>> slot_permutation(const TerminalSpec& t, int rank) {
  if (t.kind == OpKind::Identity) {
    std::vector<int> id(static_cast<std::size_t>(rank));
    for (int i = 0; i < rank; ++i) id[static_cast<std::size_t>(i)] = i + 1;
    return id;
  }
  if (t.kind == OpKind::Permute && static_cast<int>(t.order.size()) == rank)
    return t.order;
  return std::nullopt;
}

std::vector<int> compose(const std::vector<int>& second,
                         const std::vector<int>& first) {
  // Applying `first` then `second` as axis re-orderings.
  std::vector<int> out(second.size());
  for (std::size_t i = 0; i < second.size(); ++i)
    out[i] = first[static_cast<std::size_t>(second[i] - 1)];
  return out;
}

struct Simplifier {
  const Grammar& grammar;
  int identity_rule_m = -1;   // M -> C
  int identity_rule_c = -1;   // C -> identity

  explicit Simplifier(const Grammar& g) : grammar(g) {
    for (int id = 0; id < static_cast<int>(g.rules.size()); ++id) {
      const auto& r = g.rules[id];
      if (r.lhs == Nonterminal::M && r.rhs.size() == 1 &&
          std::holds_alternative<Nonterminal>(r.rhs[0]))
        identity_rule_m = id;
      if (r.lhs == Nonterminal::C && r.rhs.size() == 1 &&
          std::holds_alternative<TerminalSpec>(r.rhs[0]) &&
          std::get<TerminalSpec>(r.rhs[0]).kind == OpKind::Identity)
        identity_rule_c = id;
    }
  }

  DerivationNode identity_module() const {
    DerivationNode leaf;
    leaf.symbol = identity_op();
    DerivationNode c;
    c.symbol = Nonterminal::C;
    c.rule_index = identity_rule_c;
    c.children.push_back(std::move(leaf));
    DerivationNode m;
    m.symbol = Nonterminal::M;
    m.rule_index = identity_rule_m;
    m.children.push_back(std::move(c));
    return m;
  }

  // A module node computes the identity iff it is (or has been reduced to)
  // a computation module holding the identity terminal.
  bool is_identity_module(const DerivationNode& node) const {
    if (node.is_leaf() || node.nonterminal() != Nonterminal::M) return false;
    if (node.children.size() != 1) return false;
    const DerivationNode& c = node.children[0];
    if (c.is_leaf() || c.nonterminal() != Nonterminal::C) return false;
    const TerminalSpec* t = family_leaf(c);
    return t && t->kind == OpKind::Identity;
  }

  DerivationNode simplify(DerivationNode node) {
    if (node.is_leaf()) return node;
    for (auto& c : node.children) c = simplify(std::move(c));

    if (node.nonterminal() != Nonterminal::M) return node;

    // Sequential module: drop identity halves.
    if (node.children.size() == 2) {
      bool left_id = is_identity_module(node.children[0]);
      bool right_id = is_identity_module(node.children[1]);
      if (left_id && right_id) return identity_module();
      if (left_id) return std::move(node.children[1]);
      if (right_id) return std::move(node.children[0]);
      return node;
    }

    // Routing module whose slots are all identity-permutes composing to the
    // identity, around an identity inner module.
    if (node.children.size() == 3 && !node.children[0].is_leaf() &&
        node.children[0].nonterminal() != Nonterminal::B) {
      const TerminalSpec* head = family_leaf(node.children[0]);
      const TerminalSpec* tail = family_leaf(node.children[2]);
      if (head && tail && is_identity_module(node.children[1])) {
        const int rank = static_cast<int>(
            head->kind == OpKind::Permute ? head->order.size()
                                          : tail->kind == OpKind::Permute
                                                ? tail->order.size()
                                                : 0);
        if (rank == 0) {
          // Both slots are plain identities.
          if (head->kind == OpKind::Identity && tail->kind == OpKind::Identity)
            return identity_module();
          return node;
        }
        auto hp = slot_permutation(*head, rank);
        auto tp = slot_permutation(*tail, rank);
        if (hp && tp && is_identity_perm(compose(*tp, *hp)))
          return identity_module();
      }
      return node;
    }
    return node;
  }
};

}  // namespace

ArchitectureTree simplify_identities(const ArchitectureTree& tree,
                                     const Grammar& grammar) {
  ArchitectureTree out = tree;
  Simplifier s(grammar);
  DerivationNode root = out.root;
  // Simplify below the start symbol; S keeps its own rule shape.
  for (auto& c : root.children) c = s.simplify(std::move(c));
  out.root = std::move(root);
  renumber_nodes(out);
  infer_shapes(out);
  return out;
}

namespace {

void stored_counts_rec(const DerivationNode& node, std::int64_t& leaves,
                       std::int64_t& nonterminals) {
  if (node.is_leaf()) {
    ++leaves;
    return;
  }
  ++nonterminals;
  for (const auto& c : node.children) stored_counts_rec(c, leaves, nonterminals);
}

std::int64_t expanded_leaves_rec(const DerivationNode& node,
                                 std::int64_t multiplier) {
  if (node.is_leaf()) return multiplier;
  const auto& ch = node.children;
  const bool branching = ch.size() == 3 && !ch[0].is_leaf() &&
                         std::holds_alternative<Nonterminal>(ch[0].symbol) &&
                         ch[0].nonterminal() == Nonterminal::B;
  std::int64_t total = 0;
  if (branching) {
    const TerminalSpec* bterm = family_leaf(ch[0]);
    const std::int64_t b = bterm ? bterm->b : 1;
    total += expanded_leaves_rec(ch[0], multiplier);
    total += expanded_leaves_rec(ch[1], multiplier * b);
    total += expanded_leaves_rec(ch[2], multiplier);
    return total;
  }
  for (const auto& c : ch) total += expanded_leaves_rec(c, multiplier);
  return total;
}

void histogram_rec(const DerivationNode& node, std::int64_t multiplier,
                   std::map<std::string, std::int64_t>& hist) {
  if (node.is_leaf()) {
    hist[node.terminal().name()] += multiplier;
    return;
  }
  const auto& ch = node.children;
  const bool branching = ch.size() == 3 && !ch[0].is_leaf() &&
                         std::holds_alternative<Nonterminal>(ch[0].symbol) &&
                         ch[0].nonterminal() == Nonterminal::B;
  if (branching) {
    const TerminalSpec* bterm = family_leaf(ch[0]);
    const std::int64_t b = bterm ? bterm->b : 1;
    histogram_rec(ch[0], multiplier, hist);
    histogram_rec(ch[1], multiplier * b, hist);
    histogram_rec(ch[2], multiplier, hist);
    return;
  }
  for (const auto& c : ch) histogram_rec(c, multiplier, hist);
}

void branching_factors_rec(const DerivationNode& node, std::vector<int>& bs) {
  if (node.is_leaf()) {
    if (node.terminal().is_branching()) bs.push_back(node.terminal().b);
    return;
  }
  for (const auto& c : node.children) branching_factors_rec(c, bs);
}

}  // namespace

std::int64_t leaf_count_stored(const ArchitectureTree& tree) {
  std::int64_t leaves = 0, nts = 0;
  stored_counts_rec(tree.root, leaves, nts);
  return leaves;
}

std::int64_t nonterminal_count_stored(const ArchitectureTree& tree) {
  std::int64_t leaves = 0, nts = 0;
  stored_counts_rec(tree.root, leaves, nts);
  return nts;
}

std::int64_t leaf_count_expanded(const ArchitectureTree& tree) {
  return expanded_leaves_rec(tree.root, 1);
}

double mean_branching_factor(const ArchitectureTree& tree) {
  std::vector<int> bs;
  branching_factors_rec(tree.root, bs);
  if (bs.empty()) return 1.0;
  double sum = 0.0;
  for (int b : bs) sum += b;
  return sum / static_cast<double>(bs.size());
}

std::vector<std::pair<std::string, std::int64_t>> leaf_histogram(
    const ArchitectureTree& tree) {
  std::map<std::string, std::int64_t> hist;
  histogram_rec(tree.root, 1, hist);
  return {hist.begin(), hist.end()};
}

}  // namespace arbor
