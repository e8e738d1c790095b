// SPDX-License-Identifier: Apache-2.0
#include "arbor/seeds.hpp"

#include <stdexcept>

namespace arbor {

namespace {

// Assembles derivation nodes against the canonical 2D grammar so that the
// stored rule indices always match what validate() re-derives.
class TreeAssembler {
 public:
  TreeAssembler() : grammar_(build_grammar(GrammarVariant::TwoD, 0.32)) {}

  const Grammar& grammar() const { return grammar_; }

  DerivationNode family(Nonterminal nt, const TerminalSpec& term) const {
    DerivationNode leaf;
    leaf.symbol = term;
    DerivationNode fam;
    fam.symbol = nt;
    fam.rule_index = family_rule(nt, term);
    fam.children.push_back(std::move(leaf));
    return fam;
  }

  // M -> C -> op
  DerivationNode comp(const TerminalSpec& term) const {
    DerivationNode m;
    m.symbol = Nonterminal::M;
    m.rule_index = module_rule(Nonterminal::M, 1);
    m.children.push_back(family(Nonterminal::C, term));
    return m;
  }

  DerivationNode seq(DerivationNode a, DerivationNode b) const {
    DerivationNode m;
    m.symbol = Nonterminal::M;
    m.rule_index = module_rule(Nonterminal::M, 2);
    m.children.push_back(std::move(a));
    m.children.push_back(std::move(b));
    return m;
  }

  DerivationNode seq_chain(std::vector<DerivationNode> parts) const {
    if (parts.empty()) throw std::logic_error("empty sequence");
    DerivationNode acc = std::move(parts.back());
    for (std::size_t i = parts.size() - 1; i-- > 0;)
      acc = seq(std::move(parts[i]), std::move(acc));
    return acc;
  }

  DerivationNode routing(const TerminalSpec& p, DerivationNode m,
                         const TerminalSpec& r) const {
    DerivationNode node;
    node.symbol = Nonterminal::M;
    node.rule_index = module_rule(Nonterminal::M, 3);
    node.children.push_back(family(Nonterminal::P, p));
    node.children.push_back(std::move(m));
    node.children.push_back(family(Nonterminal::R, r));
    return node;
  }

  DerivationNode branch2(DerivationNode m1, DerivationNode m2,
                         const TerminalSpec& b, const TerminalSpec& a) const {
    DerivationNode node;
    node.symbol = Nonterminal::M;
    node.rule_index = module_rule(Nonterminal::M, 4);
    node.children.push_back(family(Nonterminal::B, b));
    node.children.push_back(std::move(m1));
    node.children.push_back(std::move(m2));
    node.children.push_back(family(Nonterminal::A, a));
    return node;
  }

  DerivationNode branch_shared(DerivationNode m, const TerminalSpec& b,
                               const TerminalSpec& a) const {
    DerivationNode node;
    node.symbol = Nonterminal::M;
    node.rule_index = module_rule(Nonterminal::M, 4);
    node.children.push_back(family(Nonterminal::B, b));
    node.children.push_back(std::move(m));
    node.children.push_back(family(Nonterminal::A, a));
    return node;
  }

  // Residual skip around `path`.
  DerivationNode residual(DerivationNode path) const {
    return branch2(std::move(path), comp(identity_op()), clone_op(2), add_op());
  }

  // im2col / linear / col2im convolution lowering.
  DerivationNode conv(int k, int s, int p, int d) const {
    return routing(im2col_op(k, s, p), comp(linear_op(d)), col2im_op());
  }

  ArchitectureTree finish(std::vector<DerivationNode> modules,
                          const ShapeState& input,
                          const HeadDescriptor& head) const {
    if (modules.size() < 2)
      throw std::logic_error("start symbol needs at least two modules");
    DerivationNode last = std::move(modules.back());
    modules.pop_back();
    DerivationNode root;
    root.symbol = Nonterminal::S;
    root.rule_index = module_rule(Nonterminal::S, 2);
    root.children.push_back(seq_chain(std::move(modules)));
    root.children.push_back(std::move(last));

    ArchitectureTree tree;
    tree.root = std::move(root);
    tree.input_state = input;
    tree.head = head;
    tree.variant = GrammarVariant::TwoD;
    tree.stop_probability = 0.32;
    renumber_nodes(tree);
    InferError err;
    if (!infer_shapes(tree, err))
      throw std::logic_error("seed does not typecheck: " + err.to_string());
    return tree;
  }

 private:
  Grammar grammar_;

  int family_rule(Nonterminal nt, const TerminalSpec& term) const {
    for (int id : grammar_.rules_for(nt)) {
      const auto& rhs = grammar_.rules[static_cast<std::size_t>(id)].rhs;
      if (rhs.size() == 1 && std::holds_alternative<TerminalSpec>(rhs[0]) &&
          std::get<TerminalSpec>(rhs[0]) == term)
        return id;
    }
    throw std::logic_error("terminal not in grammar: " + term.name());
  }

  // arity: 1 = computation, 2 = sequential, 3 = routing, 4 = branching.
  int module_rule(Nonterminal lhs, int shape) const {
    for (int id : grammar_.rules_for(lhs)) {
      const auto& rhs = grammar_.rules[static_cast<std::size_t>(id)].rhs;
      if (shape == 1 && rhs.size() == 1 && std::holds_alternative<Nonterminal>(rhs[0]))
        return id;
      if (rhs.size() != 3 || !std::holds_alternative<Nonterminal>(rhs[0])) {
        if (shape == 2 && rhs.size() == 2) return id;
        continue;
      }
      const bool branching = std::get<Nonterminal>(rhs[0]) == Nonterminal::B;
      if (shape == 4 && branching) return id;
      if (shape == 3 && !branching) return id;
    }
    throw std::logic_error("module rule not found");
  }
};

const TreeAssembler& assembler() {
  static const TreeAssembler a;
  return a;
}

HeadDescriptor classification_head(int classes) {
  HeadDescriptor h;
  h.kind = TaskKind::Classification;
  h.num_classes = classes;
  return h;
}

}  // namespace

ArchitectureTree conv_block_skip_seed(int channels, const ShapeState& input) {
  const auto& a = assembler();
  if (input.mode != Mode::Im || input.shape[0] != channels)
    throw std::invalid_argument(
        "conv-block seed needs an im input with channels == linear width");
  // Exactly the derivation of the running example: clone ->
  // [im2col/linear/col2im -> norm -> relu | identity] -> add.
  DerivationNode main_path =
      a.seq(a.conv(3, 1, 1, channels),
            a.seq(a.comp(norm_op()), a.comp(relu_op())));
  DerivationNode root;
  root.symbol = Nonterminal::S;
  // S -> B M A with two explicit branches.
  for (int id : a.grammar().rules_for(Nonterminal::S)) {
    const auto& rhs = a.grammar().rules[static_cast<std::size_t>(id)].rhs;
    if (rhs.size() == 3 && std::get<Nonterminal>(rhs[0]) == Nonterminal::B)
      root.rule_index = id;
  }
  root.children.push_back(a.family(Nonterminal::B, clone_op(2)));
  root.children.push_back(std::move(main_path));
  root.children.push_back(a.comp(identity_op()));
  root.children.push_back(a.family(Nonterminal::A, add_op()));

  ArchitectureTree tree;
  tree.root = std::move(root);
  tree.input_state = input;
  tree.head = classification_head(10);
  renumber_nodes(tree);
  InferError err;
  if (!infer_shapes(tree, err))
    throw std::logic_error("conv-block seed does not typecheck: " + err.to_string());
  return tree;
}

ArchitectureTree conv_net_seed(int width, const ShapeState& input) {
  const auto& a = assembler();
  std::vector<DerivationNode> modules;
  modules.push_back(a.conv(3, 1, 1, width));
  modules.push_back(a.seq(a.comp(norm_op()), a.comp(relu_op())));
  DerivationNode block =
      a.seq(a.conv(3, 1, 1, width), a.seq(a.comp(norm_op()), a.comp(relu_op())));
  modules.push_back(a.residual(std::move(block)));
  return a.finish(std::move(modules), input, classification_head(10));
}

namespace {

DerivationNode resnet_basic_block(const TreeAssembler& a, int c_in, int c_out,
                                  int stride) {
  DerivationNode main_path = a.seq_chain([&] {
    std::vector<DerivationNode> parts;
    parts.push_back(a.conv(3, stride, 1, c_out));
    parts.push_back(a.comp(norm_op()));
    parts.push_back(a.comp(relu_op()));
    parts.push_back(a.conv(3, 1, 1, c_out));
    parts.push_back(a.comp(norm_op()));
    return parts;
  }());
  DerivationNode skip =
      (c_in == c_out && stride == 1)
          ? a.comp(identity_op())
          : a.seq(a.conv(1, stride, 0, c_out), a.comp(norm_op()));
  return a.seq(a.branch2(std::move(main_path), std::move(skip), clone_op(2),
                         add_op()),
               a.comp(relu_op()));
}

DerivationNode wrn_block(const TreeAssembler& a, int c_in, int c_out,
                         int stride) {
  DerivationNode main_path = a.seq_chain([&] {
    std::vector<DerivationNode> parts;
    parts.push_back(a.comp(norm_op()));
    parts.push_back(a.comp(relu_op()));
    parts.push_back(a.conv(3, stride, 1, c_out));
    parts.push_back(a.comp(norm_op()));
    parts.push_back(a.comp(relu_op()));
    parts.push_back(a.conv(3, 1, 1, c_out));
    return parts;
  }());
  DerivationNode skip = (c_in == c_out && stride == 1)
                            ? a.comp(identity_op())
                            : a.conv(1, stride, 0, c_out);
  return a.branch2(std::move(main_path), std::move(skip), clone_op(2), add_op());
}

}  // namespace

ArchitectureTree resnet18_seed(const ShapeState& input) {
  const auto& a = assembler();
  std::vector<DerivationNode> m;
  // 3x3 stem; the stride-2 3x3 convolution stands in for max-pooling.
  m.push_back(a.conv(3, 1, 1, 64));
  m.push_back(a.seq(a.comp(norm_op()), a.comp(relu_op())));
  m.push_back(a.conv(3, 2, 1, 64));
  m.push_back(a.seq(a.comp(norm_op()), a.comp(relu_op())));
  m.push_back(resnet_basic_block(a, 64, 64, 1));
  m.push_back(resnet_basic_block(a, 64, 64, 1));
  m.push_back(resnet_basic_block(a, 64, 128, 2));
  m.push_back(resnet_basic_block(a, 128, 128, 1));
  m.push_back(resnet_basic_block(a, 128, 256, 2));
  m.push_back(resnet_basic_block(a, 256, 256, 1));
  m.push_back(resnet_basic_block(a, 256, 512, 2));
  m.push_back(resnet_basic_block(a, 512, 512, 1));
  return a.finish(std::move(m), input, classification_head(10));
}

ArchitectureTree wrn16_4_seed(const ShapeState& input) {
  const auto& a = assembler();
  std::vector<DerivationNode> m;
  m.push_back(a.conv(3, 1, 1, 16));
  m.push_back(wrn_block(a, 16, 64, 1));
  m.push_back(wrn_block(a, 64, 64, 1));
  m.push_back(wrn_block(a, 64, 128, 2));
  m.push_back(wrn_block(a, 128, 128, 1));
  m.push_back(wrn_block(a, 128, 256, 2));
  m.push_back(wrn_block(a, 256, 256, 1));
  m.push_back(a.seq(a.comp(norm_op()), a.comp(relu_op())));
  return a.finish(std::move(m), input, classification_head(10));
}

namespace {

// One multi-head attention block: heads split the token dimension four
// ways, each head is q.k^T softmax times v, heads concatenate back.
DerivationNode vit_attention_block(const TreeAssembler& a, int width) {
  const int head_dim = width / 4;
  DerivationNode qk = a.seq(
      a.branch2(a.comp(linear_op(head_dim)), a.comp(linear_op(head_dim)),
                clone_op(2), matmul_op(true)),
      a.comp(softmax_op()));
  DerivationNode head =
      a.branch2(std::move(qk), a.comp(linear_op(head_dim)), clone_op(2),
                matmul_op(false));
  DerivationNode mha =
      a.branch_shared(std::move(head), group_op(2, 4), concat_op(2, 4));
  DerivationNode attn_path =
      a.seq_chain([&] {
        std::vector<DerivationNode> parts;
        parts.push_back(a.comp(norm_op()));
        parts.push_back(std::move(mha));
        parts.push_back(a.comp(linear_op(width)));
        return parts;
      }());
  return a.residual(std::move(attn_path));
}

DerivationNode mlp_block(const TreeAssembler& a, int width, int hidden) {
  DerivationNode path = a.seq_chain([&] {
    std::vector<DerivationNode> parts;
    parts.push_back(a.comp(norm_op()));
    parts.push_back(a.comp(linear_op(hidden)));
    parts.push_back(a.comp(relu_op()));
    parts.push_back(a.comp(linear_op(width)));
    return parts;
  }());
  return a.residual(std::move(path));
}

DerivationNode patch_embedding(const TreeAssembler& a, int patch, int width) {
  return a.routing(im2col_op(patch, patch, 0), a.comp(linear_op(width)),
                   identity_op());
}

}  // namespace

ArchitectureTree vit_seed(const ShapeState& input) {
  const auto& a = assembler();
  const int width = 512;
  std::vector<DerivationNode> m;
  m.push_back(patch_embedding(a, 4, width));
  m.push_back(a.comp(pos_enc_op()));
  for (int layer = 0; layer < 4; ++layer) {
    m.push_back(vit_attention_block(a, width));
    m.push_back(mlp_block(a, width, 2048));
  }
  m.push_back(a.comp(norm_op()));
  return a.finish(std::move(m), input, classification_head(10));
}

ArchitectureTree mixer_seed(const ShapeState& input) {
  const auto& a = assembler();
  const int width = 512;
  const std::int64_t h = input.shape[1];
  const int tokens = static_cast<int>((h / 4) * (input.shape[2] / 4));
  const int token_hidden = tokens / 2;  // the token mixer halves the dimension
  std::vector<DerivationNode> m;
  m.push_back(patch_embedding(a, 4, width));
  for (int layer = 0; layer < 8; ++layer) {
    DerivationNode token_inner = a.seq_chain([&] {
      std::vector<DerivationNode> parts;
      parts.push_back(a.comp(linear_op(token_hidden)));
      parts.push_back(a.comp(relu_op()));
      parts.push_back(a.comp(linear_op(tokens)));
      return parts;
    }());
    DerivationNode token_path =
        a.seq(a.comp(norm_op()),
              a.routing(permute_op({2, 1}), std::move(token_inner),
                        permute_op({2, 1})));
    m.push_back(a.residual(std::move(token_path)));
    m.push_back(mlp_block(a, width, width * 4));
  }
  m.push_back(a.comp(norm_op()));
  return a.finish(std::move(m), input, classification_head(10));
}

const std::vector<SeedDescriptor>& seed_library() {
  static const std::vector<SeedDescriptor> seeds = [] {
    std::vector<SeedDescriptor> v;
    v.push_back({"conv-block",
                 "convolutional block with a skip connection",
                 make_im_state(16, 32, 32),
                 10,
                 [](const ShapeState& in) {
                   return conv_block_skip_seed(static_cast<int>(in.shape[0]), in);
                 },
                 std::nullopt});
    v.push_back({"conv-net",
                 "stem convolution plus residual conv block",
                 make_im_state(3, 16, 16),
                 10,
                 [](const ShapeState& in) { return conv_net_seed(16, in); },
                 std::nullopt});
    v.push_back({"resnet18",
                 "ResNet18 with 3x3 stem and strided-conv pooling",
                 make_im_state(3, 64, 64),
                 10,
                 resnet18_seed,
                 std::pair<std::int64_t, double>{11'200'000, 0.10}});
    v.push_back({"wrn16-4",
                 "WideResNet-16-4 with pre-activation blocks",
                 make_im_state(3, 64, 64),
                 10,
                 wrn16_4_seed,
                 std::pair<std::int64_t, double>{2'800'000, 0.15}});
    v.push_back({"vit",
                 "4-layer patch-4 vision transformer, width 512, 4 heads",
                 make_im_state(3, 64, 64),
                 10,
                 vit_seed,
                 std::nullopt});
    v.push_back({"mixer",
                 "8-layer patch-4 MLP mixer, width 512",
                 make_im_state(3, 64, 64),
                 10,
                 mixer_seed,
                 std::nullopt});
    return v;
  }();
  return seeds;
}

const SeedDescriptor* find_seed(const std::string& name) {
  for (const auto& s : seed_library())
    if (s.name == name) return &s;
  return nullptr;
}

ArchitectureTree build_seed(const std::string& name,
                            std::optional<ShapeState> input,
                            std::optional<HeadDescriptor> head) {
  const SeedDescriptor* d = find_seed(name);
  if (!d) throw std::invalid_argument("unknown seed: " + name);
  ArchitectureTree tree = d->builder(input.value_or(d->default_input));
  if (head) {
    tree.head = *head;
    infer_shapes(tree);
  }
  return tree;
}

}  // namespace arbor
