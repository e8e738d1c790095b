// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <stdexcept>
#include <filesystem>
#include <functional>

#include <doctest.h>

#include "arbor/interp.hpp"
#include "arbor/sampler.hpp"
#include "arbor/seeds.hpp"
#include "fixtures.hpp"

using namespace arbor;
using namespace arbor::testing;

namespace {

Grammar& grammar_2d() {
  static Grammar g = build_grammar(GrammarVariant::TwoD, 0.32);
  return g;
}

Grammar& grammar_1d() {
  static Grammar g = build_grammar(GrammarVariant::OneD, 0.32);
  return g;
}

Tensor random_input(const ShapeState& state, int batch, Rng& rng,
                    double kink_margin = 0.0) {
  std::vector<std::int64_t> dims = {batch};
  dims.insert(dims.end(), state.shape.begin(), state.shape.end());
  Tensor t(dims);
  for (auto& x : t.data) {
    x = rng.normal();
    if (kink_margin > 0.0 && std::abs(x) < kink_margin)
      x = x < 0 ? x - kink_margin : x + kink_margin;
  }
  return t;
}

double projection_loss(const ArchitectureTree& tree, ParamStore& params,
                       const Tensor& input, const Tensor& projection,
                       bool with_head) {
  // Fresh momentum-free copy: running stats must not leak between probes.
  ParamStore local = params;
  Execution exec = with_head
                       ? forward_with_head(tree, local, input, Phase::Train)
                       : forward(tree, local, input, Phase::Train);
  const Tensor& out = output_of(exec);
  double loss = 0.0;
  for (std::size_t i = 0; i < out.data.size(); ++i)
    loss += out.data[i] * projection.data[i];
  return loss;
}

struct GradCheckStats {
  double max_rel_err = 0.0;
  int probes = 0;
};

// Central finite differences against reverse-mode gradients on a random
// linear functional of the output.
GradCheckStats grad_check(const ArchitectureTree& tree, int batch,
                          std::uint64_t seed, int probes_per_tensor = 4,
                          bool with_head = false) {
  Rng rng(seed);
  ParamStore params = init_params(const_cast<ArchitectureTree&>(tree), rng);
  Tensor input = random_input(tree.input_state, batch, rng, 1e-2);

  ParamStore run = params;
  Execution exec = with_head ? forward_with_head(tree, run, input, Phase::Train)
                             : forward(tree, run, input, Phase::Train);
  const Tensor& out = output_of(exec);
  Tensor projection(out.dims);
  for (auto& x : projection.data) x = rng.normal();

  Gradients grads = backward(tree, run, exec, projection);

  GradCheckStats stats;
  const double h = 1e-5;
  auto probe = [&](Tensor& target, const Tensor& analytic) {
    for (int p = 0; p < probes_per_tensor; ++p) {
      const std::size_t idx = rng.uniform_int(target.data.size());
      const double keep = target.data[idx];
      target.data[idx] = keep + h;
      const double up = projection_loss(tree, params, input, projection, with_head);
      target.data[idx] = keep - h;
      const double down = projection_loss(tree, params, input, projection, with_head);
      target.data[idx] = keep;
      const double fd = (up - down) / (2.0 * h);
      const double an = analytic.data[idx];
      const double denom = std::max({1e-6, std::abs(fd), std::abs(an)});
      stats.max_rel_err = std::max(stats.max_rel_err, std::abs(fd - an) / denom);
      ++stats.probes;
    }
  };

  for (auto& [key, named] : grads.params)
    for (auto& [name, g] : named)
      probe(params.sets.at(key).tensors.at(name), g);
  probe(input, grads.input);
  return stats;
}

ArchitectureTree op_tree(const Grammar& g, DerivationNode module,
                         const ShapeState& input, int classes = 2) {
  return two_module_tree(g, std::move(module),
                         comp_module(g, identity_op()), input, classes);
}

}  // namespace

TEST_CASE("per-op gradients match finite differences") {
  Grammar& g = grammar_2d();
  struct Case {
    const char* name;
    ArchitectureTree tree;
  };
  std::vector<Case> cases;
  cases.push_back({"linear col", op_tree(g, comp_module(g, linear_op(16)),
                                         make_col_state(6, 8))});
  cases.push_back({"linear im", op_tree(g, comp_module(g, linear_op(16)),
                                        make_im_state(3, 5, 4))});
  cases.push_back({"layer norm", op_tree(g, comp_module(g, norm_op()),
                                         make_col_state(6, 8))});
  cases.push_back({"batch norm", op_tree(g, comp_module(g, norm_op()),
                                         make_im_state(4, 5, 5))});
  cases.push_back({"leaky relu", op_tree(g, comp_module(g, relu_op()),
                                         make_im_state(3, 4, 4))});
  cases.push_back({"softmax", op_tree(g, comp_module(g, softmax_op()),
                                      make_col_state(5, 7))});
  cases.push_back({"pos enc", op_tree(g, comp_module(g, pos_enc_op()),
                                      make_col_state(6, 8))});
  cases.push_back({"conv via routing",
                   op_tree(g,
                           routing_module(g, im2col_op(3, 1, 1),
                                          comp_module(g, linear_op(16)),
                                          col2im_op()),
                           make_im_state(3, 6, 6))});
  cases.push_back({"strided conv",
                   op_tree(g,
                           routing_module(g, im2col_op(3, 2, 1),
                                          comp_module(g, linear_op(16)),
                                          col2im_op()),
                           make_im_state(3, 8, 8))});
  cases.push_back({"permute im",
                   op_tree(g,
                           routing_module(g, permute_op({2, 3, 1}),
                                          comp_module(g, identity_op()),
                                          permute_op({3, 1, 2})),
                           make_im_state(3, 4, 5))});
  cases.push_back({"clone add",
                   op_tree(g,
                           branch2_module(g, comp_module(g, linear_op(16)),
                                          comp_module(g, linear_op(16)),
                                          clone_op(2), add_op()),
                           make_col_state(5, 8))});
  cases.push_back({"group concat",
                   op_tree(g,
                           shared_branch_module(g, comp_module(g, linear_op(16)),
                                                group_op(2, 4), concat_op(2, 4)),
                           make_col_state(8, 12))});
  cases.push_back({"clone shared concat",
                   op_tree(g,
                           shared_branch_module(g, comp_module(g, linear_op(16)),
                                                clone_op(4), concat_op(1, 4)),
                           make_im_state(2, 4, 4))});
  cases.push_back({"matmul attention",
                   op_tree(g,
                           branch2_module(g, comp_module(g, linear_op(16)),
                                          comp_module(g, linear_op(16)),
                                          clone_op(2), matmul_op(false)),
                           make_col_state(5, 8))});
  cases.push_back({"matmul scaled",
                   op_tree(g,
                           branch2_module(g, comp_module(g, linear_op(16)),
                                          comp_module(g, linear_op(16)),
                                          clone_op(2), matmul_op(true)),
                           make_col_state(5, 8))});
  cases.push_back({"matmul product",
                   op_tree(g,
                           branch2_module(g, comp_module(g, softmax_op()),
                                          comp_module(g, permute_op({2, 1})),
                                          clone_op(2), matmul_op(false)),
                           make_col_state(5, 5))});
  Grammar& g1 = grammar_1d();
  cases.push_back({"conv1d", op_tree(g1, comp_module(g1, conv1d_op(3, 1, 1, 16)),
                                     make_col_state(10, 4))});
  cases.push_back({"conv1d wide", op_tree(g1, comp_module(g1, conv1d_op(8, 1, 3, 32)),
                                          make_col_state(12, 2))});

  int case_index = 0;
  for (auto& c : cases) {
    CAPTURE(c.name);
    auto stats = grad_check(c.tree, 2, 1000 + case_index * 17, 6);
    CHECK(stats.max_rel_err < 1e-4);
    ++case_index;
  }
}

TEST_CASE("head gradients match finite differences") {
  Grammar& g = grammar_2d();

  SUBCASE("classification head on im features") {
    auto tree = op_tree(g, comp_module(g, linear_op(16)), make_im_state(3, 4, 4), 5);
    auto stats = grad_check(tree, 2, 421, 6, true);
    CHECK(stats.max_rel_err < 1e-4);
  }
  SUBCASE("classification head on col features") {
    auto tree = op_tree(g, comp_module(g, linear_op(16)), make_col_state(6, 8), 4);
    auto stats = grad_check(tree, 2, 422, 6, true);
    CHECK(stats.max_rel_err < 1e-4);
  }
  SUBCASE("dense head with pooling") {
    auto tree = op_tree(g, comp_module(g, linear_op(16)), make_im_state(3, 6, 6));
    tree.head.kind = TaskKind::Dense;
    tree.head.num_classes = 0;
    tree.head.target_shape = {2, 4, 4};
    REQUIRE(infer_shapes(tree).ok());
    auto stats = grad_check(tree, 2, 423, 6, true);
    CHECK(stats.max_rel_err < 1e-4);
  }
}

TEST_CASE("whole random trees pass the gradient check") {
  Grammar& g = grammar_2d();
  SampleLimits limits;
  limits.max_nodes = 60;
  limits.max_parameters = 200'000;
  limits.max_feature_elements = 1 << 12;
  Rng rng(555);
  int checked = 0;
  while (checked < 8) {
    Rng child = rng.split();
    auto tree = sample(g, make_im_state(3, 8, 8), child, limits);
    if (!tree) continue;
    auto stats = grad_check(*tree, 2, 900 + checked, 3);
    CAPTURE(serialize(*tree));
    CHECK(stats.max_rel_err < 1e-4);
    ++checked;
  }
}

TEST_CASE("zero output gradient yields zero gradients") {
  Grammar& g = grammar_2d();
  auto tree = op_tree(g, comp_module(g, linear_op(16)), make_col_state(4, 8));
  Rng rng(3);
  ParamStore params = init_params(tree, rng);
  Tensor input = random_input(tree.input_state, 2, rng);
  Execution exec = forward(tree, params, input, Phase::Train);
  Tensor zero(output_of(exec).dims);
  Gradients grads = backward(tree, params, exec, zero);
  for (const auto& [key, named] : grads.params)
    for (const auto& [name, g2] : named)
      for (double v : g2.data) CHECK(v == 0.0);
  for (double v : grads.input.data) CHECK(v == 0.0);
}

TEST_CASE("scaled and unscaled matmul gradients differ by the scale factor") {
  Grammar& g = grammar_2d();
  auto unscaled = op_tree(g,
                          branch2_module(g, comp_module(g, identity_op()),
                                         comp_module(g, identity_op()),
                                         clone_op(2), matmul_op(false)),
                          make_col_state(5, 16));
  auto scaled = op_tree(g,
                        branch2_module(g, comp_module(g, identity_op()),
                                       comp_module(g, identity_op()),
                                       clone_op(2), matmul_op(true)),
                        make_col_state(5, 16));
  Rng rng(8);
  ParamStore p0 = init_params(unscaled, rng);
  ParamStore p1 = p0;
  Tensor input = random_input(unscaled.input_state, 2, rng);
  Execution e0 = forward(unscaled, p0, input, Phase::Train);
  Execution e1 = forward(scaled, p1, input, Phase::Train);
  Tensor og(output_of(e0).dims);
  for (auto& x : og.data) x = 1.0;
  Gradients g0 = backward(unscaled, p0, e0, og);
  Gradients g1 = backward(scaled, p1, e1, og);
  const double factor = 1.0 / std::sqrt(16.0);
  for (std::size_t i = 0; i < g0.input.data.size(); ++i)
    CHECK(g1.input.data[i] == doctest::Approx(factor * g0.input.data[i]).epsilon(1e-12));
}

TEST_CASE("backward refuses an eval-phase cache") {
  Grammar& g = grammar_2d();
  auto tree = op_tree(g, comp_module(g, linear_op(16)), make_col_state(4, 8));
  Rng rng(4);
  ParamStore params = init_params(tree, rng);
  Tensor input = random_input(tree.input_state, 2, rng);
  Execution exec = forward(tree, params, input, Phase::Eval);
  Tensor og(output_of(exec).dims);
  CHECK_THROWS_AS(backward(tree, params, exec, og), std::logic_error);
}

TEST_CASE("pointwise conv with identity weight reproduces the input") {
  Grammar& g = grammar_2d();
  auto tree = op_tree(g,
                      routing_module(g, im2col_op(1, 1, 0),
                                     comp_module(g, linear_op(16)), col2im_op()),
                      make_im_state(16, 8, 8));
  Rng rng(5);
  ParamStore params = init_params(tree, rng);
  // Overwrite the single weight matrix with the identity.
  std::string linear_key;
  for_each_leaf_instance(tree, [&](const DerivationNode& leaf,
                                   const std::string& key, const ShapeState&) {
    if (leaf.terminal().kind == OpKind::Linear) linear_key = key;
  });
  REQUIRE_FALSE(linear_key.empty());
  Tensor& w = params.sets.at(linear_key).tensors.at("weight");
  for (std::int64_t r = 0; r < 16; ++r)
    for (std::int64_t c = 0; c < 16; ++c)
      w.data[static_cast<std::size_t>(r * 16 + c)] = r == c ? 1.0 : 0.0;

  Tensor input = random_input(tree.input_state, 2, rng);
  Execution exec = forward(tree, params, input, Phase::Eval);
  const Tensor& out = output_of(exec);
  REQUIRE(out.dims == input.dims);
  for (std::size_t i = 0; i < out.data.size(); ++i)
    CHECK(out.data[i] == doctest::Approx(input.data[i]).epsilon(1e-12));
}

TEST_CASE("clone then add doubles the input exactly") {
  Grammar& g = grammar_2d();
  auto tree = op_tree(g,
                      branch2_module(g, comp_module(g, identity_op()),
                                     comp_module(g, identity_op()), clone_op(2),
                                     add_op()),
                      make_im_state(3, 4, 4));
  Rng rng(6);
  ParamStore params = init_params(tree, rng);
  Tensor input = random_input(tree.input_state, 2, rng);
  Execution exec = forward(tree, params, input, Phase::Eval);
  const Tensor& out = output_of(exec);
  for (std::size_t i = 0; i < out.data.size(); ++i)
    CHECK(out.data[i] == 2.0 * input.data[i]);
}

TEST_CASE("softmax output rows sum to one") {
  Grammar& g = grammar_2d();
  auto tree = op_tree(g, comp_module(g, softmax_op()), make_col_state(6, 9));
  Rng rng(7);
  ParamStore params = init_params(tree, rng);
  Tensor input = random_input(tree.input_state, 3, rng);
  Execution exec = forward(tree, params, input, Phase::Eval);
  const Tensor& out = output_of(exec);
  for (std::int64_t r = 0; r < out.size() / 9; ++r) {
    double total = 0.0;
    for (int c = 0; c < 9; ++c) total += out.data[static_cast<std::size_t>(r * 9 + c)];
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("layer norm output is standardised before scale and shift") {
  Grammar& g = grammar_2d();
  auto tree = op_tree(g, comp_module(g, norm_op()), make_col_state(4, 64));
  Rng rng(8);
  ParamStore params = init_params(tree, rng);
  Tensor input = random_input(tree.input_state, 2, rng);
  Execution exec = forward(tree, params, input, Phase::Eval);
  const Tensor& out = output_of(exec);
  for (std::int64_t r = 0; r < out.size() / 64; ++r) {
    double mean = 0.0, var = 0.0;
    for (int c = 0; c < 64; ++c) mean += out.data[static_cast<std::size_t>(r * 64 + c)];
    mean /= 64.0;
    for (int c = 0; c < 64; ++c) {
      const double d = out.data[static_cast<std::size_t>(r * 64 + c)] - mean;
      var += d * d;
    }
    var /= 64.0;
    CHECK(std::abs(mean) < 1e-10);
    CHECK(std::abs(var - 1.0) < 1e-3);  // eps-limited
  }
}

TEST_CASE("batch norm uses running statistics in eval phase") {
  Grammar& g = grammar_2d();
  auto tree = op_tree(g, comp_module(g, norm_op()), make_im_state(3, 4, 4));
  Rng rng(9);
  ParamStore params = init_params(tree, rng);
  Tensor input = random_input(tree.input_state, 8, rng);
  for (auto& x : input.data) x = 3.0 + 2.0 * x;

  // Train forward updates the running stats away from (0,1).
  forward(tree, params, input, Phase::Train);
  std::string norm_key;
  for_each_leaf_instance(tree, [&](const DerivationNode& leaf,
                                   const std::string& key, const ShapeState&) {
    if (leaf.terminal().kind == OpKind::Norm) norm_key = key;
  });
  const Tensor& rm = params.sets.at(norm_key).buffers.at("running_mean");
  CHECK(rm.data[0] != 0.0);

  // Eval on a constant input is deterministic and batch-order independent.
  Execution e1 = forward(tree, params, input, Phase::Eval);
  Execution e2 = forward(tree, params, input, Phase::Eval);
  CHECK(output_of(e1).data == output_of(e2).data);
}

TEST_CASE("forward output dims equal inferred shapes on random trees") {
  Grammar& g = grammar_2d();
  SampleLimits limits;
  limits.max_nodes = 80;
  limits.max_parameters = 500'000;
  limits.max_feature_elements = 1 << 13;
  Rng rng(12321);
  int checked = 0;
  while (checked < 40) {
    Rng child = rng.split();
    auto tree = sample(g, make_im_state(3, 8, 8), child, limits);
    if (!tree) continue;
    Rng prng = child.split();
    ParamStore params = init_params(*tree, prng);
    Tensor input = random_input(tree->input_state, 2, prng);
    Execution exec = forward(*tree, params, input, Phase::Eval);
    const Tensor& out = output_of(exec);
    std::vector<std::int64_t> expect = {2};
    const ShapeState& st = *tree->root.out_state;
    expect.insert(expect.end(), st.shape.begin(), st.shape.end());
    CHECK(out.dims == expect);
    ++checked;
  }
}

TEST_CASE("parameter store matches the tree-level parameter count") {
  for (const char* name : {"conv-block", "conv-net", "resnet18", "vit"}) {
    ArchitectureTree tree = build_seed(name);
    Rng rng(10);
    ParamStore params = init_params(tree, rng);
    CHECK(params.parameter_count() == count_parameters(tree));
  }
}

TEST_CASE("init_params is deterministic under a seed") {
  ArchitectureTree tree = build_seed("conv-net");
  Rng a(77), b(77);
  ParamStore p1 = init_params(tree, a);
  ParamStore p2 = init_params(tree, b);
  REQUIRE(p1.sets.size() == p2.sets.size());
  for (const auto& [key, set] : p1.sets)
    for (const auto& [name, t] : set.tensors)
      CHECK(t.data == p2.sets.at(key).tensors.at(name).data);
}

TEST_CASE("sgd step follows the momentum recurrence") {
  ParamStore params;
  params.sets["w"].tensors["weight"] = Tensor({2});
  params.sets["w"].tensors["weight"].data = {1.0, -2.0};

  Gradients grads;
  grads.params["w"]["weight"] = Tensor({2});
  grads.params["w"]["weight"].data = {0.5, 0.25};

  SUBCASE("plain gradient descent with zero momentum and decay") {
    TrainConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.momentum = 0.0;
    cfg.weight_decay = 0.0;
    sgd_step(params, grads, cfg);
    CHECK(params.sets["w"].tensors["weight"].data[0] == doctest::Approx(1.0 - 0.05));
    CHECK(params.sets["w"].tensors["weight"].data[1] == doctest::Approx(-2.0 - 0.025));
  }

  SUBCASE("two steps with constant gradient displace by 1.9 eta g") {
    TrainConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.momentum = 0.9;
    cfg.weight_decay = 0.0;
    const double before = params.sets["w"].tensors["weight"].data[0];
    sgd_step(params, grads, cfg);
    const double after_one = params.sets["w"].tensors["weight"].data[0];
    sgd_step(params, grads, cfg);
    const double after_two = params.sets["w"].tensors["weight"].data[0];
    CHECK(before - after_one == doctest::Approx(0.1 * 0.5));
    CHECK(after_one - after_two == doctest::Approx(1.9 * 0.1 * 0.5));
  }

  SUBCASE("weight decay with zero gradient shrinks parameters") {
    TrainConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.momentum = 0.0;
    cfg.weight_decay = 0.01;
    grads.params["w"]["weight"].data = {0.0, 0.0};
    sgd_step(params, grads, cfg);
    CHECK(params.sets["w"].tensors["weight"].data[0] ==
          doctest::Approx(1.0 * (1.0 - 0.1 * 0.01)));
  }
}

TEST_CASE("weight dump round trip") {
  ArchitectureTree tree = build_seed("conv-net");
  Rng rng(13);
  ParamStore params = init_params(tree, rng);
  const std::string path =
      (std::filesystem::temp_directory_path() / "arbor_weights_test.bin").string();
  dump_weights(params, path);
  ParamStore back = load_weights(path);
  REQUIRE(back.sets.size() == params.sets.size());
  for (const auto& [key, set] : params.sets)
    for (const auto& [name, t] : set.tensors) {
      const Tensor& other = back.sets.at(key).tensors.at(name);
      CHECK(other.dims == t.dims);
      CHECK(other.data == t.data);
    }
  std::filesystem::remove(path);
}
