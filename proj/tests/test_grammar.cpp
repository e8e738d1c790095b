// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <set>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "arbor/grammar.hpp"

using namespace arbor;

namespace {

int count_rules(const Grammar& g, Nonterminal nt) {
  return static_cast<int>(g.rules_for(nt).size());
}

// Hand computation of the only non-zero recursion entry: with uniform
// branching options, a third of them have b=2 and contribute two inner
// modules, so (M,M) = q*2 + q*(2/3 + 2*1/3... ) collapses to 13(1-p)/9.
double mm_entry_oracle(double p) {
  const double q = (1.0 - p) / 3.0;
  const double branch_modules = (1.0 / 3.0) * 2.0 + (2.0 / 3.0) * 1.0;
  return q * 2.0 + q * branch_modules + q * 1.0;
}

}  // namespace

TEST_CASE("2d grammar carries the full option lists") {
  Grammar g = build_grammar(GrammarVariant::TwoD, 0.32);
  CHECK(count_rules(g, Nonterminal::S) == 3);
  CHECK(count_rules(g, Nonterminal::M) == 4);
  CHECK(count_rules(g, Nonterminal::B) == 12);
  CHECK(count_rules(g, Nonterminal::A) == 12);
  CHECK(count_rules(g, Nonterminal::P) == 14);  // identity + 7 im2col + 6 permutes
  CHECK(count_rules(g, Nonterminal::R) == 8);   // identity + col2im + 6 permutes
  CHECK(count_rules(g, Nonterminal::C) == 13);  // identity + 8 linear + 4 others
}

TEST_CASE("1d grammar swaps im2col/col2im for conv1d and merges P into R") {
  Grammar g = build_grammar(GrammarVariant::OneD, 0.32);
  CHECK(count_rules(g, Nonterminal::P) == 0);
  CHECK(count_rules(g, Nonterminal::R) == 2);
  CHECK(count_rules(g, Nonterminal::B) == 9);
  CHECK(count_rules(g, Nonterminal::A) == 9);
  CHECK(count_rules(g, Nonterminal::C) == 29);  // identity + 16 conv1d + 8 linear + 4

  bool has_conv = false, has_im2col = false;
  for (const auto& rule : g.rules)
    for (const auto& sym : rule.rhs) {
      if (!std::holds_alternative<TerminalSpec>(sym)) continue;
      const auto& t = std::get<TerminalSpec>(sym);
      if (t == conv1d_op(3, 1, 1, 64)) has_conv = true;
      if (t.kind == OpKind::Im2col) has_im2col = true;
    }
  CHECK(has_conv);
  CHECK_FALSE(has_im2col);
}

TEST_CASE("module probabilities follow the stop probability") {
  Grammar g = build_grammar(GrammarVariant::TwoD, 0.32);
  ShapeState state = make_im_state(3, 32, 32);
  auto rules = applicable_rules(g, Nonterminal::M, state);
  REQUIRE(rules.size() == 4);
  // Order of construction: MM, BMA, PMR, C.
  CHECK(rules[0].probability == doctest::Approx(0.2267).epsilon(1e-3));
  CHECK(rules[1].probability == doctest::Approx(0.2267).epsilon(1e-3));
  CHECK(rules[2].probability == doctest::Approx(0.2267).epsilon(1e-3));
  CHECK(rules[3].probability == doctest::Approx(0.32).epsilon(1e-12));
}

TEST_CASE("build_grammar rejects invalid stop probabilities") {
  CHECK_THROWS_AS(build_grammar(GrammarVariant::TwoD, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(build_grammar(GrammarVariant::TwoD, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(build_grammar(GrammarVariant::TwoD, -0.5), std::invalid_argument);
}

TEST_CASE("guards filter by mode and branching factor") {
  Grammar g = build_grammar(GrammarVariant::TwoD, 0.32);

  SUBCASE("P in col mode offers only identity and the transpose") {
    ShapeState col = make_col_state(64, 27);
    auto rules = applicable_rules(g, Nonterminal::P, col);
    REQUIRE(rules.size() == 2);
    std::set<std::string> names;
    double total = 0.0;
    for (const auto& wr : rules) {
      names.insert(std::get<TerminalSpec>(g.rules[wr.rule_id].rhs[0]).name());
      total += wr.probability;
    }
    CHECK(names == std::set<std::string>{"identity", "permute(o=(2,1))"});
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("A with b=2 in col mode includes matmul, add and concat") {
    ShapeState col = make_col_state(16, 32);
    col.branching_factor = 2;
    auto rules = applicable_rules(g, Nonterminal::A, col);
    std::set<OpKind> kinds;
    for (const auto& wr : rules)
      kinds.insert(std::get<TerminalSpec>(g.rules[wr.rule_id].rhs[0]).kind);
    CHECK(kinds == std::set<OpKind>{OpKind::Matmul, OpKind::Add, OpKind::Concat});
  }

  SUBCASE("A with b=8 excludes matmul and renormalises") {
    ShapeState col = make_col_state(16, 32);
    col.branching_factor = 8;
    auto rules = applicable_rules(g, Nonterminal::A, col);
    double total = 0.0;
    for (const auto& wr : rules) {
      const auto& t = std::get<TerminalSpec>(g.rules[wr.rule_id].rhs[0]);
      CHECK(t.kind != OpKind::Matmul);
      if (t.kind == OpKind::Concat) CHECK(t.b == 8);
      total += wr.probability;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("group over the third dimension requires im mode") {
    ShapeState col = make_col_state(16, 32);
    auto rules = applicable_rules(g, Nonterminal::B, col);
    CHECK(rules.size() == 9);
    for (const auto& wr : rules) {
      const auto& t = std::get<TerminalSpec>(g.rules[wr.rule_id].rhs[0]);
      if (t.kind == OpKind::Group) CHECK(t.dim <= 2);
    }
  }

  SUBCASE("probabilities sum to one over every reachable family") {
    for (Mode mode : {Mode::Im, Mode::Col})
      for (int b : {1, 2, 4, 8}) {
        ShapeState st = mode == Mode::Im ? make_im_state(8, 16, 16)
                                         : make_col_state(16, 8);
        st.branching_factor = b;
        for (Nonterminal nt : g.nonterminals()) {
          auto rules = applicable_rules(g, nt, st);
          if (rules.empty()) continue;
          double total = 0.0;
          for (const auto& wr : rules) total += wr.probability;
          CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
        }
      }
  }
}

TEST_CASE("expectation matrix matches the hand-expanded recursion") {
  Grammar g = build_grammar(GrammarVariant::TwoD, 0.32);
  ExpectationMatrix m = expectation_matrix(g);
  CHECK(m.at(Nonterminal::M, Nonterminal::M) ==
        doctest::Approx(mm_entry_oracle(0.32)).epsilon(1e-12));
  CHECK(m.at(Nonterminal::M, Nonterminal::M) ==
        doctest::Approx(13.0 * 0.68 / 9.0).epsilon(1e-12));

  // Rows producing only terminals are identically zero.
  for (Nonterminal row : {Nonterminal::B, Nonterminal::A, Nonterminal::P,
                          Nonterminal::R, Nonterminal::C})
    for (Nonterminal col : g.nonterminals())
      CHECK(m.at(row, col) == 0.0);

  // p -> 1 sends the recursion entry to zero.
  Grammar g1 = build_grammar(GrammarVariant::TwoD, 1.0 - 1e-9);
  CHECK(expectation_matrix(g1).at(Nonterminal::M, Nonterminal::M) ==
        doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("branching rate equals the dominant recursion entry") {
  for (double p : {0.32, 0.25, 0.5, 0.9}) {
    Grammar g = build_grammar(GrammarVariant::TwoD, p);
    CHECK(branching_rate(g) == doctest::Approx(mm_entry_oracle(p)).epsilon(1e-9));
  }
  CHECK(branching_rate(build_grammar(GrammarVariant::TwoD, 0.32)) < 1.0);
  CHECK(branching_rate(build_grammar(GrammarVariant::TwoD, 0.25)) > 1.0);
  CHECK(branching_rate(build_grammar(GrammarVariant::TwoD, 1.0 - 1e-12)) ==
        doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("branching rate decreases monotonically in the stop probability") {
  double prev = 1e9;
  for (int i = 1; i <= 20; ++i) {
    const double p = i / 21.0;
    const double rate = branching_rate(build_grammar(GrammarVariant::TwoD, p));
    CHECK(rate < prev);
    prev = rate;
  }
}

TEST_CASE("critical stop probability") {
  auto family_2d = [](double p) { return build_grammar(GrammarVariant::TwoD, p); };
  auto critical = critical_stop_probability(family_2d);
  CHECK_FALSE(critical.always_subcritical);
  // Solve 13(1-p)/9 = 1 by hand: p = 4/13.
  CHECK(critical.stop_probability == doctest::Approx(4.0 / 13.0).epsilon(1e-4));

  SUBCASE("sequential-only family crosses at one half") {
    auto family = [](double p) {
      Grammar g;
      g.variant = GrammarVariant::TwoD;
      g.stop_probability = p;
      g.rules.push_back({Nonterminal::S, {}, {Symbol{Nonterminal::M}, Symbol{Nonterminal::M}}, 1.0});
      g.rules.push_back({Nonterminal::M, {}, {Symbol{Nonterminal::M}, Symbol{Nonterminal::M}}, 1.0 - p});
      g.rules.push_back({Nonterminal::M, {}, {Symbol{Nonterminal::C}}, p});
      g.rules.push_back({Nonterminal::C, {}, {Symbol{identity_op()}}, 1.0});
      return g;
    };
    auto c = critical_stop_probability(family);
    CHECK_FALSE(c.always_subcritical);
    CHECK(c.stop_probability == doctest::Approx(0.5).epsilon(1e-4));
  }

  SUBCASE("a grammar with only the stop rule never diverges") {
    auto family = [](double p) {
      Grammar g;
      g.variant = GrammarVariant::TwoD;
      g.stop_probability = p;
      g.rules.push_back({Nonterminal::S, {}, {Symbol{Nonterminal::M}, Symbol{Nonterminal::M}}, 1.0});
      g.rules.push_back({Nonterminal::M, {}, {Symbol{Nonterminal::C}}, 1.0});
      g.rules.push_back({Nonterminal::C, {}, {Symbol{identity_op()}}, 1.0});
      return g;
    };
    auto c = critical_stop_probability(family);
    CHECK(c.always_subcritical);
    CHECK(c.stop_probability == 0.0);
  }
}

TEST_CASE("expected string length solves the appendix system") {
  // Two-unknown oracle: E[M] = (p + 4q) / (1 - 13q/3), E[S] = ((13/3)E[M] + 4)/3.
  auto oracle = [](double p) {
    const double q = (1.0 - p) / 3.0;
    const double em = (p + 4.0 * q) / (1.0 - 13.0 * q / 3.0);
    return ((13.0 / 3.0) * em + 4.0) / 3.0;
  };
  for (double p : {0.5, 0.7, 0.9}) {
    Grammar g = build_grammar(GrammarVariant::TwoD, p);
    CHECK(expected_string_length(g) == doctest::Approx(oracle(p)).epsilon(1e-9));
  }
  CHECK(expected_string_length(build_grammar(GrammarVariant::TwoD, 0.9)) ==
        doctest::Approx(3.08).epsilon(1e-2));
  // Exact limit at p -> 1: (1/3)(2 + (2 + 4/3) + 3) = 25/9.
  CHECK(expected_string_length(build_grammar(GrammarVariant::TwoD, 1.0 - 1e-12)) ==
        doctest::Approx(25.0 / 9.0).epsilon(1e-9));
  CHECK_THROWS_WITH_AS(
      expected_string_length(build_grammar(GrammarVariant::TwoD, 0.25)),
      "divergent expectation", std::domain_error);
}

TEST_CASE("grammar dump is schema-versioned json") {
  Grammar g = build_grammar(GrammarVariant::TwoD, 0.32);
  auto j = nlohmann::json::parse(grammar_to_json(g));
  CHECK(j["grammar_schema"] == 1);
  CHECK(j["variant"] == "2d");
  CHECK(j["rules"].size() == g.rules.size());
  for (const auto& rule : j["rules"]) {
    CHECK(rule.contains("lhs"));
    CHECK(rule.contains("guard"));
    CHECK(rule.contains("rhs"));
    CHECK(rule.contains("probability"));
  }
}
