// SPDX-License-Identifier: Apache-2.0
#include <filesystem>
#include <fstream>
#include <sstream>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "arbor/search.hpp"
#include "arbor/seeds.hpp"
#include "fixtures.hpp"

using namespace arbor;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

SampleLimits search_limits() {
  SampleLimits limits;
  limits.max_nodes = 80;
  limits.max_parameters = 200'000;
  limits.max_feature_elements = 1 << 12;
  return limits;
}

EvaluatorConfig quick_toy_train() {
  EvaluatorConfig cfg;
  cfg.type = "toy-train";
  cfg.task_id = "im-patterns";
  cfg.train.epochs = 2;
  cfg.train.batch_size = 128;
  cfg.train.learning_rate = 0.05;
  return cfg;
}

std::string read_file(const fs::path& p) {
  std::ifstream f(p);
  REQUIRE(f.good());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("arbor_search_" + tag);
  fs::remove_all(p);
  return p;
}

SearchSettings quick_evolution(int iterations, std::uint64_t seed) {
  SearchSettings s;
  s.strategy = "evolution";
  s.evaluator = quick_toy_train();
  s.limits = search_limits();
  s.population_size = 8;
  s.tournament_size = 3;
  s.iterations = iterations;
  s.workers = 1;
  s.rng_seed = seed;
  s.checkpoint_every = 5;
  return s;
}

}  // namespace

TEST_CASE("population eviction is strictly fifo") {
  Population pop;
  pop.capacity = 3;
  for (int i = 0; i < 5; ++i) {
    Individual ind;
    ind.birth_index = i;
    pop.push(std::move(ind));
  }
  REQUIRE(pop.queue.size() == 3);
  CHECK(pop.queue[0].birth_index == 2);
  CHECK(pop.queue[1].birth_index == 3);
  CHECK(pop.queue[2].birth_index == 4);
}

TEST_CASE("validity and surrogate evaluators") {
  ArchitectureTree tree = build_seed("conv-net");
  EvaluatorConfig validity;
  validity.type = "validity";
  CHECK(FitnessEvaluator(validity).evaluate(tree).fitness == 1.0);

  EvaluatorConfig surrogate;
  surrogate.type = "param-surrogate";
  const double fitness = FitnessEvaluator(surrogate).evaluate(tree).fitness;
  ArchitectureTree annotated = tree;
  infer_shapes(annotated);
  CHECK(fitness ==
        doctest::Approx(-std::log10(static_cast<double>(count_parameters(annotated)))));
}

TEST_CASE("toy-train fitness is deterministic") {
  ArchitectureTree tree = build_seed("conv-net");
  EvaluatorConfig cfg = quick_toy_train();
  FitnessEvaluator evaluator(cfg);
  auto a = evaluator.evaluate(tree);
  auto b = evaluator.evaluate(tree);
  CHECK(a.fitness == b.fitness);
  CHECK(a.fitness > 0.0);
}

TEST_CASE("identity-only tree scores near chance on im-patterns") {
  Grammar g = build_grammar(GrammarVariant::TwoD, 0.32);
  ArchitectureTree tree = testing::two_module_tree(
      g, testing::comp_module(g, identity_op()),
      testing::comp_module(g, identity_op()), make_im_state(3, 16, 16), 4);
  EvaluatorConfig cfg = quick_toy_train();
  cfg.train.epochs = 4;
  FitnessEvaluator evaluator(cfg);
  const double fitness = evaluator.evaluate(tree).fitness;
  // Majority-class baseline is 0.25; a linear head on mean features should
  // sit within noise of it.
  CHECK(fitness > 0.15);
  CHECK(fitness < 0.40);
}

TEST_CASE("random sampling reports reproducible aggregate statistics") {
  Grammar g = build_grammar(GrammarVariant::TwoD, 0.32);
  EvaluatorConfig cfg;
  cfg.type = "param-surrogate";
  FitnessEvaluator evaluator(cfg);
  auto r1 = random_sampling(g, make_im_state(3, 16, 16), evaluator, 20, 5,
                            search_limits(), 1);
  auto r2 = random_sampling(g, make_im_state(3, 16, 16), evaluator, 20, 5,
                            search_limits(), 1);
  REQUIRE(r1.individuals.size() == 20);
  CHECK(r1.mean == r2.mean);
  CHECK(r1.max == r2.max);

  double sum = 0.0;
  for (const auto& ind : r1.individuals) sum += ind.fitness;
  CHECK(r1.mean == doctest::Approx(sum / 20.0).epsilon(1e-12));

  auto best = random_search(g, make_im_state(3, 16, 16), evaluator, 20, 5,
                            search_limits(), 1);
  for (const auto& ind : r1.individuals) CHECK(best.fitness >= ind.fitness);
  CHECK(best.fitness >= r1.mean);
}

TEST_CASE("config parsing reports key paths") {
  CHECK_THROWS_WITH_AS(parse_search_settings("{\"strategy\":\"bogus\"}"),
                       doctest::Contains("strategy"), std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_search_settings("{\"stop_probability\":1.5}"),
                       doctest::Contains("stop_probability"), std::runtime_error);
  CHECK_THROWS_WITH_AS(
      parse_search_settings("{\"init\":\"seeded\"}"),
      doctest::Contains("seeds"), std::runtime_error);
  CHECK_THROWS_WITH_AS(
      parse_search_settings("{\"seeds\":[\"nope\"]}"),
      doctest::Contains("unknown seed"), std::runtime_error);

  SearchSettings s = parse_search_settings(
      "{\"strategy\":\"evolution\",\"iterations\":7,\"seeds\":[\"conv-net\"],"
      "\"init\":\"seeded\",\"evaluator\":{\"type\":\"toy-train\",\"epochs\":3}}");
  CHECK(s.iterations == 7);
  CHECK(s.init == "seeded");
  CHECK(s.evaluator.train.epochs == 3);
}

TEST_CASE("evolution run basics") {
  fs::path out = temp_dir("basics");
  SearchSettings s = quick_evolution(6, 11);
  RunResult result = run_search(s, out.string());
  CHECK(result.evaluations >= s.population_size);

  // Best-so-far column is non-decreasing.
  std::ifstream summary(out / "summary.csv");
  std::string line;
  std::getline(summary, line);  // header
  double prev_best = -1.0;
  int rows = 0;
  while (std::getline(summary, line)) {
    std::stringstream ss(line);
    std::string it, best, mean;
    std::getline(ss, it, ',');
    std::getline(ss, best, ',');
    std::getline(ss, mean, ',');
    const double b = std::stod(best);
    CHECK(b >= prev_best);
    prev_best = b;
    ++rows;
  }
  CHECK(rows == 1 + 6);

  // History entries parse and reference real parents.
  std::ifstream hist(out / "history.jsonl");
  int entries = 0;
  while (std::getline(hist, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    CHECK(j.contains("tree_hash"));
    CHECK(j.contains("fitness"));
    ++entries;
  }
  CHECK(entries >= s.population_size);
  fs::remove_all(out);
}

TEST_CASE("seeded initial population replicates the seed fitness") {
  fs::path out = temp_dir("seeded");
  SearchSettings s = quick_evolution(0, 3);
  s.init = "seeded";
  s.seeds = {"conv-net"};
  RunResult result = run_search(s, out.string());

  std::ifstream hist(out / "history.jsonl");
  std::string line;
  double fitness = -1.0;
  int count = 0;
  while (std::getline(hist, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    if (fitness < 0)
      fitness = j["fitness"].get<double>();
    else
      CHECK(j["fitness"].get<double>() == fitness);
    ++count;
  }
  CHECK(count == s.population_size);
  CHECK(result.best.fitness == fitness);
  fs::remove_all(out);
}

TEST_CASE("identical runs produce byte-identical outputs") {
  fs::path out1 = temp_dir("repro1");
  fs::path out2 = temp_dir("repro2");
  SearchSettings s = quick_evolution(5, 1234);
  run_search(s, out1.string());
  run_search(s, out2.string());
  CHECK(read_file(out1 / "history.jsonl") == read_file(out2 / "history.jsonl"));
  CHECK(read_file(out1 / "summary.csv") == read_file(out2 / "summary.csv"));
  fs::remove_all(out1);
  fs::remove_all(out2);
}

TEST_CASE("resume from checkpoint matches the uninterrupted run") {
  fs::path full = temp_dir("resume_full");
  fs::path halted = temp_dir("resume_halted");
  SearchSettings s = quick_evolution(10, 77);

  run_search(s, full.string());
  run_search(s, halted.string(), false, 5);
  run_search(s, halted.string(), true);

  CHECK(read_file(full / "history.jsonl") == read_file(halted / "history.jsonl"));
  CHECK(read_file(full / "summary.csv") == read_file(halted / "summary.csv"));
  CHECK(read_file(full / "checkpoint.json") == read_file(halted / "checkpoint.json"));
  fs::remove_all(full);
  fs::remove_all(halted);
}

TEST_CASE("resume rejects a mismatched configuration") {
  fs::path out = temp_dir("resume_mismatch");
  SearchSettings s = quick_evolution(4, 5);
  run_search(s, out.string(), false, 2);
  SearchSettings other = s;
  other.rng_seed = 6;
  CHECK_THROWS_WITH_AS(run_search(other, out.string(), true),
                       doctest::Contains("different configuration"),
                       std::runtime_error);
  fs::remove_all(out);
}
