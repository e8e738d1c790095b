// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "arbor/interp.hpp"
#include "arbor/sampler.hpp"
#include "arbor/tasks.hpp"
#include "arbor/tree.hpp"

namespace arbor {

struct Individual {
  ArchitectureTree tree;
  double fitness = 0.0;
  bool evaluated = false;
  bool diverged = false;
  int birth_index = 0;
  std::string hash;
  std::string parent_hash;  // empty for initial individuals
  std::int64_t params = 0;
  std::int64_t leaves = 0;
};

// Aging population: strict FIFO eviction at capacity.
struct Population {
  std::deque<Individual> queue;
  std::size_t capacity = 100;

  void push(Individual ind) {
    queue.push_back(std::move(ind));
    if (queue.size() > capacity) queue.pop_front();
  }
};

struct EvalOutcome {
  double fitness = 0.0;
  bool diverged = false;
};

struct EvaluatorConfig {
  std::string type = "toy-train";  // validity | param-surrogate | toy-train
  std::string task_id = "im-patterns";
  std::uint64_t task_seed = 0;
  std::uint64_t eval_seed = 0;
  TrainConfig train;
};

// Deterministic fitness: identical (tree, evaluator seed) pairs yield
// identical values. The toy-train evaluator holds its task data and is
// safe to share across evaluation threads.
class FitnessEvaluator {
 public:
  explicit FitnessEvaluator(const EvaluatorConfig& config);

  const EvaluatorConfig& config() const { return config_; }
  // Name plus config hash, recorded in run outputs.
  std::string descriptor() const;
  const SyntheticTask* task() const { return task_.get(); }

  EvalOutcome evaluate(const ArchitectureTree& tree) const;

 private:
  EvaluatorConfig config_;
  std::shared_ptr<SyntheticTask> task_;  // toy-train only
};

struct SamplingReport {
  std::vector<Individual> individuals;
  double mean = 0.0, stddev = 0.0, min = 0.0, max = 0.0;
  int sampling_failures = 0;
};

struct SearchSettings {
  GrammarVariant variant = GrammarVariant::TwoD;
  double stop_probability = 0.32;
  std::optional<ShapeState> input;  // defaults to the evaluator task's input
  SampleLimits limits;
  EvaluatorConfig evaluator;
  std::string strategy = "evolution";  // random-sampling | random-search | evolution
  std::string init = "scratch";        // scratch | seeded | mixed
  std::vector<std::string> seeds;
  int population_size = 100;
  int tournament_size = 10;
  int iterations = 200;
  int samples = 100;  // K for random sampling / search
  int workers = 0;    // 0 = hardware concurrency
  std::uint64_t rng_seed = 0;
  int checkpoint_every = 50;
};

SearchSettings parse_search_settings(const std::string& json_text);
std::string settings_hash(const SearchSettings& settings);

struct RunResult {
  Individual best;
  int evaluations = 0;
  int skipped_mutations = 0;
  SamplingReport report;  // populated for random sampling / search
};

// Executes the configured strategy, streaming history (JSONL), summary
// (CSV) and checkpoints into out_dir. With resume=true, continues from the
// checkpoint in out_dir; halt_after stops after that many evolution
// iterations of this invocation (0 = run to completion).
RunResult run_search(const SearchSettings& settings, const std::string& out_dir,
                     bool resume = false, int halt_after = 0);

SamplingReport random_sampling(const Grammar& grammar,
                               const ShapeState& input_state,
                               const FitnessEvaluator& evaluator, int k,
                               std::uint64_t seed, const SampleLimits& limits,
                               int workers);

Individual random_search(const Grammar& grammar, const ShapeState& input_state,
                         const FitnessEvaluator& evaluator, int k,
                         std::uint64_t seed, const SampleLimits& limits,
                         int workers, SamplingReport* report = nullptr);

}  // namespace arbor
