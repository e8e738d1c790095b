// SPDX-License-Identifier: Apache-2.0
#include "arbor/search.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <nlohmann/json.hpp>

#include "arbor/seeds.hpp"

namespace arbor {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Thread pool; results are joined in submission order by the callers.
// ---------------------------------------------------------------------------

class ThreadPool {
 public:
  explicit ThreadPool(int workers) {
    int n = workers > 0 ? workers
                        : static_cast<int>(std::thread::hardware_concurrency());
    if (n < 1) n = 1;
    for (int i = 0; i < n; ++i)
      threads_.emplace_back([this] { worker(); });
  }

  ~ThreadPool() {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  std::future<EvalOutcome> submit(std::function<EvalOutcome()> fn) {
    auto task = std::make_shared<std::packaged_task<EvalOutcome()>>(std::move(fn));
    auto fut = task->get_future();
    {
      std::lock_guard<std::mutex> lock(mutex_);
      queue_.push_back([task] { (*task)(); });
    }
    cv_.notify_one();
    return fut;
  }

 private:
  void worker() {
    for (;;) {
      std::function<void()> job;
      {
        std::unique_lock<std::mutex> lock(mutex_);
        cv_.wait(lock, [this] { return stop_ || !queue_.empty(); });
        if (stop_ && queue_.empty()) return;
        job = std::move(queue_.front());
        queue_.pop_front();
      }
      job();
    }
  }

  std::vector<std::thread> threads_;
  std::deque<std::function<void()>> queue_;
  std::mutex mutex_;
  std::condition_variable cv_;
  bool stop_ = false;
};

std::uint64_t mix_seeds(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

Tensor slice_batch(const Tensor& all, const std::vector<int>& order,
                   std::size_t start, std::size_t count) {
  std::vector<std::int64_t> dims = all.dims;
  dims[0] = static_cast<std::int64_t>(count);
  Tensor out(dims);
  const std::int64_t inner = all.inner();
  for (std::size_t i = 0; i < count; ++i) {
    const int src = order[start + i];
    std::copy(all.ptr() + src * inner, all.ptr() + (src + 1) * inner,
              out.ptr() + static_cast<std::int64_t>(i) * inner);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Fitness evaluation
// ---------------------------------------------------------------------------

FitnessEvaluator::FitnessEvaluator(const EvaluatorConfig& config)
    : config_(config) {
  if (config_.type == "toy-train") {
    task_ = std::make_shared<SyntheticTask>(
        make_synthetic_task(config_.task_id, config_.task_seed));
  } else if (config_.type != "validity" && config_.type != "param-surrogate") {
    throw std::invalid_argument("unknown evaluator type: " + config_.type);
  }
}

std::string FitnessEvaluator::descriptor() const {
  json j;
  j["type"] = config_.type;
  if (config_.type == "toy-train") {
    j["task_id"] = config_.task_id;
    j["task_seed"] = config_.task_seed;
    j["eval_seed"] = config_.eval_seed;
    j["epochs"] = config_.train.epochs;
    j["learning_rate"] = config_.train.learning_rate;
    j["weight_decay"] = config_.train.weight_decay;
    j["momentum"] = config_.train.momentum;
    j["batch_size"] = config_.train.batch_size;
  }
  return config_.type + ":" + hex64(fnv1a(j.dump()));
}

namespace {

EvalOutcome toy_train(const SyntheticTask& task, const TrainConfig& cfg,
                      std::uint64_t eval_seed, const ArchitectureTree& input_tree) {
  ArchitectureTree tree = input_tree;
  tree.head.kind = TaskKind::Classification;
  tree.head.num_classes = task.num_classes;
  if (!infer_shapes(tree)) return {0.0, true};

  Rng rng(mix_seeds(eval_seed, tree_hash(tree)));
  ParamStore params = init_params(tree, rng);

  const int n_train = static_cast<int>(task.train.inputs.dims[0]);
  const int n_val = static_cast<int>(task.val.inputs.dims[0]);
  const int bs = cfg.batch_size;
  const int classes = task.num_classes;

  std::vector<int> order(static_cast<std::size_t>(n_train));
  for (int i = 0; i < n_train; ++i) order[static_cast<std::size_t>(i)] = i;

  double best_acc = 0.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (int start = 0; start < n_train; start += bs) {
      const int count = std::min(bs, n_train - start);
      Tensor batch = slice_batch(task.train.inputs, order,
                                 static_cast<std::size_t>(start),
                                 static_cast<std::size_t>(count));
      Execution exec = forward_with_head(tree, params, batch, Phase::Train);
      const Tensor& logits = output_of(exec);

      // Softmax cross-entropy gradient (p - onehot) / batch.
      Tensor grad(logits.dims);
      double loss = 0.0;
      for (int i = 0; i < count; ++i) {
        const double* row = logits.ptr() + i * classes;
        double* grow = grad.ptr() + i * classes;
        double mx = row[0];
        for (int c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
        double total = 0.0;
        for (int c = 0; c < classes; ++c) total += std::exp(row[c] - mx);
        const int label = task.train.labels[order[static_cast<std::size_t>(start + i)]];
        loss += -(row[label] - mx - std::log(total));
        for (int c = 0; c < classes; ++c) {
          const double p = std::exp(row[c] - mx) / total;
          grow[c] = (p - (c == label ? 1.0 : 0.0)) / count;
        }
      }
      loss /= count;
      if (!std::isfinite(loss)) return {0.0, true};

      Gradients grads = backward(tree, params, exec, grad);
      sgd_step(params, grads, cfg);
    }

    // Validation accuracy.
    std::vector<int> id_order(static_cast<std::size_t>(n_val));
    for (int i = 0; i < n_val; ++i) id_order[static_cast<std::size_t>(i)] = i;
    int correct = 0;
    bool finite = true;
    for (int start = 0; start < n_val && finite; start += bs) {
      const int count = std::min(bs, n_val - start);
      Tensor batch = slice_batch(task.val.inputs, id_order,
                                 static_cast<std::size_t>(start),
                                 static_cast<std::size_t>(count));
      Execution exec = forward_with_head(tree, params, batch, Phase::Eval);
      const Tensor& logits = output_of(exec);
      for (int i = 0; i < count; ++i) {
        const double* row = logits.ptr() + i * classes;
        int arg = 0;
        for (int c = 1; c < classes; ++c)
          if (row[c] > row[arg]) arg = c;
        if (!std::isfinite(row[arg])) {
          finite = false;
          break;
        }
        if (arg == task.val.labels[static_cast<std::size_t>(start + i)]) ++correct;
      }
    }
    if (!finite) return {0.0, true};
    best_acc = std::max(best_acc, static_cast<double>(correct) / n_val);
  }
  return {best_acc, false};
}

}  // namespace

EvalOutcome FitnessEvaluator::evaluate(const ArchitectureTree& tree) const {
  if (config_.type == "validity") {
    Grammar grammar = build_grammar(tree.variant, tree.stop_probability);
    return {validate(tree, grammar).ok() ? 1.0 : 0.0, false};
  }
  if (config_.type == "param-surrogate") {
    ArchitectureTree copy = tree;
    if (!infer_shapes(copy)) return {0.0, true};
    const std::int64_t params = std::max<std::int64_t>(1, count_parameters(copy));
    return {-std::log10(static_cast<double>(params)), false};
  }
  return toy_train(*task_, config_.train, config_.eval_seed, tree);
}

// ---------------------------------------------------------------------------
// Strategies
// ---------------------------------------------------------------------------

namespace {

Individual make_individual(ArchitectureTree tree, int birth,
                           const std::string& parent_hash) {
  Individual ind;
  infer_shapes(tree);
  ind.hash = tree_hash_hex(tree);
  ind.parent_hash = parent_hash;
  ind.params = count_parameters(tree);
  ind.leaves = leaf_count_stored(tree);
  ind.birth_index = birth;
  ind.tree = std::move(tree);
  return ind;
}

void set_head_for_evaluator(ArchitectureTree& tree,
                            const FitnessEvaluator& evaluator) {
  tree.head.kind = TaskKind::Classification;
  tree.head.num_classes =
      evaluator.task() ? evaluator.task()->num_classes : 2;
  infer_shapes(tree);
}

// Shared fitness cache keyed by canonical serialization; candidates are
// trained independently but literal duplicates are not retrained. In-flight
// duplicates coalesce onto the first evaluation's future.
class EvalCache {
 public:
  explicit EvalCache(const FitnessEvaluator& evaluator, int workers)
      : evaluator_(evaluator), pool_(workers) {}

  EvalOutcome evaluate(const Individual& ind) {
    const std::string key = serialize(ind.tree);
    std::shared_ptr<std::promise<EvalOutcome>> owned;
    std::shared_future<EvalOutcome> fut;
    {
      std::lock_guard<std::mutex> lock(mutex_);
      auto it = futures_.find(key);
      if (it != futures_.end()) {
        fut = it->second;
      } else {
        owned = std::make_shared<std::promise<EvalOutcome>>();
        futures_.emplace(key, owned->get_future().share());
      }
    }
    if (!owned) return fut.get();
    try {
      EvalOutcome out = evaluator_.evaluate(ind.tree);
      owned->set_value(out);
      return out;
    } catch (...) {
      owned->set_exception(std::current_exception());
      throw;
    }
  }

  // Evaluates a batch concurrently, returning results in input order.
  std::vector<EvalOutcome> evaluate_all(const std::vector<Individual>& inds) {
    std::vector<std::future<EvalOutcome>> futures;
    futures.reserve(inds.size());
    for (const auto& ind : inds)
      futures.push_back(pool_.submit([this, &ind] { return evaluate(ind); }));
    std::vector<EvalOutcome> out;
    out.reserve(inds.size());
    for (auto& f : futures) out.push_back(f.get());
    return out;
  }

 private:
  const FitnessEvaluator& evaluator_;
  ThreadPool pool_;
  std::map<std::string, std::shared_future<EvalOutcome>> futures_;
  std::mutex mutex_;
};

void fill_report_stats(SamplingReport& report) {
  if (report.individuals.empty()) return;
  double sum = 0.0, sq = 0.0;
  report.min = report.individuals[0].fitness;
  report.max = report.individuals[0].fitness;
  for (const auto& ind : report.individuals) {
    sum += ind.fitness;
    sq += ind.fitness * ind.fitness;
    report.min = std::min(report.min, ind.fitness);
    report.max = std::max(report.max, ind.fitness);
  }
  const double n = static_cast<double>(report.individuals.size());
  report.mean = sum / n;
  const double var = std::max(0.0, sq / n - report.mean * report.mean);
  report.stddev = std::sqrt(var);
}

}  // namespace

SamplingReport random_sampling(const Grammar& grammar,
                               const ShapeState& input_state,
                               const FitnessEvaluator& evaluator, int k,
                               std::uint64_t seed, const SampleLimits& limits,
                               int workers) {
  SamplingReport report;
  Rng master(seed);
  std::vector<Individual> inds;
  for (int i = 0; i < k; ++i) {
    std::optional<ArchitectureTree> tree;
    while (!tree) {
      Rng child = master.split();
      tree = sample(grammar, input_state, child, limits);
      if (!tree) ++report.sampling_failures;
    }
    set_head_for_evaluator(*tree, evaluator);
    inds.push_back(make_individual(std::move(*tree), i, ""));
  }
  EvalCache cache(evaluator, workers);
  auto outcomes = cache.evaluate_all(inds);
  for (std::size_t i = 0; i < inds.size(); ++i) {
    inds[i].fitness = outcomes[i].fitness;
    inds[i].diverged = outcomes[i].diverged;
    inds[i].evaluated = true;
  }
  report.individuals = std::move(inds);
  fill_report_stats(report);
  return report;
}

namespace {

bool better_search_candidate(const Individual& a, const Individual& b) {
  // Higher fitness, then fewer parameters, then earlier birth.
  if (a.fitness != b.fitness) return a.fitness > b.fitness;
  if (a.params != b.params) return a.params < b.params;
  return a.birth_index < b.birth_index;
}

bool better_tournament_parent(const Individual& a, const Individual& b) {
  // Higher fitness, then fewer parameters, then younger.
  if (a.fitness != b.fitness) return a.fitness > b.fitness;
  if (a.params != b.params) return a.params < b.params;
  return a.birth_index > b.birth_index;
}

}  // namespace

Individual random_search(const Grammar& grammar, const ShapeState& input_state,
                         const FitnessEvaluator& evaluator, int k,
                         std::uint64_t seed, const SampleLimits& limits,
                         int workers, SamplingReport* report_out) {
  SamplingReport report =
      random_sampling(grammar, input_state, evaluator, k, seed, limits, workers);
  const Individual* best = &report.individuals[0];
  for (const auto& ind : report.individuals)
    if (better_search_candidate(ind, *best)) best = &ind;
  Individual result = *best;
  if (report_out) *report_out = std::move(report);
  return result;
}

// ---------------------------------------------------------------------------
// Config parsing
// ---------------------------------------------------------------------------

namespace {

[[noreturn]] void config_fail(const std::string& key, const std::string& what) {
  throw std::runtime_error("config error at " + key + ": " + what);
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    config_fail(key, e.what());
  }
}

}  // namespace

SearchSettings parse_search_settings(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("config parse error: ") + e.what());
  }
  if (get_or<int>(j, "config_schema", 1) != 1)
    config_fail("config_schema", "unsupported version");

  SearchSettings s;
  s.strategy = get_or<std::string>(j, "strategy", "evolution");
  if (s.strategy != "evolution" && s.strategy != "random-search" &&
      s.strategy != "random-sampling")
    config_fail("strategy", "must be evolution, random-search or random-sampling");

  const std::string variant = get_or<std::string>(j, "variant", "2d");
  if (variant != "2d" && variant != "1d") config_fail("variant", "must be 2d or 1d");
  s.variant = variant == "2d" ? GrammarVariant::TwoD : GrammarVariant::OneD;
  s.stop_probability = get_or<double>(j, "stop_probability", 0.32);
  if (!(s.stop_probability > 0.0 && s.stop_probability < 1.0))
    config_fail("stop_probability", "must lie in (0,1)");

  if (j.contains("input")) {
    const json& in = j["input"];
    ShapeState st;
    if (!in.contains("shape") || !in["shape"].is_array())
      config_fail("input.shape", "missing dimension array");
    for (const auto& d : in["shape"]) st.shape.push_back(d.get<std::int64_t>());
    st.mode = get_or<std::string>(in, "mode", "im") == "col" ? Mode::Col : Mode::Im;
    if (!st.well_formed()) config_fail("input", "malformed shape for mode");
    s.input = st;
  }

  if (j.contains("limits")) {
    const json& l = j["limits"];
    s.limits.max_nodes = get_or<std::int64_t>(l, "max_nodes", s.limits.max_nodes);
    s.limits.max_parameters =
        get_or<std::int64_t>(l, "max_parameters", s.limits.max_parameters);
    s.limits.max_feature_elements = get_or<std::int64_t>(
        l, "max_feature_elements", s.limits.max_feature_elements);
    s.limits.max_backtracks =
        get_or<int>(l, "max_backtracks", s.limits.max_backtracks);
    s.limits.max_mutation_retries =
        get_or<int>(l, "max_mutation_retries", s.limits.max_mutation_retries);
    s.limits.max_depth = get_or<std::int64_t>(l, "max_depth", s.limits.max_depth);
  }

  if (j.contains("evaluator")) {
    const json& e = j["evaluator"];
    s.evaluator.type = get_or<std::string>(e, "type", "toy-train");
    s.evaluator.task_id = get_or<std::string>(e, "task_id", "im-patterns");
    s.evaluator.task_seed = get_or<std::uint64_t>(e, "task_seed", 0);
    s.evaluator.eval_seed = get_or<std::uint64_t>(e, "eval_seed", 0);
    s.evaluator.train.epochs = get_or<int>(e, "epochs", 10);
    s.evaluator.train.learning_rate = get_or<double>(e, "learning_rate", 0.04);
    s.evaluator.train.weight_decay = get_or<double>(e, "weight_decay", 3e-4);
    s.evaluator.train.momentum = get_or<double>(e, "momentum", 0.9);
    s.evaluator.train.batch_size = get_or<int>(e, "batch_size", 64);
    if (s.evaluator.train.batch_size < 1) config_fail("evaluator.batch_size", "must be positive");
    if (s.evaluator.train.epochs < 1) config_fail("evaluator.epochs", "must be positive");
  }

  s.init = get_or<std::string>(j, "init", "scratch");
  if (s.init != "scratch" && s.init != "seeded" && s.init != "mixed")
    config_fail("init", "must be scratch, seeded or mixed");
  if (j.contains("seeds"))
    for (const auto& name : j["seeds"]) {
      const std::string n = name.get<std::string>();
      if (!find_seed(n)) config_fail("seeds", "unknown seed " + n);
      s.seeds.push_back(n);
    }
  if ((s.init == "seeded" || s.init == "mixed") && s.seeds.empty())
    config_fail("seeds", "seeded init requires at least one seed name");

  s.population_size = get_or<int>(j, "population_size", 100);
  s.tournament_size = get_or<int>(j, "tournament_size", 10);
  s.iterations = get_or<int>(j, "iterations", 200);
  s.samples = get_or<int>(j, "samples", 100);
  s.workers = get_or<int>(j, "workers", 0);
  s.rng_seed = get_or<std::uint64_t>(j, "rng_seed", 0);
  s.checkpoint_every = get_or<int>(j, "checkpoint_every", 50);
  if (s.population_size < 1) config_fail("population_size", "must be positive");
  if (s.tournament_size < 1 || s.tournament_size > s.population_size)
    config_fail("tournament_size", "must lie in [1, population_size]");
  if (s.iterations < 0) config_fail("iterations", "must be non-negative");
  if (s.samples < 1) config_fail("samples", "must be positive");
  if (s.checkpoint_every < 1) config_fail("checkpoint_every", "must be positive");
  return s;
}

namespace {

json settings_to_json(const SearchSettings& s) {
  json j;
  j["config_schema"] = 1;
  j["strategy"] = s.strategy;
  j["variant"] = grammar_variant_name(s.variant);
  j["stop_probability"] = s.stop_probability;
  if (s.input) {
    json in;
    in["shape"] = s.input->shape;
    in["mode"] = mode_name(s.input->mode);
    j["input"] = in;
  }
  json l;
  l["max_nodes"] = s.limits.max_nodes;
  l["max_parameters"] = s.limits.max_parameters;
  l["max_feature_elements"] = s.limits.max_feature_elements;
  l["max_backtracks"] = s.limits.max_backtracks;
  l["max_mutation_retries"] = s.limits.max_mutation_retries;
  l["max_depth"] = s.limits.max_depth;
  j["limits"] = l;
  json e;
  e["type"] = s.evaluator.type;
  e["task_id"] = s.evaluator.task_id;
  e["task_seed"] = s.evaluator.task_seed;
  e["eval_seed"] = s.evaluator.eval_seed;
  e["epochs"] = s.evaluator.train.epochs;
  e["learning_rate"] = s.evaluator.train.learning_rate;
  e["weight_decay"] = s.evaluator.train.weight_decay;
  e["momentum"] = s.evaluator.train.momentum;
  e["batch_size"] = s.evaluator.train.batch_size;
  j["evaluator"] = e;
  j["init"] = s.init;
  j["seeds"] = s.seeds;
  j["population_size"] = s.population_size;
  j["tournament_size"] = s.tournament_size;
  j["iterations"] = s.iterations;
  j["samples"] = s.samples;
  j["rng_seed"] = s.rng_seed;
  j["checkpoint_every"] = s.checkpoint_every;
  return j;
}

}  // namespace

std::string settings_hash(const SearchSettings& settings) {
  return hex64(fnv1a(settings_to_json(settings).dump()));
}

// ---------------------------------------------------------------------------
// Evolution run with streaming outputs
// ---------------------------------------------------------------------------

namespace {

struct RunFiles {
  fs::path history;
  fs::path summary;
  fs::path checkpoint;
};

json individual_history_line(int iteration, const Individual& ind) {
  json j;
  j["iteration"] = iteration;
  j["tree_hash"] = ind.hash;
  j["fitness"] = ind.fitness;
  if (ind.parent_hash.empty())
    j["parent_hash"] = nullptr;
  else
    j["parent_hash"] = ind.parent_hash;
  j["params"] = ind.params;
  j["leaf_count"] = ind.leaves;
  return j;
}

struct EvolutionState {
  Population population;
  int iteration = 0;
  int birth_counter = 0;
  std::uint64_t rng_state = 0;
  Individual best;
  bool has_best = false;
  int evaluations = 0;
  int skipped = 0;

  void consider_best(const Individual& ind) {
    if (!has_best || ind.fitness > best.fitness) {
      best = ind;
      has_best = true;
    }
  }
};

json checkpoint_to_json(const EvolutionState& st, const std::string& cfg_hash) {
  json j;
  j["checkpoint_schema"] = 1;
  j["settings_hash"] = cfg_hash;
  j["iteration"] = st.iteration;
  j["birth_counter"] = st.birth_counter;
  j["rng_state"] = st.rng_state;
  j["evaluations"] = st.evaluations;
  j["skipped"] = st.skipped;
  json pop = json::array();
  for (const auto& ind : st.population.queue) {
    json p;
    p["tree"] = serialize(ind.tree);
    p["fitness"] = ind.fitness;
    p["diverged"] = ind.diverged;
    p["birth_index"] = ind.birth_index;
    p["hash"] = ind.hash;
    p["parent_hash"] = ind.parent_hash;
    p["params"] = ind.params;
    p["leaf_count"] = ind.leaves;
    pop.push_back(std::move(p));
  }
  j["population"] = std::move(pop);
  if (st.has_best) {
    json b;
    b["tree"] = serialize(st.best.tree);
    b["fitness"] = st.best.fitness;
    b["birth_index"] = st.best.birth_index;
    b["hash"] = st.best.hash;
    j["best"] = std::move(b);
  }
  return j;
}

Individual individual_from_checkpoint(const json& p) {
  Individual ind;
  ind.tree = deserialize(p.at("tree").get<std::string>());
  infer_shapes(ind.tree);
  ind.fitness = p.at("fitness").get<double>();
  ind.diverged = p.value("diverged", false);
  ind.evaluated = true;
  ind.birth_index = p.at("birth_index").get<int>();
  ind.hash = p.at("hash").get<std::string>();
  ind.parent_hash = p.value("parent_hash", "");
  ind.params = p.at("params").get<std::int64_t>();
  ind.leaves = p.at("leaf_count").get<std::int64_t>();
  return ind;
}

EvolutionState checkpoint_from_json(const json& j, const std::string& cfg_hash) {
  if (j.value("checkpoint_schema", 0) != 1)
    throw std::runtime_error("unsupported checkpoint schema");
  if (j.at("settings_hash").get<std::string>() != cfg_hash)
    throw std::runtime_error("checkpoint belongs to a different configuration");
  EvolutionState st;
  st.iteration = j.at("iteration").get<int>();
  st.birth_counter = j.at("birth_counter").get<int>();
  st.rng_state = j.at("rng_state").get<std::uint64_t>();
  st.evaluations = j.value("evaluations", 0);
  st.skipped = j.value("skipped", 0);
  for (const auto& p : j.at("population"))
    st.population.queue.push_back(individual_from_checkpoint(p));
  if (j.contains("best")) {
    st.best = individual_from_checkpoint(j.at("best"));
    st.best.parent_hash.clear();
    st.has_best = true;
  }
  return st;
}

// Drops any history/summary rows written after the checkpointed iteration,
// so a resumed run reproduces the uninterrupted byte stream.
void rewind_file_to_iteration(const fs::path& path, int iteration, bool jsonl) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::vector<std::string> keep;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (jsonl) {
      json j = json::parse(line);
      if (j.at("iteration").get<int>() <= iteration) keep.push_back(line);
    } else {
      if (first) {
        keep.push_back(line);  // header
        first = false;
        continue;
      }
      const int it = std::atoi(line.c_str());
      if (it <= iteration) keep.push_back(line);
    }
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << "\n";
}

double population_mean(const Population& pop) {
  double sum = 0.0;
  for (const auto& ind : pop.queue) sum += ind.fitness;
  return pop.queue.empty() ? 0.0 : sum / static_cast<double>(pop.queue.size());
}

}  // namespace

RunResult run_search(const SearchSettings& settings, const std::string& out_dir,
                     bool resume, int halt_after) {
  const Grammar grammar =
      build_grammar(settings.variant, settings.stop_probability);
  FitnessEvaluator evaluator(settings.evaluator);

  ShapeState input_state;
  if (settings.input)
    input_state = *settings.input;
  else if (evaluator.task())
    input_state = evaluator.task()->input_state;
  else
    throw std::runtime_error("config error at input: required for this evaluator");

  if (evaluator.task() && settings.input &&
      !(settings.input->shape == evaluator.task()->input_state.shape &&
        settings.input->mode == evaluator.task()->input_state.mode))
    throw std::runtime_error(
        "config error at input: does not match the evaluator task input");
  if (resume && settings.strategy != "evolution")
    throw std::runtime_error("resume supports evolution runs only");

  fs::create_directories(out_dir);
  RunFiles files{fs::path(out_dir) / "history.jsonl",
                 fs::path(out_dir) / "summary.csv",
                 fs::path(out_dir) / "checkpoint.json"};
  const std::string cfg_hash = settings_hash(settings);

  EvalCache cache(evaluator, settings.workers);
  Rng rng(settings.rng_seed);

  auto evaluate_batch = [&](std::vector<Individual>& inds) {
    auto outcomes = cache.evaluate_all(inds);
    for (std::size_t i = 0; i < inds.size(); ++i) {
      inds[i].fitness = outcomes[i].fitness;
      inds[i].diverged = outcomes[i].diverged;
      inds[i].evaluated = true;
    }
  };

  // Non-evolution strategies: a flat batch of independent samples.
  if (settings.strategy != "evolution") {
    SamplingReport report =
        random_sampling(grammar, input_state, evaluator, settings.samples,
                        settings.rng_seed, settings.limits, settings.workers);
    std::ofstream hist(files.history, std::ios::trunc);
    std::ofstream summary(files.summary, std::ios::trunc);
    summary << "iteration,best_fitness,mean_fitness\n";
    double running_best = 0.0, running_sum = 0.0;
    for (std::size_t i = 0; i < report.individuals.size(); ++i) {
      const auto& ind = report.individuals[i];
      hist << individual_history_line(static_cast<int>(i), ind).dump() << "\n";
      running_best = i == 0 ? ind.fitness : std::max(running_best, ind.fitness);
      running_sum += ind.fitness;
      summary << i << "," << format_double(running_best) << ","
              << format_double(running_sum / static_cast<double>(i + 1)) << "\n";
    }
    RunResult result;
    result.evaluations = static_cast<int>(report.individuals.size());
    const Individual* best = &report.individuals[0];
    for (const auto& ind : report.individuals)
      if (better_search_candidate(ind, *best)) best = &ind;
    result.best = *best;
    result.report = std::move(report);
    return result;
  }

  EvolutionState st;
  std::ofstream hist, summary;

  if (resume) {
    std::ifstream ck(files.checkpoint);
    if (!ck) throw std::runtime_error("no checkpoint to resume in " + out_dir);
    json j = json::parse(std::string(std::istreambuf_iterator<char>(ck), {}));
    st = checkpoint_from_json(j, cfg_hash);
    rng.set_state(st.rng_state);
    rewind_file_to_iteration(files.history, st.iteration, true);
    rewind_file_to_iteration(files.summary, st.iteration, false);
    hist.open(files.history, std::ios::app);
    summary.open(files.summary, std::ios::app);
  } else {
    hist.open(files.history, std::ios::trunc);
    summary.open(files.summary, std::ios::trunc);
    summary << "iteration,best_fitness,mean_fitness\n";

    // Initial population: random samples, replicated seeds, or seeds plus
    // random fill.
    std::vector<Individual> init;
    if (settings.init == "scratch") {
      auto trees = random_population(grammar, input_state,
                                     settings.population_size, rng,
                                     settings.limits);
      for (auto& t : trees) {
        set_head_for_evaluator(t, evaluator);
        init.push_back(make_individual(std::move(t), st.birth_counter++, ""));
      }
    } else {
      std::vector<ArchitectureTree> seed_trees;
      for (const auto& name : settings.seeds) {
        HeadDescriptor head;
        head.kind = TaskKind::Classification;
        head.num_classes = evaluator.task() ? evaluator.task()->num_classes : 2;
        seed_trees.push_back(build_seed(name, input_state, head));
        auto report = validate(seed_trees.back(), grammar,
                               settings.limits.resource_limits());
        if (!report.ok())
          throw std::runtime_error("seed " + name +
                                   " invalid under this configuration:\n" +
                                   report.to_string());
      }
      const int n_seeded = settings.init == "seeded"
                               ? settings.population_size
                               : std::min<int>(settings.population_size,
                                               static_cast<int>(seed_trees.size()));
      for (int i = 0; i < n_seeded; ++i)
        init.push_back(make_individual(
            seed_trees[static_cast<std::size_t>(i) % seed_trees.size()],
            st.birth_counter++, ""));
      if (settings.init == "mixed") {
        auto trees = random_population(
            grammar, input_state, settings.population_size - n_seeded, rng,
            settings.limits);
        for (auto& t : trees) {
          set_head_for_evaluator(t, evaluator);
          init.push_back(make_individual(std::move(t), st.birth_counter++, ""));
        }
      }
    }
    evaluate_batch(init);
    st.evaluations += static_cast<int>(init.size());
    st.population.capacity = static_cast<std::size_t>(settings.population_size);
    for (auto& ind : init) {
      hist << individual_history_line(0, ind).dump() << "\n";
      st.consider_best(ind);
      st.population.push(std::move(ind));
    }
    summary << 0 << "," << format_double(st.best.fitness) << ","
            << format_double(population_mean(st.population)) << "\n";
    st.rng_state = rng.state();
    std::ofstream ck(files.checkpoint, std::ios::trunc);
    ck << checkpoint_to_json(st, cfg_hash).dump(2) << "\n";
  }

  st.population.capacity = static_cast<std::size_t>(settings.population_size);

  int done_this_invocation = 0;
  while (st.iteration < settings.iterations) {
    if (halt_after > 0 && done_this_invocation >= halt_after) break;
    ++st.iteration;
    ++done_this_invocation;

    // Tournament of uniform draws without replacement.
    const std::size_t n = st.population.queue.size();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    const std::size_t t = std::min<std::size_t>(
        static_cast<std::size_t>(settings.tournament_size), n);
    for (std::size_t i = 0; i < t; ++i) {
      std::size_t j = i + static_cast<std::size_t>(rng.uniform_int(n - i));
      std::swap(idx[i], idx[j]);
    }
    const Individual* parent = &st.population.queue[idx[0]];
    for (std::size_t i = 1; i < t; ++i) {
      const Individual& cand = st.population.queue[idx[i]];
      if (better_tournament_parent(cand, *parent)) parent = &cand;
    }

    auto child_tree = mutate(parent->tree, grammar, rng, settings.limits);
    if (!child_tree) {
      ++st.skipped;
      summary << st.iteration << "," << format_double(st.best.fitness) << ","
              << format_double(population_mean(st.population)) << "\n";
    } else {
      Individual child =
          make_individual(std::move(*child_tree), st.birth_counter++, parent->hash);
      auto outcome = cache.evaluate(child);
      child.fitness = outcome.fitness;
      child.diverged = outcome.diverged;
      child.evaluated = true;
      ++st.evaluations;
      hist << individual_history_line(st.iteration, child).dump() << "\n";
      st.consider_best(child);
      st.population.push(std::move(child));
      summary << st.iteration << "," << format_double(st.best.fitness) << ","
              << format_double(population_mean(st.population)) << "\n";
    }

    if (st.iteration % settings.checkpoint_every == 0 ||
        st.iteration == settings.iterations) {
      hist.flush();
      summary.flush();
      st.rng_state = rng.state();
      std::ofstream ck(files.checkpoint, std::ios::trunc);
      ck << checkpoint_to_json(st, cfg_hash).dump(2) << "\n";
    }
  }

  // Final checkpoint when halting early.
  hist.flush();
  summary.flush();
  st.rng_state = rng.state();
  {
    std::ofstream ck(files.checkpoint, std::ios::trunc);
    ck << checkpoint_to_json(st, cfg_hash).dump(2) << "\n";
  }

  RunResult result;
  result.best = st.best;
  result.evaluations = st.evaluations;
  result.skipped_mutations = st.skipped;
  return result;
}

}  // namespace arbor
