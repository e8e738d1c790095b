// SPDX-License-Identifier: Apache-2.0
// Command-line workbench: grammar analysis, sampling, mutation, search
// runs, fitness evaluation, seed export, statistics and string counting.
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "arbor/counting.hpp"
#include "arbor/grammar.hpp"
#include "arbor/interp.hpp"
#include "arbor/sampler.hpp"
#include "arbor/search.hpp"
#include "arbor/seeds.hpp"
#include "arbor/tree.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

arbor::ShapeState parse_input_state(const std::string& spec,
                                    const std::string& mode) {
  std::vector<std::int64_t> dims;
  std::stringstream ss(spec);
  std::string part;
  while (std::getline(ss, part, 'x')) dims.push_back(std::stoll(part));
  arbor::ShapeState state;
  state.shape = dims;
  state.mode = mode == "col" ? arbor::Mode::Col : arbor::Mode::Im;
  if (!state.well_formed())
    throw CLI::ValidationError("--input", "shape " + spec +
                                              " is malformed for mode " + mode);
  return state;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << text;
}

arbor::GrammarVariant parse_variant(const std::string& v) {
  return v == "1d" ? arbor::GrammarVariant::OneD : arbor::GrammarVariant::TwoD;
}

struct LimitOptions {
  arbor::SampleLimits limits;

  void attach(CLI::App* cmd) {
    cmd->add_option("--max-nodes", limits.max_nodes, "Node budget per tree");
    cmd->add_option("--max-params", limits.max_parameters,
                    "Learnable parameter budget");
    cmd->add_option("--max-elements", limits.max_feature_elements,
                    "Feature element budget per state");
    cmd->add_option("--max-backtracks", limits.max_backtracks,
                    "Sampler backtrack budget");
  }
};

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

int cmd_analyze(const std::string& variant, double p, bool as_json,
                const std::string& dump_path) {
  auto family = [&](double stop) {
    return arbor::build_grammar(parse_variant(variant), stop);
  };
  arbor::Grammar grammar = family(p);
  const double rate = arbor::branching_rate(grammar);
  const auto critical = arbor::critical_stop_probability(family);
  const bool subcritical = rate < 1.0;
  double expected_length = 0.0;
  if (subcritical) expected_length = arbor::expected_string_length(grammar);

  if (!dump_path.empty()) write_file(dump_path, arbor::grammar_to_json(grammar));

  if (as_json) {
    json j;
    j["variant"] = variant;
    j["stop_probability"] = p;
    j["branching_rate"] = rate;
    j["verdict"] = subcritical ? "sub-critical" : "super-critical";
    j["critical_stop_probability"] = critical.stop_probability;
    j["always_subcritical"] = critical.always_subcritical;
    if (subcritical) j["expected_string_length"] = expected_length;
    std::cout << j.dump(2) << "\n";
    return kExitOk;
  }
  std::cout << "variant:            " << variant << "\n";
  std::cout << "stop probability:   " << format_double(p) << "\n";
  std::cout << "branching rate:     " << format_double(rate) << "\n";
  std::cout << "verdict:            "
            << (subcritical ? "sub-critical" : "super-critical") << "\n";
  if (critical.always_subcritical)
    std::cout << "critical stop prob: none (always sub-critical)\n";
  else
    std::cout << "critical stop prob: " << format_double(critical.stop_probability)
              << "\n";
  if (subcritical)
    std::cout << "expected length:    " << format_double(expected_length) << "\n";
  else
    std::cout << "expected length:    divergent\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

int cmd_sample(const std::string& variant, double p, std::uint64_t seed,
               const std::string& input_spec, const std::string& mode, int n,
               const std::string& out, const std::string& out_dir,
               const arbor::SampleLimits& limits) {
  arbor::Grammar grammar = arbor::build_grammar(parse_variant(variant), p);
  arbor::ShapeState input = parse_input_state(input_spec, mode);
  if (arbor::branching_rate(grammar) >= 1.0)
    std::cerr << "warning: super-critical grammar; sampling relies on resource limits\n";

  arbor::Rng rng(seed);
  std::vector<std::string> payloads;
  for (int i = 0; i < n; ++i) {
    std::optional<arbor::ArchitectureTree> tree;
    for (int attempt = 0; attempt < 100 && !tree; ++attempt) {
      arbor::Rng child = rng.split();
      tree = arbor::sample(grammar, input, child, limits);
    }
    if (!tree) throw std::runtime_error("sampling failed for tree " + std::to_string(i));
    payloads.push_back(arbor::serialize(*tree));
  }

  if (n == 1 && !out.empty()) {
    write_file(out, payloads[0] + "\n");
    std::cout << out << "\n";
    return kExitOk;
  }
  fs::create_directories(out_dir);
  for (int i = 0; i < n; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "tree_%05d.json", i);
    write_file((fs::path(out_dir) / name).string(), payloads[static_cast<std::size_t>(i)] + "\n");
  }
  std::cout << out_dir << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// mutate
// ---------------------------------------------------------------------------

int cmd_mutate(const std::string& in_path, std::uint64_t seed,
               const std::string& out, const arbor::SampleLimits& limits) {
  arbor::ArchitectureTree tree = arbor::deserialize(read_file(in_path));
  arbor::Grammar grammar =
      arbor::build_grammar(tree.variant, tree.stop_probability);
  arbor::Rng rng(seed);
  auto mutated = arbor::mutate(tree, grammar, rng, limits);
  if (!mutated) throw std::runtime_error("mutation failed after retries");
  write_file(out, arbor::serialize(*mutated) + "\n");
  std::cout << out << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const std::string& in_path, const std::string& evaluator_type,
             const std::string& task_id, std::uint64_t task_seed,
             std::uint64_t eval_seed, int epochs, double lr, double wd,
             double momentum, int batch_size, bool as_json,
             const std::string& weights_out) {
  arbor::ArchitectureTree tree = arbor::deserialize(read_file(in_path));
  arbor::EvaluatorConfig cfg;
  cfg.type = evaluator_type;
  cfg.task_id = task_id;
  cfg.task_seed = task_seed;
  cfg.eval_seed = eval_seed;
  cfg.train.epochs = epochs;
  cfg.train.learning_rate = lr;
  cfg.train.weight_decay = wd;
  cfg.train.momentum = momentum;
  cfg.train.batch_size = batch_size;
  arbor::FitnessEvaluator evaluator(cfg);

  if (evaluator.task()) {
    tree.head.kind = arbor::TaskKind::Classification;
    tree.head.num_classes = evaluator.task()->num_classes;
  }
  arbor::infer_shapes(tree);

  if (!weights_out.empty()) {
    arbor::Rng rng(eval_seed);
    arbor::ParamStore params = arbor::init_params(tree, rng);
    arbor::dump_weights(params, weights_out);
  }

  auto outcome = evaluator.evaluate(tree);
  if (as_json) {
    json j;
    j["evaluator"] = evaluator.descriptor();
    j["fitness"] = outcome.fitness;
    j["diverged"] = outcome.diverged;
    j["tree_hash"] = arbor::tree_hash_hex(tree);
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << "evaluator: " << evaluator.descriptor() << "\n";
    std::cout << "fitness:   " << format_double(outcome.fitness)
              << (outcome.diverged ? " (diverged)" : "") << "\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// seeds
// ---------------------------------------------------------------------------

int cmd_seeds_list() {
  for (const auto& seed : arbor::seed_library()) {
    std::cout << seed.name << "  input " << seed.default_input.to_string()
              << "  " << seed.description << "\n";
  }
  return kExitOk;
}

int cmd_seeds_export(const std::string& name, const std::string& out,
                     const std::string& input_spec, const std::string& mode,
                     int classes) {
  std::optional<arbor::ShapeState> input;
  if (!input_spec.empty()) input = parse_input_state(input_spec, mode);
  std::optional<arbor::HeadDescriptor> head;
  if (classes > 0) {
    arbor::HeadDescriptor h;
    h.kind = arbor::TaskKind::Classification;
    h.num_classes = classes;
    head = h;
  }
  arbor::ArchitectureTree tree = arbor::build_seed(name, input, head);
  write_file(out, arbor::serialize(tree) + "\n");
  std::cout << out << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// stats
// ---------------------------------------------------------------------------

struct SeriesSummary {
  double min_v, mean, median, std_dev, max_v;
};

SeriesSummary summarize(std::vector<double> v) {
  SeriesSummary s{};
  std::sort(v.begin(), v.end());
  s.min_v = v.front();
  s.max_v = v.back();
  const double n = static_cast<double>(v.size());
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  s.median = v.size() % 2 ? v[v.size() / 2]
                          : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
  double sq = 0.0;
  for (double x : v) sq += (x - s.mean) * (x - s.mean);
  s.std_dev = std::sqrt(sq / n);
  return s;
}

void write_svg_histogram(const std::string& path,
                         const std::vector<std::pair<std::string, std::int64_t>>& rows) {
  std::int64_t max_count = 1;
  for (const auto& [name, count] : rows) max_count = std::max(max_count, count);
  const int bar_h = 14, gap = 4, left = 260, width = 640;
  const int height = static_cast<int>(rows.size()) * (bar_h + gap) + 20;
  std::ostringstream svg;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << left + width + 80
      << "' height='" << height << "' font-family='monospace' font-size='11'>\n";
  int y = 10;
  for (const auto& [name, count] : rows) {
    const int w = static_cast<int>(static_cast<double>(count) / max_count * width);
    svg << "<text x='" << left - 8 << "' y='" << y + bar_h - 3
        << "' text-anchor='end'>" << name << "</text>\n";
    svg << "<rect x='" << left << "' y='" << y << "' width='" << std::max(1, w)
        << "' height='" << bar_h << "' fill='#4878a8'/>\n";
    svg << "<text x='" << left + std::max(1, w) + 6 << "' y='" << y + bar_h - 3
        << "'>" << count << "</text>\n";
    y += bar_h + gap;
  }
  svg << "</svg>\n";
  write_file(path, svg.str());
}

int cmd_stats(const std::string& variant, double p, int n, std::uint64_t seed,
              const std::string& input_spec, const std::string& mode,
              const std::string& csv_path, const std::string& hist_path,
              const std::string& svg_path, const arbor::SampleLimits& limits) {
  arbor::Grammar grammar = arbor::build_grammar(parse_variant(variant), p);
  arbor::ShapeState input = parse_input_state(input_spec, mode);
  arbor::Rng rng(seed);

  std::vector<double> leaves, terminals, nonterminals, branching;
  std::map<std::string, std::int64_t> histogram;
  std::int64_t total_expanded = 0;
  for (int i = 0; i < n; ++i) {
    std::optional<arbor::ArchitectureTree> tree;
    while (!tree) {
      arbor::Rng child = rng.split();
      tree = arbor::sample(grammar, input, child, limits);
    }
    leaves.push_back(static_cast<double>(arbor::leaf_count_stored(*tree)));
    terminals.push_back(static_cast<double>(arbor::leaf_count_expanded(*tree)));
    nonterminals.push_back(
        static_cast<double>(arbor::nonterminal_count_stored(*tree)));
    branching.push_back(arbor::mean_branching_factor(*tree));
    for (const auto& [name, count] : arbor::leaf_histogram(*tree)) {
      histogram[name] += count;
      total_expanded += count;
    }
  }

  std::ostringstream csv;
  csv << "p,stat,leaves_stored,terminals_expanded,nonterminals,mean_branching\n";
  const char* stat_names[] = {"min", "mean", "median", "std", "max"};
  const SeriesSummary sums[] = {summarize(leaves), summarize(terminals),
                                summarize(nonterminals), summarize(branching)};
  for (int row = 0; row < 5; ++row) {
    csv << format_double(p) << "," << stat_names[row];
    for (const auto& s : sums) {
      const double v = row == 0   ? s.min_v
                       : row == 1 ? s.mean
                       : row == 2 ? s.median
                       : row == 3 ? s.std_dev
                                  : s.max_v;
      csv << "," << format_double(v);
    }
    csv << "\n";
  }
  if (!csv_path.empty()) write_file(csv_path, csv.str());
  std::cout << csv.str();

  if (!hist_path.empty() || !svg_path.empty()) {
    std::vector<std::pair<std::string, std::int64_t>> rows(histogram.begin(),
                                                           histogram.end());
    if (!hist_path.empty()) {
      std::ostringstream hist_csv;
      hist_csv << "terminal,count\n";
      for (const auto& [name, count] : rows)
        hist_csv << name << "," << count << "\n";
      hist_csv << "total," << total_expanded << "\n";
      write_file(hist_path, hist_csv.str());
    }
    if (!svg_path.empty()) write_svg_histogram(svg_path, rows);
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// count
// ---------------------------------------------------------------------------

int cmd_count(const std::string& skeleton, std::uint64_t chi, int n, bool table,
              bool as_json) {
  arbor::SkeletonSpec spec = skeleton == "dyck1"
                                 ? arbor::dyck1_skeleton()
                                 : arbor::architecture_skeleton(chi);
  const int lo = table ? 2 : n;
  json rows = json::array();
  for (int len = lo; len <= n; ++len) {
    const std::uint64_t count = arbor::count_architecture_strings(spec, len);
    if (as_json) {
      rows.push_back({{"n", len}, {"count", count}});
    } else {
      std::cout << len << " " << count << "\n";
    }
  }
  if (as_json) {
    json j;
    j["skeleton"] = skeleton;
    j["chi"] = chi;
    j["counts"] = rows;
    std::cout << j.dump(2) << "\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// search
// ---------------------------------------------------------------------------

int cmd_search(const std::string& config_path, std::string out_dir, bool resume,
               int halt_after) {
  arbor::SearchSettings settings =
      arbor::parse_search_settings(read_file(config_path));
  if (const char* env = std::getenv("ARBOR_WORKERS"))
    settings.workers = std::atoi(env);
  if (const char* env = std::getenv("ARBOR_OUT_DIR"))
    if (out_dir.empty()) out_dir = env;
  if (out_dir.empty()) out_dir = "search_out";

  auto result = arbor::run_search(settings, out_dir, resume, halt_after);
  std::cout << "strategy:    " << settings.strategy << "\n";
  std::cout << "evaluations: " << result.evaluations << "\n";
  if (result.skipped_mutations)
    std::cout << "skipped:     " << result.skipped_mutations << " mutations\n";
  std::cout << "best fitness " << format_double(result.best.fitness) << " hash "
            << result.best.hash << " params " << result.best.params << "\n";
  std::cout << "outputs in " << out_dir << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"grammar-based neural architecture search workbench"};
  app.require_subcommand(1);

  // analyze
  std::string an_variant = "2d";
  double an_p = 0.32;
  bool an_json = false;
  std::string an_dump;
  auto* analyze = app.add_subcommand("analyze", "Grammar consistency analysis");
  analyze->add_option("--variant", an_variant, "Grammar variant (2d|1d)")
      ->check(CLI::IsMember({"2d", "1d"}));
  analyze->add_option("--p", an_p, "Stop probability p(M->C|M)")
      ->check(CLI::Range(1e-9, 1.0 - 1e-9));
  analyze->add_flag("--json", an_json, "Machine-readable output");
  analyze->add_option("--dump-grammar", an_dump, "Write the rule set as JSON");

  // sample
  std::string sm_variant = "2d", sm_input = "3x32x32", sm_mode = "im";
  std::string sm_out, sm_out_dir = "samples";
  double sm_p = 0.32;
  std::uint64_t sm_seed = 0;
  int sm_n = 1;
  LimitOptions sm_limits;
  auto* sample_cmd = app.add_subcommand("sample", "Sample architecture trees");
  sample_cmd->add_option("--variant", sm_variant)->check(CLI::IsMember({"2d", "1d"}));
  sample_cmd->add_option("--p", sm_p, "Stop probability")
      ->check(CLI::Range(1e-9, 1.0 - 1e-9));
  sample_cmd->add_option("--seed", sm_seed, "Random seed");
  sample_cmd->add_option("--input", sm_input, "Input shape, e.g. 3x32x32");
  sample_cmd->add_option("--mode", sm_mode)->check(CLI::IsMember({"im", "col"}));
  sample_cmd->add_option("--n", sm_n, "Number of trees")->check(CLI::PositiveNumber);
  sample_cmd->add_option("--out", sm_out, "Output file (n=1)");
  sample_cmd->add_option("--out-dir", sm_out_dir, "Output directory (n>1)");
  sm_limits.attach(sample_cmd);

  // mutate
  std::string mu_in, mu_out = "mutated.json";
  std::uint64_t mu_seed = 0;
  LimitOptions mu_limits;
  auto* mutate_cmd = app.add_subcommand("mutate", "Mutate a tree file");
  mutate_cmd->add_option("--in", mu_in, "Input tree JSON")->required();
  mutate_cmd->add_option("--seed", mu_seed, "Random seed");
  mutate_cmd->add_option("--out", mu_out, "Output tree JSON");
  mu_limits.attach(mutate_cmd);

  // eval
  std::string ev_in, ev_type = "toy-train", ev_task = "im-patterns", ev_weights;
  std::uint64_t ev_task_seed = 0, ev_eval_seed = 0;
  int ev_epochs = 10, ev_batch = 64;
  double ev_lr = 0.04, ev_wd = 3e-4, ev_mom = 0.9;
  bool ev_json = false;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a tree's fitness");
  eval_cmd->add_option("--in", ev_in, "Input tree JSON")->required();
  eval_cmd->add_option("--evaluator", ev_type)
      ->check(CLI::IsMember({"validity", "param-surrogate", "toy-train"}));
  eval_cmd->add_option("--task", ev_task, "Synthetic task id");
  eval_cmd->add_option("--task-seed", ev_task_seed);
  eval_cmd->add_option("--eval-seed", ev_eval_seed);
  eval_cmd->add_option("--epochs", ev_epochs)->check(CLI::PositiveNumber);
  eval_cmd->add_option("--batch-size", ev_batch)->check(CLI::PositiveNumber);
  eval_cmd->add_option("--lr", ev_lr);
  eval_cmd->add_option("--weight-decay", ev_wd);
  eval_cmd->add_option("--momentum", ev_mom);
  eval_cmd->add_flag("--json", ev_json);
  eval_cmd->add_option("--dump-weights", ev_weights,
                       "Write initial parameters as binary");

  // seeds
  auto* seeds_cmd = app.add_subcommand("seeds", "Seed architecture library");
  auto* seeds_list = seeds_cmd->add_subcommand("list", "List available seeds");
  std::string se_name, se_out = "seed.json", se_input, se_mode = "im";
  int se_classes = 0;
  auto* seeds_export = seeds_cmd->add_subcommand("export", "Write a seed tree");
  seeds_export->add_option("name", se_name, "Seed name")->required();
  seeds_export->add_option("--out", se_out, "Output file");
  seeds_export->add_option("--input", se_input, "Override input shape");
  seeds_export->add_option("--mode", se_mode)->check(CLI::IsMember({"im", "col"}));
  seeds_export->add_option("--classes", se_classes, "Head class count");
  seeds_cmd->require_subcommand(1);

  // stats
  std::string st_variant = "2d", st_input = "3x28x28", st_mode = "im";
  std::string st_csv, st_hist, st_svg;
  double st_p = 0.9;
  int st_n = 2000;
  std::uint64_t st_seed = 0;
  LimitOptions st_limits;
  auto* stats_cmd = app.add_subcommand("stats", "Sampled complexity statistics");
  stats_cmd->add_option("--variant", st_variant)->check(CLI::IsMember({"2d", "1d"}));
  stats_cmd->add_option("--p", st_p, "Stop probability")
      ->check(CLI::Range(1e-9, 1.0 - 1e-9));
  stats_cmd->add_option("--n", st_n, "Number of samples")->check(CLI::PositiveNumber);
  stats_cmd->add_option("--seed", st_seed, "Random seed");
  stats_cmd->add_option("--input", st_input, "Input shape");
  stats_cmd->add_option("--mode", st_mode)->check(CLI::IsMember({"im", "col"}));
  stats_cmd->add_option("--csv", st_csv, "Write summary table CSV");
  stats_cmd->add_option("--hist", st_hist, "Write terminal histogram CSV");
  stats_cmd->add_option("--svg", st_svg, "Write histogram as SVG");
  st_limits.attach(stats_cmd);

  // count
  std::string co_skeleton = "arch";
  std::uint64_t co_chi = 13;
  int co_n = 8;
  bool co_table = false, co_json = false;
  auto* count_cmd = app.add_subcommand("count", "Count architecture strings");
  count_cmd->add_option("--skeleton", co_skeleton)
      ->check(CLI::IsMember({"arch", "dyck1"}));
  count_cmd->add_option("--chi", co_chi, "Computation terminal count");
  count_cmd->add_option("--n", co_n, "String length")->check(CLI::PositiveNumber);
  count_cmd->add_flag("--table", co_table, "Print all lengths 2..n");
  count_cmd->add_flag("--json", co_json);

  // search
  std::string sr_config, sr_out;
  bool sr_resume = false;
  int sr_halt = 0;
  auto* search_cmd = app.add_subcommand("search", "Run a configured search");
  search_cmd->add_option("--config", sr_config, "JSON config file")->required();
  search_cmd->add_option("--out", sr_out, "Output directory");
  search_cmd->add_flag("--resume", sr_resume, "Continue from checkpoint");
  search_cmd->add_option("--halt-after", sr_halt,
                         "Stop after N iterations this invocation");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*analyze) return cmd_analyze(an_variant, an_p, an_json, an_dump);
    if (*sample_cmd)
      return cmd_sample(sm_variant, sm_p, sm_seed, sm_input, sm_mode, sm_n,
                        sm_out, sm_out_dir, sm_limits.limits);
    if (*mutate_cmd) return cmd_mutate(mu_in, mu_seed, mu_out, mu_limits.limits);
    if (*eval_cmd)
      return cmd_eval(ev_in, ev_type, ev_task, ev_task_seed, ev_eval_seed,
                      ev_epochs, ev_lr, ev_wd, ev_mom, ev_batch, ev_json,
                      ev_weights);
    if (*seeds_cmd) {
      if (*seeds_list) return cmd_seeds_list();
      return cmd_seeds_export(se_name, se_out, se_input, se_mode, se_classes);
    }
    if (*stats_cmd)
      return cmd_stats(st_variant, st_p, st_n, st_seed, st_input, st_mode,
                       st_csv, st_hist, st_svg, st_limits.limits);
    if (*count_cmd) return cmd_count(co_skeleton, co_chi, co_n, co_table, co_json);
    if (*search_cmd) return cmd_search(sr_config, sr_out, sr_resume, sr_halt);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
