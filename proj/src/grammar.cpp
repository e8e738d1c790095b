// SPDX-License-Identifier: Apache-2.0
#include "arbor/grammar.hpp"

#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace arbor {

using nlohmann::json;

const char* nonterminal_name(Nonterminal nt) {
  switch (nt) {
    case Nonterminal::S: return "S";
    case Nonterminal::M: return "M";
    case Nonterminal::B: return "B";
    case Nonterminal::A: return "A";
    case Nonterminal::P: return "P";
    case Nonterminal::R: return "R";
    case Nonterminal::C: return "C";
  }
  return "?";
}

std::optional<Nonterminal> nonterminal_from_name(const std::string& name) {
  if (name.size() != 1) return std::nullopt;
  switch (name[0]) {
    case 'S': return Nonterminal::S;
    case 'M': return Nonterminal::M;
    case 'B': return Nonterminal::B;
    case 'A': return Nonterminal::A;
    case 'P': return Nonterminal::P;
    case 'R': return Nonterminal::R;
    case 'C': return Nonterminal::C;
  }
  return std::nullopt;
}

const char* op_kind_name(OpKind k) {
  switch (k) {
    case OpKind::Identity: return "identity";
    case OpKind::Clone: return "clone";
    case OpKind::Group: return "group";
    case OpKind::Matmul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Concat: return "concat";
    case OpKind::Im2col: return "im2col";
    case OpKind::Col2im: return "col2im";
    case OpKind::Permute: return "permute";
    case OpKind::Linear: return "linear";
    case OpKind::Norm: return "norm";
    case OpKind::Relu: return "relu";
    case OpKind::Softmax: return "softmax";
    case OpKind::PosEnc: return "pos-enc";
    case OpKind::Conv1d: return "conv1d";
  }
  return "?";
}

std::optional<OpKind> op_kind_from_name(const std::string& name) {
  static const std::map<std::string, OpKind> table = {
      {"identity", OpKind::Identity}, {"clone", OpKind::Clone},
      {"group", OpKind::Group},       {"matmul", OpKind::Matmul},
      {"add", OpKind::Add},           {"concat", OpKind::Concat},
      {"im2col", OpKind::Im2col},     {"col2im", OpKind::Col2im},
      {"permute", OpKind::Permute},   {"linear", OpKind::Linear},
      {"norm", OpKind::Norm},         {"relu", OpKind::Relu},
      {"softmax", OpKind::Softmax},   {"pos-enc", OpKind::PosEnc},
      {"conv1d", OpKind::Conv1d},
  };
  auto it = table.find(name);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

std::string TerminalSpec::name() const {
  std::ostringstream os;
  os << op_kind_name(kind);
  switch (kind) {
    case OpKind::Clone: os << "(b=" << b << ")"; break;
    case OpKind::Group: os << "(dim=" << dim << ",b=" << b << ")"; break;
    case OpKind::Concat: os << "(dim=" << dim << ",b=" << b << ")"; break;
    case OpKind::Matmul: os << "(scaled=" << (scaled ? "true" : "false") << ")"; break;
    case OpKind::Im2col: os << "(k=" << k << ",s=" << s << ",p=" << p << ")"; break;
    case OpKind::Linear: os << "(d=" << d << ")"; break;
    case OpKind::Conv1d:
      os << "(k=" << k << ",s=" << s << ",p=" << p << ",d=" << d << ")";
      break;
    case OpKind::Permute: {
      os << "(o=(";
      for (std::size_t i = 0; i < order.size(); ++i) {
        if (i) os << ",";
        os << order[i];
      }
      os << "))";
      break;
    }
    default: break;
  }
  return os.str();
}

TerminalSpec identity_op() { return TerminalSpec{}; }

TerminalSpec clone_op(int b) {
  TerminalSpec t;
  t.kind = OpKind::Clone;
  t.b = b;
  return t;
}

TerminalSpec group_op(int dim, int b) {
  TerminalSpec t;
  t.kind = OpKind::Group;
  t.dim = dim;
  t.b = b;
  return t;
}

TerminalSpec matmul_op(bool scaled) {
  TerminalSpec t;
  t.kind = OpKind::Matmul;
  t.scaled = scaled;
  return t;
}

TerminalSpec add_op() {
  TerminalSpec t;
  t.kind = OpKind::Add;
  return t;
}

TerminalSpec concat_op(int dim, int b) {
  TerminalSpec t;
  t.kind = OpKind::Concat;
  t.dim = dim;
  t.b = b;
  return t;
}

TerminalSpec im2col_op(int k, int s, int p) {
  TerminalSpec t;
  t.kind = OpKind::Im2col;
  t.k = k;
  t.s = s;
  t.p = p;
  return t;
}

TerminalSpec col2im_op() {
  TerminalSpec t;
  t.kind = OpKind::Col2im;
  return t;
}

TerminalSpec permute_op(std::vector<int> order) {
  TerminalSpec t;
  t.kind = OpKind::Permute;
  t.order = std::move(order);
  return t;
}

TerminalSpec linear_op(int d) {
  TerminalSpec t;
  t.kind = OpKind::Linear;
  t.d = d;
  return t;
}

TerminalSpec norm_op() {
  TerminalSpec t;
  t.kind = OpKind::Norm;
  return t;
}

TerminalSpec relu_op() {
  TerminalSpec t;
  t.kind = OpKind::Relu;
  return t;
}

TerminalSpec softmax_op() {
  TerminalSpec t;
  t.kind = OpKind::Softmax;
  return t;
}

TerminalSpec pos_enc_op() {
  TerminalSpec t;
  t.kind = OpKind::PosEnc;
  return t;
}

TerminalSpec conv1d_op(int k, int s, int p, int d) {
  TerminalSpec t;
  t.kind = OpKind::Conv1d;
  t.k = k;
  t.s = s;
  t.p = p;
  t.d = d;
  return t;
}

const char* grammar_variant_name(GrammarVariant v) {
  return v == GrammarVariant::TwoD ? "2d" : "1d";
}

std::vector<int> Grammar::rules_for(Nonterminal nt) const {
  std::vector<int> ids;
  for (int i = 0; i < static_cast<int>(rules.size()); ++i)
    if (rules[i].lhs == nt) ids.push_back(i);
  return ids;
}

const std::vector<Nonterminal>& Grammar::nonterminals() const {
  static const std::vector<Nonterminal> two_d = {
      Nonterminal::S, Nonterminal::M, Nonterminal::B, Nonterminal::A,
      Nonterminal::P, Nonterminal::R, Nonterminal::C};
  static const std::vector<Nonterminal> one_d = {
      Nonterminal::S, Nonterminal::M, Nonterminal::B,
      Nonterminal::A, Nonterminal::R, Nonterminal::C};
  return variant == GrammarVariant::TwoD ? two_d : one_d;
}

namespace {

void add_terminal_family(Grammar& g, Nonterminal lhs,
                         std::vector<std::pair<TerminalSpec, Guard>> options) {
  double p = 1.0 / static_cast<double>(options.size());
  for (auto& [term, guard] : options) {
    ProductionRule r;
    r.lhs = lhs;
    r.guard = guard;
    r.rhs = {Symbol{term}};
    r.probability = p;
    g.rules.push_back(std::move(r));
  }
}

Guard im_only() {
  Guard g;
  g.mode = Mode::Im;
  return g;
}

Guard col_only() {
  Guard g;
  g.mode = Mode::Col;
  return g;
}

Guard b_is(int b) {
  Guard g;
  g.branching_factor = b;
  return g;
}

Guard col_and_b(int b) {
  Guard g;
  g.mode = Mode::Col;
  g.branching_factor = b;
  return g;
}

Guard im_and_b(int b) {
  Guard g;
  g.mode = Mode::Im;
  g.branching_factor = b;
  return g;
}

}  // namespace

Grammar build_grammar(GrammarVariant variant, double stop_probability) {
  if (!(stop_probability > 0.0 && stop_probability < 1.0))
    throw std::invalid_argument("stop_probability must lie in (0,1), got " +
                                std::to_string(stop_probability));

  Grammar g;
  g.variant = variant;
  g.stop_probability = stop_probability;
  const double q = (1.0 - stop_probability) / 3.0;
  const bool two_d = variant == GrammarVariant::TwoD;
  const Nonterminal routing_head = two_d ? Nonterminal::P : Nonterminal::R;

  // Module rules. The start symbol has no stop rule; its three module
  // shapes are uniform.
  for (Nonterminal lhs : {Nonterminal::S, Nonterminal::M}) {
    const bool is_m = lhs == Nonterminal::M;
    const double module_p = is_m ? q : 1.0 / 3.0;
    g.rules.push_back({lhs, {}, {Symbol{Nonterminal::M}, Symbol{Nonterminal::M}}, module_p});
    g.rules.push_back({lhs,
                       {},
                       {Symbol{Nonterminal::B}, Symbol{Nonterminal::M}, Symbol{Nonterminal::A}},
                       module_p});
    g.rules.push_back({lhs,
                       {},
                       {Symbol{routing_head}, Symbol{Nonterminal::M}, Symbol{Nonterminal::R}},
                       module_p});
    if (is_m)
      g.rules.push_back({lhs, {}, {Symbol{Nonterminal::C}}, stop_probability});
  }

  // Branching options. The third tensor dimension only exists in Im mode.
  {
    std::vector<std::pair<TerminalSpec, Guard>> opts;
    for (int b : {2, 4, 8}) opts.push_back({clone_op(b), {}});
    const int max_dim = two_d ? 3 : 2;
    for (int dim = 1; dim <= max_dim; ++dim)
      for (int b : {2, 4, 8})
        opts.push_back({group_op(dim, b), two_d && dim == 3 ? im_only() : Guard{}});
    add_terminal_family(g, Nonterminal::B, std::move(opts));
  }

  // Aggregation options. matmul needs exactly two operands and token-shaped
  // features; concat must match the open branching factor.
  {
    std::vector<std::pair<TerminalSpec, Guard>> opts;
    opts.push_back({matmul_op(false), col_and_b(2)});
    opts.push_back({matmul_op(true), col_and_b(2)});
    opts.push_back({add_op(), {}});
    const int max_dim = two_d ? 3 : 2;
    for (int dim = 1; dim <= max_dim; ++dim)
      for (int b : {2, 4, 8})
        opts.push_back(
            {concat_op(dim, b), two_d && dim == 3 ? im_and_b(b) : b_is(b)});
    add_terminal_family(g, Nonterminal::A, std::move(opts));
  }

  const std::vector<std::vector<int>> col_orders = {{2, 1}};
  const std::vector<std::vector<int>> im_orders = {
      {1, 3, 2}, {2, 1, 3}, {2, 3, 1}, {3, 1, 2}, {3, 2, 1}};

  if (two_d) {
    // First routing position: identity, the seven im2col geometries, and
    // the permutes.
    std::vector<std::pair<TerminalSpec, Guard>> p_opts;
    p_opts.push_back({identity_op(), {}});
    for (auto [k, s, p] : {std::tuple{1, 1, 0}, {1, 2, 0}, {3, 1, 1}, {3, 2, 1},
                           {4, 4, 0}, {8, 8, 0}, {16, 16, 0}})
      p_opts.push_back({im2col_op(k, s, p), im_only()});
    for (const auto& o : col_orders) p_opts.push_back({permute_op(o), col_only()});
    for (const auto& o : im_orders) p_opts.push_back({permute_op(o), im_only()});
    add_terminal_family(g, Nonterminal::P, std::move(p_opts));

    // Last routing position: identity, col2im, permutes.
    std::vector<std::pair<TerminalSpec, Guard>> r_opts;
    r_opts.push_back({identity_op(), {}});
    r_opts.push_back({col2im_op(), col_only()});
    for (const auto& o : col_orders) r_opts.push_back({permute_op(o), col_only()});
    for (const auto& o : im_orders) r_opts.push_back({permute_op(o), im_only()});
    add_terminal_family(g, Nonterminal::R, std::move(r_opts));
  } else {
    // 1D routing: identity or the token transpose, at both ends.
    std::vector<std::pair<TerminalSpec, Guard>> r_opts;
    r_opts.push_back({identity_op(), {}});
    for (const auto& o : col_orders) r_opts.push_back({permute_op(o), {}});
    add_terminal_family(g, Nonterminal::R, std::move(r_opts));
  }

  // Computation options.
  {
    std::vector<std::pair<TerminalSpec, Guard>> c_opts;
    c_opts.push_back({identity_op(), {}});
    if (!two_d) {
      for (int k_and_p : {0, 1, 2, 3}) {
        static const int ks[] = {1, 3, 5, 8};
        static const int ps[] = {0, 1, 2, 3};
        for (int d : {32, 64, 128, 256})
          c_opts.push_back({conv1d_op(ks[k_and_p], 1, ps[k_and_p], d), {}});
      }
    }
    for (int d : {16, 32, 64, 128, 256, 512, 1024, 2048})
      c_opts.push_back({linear_op(d), {}});
    c_opts.push_back({norm_op(), {}});
    c_opts.push_back({relu_op(), {}});
    c_opts.push_back({softmax_op(), {}});
    c_opts.push_back({pos_enc_op(), {}});
    add_terminal_family(g, Nonterminal::C, std::move(c_opts));
  }

  return g;
}

std::vector<WeightedRule> applicable_rules(const Grammar& grammar, Nonterminal nt,
                                           const ShapeState& state) {
  std::vector<WeightedRule> out;
  double total = 0.0;
  for (int id = 0; id < static_cast<int>(grammar.rules.size()); ++id) {
    const auto& rule = grammar.rules[id];
    if (rule.lhs != nt) continue;
    if (!rule.guard.accepts(state)) continue;
    out.push_back({id, rule.probability});
    total += rule.probability;
  }
  if (total > 0.0)
    for (auto& wr : out) wr.probability /= total;
  return out;
}

namespace {

// Expected number of stored inner modules per branching module under the
// uniform option weights: two for b=2, one for b in {4,8}.
double expected_branch_modules(const Grammar& grammar) {
  double weight_total = 0.0;
  double acc = 0.0;
  for (const auto& rule : grammar.rules) {
    if (rule.lhs != Nonterminal::B) continue;
    const auto& term = std::get<TerminalSpec>(rule.rhs[0]);
    acc += rule.probability * (term.b == 2 ? 2.0 : 1.0);
    weight_total += rule.probability;
  }
  return weight_total > 0.0 ? acc / weight_total : 1.0;
}

bool rhs_is_branching_module(const std::vector<Symbol>& rhs) {
  return rhs.size() == 3 && std::holds_alternative<Nonterminal>(rhs[0]) &&
         std::get<Nonterminal>(rhs[0]) == Nonterminal::B;
}

}  // namespace

double ExpectationMatrix::at(Nonterminal row, Nonterminal col) const {
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] != row) continue;
    for (std::size_t j = 0; j < index.size(); ++j)
      if (index[j] == col) return entries[i][j];
  }
  return 0.0;
}

ExpectationMatrix expectation_matrix(const Grammar& grammar) {
  ExpectationMatrix m;
  m.index = grammar.nonterminals();
  const std::size_t n = m.index.size();
  m.entries.assign(n, std::vector<double>(n, 0.0));

  auto pos = [&](Nonterminal nt) {
    for (std::size_t i = 0; i < n; ++i)
      if (m.index[i] == nt) return i;
    throw std::logic_error("nonterminal not in grammar index");
  };

  const double branch_modules = expected_branch_modules(grammar);

  for (const auto& rule : grammar.rules) {
    const std::size_t row = pos(rule.lhs);
    const bool branching = rhs_is_branching_module(rule.rhs);
    for (const auto& sym : rule.rhs) {
      if (!std::holds_alternative<Nonterminal>(sym)) continue;
      Nonterminal nt = std::get<Nonterminal>(sym);
      double count = 1.0;
      if (branching && nt == Nonterminal::M) count = branch_modules;
      m.entries[row][pos(nt)] += rule.probability * count;
    }
  }
  return m;
}

double branching_rate(const Grammar& grammar) {
  ExpectationMatrix m = expectation_matrix(grammar);
  const std::size_t n = m.index.size();

  // Power iteration; the matrix is tiny, so cost is negligible. A zero
  // iterate means the matrix is nilpotent on the current vector, i.e. the
  // radius is 0.
  std::vector<double> v(n, 1.0);
  double radius = 0.0;
  for (int iter = 0; iter < 10000; ++iter) {
    std::vector<double> w(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) w[i] += m.entries[i][j] * v[j];
    double norm = 0.0;
    for (double x : w) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-300) return 0.0;
    for (double& x : w) x /= norm;
    // Rayleigh quotient for the dominant eigenvalue.
    std::vector<double> mw(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) mw[i] += m.entries[i][j] * w[j];
    double num = 0.0;
    for (std::size_t i = 0; i < n; ++i) num += w[i] * mw[i];
    double next = num;
    if (iter > 0 && std::abs(next - radius) <= 1e-10 * std::max(1.0, std::abs(next))) {
      return next;
    }
    radius = next;
    v = std::move(w);
  }
  return radius;
}

CriticalPoint critical_stop_probability(const GrammarFamily& family) {
  const double lo_p = 1e-6;
  const double hi_p = 1.0 - 1e-6;
  double rate_lo = branching_rate(family(lo_p));
  if (rate_lo < 1.0) {
    // Sub-critical even with essentially no stop mass: no crossing exists.
    return {0.0, true};
  }
  double a = lo_p, b = hi_p;
  // branching_rate is monotone decreasing in the stop probability.
  for (int iter = 0; iter < 200 && (b - a) > 1e-6; ++iter) {
    double mid = 0.5 * (a + b);
    if (branching_rate(family(mid)) >= 1.0)
      a = mid;
    else
      b = mid;
  }
  return {0.5 * (a + b), false};
}

double expected_string_length(const Grammar& grammar) {
  if (branching_rate(grammar) >= 1.0)
    throw std::domain_error("divergent expectation");

  // Solve (I - A) E = t, where A is the nonterminal expectation matrix and
  // t[X] is the expected number of terminal leaves emitted directly by one
  // expansion of X.
  ExpectationMatrix m = expectation_matrix(grammar);
  const std::size_t n = m.index.size();

  std::vector<double> t(n, 0.0);
  std::vector<double> mass(n, 0.0);
  for (const auto& rule : grammar.rules) {
    std::size_t row = 0;
    while (m.index[row] != rule.lhs) ++row;
    double terminals = 0.0;
    for (const auto& sym : rule.rhs)
      if (std::holds_alternative<TerminalSpec>(sym)) terminals += 1.0;
    t[row] += rule.probability * terminals;
    mass[row] += rule.probability;
  }
  for (std::size_t i = 0; i < n; ++i)
    if (mass[i] > 0.0) t[i] /= mass[i];

  std::vector<std::vector<double>> a(n, std::vector<double>(n + 1, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j)
      a[i][j] = (i == j ? 1.0 : 0.0) - m.entries[i][j];
    a[i][n] = t[i];
  }

  // Gaussian elimination with partial pivoting.
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
    std::swap(a[col], a[pivot]);
    if (std::abs(a[col][col]) < 1e-12)
      throw std::domain_error("divergent expectation");
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      double f = a[r][col] / a[col][col];
      for (std::size_t c = col; c <= n; ++c) a[r][c] -= f * a[col][c];
    }
  }

  for (std::size_t i = 0; i < n; ++i)
    if (m.index[i] == Nonterminal::S) return a[i][n] / a[i][i];
  throw std::logic_error("grammar without start symbol");
}

namespace {

json guard_to_json(const Guard& g) {
  json j = json::object();
  if (g.mode) j["mode"] = mode_name(*g.mode);
  if (g.branching_factor) j["b"] = *g.branching_factor;
  return j;
}

json terminal_to_json(const TerminalSpec& t) {
  json j = json::object();
  j["op"] = op_kind_name(t.kind);
  switch (t.kind) {
    case OpKind::Clone: j["b"] = t.b; break;
    case OpKind::Group:
    case OpKind::Concat:
      j["dim"] = t.dim;
      j["b"] = t.b;
      break;
    case OpKind::Matmul: j["scaled"] = t.scaled; break;
    case OpKind::Im2col:
      j["k"] = t.k;
      j["s"] = t.s;
      j["p"] = t.p;
      break;
    case OpKind::Conv1d:
      j["k"] = t.k;
      j["s"] = t.s;
      j["p"] = t.p;
      j["d"] = t.d;
      break;
    case OpKind::Linear: j["d"] = t.d; break;
    case OpKind::Permute: j["o"] = t.order; break;
    default: break;
  }
  return j;
}

}  // namespace

std::string grammar_to_json(const Grammar& grammar) {
  json j;
  j["grammar_schema"] = 1;
  j["variant"] = grammar_variant_name(grammar.variant);
  j["stop_probability"] = grammar.stop_probability;
  json rules = json::array();
  for (const auto& rule : grammar.rules) {
    json r;
    r["lhs"] = nonterminal_name(rule.lhs);
    r["guard"] = guard_to_json(rule.guard);
    json rhs = json::array();
    for (const auto& sym : rule.rhs) {
      if (std::holds_alternative<Nonterminal>(sym))
        rhs.push_back(nonterminal_name(std::get<Nonterminal>(sym)));
      else
        rhs.push_back(terminal_to_json(std::get<TerminalSpec>(sym)));
    }
    r["rhs"] = std::move(rhs);
    r["probability"] = rule.probability;
    rules.push_back(std::move(r));
  }
  j["rules"] = std::move(rules);
  return j.dump(2);
}

}  // namespace arbor
