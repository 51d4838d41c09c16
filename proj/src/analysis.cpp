#include "ddt/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace ddt {

using nlohmann::json;

namespace {

double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Greedy or sampled action index: 0 = a1 (toward n), 1 = a2 (toward 1).
int move(int s, int action) { return action == 0 ? s + 1 : s - 1; }

bool terminal(const ChainMdpConfig& c, int s) { return s == 1 || s == c.n; }

double state_reward(const ChainMdpConfig& c, int s) {
  if (terminal(c, s)) return c.r_minus;
  return (s == c.i_star || s == c.i_star + 1) ? c.r_plus : 0.0;
}

std::vector<int> start_states(const AnalysisConfig& config) {
  if (config.start == StartMode::Averaged || config.chain.start_state == 0)
    return {config.chain.i_star, config.chain.i_star + 1};
  return {config.chain.start_state};
}

double q_update_from(int s, double phi, const AnalysisConfig& config, std::vector<std::string>* warnings) {
  const auto& c = config.chain;
  const QLeaves leaves = config.q_leaves();
  const std::array<double, 2> q_true{leaves.true_a1, leaves.true_a2};
  const std::array<double, 2> q_false{leaves.false_a1, leaves.false_a2};
  auto q = [&](int state) {
    const double mu = logistic(config.alpha * (state - phi));
    return std::array<double, 2>{mu * q_true[0] + (1.0 - mu) * q_false[0], mu * q_true[1] + (1.0 - mu) * q_false[1]};
  };
  auto dq_dphi = [&](int state, int a) {
    const double mu = logistic(config.alpha * (state - phi));
    return (q_true[a] - q_false[a]) * mu * (1.0 - mu) * -config.alpha;
  };
  const int horizon = c.effective_horizon();
  double total = 0.0;
  for (int t = 0; t < horizon; ++t) {
    const auto qs = q(s);
    const int a = qs[1] > qs[0] ? 1 : 0;
    if (terminal(c, s)) {
      if (c.terminal_step) total += (c.r_minus - qs[a]) * dq_dphi(s, a);
      return total;
    }
    const int next = move(s, a);
    const auto qn = q(next);
    const double reward = state_reward(c, s);
    const double bootstrap = (terminal(c, next) && !c.terminal_step) ? 0.0 : c.gamma * std::max(qn[0], qn[1]);
    total += (reward + bootstrap - qs[a]) * dq_dphi(s, a);
    if (terminal(c, next) && !c.terminal_step) return total;
    s = next;
  }
  if (warnings && !terminal(c, s)) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "greedy episode at phi=%.6g capped at %d steps", phi, horizon);
    warnings->emplace_back(buf);
  }
  return total;
}

struct PgStep {
  int state;
  int action;
  double reward;
};

double pg_update_from(int start, double phi, const AnalysisConfig& config) {
  const auto& c = config.chain;
  auto pi = [&](int s) {
    const double mu = logistic(config.alpha * (s - phi));
    return std::array<double, 2>{mu * config.pg_true[0] + (1.0 - mu) * config.pg_false[0],
                                 mu * config.pg_true[1] + (1.0 - mu) * config.pg_false[1]};
  };
  auto dlog_pi = [&](int s, int a) {
    const double mu = logistic(config.alpha * (s - phi));
    return (config.pg_true[a] - config.pg_false[a]) * mu * (1.0 - mu) * -config.alpha / pi(s)[a];
  };
  const int horizon = c.effective_horizon();
  double total = 0.0;
  std::vector<PgStep> hist;

  auto finish = [&](double prob) {
    const int T = static_cast<int>(hist.size());
    for (int t = 0; t < T; ++t) {
      double ret = 0.0;
      for (int k = t; k < T; ++k) {
        const int power = config.verbatim_returns ? T - 1 - k : k - t;
        ret += std::pow(c.gamma, power) * hist[k].reward;
      }
      total += prob * ret * dlog_pi(hist[t].state, hist[t].action);
    }
  };

  std::function<void(int, int, double)> expand = [&](int s, int t, double prob) {
    if (t == horizon) return finish(prob);
    const auto p = pi(s);
    if (terminal(c, s)) {
      if (!c.terminal_step) return finish(prob);
      for (int a = 0; a < 2; ++a) {
        hist.push_back({s, a, c.r_minus});
        finish(prob * p[a]);
        hist.pop_back();
      }
      return;
    }
    for (int a = 0; a < 2; ++a) {
      hist.push_back({s, a, state_reward(c, s)});
      const int next = move(s, a);
      if (terminal(c, next) && !c.terminal_step)
        finish(prob * p[a]);
      else
        expand(next, t + 1, prob * p[a]);
      hist.pop_back();
    }
  };
  expand(start, 0, 1.0);
  return total;
}

}  // namespace

QLeaves optimal_q_leaves(double gamma, double r_plus, double r_minus, bool infinite_series) {
  double good = r_plus * (1.0 + gamma + gamma * gamma + gamma * gamma * gamma);
  if (infinite_series) {
    if (gamma >= 1.0) throw ConfigError("infinite-series leaf value needs gamma < 1");
    good = r_plus / (1.0 - gamma);
  }
  const double bad = r_plus + gamma * r_minus;
  return {bad, good, good, bad};
}

void AnalysisConfig::validate() const {
  chain.validate();
  if (chain.p != 1.0) throw ConfigError("analysis assumes deterministic transitions (p = 1)");
  if (!std::isfinite(alpha)) throw ConfigError("alpha must be finite");
  if (grid_points < 2) throw ConfigError("grid needs at least 2 points");
  if (!(phi_min <= 0.0 && scan_max() >= chain.n)) throw ConfigError("scan range must cover [0, n]");
  for (const auto* leaf : {&pg_true, &pg_false}) {
    if ((*leaf)[0] <= 0.0 || (*leaf)[1] <= 0.0) throw ConfigError("policy leaf probabilities must be positive");
    if (std::abs((*leaf)[0] + (*leaf)[1] - 1.0) > 1e-12) throw ConfigError("policy leaf probabilities must sum to 1");
  }
  if (chain.effective_horizon() > 24) throw ConfigError("analysis horizon too long for exact enumeration");
}

json AnalysisConfig::to_json() const {
  return {{"chain", chain_config_to_json(chain)},
          {"alpha", alpha},
          {"pg_true", pg_true},
          {"pg_false", pg_false},
          {"infinite_series", infinite_series},
          {"phi_min", phi_min},
          {"phi_max", scan_max()},
          {"grid_points", grid_points},
          {"start", start == StartMode::Fixed ? "fixed" : "averaged"},
          {"returns", verbatim_returns ? "verbatim" : "conventional"}};
}

AnalysisConfig AnalysisConfig::from_json(const json& doc) {
  AnalysisConfig c;
  try {
    if (doc.contains("chain")) c.chain = chain_config_from_json(doc.at("chain"));
    c.alpha = doc.value("alpha", c.alpha);
    if (doc.contains("pg_true")) c.pg_true = doc.at("pg_true").get<std::array<double, 2>>();
    if (doc.contains("pg_false")) c.pg_false = doc.at("pg_false").get<std::array<double, 2>>();
    c.infinite_series = doc.value("infinite_series", c.infinite_series);
    c.phi_min = doc.value("phi_min", c.phi_min);
    c.phi_max = doc.value("phi_max", c.phi_max);
    c.grid_points = doc.value("grid_points", c.grid_points);
    if (doc.contains("start")) {
      const auto s = doc.at("start").get<std::string>();
      if (s != "fixed" && s != "averaged") throw ConfigError("start must be 'fixed' or 'averaged'");
      c.start = s == "fixed" ? StartMode::Fixed : StartMode::Averaged;
    }
    if (doc.contains("returns")) {
      const auto r = doc.at("returns").get<std::string>();
      if (r != "verbatim" && r != "conventional") throw ConfigError("returns must be 'verbatim' or 'conventional'");
      c.verbatim_returns = r == "verbatim";
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed analysis config: ") + e.what());
  }
  c.validate();
  return c;
}

double delta_phi_q(double phi, const AnalysisConfig& config, std::vector<std::string>* warnings) {
  const auto starts = start_states(config);
  double sum = 0.0;
  for (int s : starts) sum += q_update_from(s, phi, config, warnings);
  return sum / static_cast<double>(starts.size());
}

double delta_phi_pg(double phi, const AnalysisConfig& config) {
  const auto starts = start_states(config);
  double sum = 0.0;
  for (int s : starts) sum += pg_update_from(s, phi, config);
  return sum / static_cast<double>(starts.size());
}

std::vector<double> linspace(double lo, double hi, int points) {
  if (points < 2) throw ConfigError("linspace needs at least 2 points");
  std::vector<double> out(points);
  const double step = (hi - lo) / (points - 1);
  for (int i = 0; i < points; ++i) out[i] = lo + step * i;
  out.back() = hi;
  return out;
}

namespace {

constexpr double kFlatTolerance = 1e-9;

int sign_of(double v) { return std::abs(v) < kFlatTolerance ? 0 : (v > 0 ? 1 : -1); }

template <typename Locate>
CriticalPoints scan(const std::vector<double>& grid, const std::vector<double>& v, Locate locate) {
  CriticalPoints out;
  const int n = static_cast<int>(grid.size());
  int i = 0;
  while (i < n) {
    if (sign_of(v[i]) != 0) {
      if (i + 1 < n && sign_of(v[i + 1]) != 0 && sign_of(v[i + 1]) != sign_of(v[i]))
        out.roots.push_back(locate(i, i + 1));
      ++i;
      continue;
    }
    // Run of near-zero samples [i, j).
    int j = i;
    while (j < n && sign_of(v[j]) == 0) ++j;
    const int before = i > 0 ? sign_of(v[i - 1]) : 0;
    const int after = j < n ? sign_of(v[j]) : 0;
    const double mid = 0.5 * (grid[i] + grid[j - 1]);
    if (before != 0 && after != 0 && before != after)
      out.roots.push_back(j - i == 1 ? grid[i] : mid);
    else
      out.tangential.push_back(mid);
    i = j;
  }
  return out;
}

}  // namespace

CriticalPoints find_critical_points(const CurveFn& f, const std::vector<double>& grid) {
  std::vector<double> v(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) v[i] = f(grid[i]);
  return scan(grid, v, [&](int a, int b) {
    double lo = grid[a], hi = grid[b], flo = v[a];
    double mid = 0.5 * (lo + hi);
    for (int it = 0; it < 200; ++it) {
      mid = 0.5 * (lo + hi);
      const double fm = f(mid);
      if (std::abs(fm) < 1e-10 || hi - lo < 1e-8) break;
      if ((fm > 0) == (flo > 0)) {
        lo = mid;
        flo = fm;
      } else {
        hi = mid;
      }
    }
    return mid;
  });
}

CriticalPoints find_critical_points(const std::vector<double>& grid, const std::vector<double>& values) {
  if (grid.size() != values.size()) throw DimensionMismatch("curve samples", grid.size(), values.size());
  return scan(grid, values, [&](int a, int b) {
    const double t = values[a] / (values[a] - values[b]);
    return grid[a] + t * (grid[b] - grid[a]);
  });
}

std::vector<double> optimality_curve(const std::vector<double>& values, std::vector<std::string>* warnings) {
  const std::size_t n = values.size();
  std::vector<double> c(n, 0.0);
  // Uniform spacing cancels under min-max normalization.
  for (std::size_t i = 1; i < n; ++i) c[i] = c[i - 1] + values[i - 1];
  if (n == 0) return c;
  const auto [lo, hi] = std::minmax_element(c.begin(), c.end());
  const double min = *lo, range = *hi - *lo;
  if (!(range > 0.0)) {
    if (warnings) warnings->emplace_back("optimality curve is constant; returning zeros");
    return std::vector<double>(n, 0.0);
  }
  for (double& x : c) x = (x - min) / range;
  return c;
}

std::vector<Extremum> interior_extrema(const std::vector<double>& grid, const std::vector<double>& curve) {
  std::vector<Extremum> out;
  int last_sign = 0;
  std::size_t last_change = 0;
  for (std::size_t i = 0; i + 1 < curve.size(); ++i) {
    const double d = curve[i + 1] - curve[i];
    const int s = d > 0 ? 1 : (d < 0 ? -1 : 0);
    if (s == 0) continue;
    if (last_sign != 0 && s != last_sign) {
      // Plateau between last_change+1 and i: report its middle.
      const double phi = 0.5 * (grid[last_change + 1] + grid[i]);
      out.push_back({phi, last_sign > 0});
    }
    last_sign = s;
    last_change = i;
  }
  return out;
}

double policy_value(double phi, const AnalysisConfig& config) {
  const auto& c = config.chain;
  int s = c.start_state == 0 ? c.i_star + 1 : c.start_state;
  double value = 0.0, discount = 1.0;
  const int horizon = c.effective_horizon();
  for (int t = 0; t < horizon; ++t) {
    if (terminal(c, s)) {
      if (c.terminal_step) value += discount * c.r_minus;
      break;
    }
    value += discount * state_reward(c, s);
    discount *= c.gamma;
    s = move(s, s > phi ? 1 : 0);
  }
  return value;
}

namespace {

SoftTreed one_node_tree(double phi, double alpha, Interpretation interp, const Vector& w_true, const Vector& w_false) {
  auto tree = make_tree<double>({TopologyKind::Balanced, 1}, 1, 2, interp);
  tree.nodes[0].alpha = alpha;
  tree.nodes[0].beta = Vector::Ones(1);
  tree.nodes[0].phi = phi;
  tree.leaves[tree.nodes[0].left.index].w = w_true;
  tree.leaves[tree.nodes[0].right.index].w = w_false;
  return tree;
}

}  // namespace

SoftTreed analysis_q_tree(double phi, const AnalysisConfig& config) {
  const QLeaves l = config.q_leaves();
  return one_node_tree(phi, config.alpha, Interpretation::Q, Vector{{l.true_a1, l.true_a2}},
                       Vector{{l.false_a1, l.false_a2}});
}

SoftTreed analysis_pg_tree(double phi, const AnalysisConfig& config) {
  const Vector t{{std::log(config.pg_true[0]), std::log(config.pg_true[1])}};
  const Vector f{{std::log(config.pg_false[0]), std::log(config.pg_false[1])}};
  return one_node_tree(phi, config.alpha, Interpretation::Policy, t, f);
}

double wrong_action_prob(double phi, double alpha, const AnalysisConfig& config) {
  AnalysisConfig c = config;
  c.alpha = alpha;
  const SoftTreed tree = analysis_pg_tree(phi, c);
  const double s2 = config.chain.i_star, s3 = config.chain.i_star + 1;
  const Vector p2 = eval_soft<double>(tree, Vector::Constant(1, s2));
  const Vector p3 = eval_soft<double>(tree, Vector::Constant(1, s3));
  return 0.5 * (p2(1) + p3(0));
}

AnalysisReport analyze(const AnalysisConfig& config) {
  config.validate();
  AnalysisReport r;
  r.grid = linspace(config.phi_min, config.scan_max(), config.grid_points);
  AnalysisConfig low = config, high = config;
  low.start = high.start = StartMode::Fixed;
  low.chain.start_state = config.chain.i_star;
  high.chain.start_state = config.chain.i_star + 1;

  std::vector<std::string> q_notes;
  const auto n = r.grid.size();
  r.delta_q.resize(n);
  r.delta_pg.resize(n);
  r.delta_pg_low.resize(n);
  r.delta_pg_high.resize(n);
  r.policy_values.resize(n);
  r.wrong_action.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double phi = r.grid[i];
    r.delta_q[i] = delta_phi_q(phi, config, &q_notes);
    r.delta_pg_low[i] = delta_phi_pg(phi, low);
    r.delta_pg_high[i] = delta_phi_pg(phi, high);
    r.delta_pg[i] = 0.5 * (r.delta_pg_low[i] + r.delta_pg_high[i]);
    r.policy_values[i] = policy_value(phi, config);
    r.wrong_action[i] = wrong_action_prob(phi, config.alpha, config);
  }
  if (!q_notes.empty())
    r.warnings.push_back(std::to_string(q_notes.size()) + " greedy Q episodes reached the horizon cap");

  AnalysisConfig averaged = config;
  averaged.start = StartMode::Averaged;
  r.q_points = find_critical_points([&](double phi) { return delta_phi_q(phi, config); }, r.grid);
  r.pg_points = find_critical_points([&](double phi) { return delta_phi_pg(phi, averaged); }, r.grid);
  r.pg_low_points = find_critical_points([&](double phi) { return delta_phi_pg(phi, low); }, r.grid);
  r.pg_high_points = find_critical_points([&](double phi) { return delta_phi_pg(phi, high); }, r.grid);

  r.optimality_q = optimality_curve(r.delta_q, &r.warnings);
  r.optimality_pg = optimality_curve(r.delta_pg, &r.warnings);
  r.q_extrema = interior_extrema(r.grid, r.optimality_q);
  r.pg_extrema = interior_extrema(r.grid, r.optimality_pg);
  return r;
}

namespace {

json extrema_json(const std::vector<Extremum>& ex) {
  json arr = json::array();
  for (const auto& e : ex) arr.push_back({{"phi", e.phi}, {"kind", e.maximum ? "max" : "min"}});
  return arr;
}

json points_json(const CriticalPoints& p) { return {{"roots", p.roots}, {"tangential", p.tangential}}; }

// Middle of the first run of grid points attaining the extreme value.
double arg_extreme(const std::vector<double>& grid, const std::vector<double>& v, bool largest) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (largest ? v[i] > v[best] : v[i] < v[best]) best = i;
  std::size_t end = best;
  while (end + 1 < v.size() && v[end + 1] == v[best]) ++end;
  return 0.5 * (grid[best] + grid[end]);
}

}  // namespace

json AnalysisReport::summary(const AnalysisConfig& config) const {
  json doc;
  doc["version"] = kAnalysisSummaryVersion;
  doc["parameters"] = config.to_json();
  doc["grid_step"] = grid.size() > 1 ? grid[1] - grid[0] : 0.0;
  doc["root_counts"] = {{"q", q_points.roots.size()}, {"pg", pg_points.roots.size()}};
  doc["q"] = points_json(q_points);
  doc["pg"] = {{"averaged", points_json(pg_points)},
               {"start_" + std::to_string(config.chain.i_star), points_json(pg_low_points)},
               {"start_" + std::to_string(config.chain.i_star + 1), points_json(pg_high_points)}};
  doc["extrema"] = {{"q", extrema_json(q_extrema)}, {"pg", extrema_json(pg_extrema)}};
  doc["extrema_counts"] = {{"q", q_extrema.size()}, {"pg", pg_extrema.size()}};
  doc["policy_value_argmax"] = arg_extreme(grid, policy_values, true);
  doc["wrong_action_argmin"] = arg_extreme(grid, wrong_action, false);
  doc["warnings"] = warnings;
  return doc;
}

std::string curve_to_csv(const std::vector<double>& grid, const std::vector<double>& values) {
  if (grid.size() != values.size()) throw DimensionMismatch("curve samples", grid.size(), values.size());
  std::ostringstream out;
  out << "phi,value\n";
  char buf[64];
  for (std::size_t i = 0; i < grid.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", grid[i], values[i]);
    out << buf;
  }
  return out.str();
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

}  // namespace

AnalysisReport emit_report(const AnalysisConfig& config, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create " + dir.string() + ": " + ec.message());
  AnalysisReport r = analyze(config);
  write_file(dir / "delta_phi_q.csv", curve_to_csv(r.grid, r.delta_q));
  write_file(dir / "delta_phi_pg.csv", curve_to_csv(r.grid, r.delta_pg));
  write_file(dir / "optimality_q.csv", curve_to_csv(r.grid, r.optimality_q));
  write_file(dir / "optimality_pg.csv", curve_to_csv(r.grid, r.optimality_pg));
  write_file(dir / "policy_value.csv", curve_to_csv(r.grid, r.policy_values));
  write_file(dir / "summary.json", r.summary(config).dump(2) + "\n");
  return r;
}

}  // namespace ddt
