#pragma once

// Update-landscape analysis of a one-node tree on the chain MDP: summed
// per-episode updates of the threshold phi under Q-learning and policy
// gradient, their roots, integrated optimality curves, and reference values.

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "ddt/envs.hpp"
#include "ddt/soft_tree.hpp"

namespace ddt {

enum class StartMode { Fixed, Averaged };

struct QLeaves {
  double true_a1 = 0.0;
  double true_a2 = 0.0;
  double false_a1 = 0.0;
  double false_a2 = 0.0;
};

/// Suboptimal pairs (TRUE a1, FALSE a2) get r+ + gamma r-; optimal pairs
/// (TRUE a2, FALSE a1) get r+(1 + gamma + gamma^2 + gamma^3), or r+ / (1 - gamma)
/// with `infinite_series`.
QLeaves optimal_q_leaves(double gamma, double r_plus, double r_minus, bool infinite_series = false);

struct AnalysisConfig {
  ChainMdpConfig chain;
  double alpha = 10.0;
  /// Policy leaves as action probabilities (a1, a2).
  std::array<double, 2> pg_true{0.01, 0.99};
  std::array<double, 2> pg_false{0.99, 0.01};
  bool infinite_series = false;
  double phi_min = 0.0;
  /// Upper end of the scan; <= phi_min means n.
  double phi_max = 0.0;
  int grid_points = 2001;
  /// Fixed uses chain.start_state; Averaged averages over {i*, i*+1}.
  StartMode start = StartMode::Fixed;
  /// Discount exponent gamma^(T - t') instead of gamma^(t' - t).
  bool verbatim_returns = false;

  double scan_max() const { return phi_max > phi_min ? phi_max : static_cast<double>(chain.n); }
  QLeaves q_leaves() const { return optimal_q_leaves(chain.gamma, chain.r_plus, chain.r_minus, infinite_series); }
  void validate() const;
  nlohmann::json to_json() const;
  static AnalysisConfig from_json(const nlohmann::json& doc);
};

/// Greedy soft-tree episode from the start state; sum over its steps of
/// (R(s) + gamma max Q(s') - Q(s, a)) dQ(s, a)/dphi. The terminal step has no
/// bootstrap. Episodes stopped by the horizon outside a terminal state add a
/// note to `warnings`.
double delta_phi_q(double phi, const AnalysisConfig& config, std::vector<std::string>* warnings = nullptr);

/// Expected sum_t A_t dlog pi(s_t, a_t)/dphi over every action sequence up to the
/// horizon, weighted by its probability.
double delta_phi_pg(double phi, const AnalysisConfig& config);

std::vector<double> linspace(double lo, double hi, int points);

struct CriticalPoints {
  /// Sign changes refined by bisection.
  std::vector<double> roots;
  /// Runs of |value| < 1e-9 with the same sign on both sides.
  std::vector<double> tangential;
};

using CurveFn = std::function<double(double)>;

/// Brackets sign changes of f on the sorted grid and bisects until
/// |f| < 1e-10 or the bracket is narrower than 1e-8.
CriticalPoints find_critical_points(const CurveFn& f, const std::vector<double>& grid);
/// Same on samples only: crossings are located by linear interpolation.
CriticalPoints find_critical_points(const std::vector<double>& grid, const std::vector<double>& values);

/// Left-Riemann cumulative sum on a uniform grid, min-max normalized to [0,1].
/// A constant integral gives all zeros and a note in `warnings`.
std::vector<double> optimality_curve(const std::vector<double>& values, std::vector<std::string>* warnings = nullptr);

struct Extremum {
  double phi = 0.0;
  bool maximum = false;
};

/// Interior local extrema of a sampled curve (plateaus count once).
std::vector<Extremum> interior_extrema(const std::vector<double>& grid, const std::vector<double>& curve);

/// Value from chain.start_state of the crisp policy "s > phi -> a2, else a1"
/// over the horizon, terminal step included.
double policy_value(double phi, const AnalysisConfig& config);

/// One-node trees matching the analysis leaves, for cross-checks against the
/// generic tree code. Policy leaves hold log-probabilities so softmax returns them.
SoftTreed analysis_q_tree(double phi, const AnalysisConfig& config);
SoftTreed analysis_pg_tree(double phi, const AnalysisConfig& config);

/// 1/2 (pi(s_i*, a2) + pi(s_i*+1, a1)) evaluated through eval_soft.
double wrong_action_prob(double phi, double alpha, const AnalysisConfig& config);

struct AnalysisReport {
  std::vector<double> grid;
  std::vector<double> delta_q;
  std::vector<double> delta_pg;
  /// Per fixed start state i* and i*+1.
  std::vector<double> delta_pg_low;
  std::vector<double> delta_pg_high;
  CriticalPoints q_points;
  CriticalPoints pg_points;
  CriticalPoints pg_low_points;
  CriticalPoints pg_high_points;
  std::vector<double> optimality_q;
  std::vector<double> optimality_pg;
  std::vector<Extremum> q_extrema;
  std::vector<Extremum> pg_extrema;
  std::vector<double> policy_values;
  std::vector<double> wrong_action;
  std::vector<std::string> warnings;

  nlohmann::json summary(const AnalysisConfig& config) const;
};

inline constexpr int kAnalysisSummaryVersion = 1;

/// Q curve from the configured start; PG curve averaged over the two start states.
AnalysisReport analyze(const AnalysisConfig& config);

/// Writes delta_phi_q.csv, delta_phi_pg.csv, optimality_q.csv, optimality_pg.csv,
/// policy_value.csv (header phi,value) and summary.json into `dir`.
AnalysisReport emit_report(const AnalysisConfig& config, const std::filesystem::path& dir);

/// "phi,value" CSV with %.17g numbers.
std::string curve_to_csv(const std::vector<double>& grid, const std::vector<double>& values);

}  // namespace ddt
