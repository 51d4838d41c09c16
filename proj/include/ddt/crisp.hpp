#pragma once

// Crisp single-feature decision trees and rule lists, extracted from soft trees.

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

#include "ddt/soft_tree.hpp"

namespace ddt {

/// Predicate x[feature] > threshold; left is the TRUE branch.
struct CrispNode {
  int feature = 0;
  double threshold = 0.0;
  ChildRef left;
  ChildRef right;
  bool operator==(const CrispNode&) const = default;
};

struct CrispPolicy {
  std::vector<CrispNode> nodes;
  std::vector<int> leaf_actions;
  ChildRef root = ChildRef::leaf(0);
  int feature_dim = 0;
  int action_count = 0;
  bool rule_list = false;

  bool operator==(const CrispPolicy&) const = default;
};

struct NameTable {
  std::vector<std::string> features;  // empty -> x0, x1, ...
  std::vector<std::string> actions;   // empty -> a0, a1, ...
};

enum class ExportFormat { Text, Dot };

void validate(const CrispPolicy& policy);

/// argmax over raw beta (ties -> lowest index), threshold = phi / beta_j,
/// leaf action = argmax w. Throws DegenerateNode when beta_j == 0. Nodes whose
/// selected weight is negative are reported through `warnings`: for those the
/// soft predicate beta_j x_j > phi reads x_j < phi / beta_j, which the crisp
/// test does not flip.
CrispPolicy discretize_tree(const SoftTreed& soft, std::vector<std::string>* warnings = nullptr);
CrispPolicy discretize_rule_list(const SoftTreed& soft, std::vector<std::string>* warnings = nullptr);

int eval_crisp(const CrispPolicy& policy, const Eigen::Ref<const Vector>& x);

/// Removes decision nodes that cannot change the outcome: nodes whose two
/// subtrees are identical, and nodes whose test is decided by the interval an
/// ancestor on the same feature already imposes. Iterated to a fixed point.
CrispPolicy prune(const CrispPolicy& policy);

std::string export_policy(const CrispPolicy& policy, ExportFormat format, const NameTable& names = {});

/// Parses the TEXT export back into a policy (inverse of export_policy(Text)).
CrispPolicy parse_text_policy(const std::string& text, int feature_dim, int action_count, const NameTable& names = {});

/// Soft tree with one-hot beta, phi = threshold, the given steepness, and leaves
/// w = one-hot(action).
SoftTreed lift_to_soft(const CrispPolicy& policy, double alpha);

int depth(const CrispPolicy& policy);

nlohmann::json crisp_to_json(const CrispPolicy& policy);
CrispPolicy crisp_from_json(const nlohmann::json& doc);

}  // namespace ddt
