#pragma once

// Differentiable decision trees and rule lists.
//
// A decision node routes an input softly: mu(x) = sigmoid(alpha * (beta.x - phi))
// weights the TRUE (left) subtree and 1 - mu(x) the FALSE (right) subtree.
// Leaves hold unconstrained parameters w; under the POLICY interpretation the
// leaf output is softmax(w), under the Q interpretation it is w itself.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "ddt/common.hpp"

namespace ddt {

enum class Interpretation { Policy, Q };

enum class TopologyKind { Balanced, RuleList };

struct Topology {
  TopologyKind kind = TopologyKind::Balanced;
  int size = 1;  // depth for Balanced, rule count for RuleList

  int decision_count() const { return kind == TopologyKind::Balanced ? (1 << size) - 1 : size; }
  int leaf_count() const { return kind == TopologyKind::Balanced ? 1 << size : size + 1; }
  bool operator==(const Topology&) const = default;
};

struct ChildRef {
  enum class Kind { Node, Leaf };
  Kind kind = Kind::Leaf;
  int index = 0;

  static ChildRef node(int i) { return {Kind::Node, i}; }
  static ChildRef leaf(int i) { return {Kind::Leaf, i}; }
  bool is_leaf() const { return kind == Kind::Leaf; }
  bool operator==(const ChildRef&) const = default;
};

template <typename Scalar>
struct DecisionNode {
  Scalar alpha{1};
  Vec<Scalar> beta;
  Scalar phi{0};
  ChildRef left;   // TRUE branch
  ChildRef right;  // FALSE branch
};

template <typename Scalar>
struct LeafNode {
  Vec<Scalar> w;
  Interpretation interpretation = Interpretation::Policy;
};

template <typename Scalar>
struct SoftTree {
  std::vector<DecisionNode<Scalar>> nodes;
  std::vector<LeafNode<Scalar>> leaves;
  ChildRef root;
  int feature_dim = 0;
  int action_count = 0;
  Topology topology;
  Interpretation interpretation = Interpretation::Policy;

  /// Number of scalar parameters: per node (alpha, beta[d], phi), per leaf w[|A|].
  Eigen::Index parameter_count() const {
    return static_cast<Eigen::Index>(nodes.size()) * (feature_dim + 2) +
           static_cast<Eigen::Index>(leaves.size()) * action_count;
  }

  template <typename Other>
  SoftTree<Other> cast() const {
    SoftTree<Other> out;
    out.root = root;
    out.feature_dim = feature_dim;
    out.action_count = action_count;
    out.topology = topology;
    out.interpretation = interpretation;
    out.nodes.reserve(nodes.size());
    for (const auto& n : nodes) {
      out.nodes.push_back({static_cast<Other>(n.alpha), n.beta.template cast<Other>(),
                           static_cast<Other>(n.phi), n.left, n.right});
    }
    out.leaves.reserve(leaves.size());
    for (const auto& l : leaves) out.leaves.push_back({l.w.template cast<Other>(), l.interpretation});
    return out;
  }
};

using SoftTreed = SoftTree<double>;

// Exponent argument is clamped to this magnitude before exp().
inline constexpr double kSigmoidClamp = 500.0;

namespace detail {

template <typename Scalar>
void check_dim(const char* what, long expected, long actual) {
  if (expected != actual) throw DimensionMismatch(what, expected, actual);
}

template <typename Scalar>
Scalar sigmoid(Scalar z) {
  using std::exp;
  const Scalar c = static_cast<Scalar>(kSigmoidClamp);
  z = std::clamp(z, -c, c);
  return Scalar(1) / (Scalar(1) + exp(-z));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Construction and validation

/// Checks the structural invariants: dimensions, single parent per node,
/// acyclicity, full reachability, uniform leaf interpretation and, for rule
/// lists, that every TRUE branch ends in a leaf.
template <typename Scalar>
void validate(const SoftTree<Scalar>& tree) {
  if (tree.feature_dim <= 0) throw ConfigError("tree feature dimension must be positive");
  if (tree.action_count <= 0) throw ConfigError("tree action count must be positive");
  const int n_nodes = static_cast<int>(tree.nodes.size());
  const int n_leaves = static_cast<int>(tree.leaves.size());
  std::vector<int> node_parents(n_nodes, 0), leaf_parents(n_leaves, 0);
  auto visit_ref = [&](ChildRef ref) {
    if (ref.is_leaf()) {
      if (ref.index < 0 || ref.index >= n_leaves) throw ConfigError("leaf reference out of range");
      ++leaf_parents[ref.index];
    } else {
      if (ref.index < 0 || ref.index >= n_nodes) throw ConfigError("node reference out of range");
      ++node_parents[ref.index];
    }
  };
  for (const auto& n : tree.nodes) {
    detail::check_dim<Scalar>("decision node beta", tree.feature_dim, n.beta.size());
    if (!std::isfinite(static_cast<double>(n.alpha))) throw ConfigError("non-finite steepness");
    visit_ref(n.left);
    visit_ref(n.right);
  }
  visit_ref(tree.root);
  for (int i = 0; i < n_nodes; ++i)
    if (node_parents[i] != 1) throw ConfigError("decision node " + std::to_string(i) + " must have exactly one parent");
  for (int i = 0; i < n_leaves; ++i)
    if (leaf_parents[i] != 1) throw ConfigError("leaf " + std::to_string(i) + " must have exactly one parent");
  // With every in-degree equal to one and the root counted as a parent, a cycle
  // would leave some node unreachable from the root.
  std::vector<ChildRef> stack{tree.root};
  int seen = 0;
  while (!stack.empty()) {
    ChildRef ref = stack.back();
    stack.pop_back();
    ++seen;
    if (seen > n_nodes + n_leaves) throw ConfigError("tree contains a cycle");
    if (!ref.is_leaf()) {
      stack.push_back(tree.nodes[ref.index].left);
      stack.push_back(tree.nodes[ref.index].right);
    }
  }
  if (seen != n_nodes + n_leaves) throw ConfigError("tree has unreachable components");
  for (const auto& l : tree.leaves) {
    detail::check_dim<Scalar>("leaf parameters", tree.action_count, l.w.size());
    if (l.interpretation != tree.interpretation) throw ConfigError("leaf interpretation differs from tree");
  }
  if (tree.topology.kind == TopologyKind::RuleList) {
    for (const auto& n : tree.nodes)
      if (!n.left.is_leaf()) throw ConfigError("rule list TRUE branch must end in a leaf");
  }
}

/// Allocates a tree of the given shape with zeroed parameters.
template <typename Scalar>
SoftTree<Scalar> make_tree(Topology topology, int feature_dim, int action_count, Interpretation interp) {
  if (topology.size < 1) throw ConfigError("topology size must be at least 1");
  if (topology.kind == TopologyKind::Balanced && topology.size > 16) throw ConfigError("balanced depth too large");
  SoftTree<Scalar> tree;
  tree.feature_dim = feature_dim;
  tree.action_count = action_count;
  tree.topology = topology;
  tree.interpretation = interp;
  const int n_nodes = topology.decision_count();
  const int n_leaves = topology.leaf_count();
  tree.nodes.resize(n_nodes);
  tree.leaves.resize(n_leaves);
  for (auto& n : tree.nodes) n.beta = Vec<Scalar>::Zero(feature_dim);
  for (auto& l : tree.leaves) l = {Vec<Scalar>::Zero(action_count), interp};
  tree.root = ChildRef::node(0);
  if (topology.kind == TopologyKind::Balanced) {
    // Heap order: node i has children 2i+1, 2i+2; the last level maps to leaves.
    for (int i = 0; i < n_nodes; ++i) {
      const int l = 2 * i + 1, r = 2 * i + 2;
      tree.nodes[i].left = l < n_nodes ? ChildRef::node(l) : ChildRef::leaf(l - n_nodes);
      tree.nodes[i].right = r < n_nodes ? ChildRef::node(r) : ChildRef::leaf(r - n_nodes);
    }
  } else {
    for (int i = 0; i < n_nodes; ++i) {
      tree.nodes[i].left = ChildRef::leaf(i);
      tree.nodes[i].right = i + 1 < n_nodes ? ChildRef::node(i + 1) : ChildRef::leaf(n_nodes);
    }
  }
  return tree;
}

/// Random initialization: alpha = 1, beta and phi ~ U(-1, 1), leaf w ~ U(-0.1, 0.1).
template <typename Scalar>
SoftTree<Scalar> init_tree(Topology topology, int feature_dim, int action_count, Interpretation interp, Rng& rng) {
  auto tree = make_tree<Scalar>(topology, feature_dim, action_count, interp);
  std::uniform_real_distribution<double> unit(-1.0, 1.0), small(-0.1, 0.1);
  for (auto& n : tree.nodes) {
    n.alpha = Scalar(1);
    for (int k = 0; k < feature_dim; ++k) n.beta(k) = static_cast<Scalar>(unit(rng));
    n.phi = static_cast<Scalar>(unit(rng));
  }
  for (auto& l : tree.leaves)
    for (int a = 0; a < action_count; ++a) l.w(a) = static_cast<Scalar>(small(rng));
  return tree;
}

// ---------------------------------------------------------------------------
// Evaluation

template <typename Scalar>
Scalar split_activation(const DecisionNode<Scalar>& node, const Eigen::Ref<const Vec<Scalar>>& x) {
  detail::check_dim<Scalar>("split input", node.beta.size(), x.size());
  return detail::sigmoid<Scalar>(node.alpha * (node.beta.dot(x) - node.phi));
}

template <typename Scalar>
Vec<Scalar> softmax(const Eigen::Ref<const Vec<Scalar>>& w) {
  Vec<Scalar> e = (w.array() - w.maxCoeff()).exp();
  return e / e.sum();
}

template <typename Scalar>
Vec<Scalar> leaf_distribution(const LeafNode<Scalar>& leaf) {
  if (leaf.interpretation != Interpretation::Policy)
    throw InvalidInterpretation("leaf_distribution requires a POLICY leaf");
  return softmax<Scalar>(leaf.w);
}

/// Leaf output under the leaf's own interpretation.
template <typename Scalar>
Vec<Scalar> leaf_output(const LeafNode<Scalar>& leaf) {
  return leaf.interpretation == Interpretation::Policy ? softmax<Scalar>(leaf.w) : leaf.w;
}

namespace detail {

template <typename Scalar>
Vec<Scalar> eval_ref(const SoftTree<Scalar>& tree, ChildRef ref, const Eigen::Ref<const Vec<Scalar>>& x) {
  if (ref.is_leaf()) return leaf_output(tree.leaves[ref.index]);
  const auto& node = tree.nodes[ref.index];
  const Scalar mu = split_activation(node, x);
  Vec<Scalar> left = eval_ref(tree, node.left, x);
  Vec<Scalar> right = eval_ref(tree, node.right, x);
  return mu * left + (Scalar(1) - mu) * right;
}

}  // namespace detail

/// Recursive mixture mu * T_left + (1 - mu) * T_right down to the leaves.
template <typename Scalar>
Vec<Scalar> eval_soft(const SoftTree<Scalar>& tree, const Eigen::Ref<const Vec<Scalar>>& x) {
  detail::check_dim<Scalar>("tree input", tree.feature_dim, x.size());
  return detail::eval_ref(tree, tree.root, x);
}

/// Rule-list evaluation: every TRUE branch is a leaf, so the recursion unrolls
/// into a fold from the default leaf back to the first rule.
template <typename Scalar>
Vec<Scalar> eval_rule_list_soft(const SoftTree<Scalar>& list, const Eigen::Ref<const Vec<Scalar>>& x) {
  if (list.topology.kind != TopologyKind::RuleList) throw UnsupportedShape("eval_rule_list_soft requires a rule list");
  detail::check_dim<Scalar>("rule list input", list.feature_dim, x.size());
  // Collect the chain of decision nodes from the root.
  std::vector<int> chain;
  ChildRef ref = list.root;
  while (!ref.is_leaf()) {
    chain.push_back(ref.index);
    ref = list.nodes[ref.index].right;
  }
  Vec<Scalar> acc = leaf_output(list.leaves[ref.index]);
  for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
    const auto& node = list.nodes[*it];
    const Scalar mu = split_activation(node, x);
    Vec<Scalar> rule = leaf_output(list.leaves[node.left.index]);
    acc = mu * rule + (Scalar(1) - mu) * acc;
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Gradients

/// Partials keyed like the tree's parameters.
template <typename Scalar>
struct GradientBuffer {
  Vec<Scalar> d_alpha;             // per decision node
  std::vector<Vec<Scalar>> d_beta;  // per decision node, length d
  Vec<Scalar> d_phi;               // per decision node
  std::vector<Vec<Scalar>> d_w;     // per leaf, length |A|

  static GradientBuffer zeros_like(const SoftTree<Scalar>& tree) {
    GradientBuffer g;
    const auto n = static_cast<Eigen::Index>(tree.nodes.size());
    g.d_alpha = Vec<Scalar>::Zero(n);
    g.d_phi = Vec<Scalar>::Zero(n);
    g.d_beta.assign(tree.nodes.size(), Vec<Scalar>::Zero(tree.feature_dim));
    g.d_w.assign(tree.leaves.size(), Vec<Scalar>::Zero(tree.action_count));
    return g;
  }

  bool matches(const SoftTree<Scalar>& tree) const {
    if (d_alpha.size() != static_cast<Eigen::Index>(tree.nodes.size())) return false;
    if (d_phi.size() != d_alpha.size() || d_beta.size() != tree.nodes.size()) return false;
    if (d_w.size() != tree.leaves.size()) return false;
    for (const auto& b : d_beta)
      if (b.size() != tree.feature_dim) return false;
    for (const auto& w : d_w)
      if (w.size() != tree.action_count) return false;
    return true;
  }

  bool all_finite() const {
    if (!d_alpha.allFinite() || !d_phi.allFinite()) return false;
    for (const auto& b : d_beta)
      if (!b.allFinite()) return false;
    for (const auto& w : d_w)
      if (!w.allFinite()) return false;
    return true;
  }

  GradientBuffer& operator+=(const GradientBuffer& o) {
    d_alpha += o.d_alpha;
    d_phi += o.d_phi;
    for (std::size_t i = 0; i < d_beta.size(); ++i) d_beta[i] += o.d_beta[i];
    for (std::size_t i = 0; i < d_w.size(); ++i) d_w[i] += o.d_w[i];
    return *this;
  }

  GradientBuffer& operator*=(Scalar s) {
    d_alpha *= s;
    d_phi *= s;
    for (auto& b : d_beta) b *= s;
    for (auto& w : d_w) w *= s;
    return *this;
  }
};

/// Flattened parameter layout, shared by flatten_parameters, flatten(GradientBuffer)
/// and assign_parameters: for each node [alpha, beta..., phi], then each leaf w.
template <typename Scalar>
Vec<Scalar> flatten_parameters(const SoftTree<Scalar>& tree) {
  Vec<Scalar> out(tree.parameter_count());
  Eigen::Index k = 0;
  for (const auto& n : tree.nodes) {
    out(k++) = n.alpha;
    out.segment(k, tree.feature_dim) = n.beta;
    k += tree.feature_dim;
    out(k++) = n.phi;
  }
  for (const auto& l : tree.leaves) {
    out.segment(k, tree.action_count) = l.w;
    k += tree.action_count;
  }
  return out;
}

template <typename Scalar>
Vec<Scalar> flatten(const GradientBuffer<Scalar>& g, int feature_dim, int action_count) {
  const auto n = g.d_alpha.size();
  Vec<Scalar> out(n * (feature_dim + 2) + static_cast<Eigen::Index>(g.d_w.size()) * action_count);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    out(k++) = g.d_alpha(i);
    out.segment(k, feature_dim) = g.d_beta[i];
    k += feature_dim;
    out(k++) = g.d_phi(i);
  }
  for (const auto& w : g.d_w) {
    out.segment(k, action_count) = w;
    k += action_count;
  }
  return out;
}

template <typename Scalar>
void assign_parameters(SoftTree<Scalar>& tree, const Eigen::Ref<const Vec<Scalar>>& params) {
  detail::check_dim<Scalar>("parameter vector", tree.parameter_count(), params.size());
  Eigen::Index k = 0;
  for (auto& n : tree.nodes) {
    n.alpha = params(k++);
    n.beta = params.segment(k, tree.feature_dim);
    k += tree.feature_dim;
    n.phi = params(k++);
  }
  for (auto& l : tree.leaves) {
    l.w = params.segment(k, tree.action_count);
    k += tree.action_count;
  }
}

/// Mask over the flattened layout selecting the steepness entries.
template <typename Scalar>
Vec<Scalar> alpha_mask(const SoftTree<Scalar>& tree) {
  Vec<Scalar> mask = Vec<Scalar>::Zero(tree.parameter_count());
  for (std::size_t i = 0; i < tree.nodes.size(); ++i)
    mask(static_cast<Eigen::Index>(i) * (tree.feature_dim + 2)) = Scalar(1);
  return mask;
}

namespace detail {

template <typename Scalar>
Vec<Scalar> backward_ref(const SoftTree<Scalar>& tree, ChildRef ref, const Eigen::Ref<const Vec<Scalar>>& x,
                         const Vec<Scalar>& upstream, GradientBuffer<Scalar>& g) {
  if (ref.is_leaf()) {
    const auto& leaf = tree.leaves[ref.index];
    if (leaf.interpretation == Interpretation::Q) {
      g.d_w[ref.index] += upstream;
      return leaf.w;
    }
    Vec<Scalar> p = softmax<Scalar>(leaf.w);
    // d<u, softmax(w)>/dw = p * (u - <u, p>)
    g.d_w[ref.index] += (p.array() * (upstream.array() - upstream.dot(p))).matrix();
    return p;
  }
  const auto& node = tree.nodes[ref.index];
  const Scalar margin = node.beta.dot(x) - node.phi;
  const Scalar mu = sigmoid<Scalar>(node.alpha * margin);
  Vec<Scalar> left = backward_ref(tree, node.left, x, (mu * upstream).eval(), g);
  Vec<Scalar> right = backward_ref(tree, node.right, x, ((Scalar(1) - mu) * upstream).eval(), g);
  // Same local form as the single-node partials, with the subtree outputs
  // standing in for the two leaves.
  const Scalar common = upstream.dot(left - right) * mu * (Scalar(1) - mu);
  g.d_alpha(ref.index) += common * margin;
  g.d_beta[ref.index] += (common * node.alpha) * x;
  g.d_phi(ref.index) += -common * node.alpha;
  return mu * left + (Scalar(1) - mu) * right;
}

}  // namespace detail

/// Gradient of <upstream, eval_soft(tree, x)> with respect to every parameter.
template <typename Scalar>
GradientBuffer<Scalar> backward(const SoftTree<Scalar>& tree, const Eigen::Ref<const Vec<Scalar>>& x,
                                const Eigen::Ref<const Vec<Scalar>>& upstream) {
  detail::check_dim<Scalar>("tree input", tree.feature_dim, x.size());
  detail::check_dim<Scalar>("upstream gradient", tree.action_count, upstream.size());
  auto g = GradientBuffer<Scalar>::zeros_like(tree);
  detail::backward_ref(tree, tree.root, x, Vec<Scalar>(upstream), g);
  return g;
}

/// Closed-form partials of f(s, a) = mu(s) q_TRUE[a] + (1 - mu(s)) q_FALSE[a]
/// for a one-node, one-feature Q tree.
template <typename Scalar>
GradientBuffer<Scalar> grad_single_node(const SoftTree<Scalar>& tree, Scalar s, int action) {
  if (tree.nodes.size() != 1 || tree.feature_dim != 1)
    throw UnsupportedShape("grad_single_node needs exactly one decision node over one feature; use backward");
  if (tree.interpretation != Interpretation::Q) throw InvalidInterpretation("grad_single_node expects a Q tree");
  if (action < 0 || action >= tree.action_count) throw DimensionMismatch("action index", tree.action_count, action);
  const auto& node = tree.nodes[0];
  const int true_leaf = node.left.index, false_leaf = node.right.index;
  const Scalar beta = node.beta(0);
  const Scalar mu = detail::sigmoid<Scalar>(node.alpha * (beta * s - node.phi));
  const Scalar lead = (tree.leaves[true_leaf].w(action) - tree.leaves[false_leaf].w(action)) * mu * (Scalar(1) - mu);
  auto g = GradientBuffer<Scalar>::zeros_like(tree);
  g.d_w[true_leaf](action) = mu;
  g.d_w[false_leaf](action) = Scalar(1) - mu;
  g.d_alpha(0) = lead * (beta * s - node.phi);
  g.d_beta[0](0) = lead * node.alpha * s;
  g.d_phi(0) = lead * node.alpha * Scalar(-1);
  return g;
}

}  // namespace ddt
