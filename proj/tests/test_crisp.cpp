#include <doctest.h>

#include <fstream>
#include <random>
#include <sstream>

#include "ddt/crisp.hpp"
#include "ddt/tree_io.hpp"

using namespace ddt;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  int i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

SoftTreed node_tree(Vector beta, double phi, int true_action, int false_action, int A = 2) {
  auto t = make_tree<double>({TopologyKind::Balanced, 1}, static_cast<int>(beta.size()), A, Interpretation::Policy);
  t.nodes[0].alpha = 1.0;
  t.nodes[0].beta = beta;
  t.nodes[0].phi = phi;
  t.leaves[0].w(true_action) = 1.0;
  t.leaves[1].w(false_action) = 1.0;
  return t;
}

CrispPolicy single_split(int feature, double threshold, int true_action, int false_action, int d = 1) {
  CrispPolicy p;
  p.feature_dim = d;
  p.action_count = 2;
  p.nodes = {{feature, threshold, ChildRef::leaf(0), ChildRef::leaf(1)}};
  p.leaf_actions = {true_action, false_action};
  p.root = ChildRef::node(0);
  return p;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("discretize_tree examples") {
  SUBCASE("largest weight picks the feature") {
    const auto c = discretize_tree(node_tree(vec({0.2, 0.8}), 0.4, 1, 0));
    CHECK(c.nodes[0].feature == 1);
    CHECK(c.nodes[0].threshold == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(c.leaf_actions[0] == 1);
    CHECK(c.leaf_actions[1] == 0);
  }
  SUBCASE("one-hot weights keep the threshold") {
    const auto c = discretize_tree(node_tree(vec({1.0, 0.0}), 2.5, 1, 0));
    CHECK(c.nodes[0].feature == 0);
    CHECK(c.nodes[0].threshold == 2.5);
  }
  SUBCASE("negative weights use raw argmax and warn") {
    std::vector<std::string> warnings;
    const auto c = discretize_tree(node_tree(vec({-0.5, -2.0}), 1.0, 1, 0), &warnings);
    CHECK(c.nodes[0].feature == 0);
    CHECK(c.nodes[0].threshold == -2.0);
    CHECK(warnings.size() == 1);
  }
  SUBCASE("zero selected weight is degenerate") {
    CHECK_THROWS_AS(discretize_tree(node_tree(vec({0.0, -1.0}), 1.0, 1, 0)), DegenerateNode);
  }
  SUBCASE("Q leaves are rejected") {
    auto t = node_tree(vec({1.0}), 0.0, 0, 1);
    t.interpretation = Interpretation::Q;
    for (auto& l : t.leaves) l.interpretation = Interpretation::Q;
    CHECK_THROWS_AS(discretize_tree(t), InvalidInterpretation);
  }
}

TEST_CASE("discretize_rule_list") {
  auto list = make_tree<double>({TopologyKind::RuleList, 1}, 1, 2, Interpretation::Policy);
  list.nodes[0].beta(0) = 2.0;
  list.nodes[0].phi = 3.0;
  list.leaves[0].w(1) = 1.0;
  list.leaves[1].w(0) = 1.0;
  auto tree = list;
  tree.topology = {TopologyKind::Balanced, 1};
  const auto a = discretize_rule_list(list);
  const auto b = discretize_tree(tree);
  CHECK(a.nodes == b.nodes);
  CHECK(a.leaf_actions == b.leaf_actions);
  CHECK(a.rule_list);
  CHECK_THROWS_AS(discretize_rule_list(tree), UnsupportedShape);
}

TEST_CASE("eval_crisp examples") {
  const auto p = single_split(0, 2.5, 1, 0);
  CHECK(eval_crisp(p, vec({3.0})) == 1);
  CHECK(eval_crisp(p, vec({2.5})) == 0);
  CHECK(eval_crisp(p, vec({-7.0})) == 0);
  const auto same = single_split(0, 2.5, 0, 0);
  for (double x : {-1.0, 2.5, 9.0}) CHECK(eval_crisp(same, vec({x})) == 0);
  CHECK_THROWS_AS(eval_crisp(p, vec({1.0, 2.0})), DimensionMismatch);
}

TEST_CASE("prune") {
  SUBCASE("identical leaves collapse") {
    const auto p = prune(single_split(0, 1.0, 1, 1));
    CHECK(p.nodes.empty());
    CHECK(p.root.is_leaf());
    CHECK(eval_crisp(p, vec({5.0})) == 1);
  }
  SUBCASE("nested test on the same feature is decided by the interval") {
    CrispPolicy p;
    p.feature_dim = 1;
    p.action_count = 2;
    p.nodes = {{0, 5.0, ChildRef::node(1), ChildRef::leaf(2)}, {0, 3.0, ChildRef::leaf(0), ChildRef::leaf(1)}};
    p.leaf_actions = {1, 0, 0};
    p.root = ChildRef::node(0);
    const auto q = prune(p);
    CHECK(q.nodes.size() == 1);
    for (double x : {-10.0, 2.0, 3.0, 4.0, 5.0, 5.5, 100.0}) CHECK(eval_crisp(q, vec({x})) == eval_crisp(p, vec({x})));
  }
  SUBCASE("minimal tree is a fixed point") {
    const auto p = single_split(0, 1.0, 1, 0);
    CHECK(prune(p) == p);
  }
  SUBCASE("same-action rule list collapses to one leaf") {
    auto list = make_tree<double>({TopologyKind::RuleList, 4}, 2, 3, Interpretation::Policy);
    for (auto& n : list.nodes) n.beta(0) = 1.0;
    for (auto& l : list.leaves) l.w(2) = 1.0;
    const auto p = prune(discretize_rule_list(list));
    CHECK(p.nodes.empty());
    CHECK(eval_crisp(p, vec({0.0, 0.0})) == 2);
  }
  SUBCASE("unreachable later rules are removed") {
    // Rule 0: x0 > 1. Rule 1: x0 > 2 can never fire after rule 0 failed.
    CrispPolicy p;
    p.feature_dim = 1;
    p.action_count = 3;
    p.rule_list = true;
    p.nodes = {{0, 1.0, ChildRef::leaf(0), ChildRef::node(1)},
               {0, 2.0, ChildRef::leaf(1), ChildRef::node(2)},
               {0, -1.0, ChildRef::leaf(2), ChildRef::leaf(3)}};
    p.leaf_actions = {0, 1, 2, 1};
    p.root = ChildRef::node(0);
    const auto q = prune(p);
    CHECK(q.nodes.size() == 2);
    for (double x : {-3.0, -1.0, 0.0, 1.0, 1.5, 2.5}) CHECK(eval_crisp(q, vec({x})) == eval_crisp(p, vec({x})));
  }
  SUBCASE("random trees keep their decisions") {
    Rng rng(9);
    std::normal_distribution<double> n(0, 1);
    std::uniform_int_distribution<int> act(0, 1), feat(0, 1);
    for (int k = 0; k < 30; ++k) {
      auto t = make_tree<double>({TopologyKind::Balanced, 3}, 2, 2, Interpretation::Policy);
      for (auto& node : t.nodes) {
        node.beta(feat(rng)) = 1.0;
        node.phi = std::round(n(rng));
      }
      for (auto& l : t.leaves) l.w(act(rng)) = 1.0;
      const auto c = discretize_tree(t);
      const auto p = prune(c);
      CHECK(p.nodes.size() <= c.nodes.size());
      for (int j = 0; j < 50; ++j) {
        const Vector x = vec({n(rng) * 2, n(rng) * 2});
        CHECK(eval_crisp(p, x) == eval_crisp(c, x));
      }
    }
  }
}

TEST_CASE("export") {
  const auto p = single_split(0, 2.5, 1, 0);
  const NameTable names{{"s"}, {"a1", "a2"}};
  SUBCASE("text is a two line if/else") {
    const std::string text = export_policy(p, ExportFormat::Text, names);
    CHECK(text == "if s > 2.5: a2\nelse: a1\n");
    const auto back = parse_text_policy(text, 1, 2, names);
    for (double x : {0.0, 2.5, 3.0}) CHECK(eval_crisp(back, vec({x})) == eval_crisp(p, vec({x})));
  }
  SUBCASE("dot has three nodes and two labelled edges") {
    const std::string dot = export_policy(p, ExportFormat::Dot, names);
    CHECK(dot.rfind("digraph", 0) == 0);
    int labels = 0, edges = 0;
    for (std::size_t i = dot.find("[label="); i != std::string::npos; i = dot.find("[label=", i + 1)) ++labels;
    for (std::size_t i = dot.find("->"); i != std::string::npos; i = dot.find("->", i + 1)) ++edges;
    CHECK(edges == 2);
    CHECK(labels == 5);
    CHECK(dot.find("[label=\"true\"]") != std::string::npos);
    CHECK(dot.find("[label=\"false\"]") != std::string::npos);
  }
  SUBCASE("default names") {
    CHECK(export_policy(p, ExportFormat::Text) == "if x0 > 2.5: a1\nelse: a0\n");
  }
  SUBCASE("wildfire fixture renders the recorded graph") {
    const std::string dir = DDT_FIXTURE_DIR;
    const auto policy = crisp_from_json(nlohmann::json::parse(slurp(dir + "/wildfire_crisp.json")));
    const NameTable wf{{"fire1_north", "fire1_west", "closest_fire1", "fire2_north", "fire2_west", "closest_fire2"},
                       {"north", "east", "south", "west", "nothing"}};
    CHECK(export_policy(policy, ExportFormat::Dot, wf) == slurp(dir + "/wildfire_crisp.dot"));
    CHECK(export_policy(policy, ExportFormat::Text, wf) == slurp(dir + "/wildfire_crisp.txt"));
  }
}

TEST_CASE("crisp json round trip and lift") {
  CrispPolicy p;
  p.feature_dim = 2;
  p.action_count = 3;
  p.nodes = {{1, 0.25, ChildRef::node(1), ChildRef::leaf(2)}, {0, -1.5, ChildRef::leaf(0), ChildRef::leaf(1)}};
  p.leaf_actions = {2, 0, 1};
  p.root = ChildRef::node(0);
  CHECK(crisp_from_json(crisp_to_json(p)) == p);
  CHECK(depth(p) == 2);
  const auto soft = lift_to_soft(p, 1e4);
  for (const auto& x : {vec({0.0, 1.0}), vec({-3.0, 1.0}), vec({0.0, -1.0})}) {
    const Vector out = eval_soft<double>(soft, x);
    int best = 0;
    out.maxCoeff(&best);
    CHECK(best == eval_crisp(p, x));
  }
}
