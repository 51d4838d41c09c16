#include "ddt/tree_io.hpp"

#include <cmath>

namespace ddt {

using nlohmann::json;

namespace {

json vector_to_json(const Vector& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v(i))) throw ConfigError("cannot serialize non-finite parameter");
    arr.push_back(v(i));
  }
  return arr;
}

Vector vector_from_json(const json& arr, long expected, const char* what) {
  if (!arr.is_array()) throw ConfigError(std::string(what) + " must be an array");
  if (static_cast<long>(arr.size()) != expected) throw DimensionMismatch(what, expected, static_cast<long>(arr.size()));
  Vector v(expected);
  for (long i = 0; i < expected; ++i) v(i) = arr.at(i).get<double>();
  return v;
}

}  // namespace

std::string to_string(Interpretation interp) { return interp == Interpretation::Policy ? "policy" : "q"; }

Interpretation interpretation_from_string(const std::string& s) {
  if (s == "policy") return Interpretation::Policy;
  if (s == "q") return Interpretation::Q;
  throw ConfigError("unknown interpretation '" + s + "'");
}

std::string ref_id(ChildRef ref) { return (ref.is_leaf() ? "l" : "n") + std::to_string(ref.index); }

ChildRef parse_ref_id(const std::string& id) {
  if (id.size() < 2 || (id[0] != 'n' && id[0] != 'l')) throw ConfigError("bad node reference '" + id + "'");
  std::size_t used = 0;
  int index = 0;
  try {
    index = std::stoi(id.substr(1), &used);
  } catch (const std::exception&) {
    throw ConfigError("bad node reference '" + id + "'");
  }
  if (used != id.size() - 1 || index < 0) throw ConfigError("bad node reference '" + id + "'");
  return id[0] == 'l' ? ChildRef::leaf(index) : ChildRef::node(index);
}

json tree_to_json(const SoftTreed& tree) {
  json doc;
  doc["version"] = kTreeFormatVersion;
  doc["topology"] = {{"kind", tree.topology.kind == TopologyKind::Balanced ? "balanced" : "rule_list"},
                     {"size", tree.topology.size}};
  doc["d"] = tree.feature_dim;
  doc["num_actions"] = tree.action_count;
  doc["interpretation"] = to_string(tree.interpretation);
  doc["root"] = ref_id(tree.root);
  json nodes = json::array();
  for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
    const auto& n = tree.nodes[i];
    if (!std::isfinite(n.alpha) || !std::isfinite(n.phi)) throw ConfigError("cannot serialize non-finite parameter");
    nodes.push_back({{"id", ref_id(ChildRef::node(static_cast<int>(i)))},
                     {"alpha", n.alpha},
                     {"beta", vector_to_json(n.beta)},
                     {"phi", n.phi},
                     {"left", ref_id(n.left)},
                     {"right", ref_id(n.right)}});
  }
  doc["nodes"] = std::move(nodes);
  json leaves = json::array();
  for (std::size_t i = 0; i < tree.leaves.size(); ++i)
    leaves.push_back({{"id", ref_id(ChildRef::leaf(static_cast<int>(i)))}, {"w", vector_to_json(tree.leaves[i].w)}});
  doc["leaves"] = std::move(leaves);
  return doc;
}

SoftTreed tree_from_json(const json& doc) {
  try {
    if (doc.at("version").get<int>() != kTreeFormatVersion) throw ConfigError("unsupported tree format version");
    SoftTreed tree;
    const auto& topo = doc.at("topology");
    const auto kind = topo.at("kind").get<std::string>();
    if (kind == "balanced")
      tree.topology.kind = TopologyKind::Balanced;
    else if (kind == "rule_list")
      tree.topology.kind = TopologyKind::RuleList;
    else
      throw ConfigError("unknown topology '" + kind + "'");
    tree.topology.size = topo.at("size").get<int>();
    tree.feature_dim = doc.at("d").get<int>();
    tree.action_count = doc.at("num_actions").get<int>();
    tree.interpretation = interpretation_from_string(doc.at("interpretation").get<std::string>());
    tree.root = parse_ref_id(doc.at("root").get<std::string>());
    const auto& nodes = doc.at("nodes");
    tree.nodes.resize(nodes.size());
    for (const auto& jn : nodes) {
      const auto id = parse_ref_id(jn.at("id").get<std::string>());
      if (id.is_leaf() || id.index >= static_cast<int>(nodes.size())) throw ConfigError("bad decision node id");
      auto& n = tree.nodes[id.index];
      n.alpha = jn.at("alpha").get<double>();
      n.beta = vector_from_json(jn.at("beta"), tree.feature_dim, "beta");
      n.phi = jn.at("phi").get<double>();
      n.left = parse_ref_id(jn.at("left").get<std::string>());
      n.right = parse_ref_id(jn.at("right").get<std::string>());
    }
    const auto& leaves = doc.at("leaves");
    tree.leaves.resize(leaves.size());
    for (const auto& jl : leaves) {
      const auto id = parse_ref_id(jl.at("id").get<std::string>());
      if (!id.is_leaf() || id.index >= static_cast<int>(leaves.size())) throw ConfigError("bad leaf id");
      tree.leaves[id.index] = {vector_from_json(jl.at("w"), tree.action_count, "leaf w"), tree.interpretation};
    }
    validate(tree);
    return tree;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed tree document: ") + e.what());
  }
}

}  // namespace ddt
