#include "ddt/crisp.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <sstream>

#include "ddt/tree_io.hpp"

namespace ddt {

using nlohmann::json;

void validate(const CrispPolicy& policy) {
  if (policy.feature_dim <= 0 || policy.action_count <= 0) throw ConfigError("crisp policy dimensions must be positive");
  const int n_nodes = static_cast<int>(policy.nodes.size());
  const int n_leaves = static_cast<int>(policy.leaf_actions.size());
  std::vector<int> node_parents(n_nodes, 0), leaf_parents(n_leaves, 0);
  auto visit = [&](ChildRef r) {
    const int limit = r.is_leaf() ? n_leaves : n_nodes;
    if (r.index < 0 || r.index >= limit) throw ConfigError("crisp reference out of range");
    ++(r.is_leaf() ? leaf_parents : node_parents)[r.index];
  };
  visit(policy.root);
  for (const auto& n : policy.nodes) {
    if (n.feature < 0 || n.feature >= policy.feature_dim) throw ConfigError("crisp feature index out of range");
    if (!std::isfinite(n.threshold)) throw ConfigError("crisp threshold must be finite");
    visit(n.left);
    visit(n.right);
    if (policy.rule_list && !n.left.is_leaf()) throw ConfigError("rule list TRUE branch must end in a leaf");
  }
  for (int c : node_parents)
    if (c != 1) throw ConfigError("crisp node must have exactly one parent");
  for (int c : leaf_parents)
    if (c != 1) throw ConfigError("crisp leaf must have exactly one parent");
  for (int a : policy.leaf_actions)
    if (a < 0 || a >= policy.action_count) throw ConfigError("crisp leaf action out of range");
  // Reachability (and therefore acyclicity, since every in-degree is one).
  int seen = 0;
  std::vector<ChildRef> stack{policy.root};
  while (!stack.empty()) {
    auto r = stack.back();
    stack.pop_back();
    if (++seen > n_nodes + n_leaves) throw ConfigError("crisp policy contains a cycle");
    if (!r.is_leaf()) {
      stack.push_back(policy.nodes[r.index].left);
      stack.push_back(policy.nodes[r.index].right);
    }
  }
  if (seen != n_nodes + n_leaves) throw ConfigError("crisp policy has unreachable components");
}

namespace {

int argmax_lowest(const Vector& v) {
  int best = 0;
  for (int i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = i;
  return best;
}

CrispPolicy discretize(const SoftTreed& soft, std::vector<std::string>* warnings) {
  if (soft.interpretation != Interpretation::Policy) throw InvalidInterpretation("discretization expects a POLICY tree");
  validate(soft);
  CrispPolicy out;
  out.feature_dim = soft.feature_dim;
  out.action_count = soft.action_count;
  out.root = soft.root;
  out.rule_list = soft.topology.kind == TopologyKind::RuleList;
  out.nodes.reserve(soft.nodes.size());
  for (std::size_t i = 0; i < soft.nodes.size(); ++i) {
    const auto& n = soft.nodes[i];
    const int j = argmax_lowest(n.beta);
    const double weight = n.beta(j);
    if (weight == 0.0) throw DegenerateNode(static_cast<int>(i), "selected feature weight is zero");
    if (weight < 0.0 && warnings)
      warnings->push_back("node " + std::to_string(i) + ": selected weight on feature " + std::to_string(j) +
                          " is negative; crisp test keeps the > direction");
    out.nodes.push_back({j, n.phi / weight, n.left, n.right});
  }
  out.leaf_actions.reserve(soft.leaves.size());
  for (const auto& l : soft.leaves) out.leaf_actions.push_back(argmax_lowest(l.w));
  return out;
}

}  // namespace

CrispPolicy discretize_tree(const SoftTreed& soft, std::vector<std::string>* warnings) {
  return discretize(soft, warnings);
}

CrispPolicy discretize_rule_list(const SoftTreed& soft, std::vector<std::string>* warnings) {
  if (soft.topology.kind != TopologyKind::RuleList) throw UnsupportedShape("discretize_rule_list requires a rule list");
  return discretize(soft, warnings);
}

int eval_crisp(const CrispPolicy& policy, const Eigen::Ref<const Vector>& x) {
  if (x.size() != policy.feature_dim) throw DimensionMismatch("crisp policy input", policy.feature_dim, x.size());
  ChildRef r = policy.root;
  while (!r.is_leaf()) {
    const auto& n = policy.nodes[r.index];
    r = x(n.feature) > n.threshold ? n.left : n.right;
  }
  return policy.leaf_actions[r.index];
}

// ---------------------------------------------------------------------------
// Pruning

namespace {

// Owning recursive form used while rewriting.
struct Subtree {
  bool leaf = true;
  int action = 0;
  int feature = 0;
  double threshold = 0.0;
  std::unique_ptr<Subtree> yes, no;

  bool same_as(const Subtree& o) const {
    if (leaf != o.leaf) return false;
    if (leaf) return action == o.action;
    return feature == o.feature && threshold == o.threshold && yes->same_as(*o.yes) && no->same_as(*o.no);
  }
};

std::unique_ptr<Subtree> to_subtree(const CrispPolicy& p, ChildRef r) {
  auto s = std::make_unique<Subtree>();
  if (r.is_leaf()) {
    s->action = p.leaf_actions[r.index];
    return s;
  }
  const auto& n = p.nodes[r.index];
  s->leaf = false;
  s->feature = n.feature;
  s->threshold = n.threshold;
  s->yes = to_subtree(p, n.left);
  s->no = to_subtree(p, n.right);
  return s;
}

struct Interval {
  double lo = -std::numeric_limits<double>::infinity();  // x > lo
  double hi = std::numeric_limits<double>::infinity();   // x <= hi
};

// One bottom-up rewriting pass; returns true if anything changed.
bool rewrite(std::unique_ptr<Subtree>& s, std::vector<Interval>& box) {
  if (s->leaf) return false;
  auto& range = box[s->feature];
  if (s->threshold <= range.lo) {  // always TRUE on this path
    s = std::move(s->yes);
    rewrite(s, box);
    return true;
  }
  if (s->threshold >= range.hi) {  // always FALSE
    s = std::move(s->no);
    rewrite(s, box);
    return true;
  }
  bool changed = false;
  const Interval saved = range;
  range.lo = s->threshold;
  changed |= rewrite(s->yes, box);
  box[s->feature] = saved;
  box[s->feature].hi = s->threshold;
  changed |= rewrite(s->no, box);
  box[s->feature] = saved;
  if (s->yes->same_as(*s->no)) {
    s = std::move(s->yes);
    changed = true;
  }
  return changed;
}

ChildRef flatten_subtree(const Subtree& s, CrispPolicy& out) {
  if (s.leaf) {
    out.leaf_actions.push_back(s.action);
    return ChildRef::leaf(static_cast<int>(out.leaf_actions.size()) - 1);
  }
  const int idx = static_cast<int>(out.nodes.size());
  out.nodes.push_back({s.feature, s.threshold, {}, {}});
  const ChildRef yes = flatten_subtree(*s.yes, out);
  const ChildRef no = flatten_subtree(*s.no, out);
  out.nodes[idx].left = yes;
  out.nodes[idx].right = no;
  return ChildRef::node(idx);
}

// Canonical preorder numbering so equal policies compare equal.
CrispPolicy canonical(const Subtree& root, const CrispPolicy& shape) {
  CrispPolicy out;
  out.feature_dim = shape.feature_dim;
  out.action_count = shape.action_count;
  out.rule_list = shape.rule_list;
  out.root = flatten_subtree(root, out);
  return out;
}

}  // namespace

CrispPolicy prune(const CrispPolicy& policy) {
  validate(policy);
  auto root = to_subtree(policy, policy.root);
  std::vector<Interval> box(policy.feature_dim);
  while (rewrite(root, box)) {
  }
  return canonical(*root, policy);
}

int depth(const CrispPolicy& policy) {
  std::function<int(ChildRef)> rec = [&](ChildRef r) -> int {
    if (r.is_leaf()) return 0;
    return 1 + std::max(rec(policy.nodes[r.index].left), rec(policy.nodes[r.index].right));
  };
  return rec(policy.root);
}

// ---------------------------------------------------------------------------
// Export / parse

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> resolve(const std::vector<std::string>& given, int count, const char* prefix,
                                 const char* what) {
  if (given.empty()) {
    std::vector<std::string> out;
    for (int i = 0; i < count; ++i) out.push_back(prefix + std::to_string(i));
    return out;
  }
  if (static_cast<int>(given.size()) != count) throw DimensionMismatch(what, count, static_cast<long>(given.size()));
  return given;
}

std::string dot_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  return out;
}

void text_branch(const CrispPolicy& p, ChildRef r, int indent, const std::vector<std::string>& features,
                 const std::vector<std::string>& actions, std::ostringstream& os);

void text_body(const CrispPolicy& p, ChildRef r, int indent, const std::vector<std::string>& features,
               const std::vector<std::string>& actions, std::ostringstream& os) {
  if (r.is_leaf()) {
    os << ' ' << actions[p.leaf_actions[r.index]] << '\n';
  } else {
    os << '\n';
    text_branch(p, r, indent + 2, features, actions, os);
  }
}

void text_branch(const CrispPolicy& p, ChildRef r, int indent, const std::vector<std::string>& features,
                 const std::vector<std::string>& actions, std::ostringstream& os) {
  const std::string pad(indent, ' ');
  if (r.is_leaf()) {
    os << pad << actions[p.leaf_actions[r.index]] << '\n';
    return;
  }
  const auto& n = p.nodes[r.index];
  os << pad << "if " << features[n.feature] << " > " << format_double(n.threshold) << ':';
  text_body(p, n.left, indent, features, actions, os);
  os << pad << "else:";
  text_body(p, n.right, indent, features, actions, os);
}

}  // namespace

std::string export_policy(const CrispPolicy& policy, ExportFormat format, const NameTable& names) {
  validate(policy);
  const auto features = resolve(names.features, policy.feature_dim, "x", "feature name table");
  const auto actions = resolve(names.actions, policy.action_count, "a", "action name table");
  std::ostringstream os;
  if (format == ExportFormat::Text) {
    text_branch(policy, policy.root, 0, features, actions, os);
    return os.str();
  }
  os << "digraph policy {\n";
  os << "  node [shape=box];\n";
  for (std::size_t i = 0; i < policy.nodes.size(); ++i) {
    const auto& n = policy.nodes[i];
    os << "  n" << i << " [label=\"" << dot_escape(features[n.feature]) << " > " << format_double(n.threshold)
       << "\"];\n";
  }
  for (std::size_t i = 0; i < policy.leaf_actions.size(); ++i)
    os << "  l" << i << " [label=\"" << dot_escape(actions[policy.leaf_actions[i]]) << "\", shape=ellipse];\n";
  for (std::size_t i = 0; i < policy.nodes.size(); ++i) {
    const auto& n = policy.nodes[i];
    os << "  n" << i << " -> " << ref_id(n.left) << " [label=\"true\"];\n";
    os << "  n" << i << " -> " << ref_id(n.right) << " [label=\"false\"];\n";
  }
  os << "}\n";
  return os.str();
}

namespace {

struct TextParser {
  std::vector<std::string> lines;
  std::size_t pos = 0;
  std::map<std::string, int> feature_index, action_index;

  static int indent_of(const std::string& line) {
    int i = 0;
    while (i < static_cast<int>(line.size()) && line[i] == ' ') ++i;
    return i;
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw ConfigError("policy text line " + std::to_string(pos + 1) + ": " + msg);
  }

  int action(const std::string& name) const {
    auto it = action_index.find(name);
    if (it == action_index.end()) fail("unknown action '" + name + "'");
    return it->second;
  }

  std::unique_ptr<Subtree> branch(int indent) {
    if (pos >= lines.size()) fail("unexpected end of input");
    const std::string& line = lines[pos];
    if (indent_of(line) != indent) fail("bad indentation");
    const std::string body = line.substr(indent);
    auto s = std::make_unique<Subtree>();
    if (body.rfind("if ", 0) != 0) {
      s->action = action(body);
      ++pos;
      return s;
    }
    const auto gt = body.find(" > ");
    const auto colon = body.find(':', gt == std::string::npos ? 0 : gt);
    if (gt == std::string::npos || colon == std::string::npos) fail("expected 'if <feature> > <t>:'");
    const std::string fname = body.substr(3, gt - 3);
    auto fit = feature_index.find(fname);
    if (fit == feature_index.end()) fail("unknown feature '" + fname + "'");
    s->leaf = false;
    s->feature = fit->second;
    try {
      s->threshold = std::stod(body.substr(gt + 3, colon - gt - 3));
    } catch (const std::exception&) {
      fail("bad threshold");
    }
    s->yes = arm(body.substr(colon + 1), indent);
    if (pos >= lines.size() || indent_of(lines[pos]) != indent) fail("expected 'else:'");
    const std::string else_line = lines[pos].substr(indent);
    if (else_line.rfind("else:", 0) != 0) fail("expected 'else:'");
    s->no = arm(else_line.substr(5), indent);
    return s;
  }

  // Remainder after ':' is either " <action>" or empty (block follows).
  std::unique_ptr<Subtree> arm(const std::string& rest, int indent) {
    ++pos;
    if (!rest.empty()) {
      if (rest[0] != ' ') fail("expected space after ':'");
      auto s = std::make_unique<Subtree>();
      s->action = action(rest.substr(1));
      return s;
    }
    return branch(indent + 2);
  }
};

}  // namespace

CrispPolicy parse_text_policy(const std::string& text, int feature_dim, int action_count, const NameTable& names) {
  TextParser parser;
  const auto features = resolve(names.features, feature_dim, "x", "feature name table");
  const auto actions = resolve(names.actions, action_count, "a", "action name table");
  for (int i = 0; i < feature_dim; ++i) parser.feature_index[features[i]] = i;
  for (int i = 0; i < action_count; ++i) parser.action_index[actions[i]] = i;
  std::istringstream is(text);
  for (std::string line; std::getline(is, line);)
    if (!line.empty()) parser.lines.push_back(line);
  auto root = parser.branch(0);
  if (parser.pos != parser.lines.size()) parser.fail("trailing content");
  CrispPolicy shape;
  shape.feature_dim = feature_dim;
  shape.action_count = action_count;
  auto out = canonical(*root, shape);
  out.rule_list = true;
  for (const auto& n : out.nodes)
    if (!n.left.is_leaf()) out.rule_list = false;
  return out;
}

SoftTreed lift_to_soft(const CrispPolicy& policy, double alpha) {
  validate(policy);
  SoftTreed tree;
  tree.feature_dim = policy.feature_dim;
  tree.action_count = policy.action_count;
  tree.interpretation = Interpretation::Policy;
  tree.root = policy.root;
  tree.topology = policy.rule_list ? Topology{TopologyKind::RuleList, static_cast<int>(policy.nodes.size())}
                                   : Topology{TopologyKind::Balanced, depth(policy)};
  for (const auto& n : policy.nodes) {
    DecisionNode<double> d;
    d.alpha = alpha;
    d.beta = Vector::Zero(policy.feature_dim);
    d.beta(n.feature) = 1.0;
    d.phi = n.threshold;
    d.left = n.left;
    d.right = n.right;
    tree.nodes.push_back(std::move(d));
  }
  for (int a : policy.leaf_actions) {
    Vector w = Vector::Zero(policy.action_count);
    w(a) = 1.0;
    tree.leaves.push_back({std::move(w), Interpretation::Policy});
  }
  return tree;
}

json crisp_to_json(const CrispPolicy& policy) {
  validate(policy);
  json doc;
  doc["version"] = kTreeFormatVersion;
  doc["kind"] = "crisp";
  doc["shape"] = policy.rule_list ? "rule_list" : "tree";
  doc["d"] = policy.feature_dim;
  doc["num_actions"] = policy.action_count;
  doc["root"] = ref_id(policy.root);
  json nodes = json::array();
  for (std::size_t i = 0; i < policy.nodes.size(); ++i) {
    const auto& n = policy.nodes[i];
    nodes.push_back({{"id", ref_id(ChildRef::node(static_cast<int>(i)))},
                     {"feature", n.feature},
                     {"threshold", n.threshold},
                     {"left", ref_id(n.left)},
                     {"right", ref_id(n.right)}});
  }
  doc["nodes"] = std::move(nodes);
  json leaves = json::array();
  for (std::size_t i = 0; i < policy.leaf_actions.size(); ++i)
    leaves.push_back({{"id", ref_id(ChildRef::leaf(static_cast<int>(i)))}, {"action", policy.leaf_actions[i]}});
  doc["leaves"] = std::move(leaves);
  return doc;
}

CrispPolicy crisp_from_json(const json& doc) {
  try {
    if (doc.at("version").get<int>() != kTreeFormatVersion) throw ConfigError("unsupported crisp format version");
    CrispPolicy p;
    p.rule_list = doc.at("shape").get<std::string>() == "rule_list";
    p.feature_dim = doc.at("d").get<int>();
    p.action_count = doc.at("num_actions").get<int>();
    p.root = parse_ref_id(doc.at("root").get<std::string>());
    const auto& nodes = doc.at("nodes");
    p.nodes.resize(nodes.size());
    for (const auto& jn : nodes) {
      const auto id = parse_ref_id(jn.at("id").get<std::string>());
      if (id.is_leaf() || id.index >= static_cast<int>(nodes.size())) throw ConfigError("bad crisp node id");
      p.nodes[id.index] = {jn.at("feature").get<int>(), jn.at("threshold").get<double>(),
                           parse_ref_id(jn.at("left").get<std::string>()),
                           parse_ref_id(jn.at("right").get<std::string>())};
    }
    const auto& leaves = doc.at("leaves");
    p.leaf_actions.resize(leaves.size());
    for (const auto& jl : leaves) {
      const auto id = parse_ref_id(jl.at("id").get<std::string>());
      if (!id.is_leaf() || id.index >= static_cast<int>(leaves.size())) throw ConfigError("bad crisp leaf id");
      p.leaf_actions[id.index] = jl.at("action").get<int>();
    }
    validate(p);
    return p;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed crisp policy document: ") + e.what());
  }
}

}  // namespace ddt
