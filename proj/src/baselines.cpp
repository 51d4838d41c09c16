#include "ddt/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "ddt/tree_io.hpp"

namespace ddt {

using nlohmann::json;

// ---------------------------------------------------------------------------
// MLP

MlpPolicy::MlpPolicy(int input_dim, int action_count, int hidden_layers, int width)
    : input_dim_(input_dim), action_count_(action_count) {
  if (input_dim < 1 || action_count < 1) throw ConfigError("MLP dimensions must be positive");
  if (hidden_layers < 0 || hidden_layers > 2) throw ConfigError("MLP supports 0 to 2 hidden layers");
  if (hidden_layers > 0 && width < 1) throw ConfigError("MLP hidden width must be positive");
  int in = input_dim;
  for (int l = 0; l < hidden_layers; ++l) {
    layers_.push_back({Matrix::Zero(width, in), Vector::Zero(width)});
    in = width;
  }
  layers_.push_back({Matrix::Zero(action_count, in), Vector::Zero(action_count)});
}

void MlpPolicy::randomize(Rng& rng) {
  for (auto& layer : layers_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(layer.weight.cols()));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index j = 0; j < layer.weight.cols(); ++j)
      for (Eigen::Index i = 0; i < layer.weight.rows(); ++i) layer.weight(i, j) = u(rng);
    layer.bias.setZero();
  }
}

Vector mlp_forward(const MlpPolicy& policy, const Vector& x) {
  if (x.size() != policy.feature_dim()) throw DimensionMismatch("MLP input", policy.feature_dim(), x.size());
  const auto& layers = policy.layers();
  Vector h = x;
  for (std::size_t l = 0; l + 1 < layers.size(); ++l)
    h = (layers[l].weight * h + layers[l].bias).cwiseMax(0.0);
  const Vector z = layers.back().weight * h + layers.back().bias;
  return softmax<double>(z);
}

Vector mlp_backward(const MlpPolicy& policy, const Vector& x, const Vector& upstream) {
  if (x.size() != policy.feature_dim()) throw DimensionMismatch("MLP input", policy.feature_dim(), x.size());
  if (upstream.size() != policy.action_count())
    throw DimensionMismatch("upstream gradient", policy.action_count(), upstream.size());
  const auto& layers = policy.layers();
  const std::size_t L = layers.size();
  // Keep each layer's input and pre-activation.
  std::vector<Vector> inputs(L), pre(L);
  Vector h = x;
  for (std::size_t l = 0; l < L; ++l) {
    inputs[l] = h;
    pre[l] = layers[l].weight * h + layers[l].bias;
    h = l + 1 < L ? Vector(pre[l].cwiseMax(0.0)) : pre[l];
  }
  const Vector p = softmax<double>(pre[L - 1]);
  Vector dz = p.array() * (upstream.array() - upstream.dot(p));

  std::vector<Vector> parts(L);
  for (std::size_t l = L; l-- > 0;) {
    const Matrix dw = dz * inputs[l].transpose();
    Vector part(dw.size() + dz.size());
    part << Eigen::Map<const Vector>(dw.data(), dw.size()), dz;
    parts[l] = std::move(part);
    if (l == 0) break;
    Vector dh = layers[l].weight.transpose() * dz;
    dz = dh.array() * (pre[l - 1].array() > 0.0).cast<double>();
  }
  Eigen::Index total = 0;
  for (const auto& part : parts) total += part.size();
  Vector g(total);
  Eigen::Index offset = 0;
  for (const auto& part : parts) {
    g.segment(offset, part.size()) = part;
    offset += part.size();
  }
  return g;
}

Vector MlpPolicy::output(const Vector& x) const { return mlp_forward(*this, x); }

Vector MlpPolicy::gradient(const Vector& x, const Vector& upstream) const { return mlp_backward(*this, x, upstream); }

Vector MlpPolicy::parameters() const {
  Eigen::Index total = 0;
  for (const auto& l : layers_) total += l.weight.size() + l.bias.size();
  Vector p(total);
  Eigen::Index offset = 0;
  for (const auto& l : layers_) {
    p.segment(offset, l.weight.size()) = Eigen::Map<const Vector>(l.weight.data(), l.weight.size());
    offset += l.weight.size();
    p.segment(offset, l.bias.size()) = l.bias;
    offset += l.bias.size();
  }
  return p;
}

void MlpPolicy::set_parameters(const Vector& params) {
  const Eigen::Index expected = parameters().size();
  if (params.size() != expected) throw DimensionMismatch("MLP parameters", expected, params.size());
  Eigen::Index offset = 0;
  for (auto& l : layers_) {
    Eigen::Map<Vector>(l.weight.data(), l.weight.size()) = params.segment(offset, l.weight.size());
    offset += l.weight.size();
    l.bias = params.segment(offset, l.bias.size());
    offset += l.bias.size();
  }
}

json MlpPolicy::to_json() const {
  json layers = json::array();
  for (const auto& l : layers_) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < l.weight.rows(); ++i) {
      json row = json::array();
      for (Eigen::Index j = 0; j < l.weight.cols(); ++j) row.push_back(l.weight(i, j));
      rows.push_back(std::move(row));
    }
    json bias = json::array();
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) bias.push_back(l.bias(i));
    layers.push_back({{"weight", std::move(rows)}, {"bias", std::move(bias)}});
  }
  return {{"kind", "mlp"}, {"d", input_dim_}, {"num_actions", action_count_}, {"layers", std::move(layers)}};
}

MlpPolicy MlpPolicy::from_json(const json& doc) {
  try {
    if (doc.at("kind").get<std::string>() != "mlp") throw ConfigError("not an MLP document");
    MlpPolicy m;
    m.input_dim_ = doc.at("d").get<int>();
    m.action_count_ = doc.at("num_actions").get<int>();
    int in = m.input_dim_;
    for (const auto& jl : doc.at("layers")) {
      const auto& rows = jl.at("weight");
      const auto& bias = jl.at("bias");
      DenseLayer l{Matrix(rows.size(), in), Vector(bias.size())};
      if (bias.size() != rows.size()) throw ConfigError("MLP bias size does not match weight rows");
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (static_cast<int>(rows[i].size()) != in) throw DimensionMismatch("MLP weight row", in, rows[i].size());
        for (int j = 0; j < in; ++j) l.weight(i, j) = rows[i][j].get<double>();
        l.bias(i) = bias[i].get<double>();
      }
      in = static_cast<int>(rows.size());
      m.layers_.push_back(std::move(l));
    }
    if (m.layers_.empty() || m.layers_.size() > 3) throw ConfigError("MLP needs 1 to 3 layers");
    if (in != m.action_count_) throw DimensionMismatch("MLP output", m.action_count_, in);
    return m;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed MLP document: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// CART

void CartDataset::add(const Vector& state, int action) {
  if (feature_dim == 0 && states.empty()) feature_dim = static_cast<int>(state.size());
  if (state.size() != feature_dim) throw DimensionMismatch("dataset row", feature_dim, state.size());
  states.push_back(state);
  actions.push_back(action);
}

namespace {

double gini(const std::vector<int>& counts, int total) {
  if (total == 0) return 0.0;
  double s = 1.0;
  for (int c : counts) {
    const double p = static_cast<double>(c) / total;
    s -= p * p;
  }
  return s;
}

int majority(const CartDataset& data, const std::vector<int>& rows, int action_count) {
  std::vector<int> counts(action_count, 0);
  for (int r : rows) ++counts[data.actions[r]];
  return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

struct Split {
  int feature = -1;
  double threshold = 0.0;
  double impurity = 0.0;
};

Split best_split(const CartDataset& data, const std::vector<int>& rows, int action_count) {
  const int n = static_cast<int>(rows.size());
  std::vector<int> parent(action_count, 0);
  for (int r : rows) ++parent[data.actions[r]];
  Split best;
  best.impurity = gini(parent, n);
  std::vector<int> order(rows);
  for (int j = 0; j < data.feature_dim; ++j) {
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return data.states[a](j) < data.states[b](j); });
    // Sweep thresholds: rows before the cut go to the FALSE side (x <= t).
    std::vector<int> low(action_count, 0), high(parent);
    for (int i = 0; i + 1 < n; ++i) {
      const int a = data.actions[order[i]];
      ++low[a];
      --high[a];
      const double x0 = data.states[order[i]](j), x1 = data.states[order[i + 1]](j);
      if (!(x0 < x1)) continue;
      const int nl = i + 1, nh = n - nl;
      const double imp = (nl * gini(low, nl) + nh * gini(high, nh)) / n;
      if (imp < best.impurity - 1e-12) best = {j, 0.5 * (x0 + x1), imp};
    }
  }
  return best;
}

ChildRef grow(const CartDataset& data, const std::vector<int>& rows, int depth, int action_count,
              const CartOptions& options, CrispPolicy& out) {
  auto make_leaf = [&] {
    out.leaf_actions.push_back(majority(data, rows, action_count));
    return ChildRef::leaf(static_cast<int>(out.leaf_actions.size()) - 1);
  };
  if (depth >= options.max_depth || static_cast<int>(rows.size()) < options.min_samples_split) return make_leaf();
  const Split split = best_split(data, rows, action_count);
  if (split.feature < 0) return make_leaf();
  std::vector<int> above, below;
  for (int r : rows) (data.states[r](split.feature) > split.threshold ? above : below).push_back(r);
  const int index = static_cast<int>(out.nodes.size());
  out.nodes.push_back({split.feature, split.threshold, {}, {}});
  const ChildRef left = grow(data, above, depth + 1, action_count, options, out);
  const ChildRef right = grow(data, below, depth + 1, action_count, options, out);
  out.nodes[index].left = left;
  out.nodes[index].right = right;
  return ChildRef::node(index);
}

}  // namespace

CrispPolicy cart_fit(const CartDataset& data, int action_count, const CartOptions& options) {
  if (data.size() == 0) throw ConfigError("cart_fit needs a non-empty dataset");
  if (action_count < 1) throw ConfigError("action count must be positive");
  if (options.max_depth < 0) throw ConfigError("max_depth must be non-negative");
  for (int a : data.actions)
    if (a < 0 || a >= action_count) throw ConfigError("dataset action out of range");
  CrispPolicy out;
  out.feature_dim = data.feature_dim;
  out.action_count = action_count;
  std::vector<int> rows(data.size());
  std::iota(rows.begin(), rows.end(), 0);
  out.root = grow(data, rows, 0, action_count, options, out);
  validate(out);
  return out;
}

double accuracy(const CrispPolicy& policy, const CartDataset& data) {
  if (data.size() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) hits += eval_crisp(policy, data.states[i]) == data.actions[i];
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

CartDataset collect_dataset(const ActionFn& act, Environment& env, std::size_t pairs, std::uint64_t seed) {
  CartDataset data;
  data.feature_dim = env.observation_dim();
  Rng env_rng = substream(seed, "env");
  Rng sample_rng = substream(seed, "sampling");
  std::vector<int> actions(env.agent_count());
  while (data.size() < pairs) {
    env.reset(env_rng());
    for (int t = 0; !env.done() && t < env.step_limit() && data.size() < pairs; ++t) {
      const auto obs = env.observe();
      for (std::size_t k = 0; k < obs.size(); ++k) {
        actions[k] = act(obs[k], sample_rng);
        if (data.size() < pairs) data.add(obs[k], actions[k]);
      }
      env.step(actions);
    }
  }
  return data;
}

std::string dataset_to_csv(const CartDataset& data) {
  std::ostringstream out;
  for (int j = 0; j < data.feature_dim; ++j) out << 'f' << j << ',';
  out << "action\n";
  char buf[32];
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (int j = 0; j < data.feature_dim; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g,", data.states[i](j));
      out << buf;
    }
    out << data.actions[i] << '\n';
  }
  return out.str();
}

CartDataset dataset_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("dataset CSV is empty");
  const int columns = static_cast<int>(std::count(line.begin(), line.end(), ',')) + 1;
  if (columns < 2) throw ConfigError("dataset CSV needs at least one feature column");
  CartDataset data;
  data.feature_dim = columns - 1;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    Vector x(data.feature_dim);
    int col = 0, action = -1;
    try {
      while (std::getline(row, cell, ',')) {
        if (col < data.feature_dim)
          x(col) = std::stod(cell);
        else if (col == data.feature_dim)
          action = std::stoi(cell);
        ++col;
      }
    } catch (const std::exception&) {
      throw ConfigError("dataset CSV line " + std::to_string(lineno) + ": unparsable value");
    }
    if (col != columns) throw ConfigError("dataset CSV line " + std::to_string(lineno) + ": wrong column count");
    data.add(x, action);
  }
  return data;
}

// ---------------------------------------------------------------------------
// Architectures

std::string ArchSpec::to_string() const {
  const char* name = kind == Kind::Tree ? "tree" : kind == Kind::List ? "list" : "mlp";
  return std::string(name) + ":" + std::to_string(size);
}

ArchSpec ArchSpec::parse(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw ConfigError("architecture must look like tree:L, list:R or mlp:H");
  const std::string kind = text.substr(0, colon);
  ArchSpec spec;
  std::size_t used = 0;
  try {
    spec.size = std::stoi(text.substr(colon + 1), &used);
  } catch (const std::exception&) {
    throw ConfigError("bad architecture size in '" + text + "'");
  }
  if (used != text.size() - colon - 1) throw ConfigError("bad architecture size in '" + text + "'");
  if (kind == "tree") {
    spec.kind = Kind::Tree;
    if (spec.size < 2 || (spec.size & (spec.size - 1)) != 0) throw ConfigError("tree leaf count must be a power of two >= 2");
  } else if (kind == "list") {
    spec.kind = Kind::List;
    if (spec.size < 1) throw ConfigError("rule count must be at least 1");
  } else if (kind == "mlp") {
    spec.kind = Kind::Mlp;
    if (spec.size < 0 || spec.size > 2) throw ConfigError("MLP hidden layers must be 0, 1 or 2");
  } else {
    throw ConfigError("unknown architecture '" + kind + "'");
  }
  return spec;
}

std::unique_ptr<Policy> make_policy(const ArchSpec& arch, int feature_dim, int action_count, Rng& rng,
                                    bool freeze_alpha) {
  switch (arch.kind) {
    case ArchSpec::Kind::Tree: {
      int depth = 0;
      while ((1 << depth) < arch.size) ++depth;
      auto tree = init_tree<double>({TopologyKind::Balanced, depth}, feature_dim, action_count,
                                    Interpretation::Policy, rng);
      return std::make_unique<TreePolicy>(std::move(tree), freeze_alpha);
    }
    case ArchSpec::Kind::List: {
      auto tree = init_tree<double>({TopologyKind::RuleList, arch.size}, feature_dim, action_count,
                                    Interpretation::Policy, rng);
      return std::make_unique<TreePolicy>(std::move(tree), freeze_alpha);
    }
    case ArchSpec::Kind::Mlp: {
      // Hidden layers keep the input width.
      auto mlp = std::make_unique<MlpPolicy>(feature_dim, action_count, arch.size, feature_dim);
      mlp->randomize(rng);
      return mlp;
    }
  }
  throw ConfigError("unknown architecture");
}

std::unique_ptr<Policy> policy_from_json(const json& doc) {
  if (doc.contains("kind") && doc.at("kind") == "mlp") return std::make_unique<MlpPolicy>(MlpPolicy::from_json(doc));
  if (doc.contains("kind") && doc.at("kind") == "crisp")
    throw ConfigError("crisp policies are not differentiable models");
  const bool freeze = doc.value("freeze_alpha", false);
  return std::make_unique<TreePolicy>(tree_from_json(doc), freeze);
}

}  // namespace ddt
