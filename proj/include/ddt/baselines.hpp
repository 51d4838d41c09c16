#pragma once

// Comparison models: a small ReLU MLP with a softmax head and CART trees fit on
// logged state-action pairs. Also the architecture factory shared by the CLI.

#include <nlohmann/json.hpp>

#include <memory>
#include <string>
#include <vector>

#include "ddt/crisp.hpp"
#include "ddt/train.hpp"

namespace ddt {

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;
};

class MlpPolicy final : public Policy {
 public:
  MlpPolicy() = default;
  /// hidden_layers in [0, 2]; every hidden layer has width `width`.
  MlpPolicy(int input_dim, int action_count, int hidden_layers, int width);

  int feature_dim() const override { return input_dim_; }
  int action_count() const override { return action_count_; }
  Vector output(const Vector& x) const override;
  Vector gradient(const Vector& x, const Vector& upstream) const override;
  Vector parameters() const override;
  void set_parameters(const Vector& params) override;
  nlohmann::json to_json() const override;
  std::unique_ptr<Policy> clone() const override { return std::make_unique<MlpPolicy>(*this); }

  static MlpPolicy from_json(const nlohmann::json& doc);
  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
  void randomize(Rng& rng);

  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  int hidden_layers() const { return static_cast<int>(layers_.size()) - 1; }

 private:
  int input_dim_ = 0;
  int action_count_ = 0;
  std::vector<DenseLayer> layers_;
};

Vector mlp_forward(const MlpPolicy& policy, const Vector& x);
/// Flat gradient of <upstream, mlp_forward(x)>.
Vector mlp_backward(const MlpPolicy& policy, const Vector& x, const Vector& upstream);

// ---------------------------------------------------------------------------
// CART

struct CartDataset {
  int feature_dim = 0;
  std::vector<Vector> states;
  std::vector<int> actions;

  std::size_t size() const { return states.size(); }
  void add(const Vector& state, int action);
};

struct CartOptions {
  int max_depth = 6;
  int min_samples_split = 2;
};

/// Greedy Gini splits with midpoint thresholds, majority leaves (ties to the
/// lowest action), ties between splits to the lowest feature then threshold.
CrispPolicy cart_fit(const CartDataset& data, int action_count, const CartOptions& options = {});
double accuracy(const CrispPolicy& policy, const CartDataset& data);

/// Logs (observation, action) pairs from every agent until `pairs` rows exist.
CartDataset collect_dataset(const ActionFn& act, Environment& env, std::size_t pairs, std::uint64_t seed);

/// Header f0,...,f{d-1},action.
std::string dataset_to_csv(const CartDataset& data);
CartDataset dataset_from_csv(const std::string& text);

// ---------------------------------------------------------------------------
// Architectures

struct ArchSpec {
  enum class Kind { Tree, List, Mlp };
  Kind kind = Kind::Tree;
  /// Leaves for Tree, rules for List, hidden layers for Mlp.
  int size = 2;

  std::string to_string() const;
  /// "tree:L" (L a power of two >= 2), "list:R" (R >= 1), "mlp:H" (0 <= H <= 2).
  static ArchSpec parse(const std::string& text);
};

std::unique_ptr<Policy> make_policy(const ArchSpec& arch, int feature_dim, int action_count, Rng& rng,
                                    bool freeze_alpha = false);
/// Restores a TreePolicy or MlpPolicy written by Policy::to_json.
std::unique_ptr<Policy> policy_from_json(const nlohmann::json& doc);

}  // namespace ddt
