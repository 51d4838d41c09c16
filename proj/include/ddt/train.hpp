#pragma once

// Online RL on flat parameter vectors: rollouts, returns, RMSProp, and the
// policy-gradient, Q-learning and PPO-clip updates.

#include <nlohmann/json.hpp>

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ddt/envs.hpp"
#include "ddt/soft_tree.hpp"

namespace ddt {

/// Differentiable model seen through its flat parameter vector.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual int feature_dim() const = 0;
  virtual int action_count() const = 0;
  /// Action distribution (or Q-values for a Q model).
  virtual Vector output(const Vector& x) const = 0;
  /// Gradient of <upstream, output(x)> with respect to parameters().
  virtual Vector gradient(const Vector& x, const Vector& upstream) const = 0;
  virtual Vector parameters() const = 0;
  virtual void set_parameters(const Vector& params) = 0;
  /// 1 for trainable entries, 0 for frozen ones.
  virtual Vector trainable_mask() const { return Vector::Ones(parameters().size()); }
  virtual bool is_q() const { return false; }
  virtual nlohmann::json to_json() const = 0;
  virtual std::unique_ptr<Policy> clone() const = 0;
};

class TreePolicy final : public Policy {
 public:
  explicit TreePolicy(SoftTreed tree, bool freeze_alpha = false);
  int feature_dim() const override { return tree_.feature_dim; }
  int action_count() const override { return tree_.action_count; }
  Vector output(const Vector& x) const override;
  Vector gradient(const Vector& x, const Vector& upstream) const override;
  Vector parameters() const override { return flatten_parameters(tree_); }
  void set_parameters(const Vector& params) override { assign_parameters<double>(tree_, params); }
  Vector trainable_mask() const override;
  bool is_q() const override { return tree_.interpretation == Interpretation::Q; }
  nlohmann::json to_json() const override;
  std::unique_ptr<Policy> clone() const override { return std::make_unique<TreePolicy>(*this); }

  const SoftTreed& tree() const { return tree_; }
  SoftTreed& tree() { return tree_; }
  bool freeze_alpha() const { return freeze_alpha_; }

 private:
  SoftTreed tree_;
  bool freeze_alpha_;
};

struct TrajectoryStep {
  Vector state;
  int action = 0;
  double log_prob = 0.0;
  double reward = 0.0;
};

struct Trajectory {
  std::vector<TrajectoryStep> steps;
  /// Per-step return A_t, filled by compute_returns.
  std::vector<double> returns;

  int length() const { return static_cast<int>(steps.size()); }
  double total_reward() const;
};

enum class ReturnConvention {
  /// A_t = sum_{t'=t}^{T} gamma^(T - t') r_t'
  Verbatim,
  /// A_t = sum_{t'=t}^{T} gamma^(t' - t) r_t'
  Conventional,
};

/// Samples one episode per agent from the policy's distribution. The
/// environment must already be reset. max_steps <= 0 caps at zero steps.
std::vector<Trajectory> rollout_agents(const Policy& policy, Environment& env, int max_steps, Rng& rng);
/// Single-agent form of rollout_agents.
Trajectory rollout(const Policy& policy, Environment& env, int max_steps, Rng& rng);

void compute_returns(Trajectory& traj, double gamma, ReturnConvention convention = ReturnConvention::Verbatim);

struct RmsProp {
  double learning_rate = 1e-2;
  double rho = 0.99;
  double eps = 1e-8;
  bool ascent = true;
  /// Squared-gradient moving average; sized on first use.
  Vector v;

  /// v <- rho v + (1 - rho) g^2; params +/- lr g / (sqrt(v) + eps).
  Vector apply(const Vector& grads, const Vector& params);
};

/// sum_t A_t grad log pi(a_t | s_t). With `baseline` the mean return across all
/// steps is subtracted first.
Vector pg_delta(const Policy& policy, const std::vector<Trajectory>& trajectories, bool baseline = false);
void pg_step(Policy& policy, const std::vector<Trajectory>& trajectories, RmsProp& optimizer, bool baseline = false);

struct Transition {
  Vector state;
  int action = 0;
  double reward = 0.0;
  Vector next_state;
  /// No bootstrap from next_state.
  bool terminal = false;
};

double td_error(const Policy& q, const Transition& tr, double gamma);
/// (r + gamma max_a' Q(s', a') - Q(s, a)) grad Q(s, a).
Vector q_delta(const Policy& q, const Transition& tr, double gamma);
void q_step(Policy& q, const Transition& tr, double gamma, RmsProp& optimizer);

struct PpoConfig {
  double clip = 0.2;
  int epochs = 4;
  double entropy = 0.01;
  bool baseline = true;
  bool normalize_advantages = false;
};

/// Gradient of the clipped surrogate plus entropy bonus at the current parameters.
Vector ppo_delta(const Policy& policy, const std::vector<Trajectory>& trajectories, const PpoConfig& config);
void ppo_step(Policy& policy, const std::vector<Trajectory>& trajectories, const PpoConfig& config,
              RmsProp& optimizer);

// ---------------------------------------------------------------------------
// Training loop

enum class Algorithm { Ppo, PolicyGradient };

struct TrainConfig {
  double gamma = 0.99;
  double learning_rate = 1e-2;
  int episodes = 1500;
  /// 0: the environment's own step limit.
  int max_steps = 0;
  /// Episodes collected per update.
  int batch_episodes = 1;
  Algorithm algorithm = Algorithm::Ppo;
  PpoConfig ppo;
  ReturnConvention returns = ReturnConvention::Conventional;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  /// Fields missing from `doc` keep their value in `defaults`.
  static TrainConfig from_json(const nlohmann::json& doc, TrainConfig defaults);
  static TrainConfig from_json(const nlohmann::json& doc) { return from_json(doc, TrainConfig{}); }
};

struct TrainResult {
  std::vector<double> episode_rewards;
  std::vector<double> moving_average;  // trailing 50 episodes
  int updates = 0;
};

inline constexpr int kMovingAverageWindow = 50;

std::vector<double> moving_average(const std::vector<double>& values, int window = kMovingAverageWindow);

/// Per-episode progress hook: (episode index, cumulative reward).
using EpisodeCallback = std::function<void(int, double)>;

/// Trains in place. Randomness: "env" seeds episodes, "sampling" drives actions.
TrainResult train(Policy& policy, Environment& env, const TrainConfig& config, const EpisodeCallback& on_episode = {});

/// Writes episode,cumulative_reward,moving_avg_50.
std::string curve_csv(const TrainResult& result);

/// Mean and sample standard deviation of total episode reward.
struct EvalSummary {
  double mean = 0.0;
  double stddev = 0.0;
  std::vector<double> rewards;
};

/// Action chooser: one action per observation.
using ActionFn = std::function<int(const Vector&, Rng&)>;

/// Runs `episodes` episodes; episode k resets the environment with a seed drawn
/// from the "env" stream of `seed`.
EvalSummary evaluate(const ActionFn& act, Environment& env, int episodes, std::uint64_t seed);
ActionFn greedy_actions(const Policy& policy);
ActionFn sampled_actions(const Policy& policy);
ActionFn random_actions(int action_count);

int sample_index(const Vector& probabilities, Rng& rng);
int argmax(const Vector& v);

}  // namespace ddt
