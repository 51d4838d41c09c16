#pragma once

// Self-contained environments: the n-state chain MDP, cart-pole, and a
// two-drone wildfire tracking simulator.

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ddt/common.hpp"

namespace ddt {

struct StepResult {
  double reward = 0.0;
  bool done = false;
};

/// Episodic environment with one or more agents sharing a scalar reward.
class Environment {
 public:
  virtual ~Environment() = default;
  virtual std::string name() const = 0;
  virtual int observation_dim() const = 0;
  virtual int action_count() const = 0;
  virtual int agent_count() const { return 1; }
  virtual void reset(std::uint64_t seed) = 0;
  /// One observation per agent.
  virtual std::vector<Vector> observe() const = 0;
  /// Throws EnvError when called after the episode ended or with invalid actions.
  virtual StepResult step(std::span<const int> actions) = 0;
  virtual bool done() const = 0;
  /// Hard cap on episode length, 0 if none.
  virtual int step_limit() const = 0;
};

// ---------------------------------------------------------------------------
// Chain MDP. States are 1..n; 1 and n are terminal. Action 0 (a1) moves toward
// higher indices, action 1 (a2) toward lower ones.

struct ChainMdpConfig {
  int n = 4;
  int i_star = 2;
  double p = 1.0;
  double gamma = 0.95;
  double r_plus = 1.0;
  double r_minus = -1.0;
  int start_state = 3;
  /// When true the episode includes one final step in the terminal state that
  /// pays r_minus; when false episodes end on arrival with no terminal reward.
  bool terminal_step = true;
  /// Episode cap in steps, the terminal step included; 0 means n.
  int horizon = 0;

  int effective_horizon() const { return horizon > 0 ? horizon : n; }
  void validate() const;
};

inline constexpr int kMoveRight = 0;  // a1
inline constexpr int kMoveLeft = 1;   // a2

struct ChainTransition {
  int next = 0;
  double reward = 0.0;
  bool terminal = false;
};

bool is_terminal(const ChainMdpConfig& config, int s);
/// Reward for acting in state s (action independent).
double chain_state_reward(const ChainMdpConfig& config, int s);
ChainTransition chain_step(const ChainMdpConfig& config, int s, int action, Rng& rng);
/// Optimal action distribution per state (index 0 unused, 1..n), for p = 1.
std::vector<std::array<double, 2>> optimal_policy(const ChainMdpConfig& config);

class ChainEnv final : public Environment {
 public:
  explicit ChainEnv(ChainMdpConfig config);
  std::string name() const override { return "chain"; }
  int observation_dim() const override { return 1; }
  int action_count() const override { return 2; }
  void reset(std::uint64_t seed) override;
  std::vector<Vector> observe() const override;
  StepResult step(std::span<const int> actions) override;
  bool done() const override { return done_; }
  int step_limit() const override { return config_.effective_horizon(); }
  int state() const { return state_; }
  const ChainMdpConfig& config() const { return config_; }

 private:
  ChainMdpConfig config_;
  Rng rng_;
  int state_ = 0;
  int steps_ = 0;
  bool done_ = true;
};

// ---------------------------------------------------------------------------
// Cart-pole with the classic constants and Euler integration.

struct CartPoleState {
  double x = 0.0;
  double x_dot = 0.0;
  double theta = 0.0;
  double theta_dot = 0.0;

  Vector to_vector() const;
};

inline constexpr int kPushLeft = 0;
inline constexpr int kPushRight = 1;
inline constexpr int kCartPoleMaxSteps = 500;

struct CartPoleTransition {
  CartPoleState state;
  double reward = 1.0;
  bool terminal = false;
};

bool cartpole_failed(const CartPoleState& s);
CartPoleTransition cartpole_step(const CartPoleState& state, int action);

class CartPoleEnv final : public Environment {
 public:
  std::string name() const override { return "cartpole"; }
  int observation_dim() const override { return 4; }
  int action_count() const override { return 2; }
  void reset(std::uint64_t seed) override;
  std::vector<Vector> observe() const override { return {state_.to_vector()}; }
  StepResult step(std::span<const int> actions) override;
  bool done() const override { return done_; }
  int step_limit() const override { return kCartPoleMaxSteps; }
  const CartPoleState& state() const { return state_; }
  void set_state(const CartPoleState& s) {
    state_ = s;
    steps_ = 0;
    done_ = false;
  }

 private:
  CartPoleState state_;
  int steps_ = 0;
  bool done_ = true;
};

// ---------------------------------------------------------------------------
// Wildfire tracking. Coordinates: x grows east, y grows north, both in
// [0, map_size]. Fires start near the south-east corner and drift north-west.

enum class DroneAction { North = 0, East = 1, South = 2, West = 3, Nothing = 4 };

struct Point {
  double x = 0.0;
  double y = 0.0;
};

struct FireSpec {
  Point start;
  Point velocity;
};

struct WildfireScenario {
  double map_size = 500.0;
  int horizon = 300;
  double drone_step = 5.0;
  double fire_speed = 1.0;
  double jitter = 0.25;
  /// Empty: fires are placed randomly near the south-east corner at reset.
  std::vector<FireSpec> fires;
  /// Empty: drones are placed uniformly at random at reset.
  std::vector<Point> drones;

  void validate() const;
  static WildfireScenario from_json(const nlohmann::json& doc);
  nlohmann::json to_json() const;
};

struct WildfireWorld {
  std::array<Point, 2> drones;
  std::array<Point, 2> fires;
  std::array<Point, 2> fire_velocity;
  int t = 0;
};

double wildfire_reward(const WildfireWorld& world, double map_size);
/// Per-drone observation: [fire1 dN, fire1 dW, closer-to-fire1, fire2 dN, fire2 dW,
/// closer-to-fire2], distances divided by the map size.
Vector wildfire_observation(const WildfireWorld& world, int drone, double map_size);
StepResult wildfire_step(WildfireWorld& world, std::span<const int> actions, const WildfireScenario& scenario,
                         Rng& rng);

class WildfireEnv final : public Environment {
 public:
  explicit WildfireEnv(WildfireScenario scenario = {});
  std::string name() const override { return "wildfire"; }
  int observation_dim() const override { return 6; }
  int action_count() const override { return 5; }
  int agent_count() const override { return 2; }
  void reset(std::uint64_t seed) override;
  std::vector<Vector> observe() const override;
  StepResult step(std::span<const int> actions) override;
  bool done() const override { return done_; }
  int step_limit() const override { return scenario_.horizon; }
  const WildfireWorld& world() const { return world_; }
  const WildfireScenario& scenario() const { return scenario_; }

 private:
  WildfireScenario scenario_;
  WildfireWorld world_;
  Rng rng_;
  bool done_ = true;
};

// ---------------------------------------------------------------------------

/// Registry by name: "chain", "cartpole", "wildfire". `options` carries the
/// chain config fields or a wildfire scenario.
std::unique_ptr<Environment> make_env(const std::string& name, const nlohmann::json& options = nlohmann::json::object());
std::vector<std::string> env_names();

ChainMdpConfig chain_config_from_json(const nlohmann::json& doc);
nlohmann::json chain_config_to_json(const ChainMdpConfig& config);

}  // namespace ddt
