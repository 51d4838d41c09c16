#include "ddt/envs.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace ddt {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Chain MDP

void ChainMdpConfig::validate() const {
  if (n < 4) throw ConfigError("chain MDP needs n >= 4");
  if (!(1 < i_star && i_star < n - 1)) throw ConfigError("chain MDP needs 1 < i* < n-1");
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("chain MDP transition probability must lie in [0,1]");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("discount must lie in [0,1]");
  if (start_state != 0 && (start_state <= 1 || start_state >= n))
    throw ConfigError("chain start state must be non-terminal (or 0 for uniform over {i*, i*+1})");
  if (horizon < 0) throw ConfigError("chain horizon must be non-negative");
}

bool is_terminal(const ChainMdpConfig& config, int s) { return s == 1 || s == config.n; }

double chain_state_reward(const ChainMdpConfig& config, int s) {
  if (is_terminal(config, s)) return config.terminal_step ? config.r_minus : 0.0;
  return (s == config.i_star || s == config.i_star + 1) ? config.r_plus : 0.0;
}

ChainTransition chain_step(const ChainMdpConfig& config, int s, int action, Rng& rng) {
  if (s < 1 || s > config.n) throw EnvError("chain state " + std::to_string(s) + " out of range");
  if (is_terminal(config, s)) throw EnvError("chain_step called from terminal state " + std::to_string(s));
  if (action != kMoveRight && action != kMoveLeft) throw EnvError("chain action must be 0 or 1");
  const int intended = action == kMoveRight ? s + 1 : s - 1;
  int next = intended;
  if (config.p < 1.0) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (u(rng) >= config.p) {
      // Off-branch: uniform over the n-1 states other than the intended one.
      std::uniform_int_distribution<int> pick(1, config.n - 1);
      next = pick(rng);
      if (next >= intended) ++next;
    }
  }
  return {next, chain_state_reward(config, s), is_terminal(config, next)};
}

std::vector<std::array<double, 2>> optimal_policy(const ChainMdpConfig& config) {
  config.validate();
  if (config.p != 1.0) throw ConfigError("optimal_policy is derived for deterministic transitions (p = 1)");
  std::vector<std::array<double, 2>> pi(config.n + 1, {0.5, 0.5});
  for (int s = 2; s < config.n; ++s) pi[s] = s <= config.i_star ? std::array{1.0, 0.0} : std::array{0.0, 1.0};
  return pi;
}

ChainEnv::ChainEnv(ChainMdpConfig config) : config_(config) { config_.validate(); }

void ChainEnv::reset(std::uint64_t seed) {
  rng_ = substream(seed, "env");
  if (config_.start_state == 0) {
    std::uniform_int_distribution<int> pick(config_.i_star, config_.i_star + 1);
    state_ = pick(rng_);
  } else {
    state_ = config_.start_state;
  }
  steps_ = 0;
  done_ = false;
}

std::vector<Vector> ChainEnv::observe() const { return {Vector::Constant(1, static_cast<double>(state_))}; }

StepResult ChainEnv::step(std::span<const int> actions) {
  if (done_) throw EnvError("chain episode already finished");
  if (actions.size() != 1) throw EnvError("chain expects one action");
  if (is_terminal(config_, state_)) {
    // Final step in the absorbing terminal state (only reached with terminal_step).
    if (actions[0] != kMoveRight && actions[0] != kMoveLeft) throw EnvError("chain action must be 0 or 1");
    done_ = true;
    return {config_.r_minus, true};
  }
  const auto tr = chain_step(config_, state_, actions[0], rng_);
  state_ = tr.next;
  ++steps_;
  if ((tr.terminal && !config_.terminal_step) || steps_ >= config_.effective_horizon()) done_ = true;
  return {tr.reward, done_};
}

json chain_config_to_json(const ChainMdpConfig& c) {
  return {{"n", c.n},           {"i_star", c.i_star},   {"p", c.p},
          {"gamma", c.gamma},   {"r_plus", c.r_plus},   {"r_minus", c.r_minus},
          {"start_state", c.start_state}, {"terminal_step", c.terminal_step}, {"horizon", c.horizon}};
}

ChainMdpConfig chain_config_from_json(const json& doc) {
  ChainMdpConfig c;
  c.n = doc.value("n", c.n);
  c.i_star = doc.value("i_star", c.i_star);
  c.p = doc.value("p", c.p);
  c.gamma = doc.value("gamma", c.gamma);
  c.r_plus = doc.value("r_plus", c.r_plus);
  c.r_minus = doc.value("r_minus", c.r_minus);
  c.start_state = doc.value("start_state", c.start_state);
  c.terminal_step = doc.value("terminal_step", c.terminal_step);
  c.horizon = doc.value("horizon", c.horizon);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Cart-pole

namespace {
constexpr double kGravity = 9.8;
constexpr double kCartMass = 1.0;
constexpr double kPoleMass = 0.1;
constexpr double kTotalMass = kCartMass + kPoleMass;
constexpr double kHalfLength = 0.5;
constexpr double kPoleMassLength = kPoleMass * kHalfLength;
constexpr double kForce = 10.0;
constexpr double kTau = 0.02;
constexpr double kThetaLimit = 12.0 * 2.0 * std::numbers::pi / 360.0;
constexpr double kXLimit = 2.4;
}  // namespace

Vector CartPoleState::to_vector() const {
  Vector v(4);
  v << x, x_dot, theta, theta_dot;
  return v;
}

bool cartpole_failed(const CartPoleState& s) { return std::abs(s.x) > kXLimit || std::abs(s.theta) > kThetaLimit; }

CartPoleTransition cartpole_step(const CartPoleState& s, int action) {
  if (action != kPushLeft && action != kPushRight) throw EnvError("cart-pole action must be 0 or 1");
  if (cartpole_failed(s)) throw EnvError("cartpole_step called from a terminal state");
  const double force = action == kPushRight ? kForce : -kForce;
  const double cos_t = std::cos(s.theta), sin_t = std::sin(s.theta);
  const double temp = (force + kPoleMassLength * s.theta_dot * s.theta_dot * sin_t) / kTotalMass;
  const double theta_acc =
      (kGravity * sin_t - cos_t * temp) / (kHalfLength * (4.0 / 3.0 - kPoleMass * cos_t * cos_t / kTotalMass));
  const double x_acc = temp - kPoleMassLength * theta_acc * cos_t / kTotalMass;
  CartPoleTransition out;
  out.state.x = s.x + kTau * s.x_dot;
  out.state.x_dot = s.x_dot + kTau * x_acc;
  out.state.theta = s.theta + kTau * s.theta_dot;
  out.state.theta_dot = s.theta_dot + kTau * theta_acc;
  out.reward = 1.0;
  out.terminal = cartpole_failed(out.state);
  return out;
}

void CartPoleEnv::reset(std::uint64_t seed) {
  auto rng = substream(seed, "env");
  std::uniform_real_distribution<double> u(-0.05, 0.05);
  state_.x = u(rng);
  state_.x_dot = u(rng);
  state_.theta = u(rng);
  state_.theta_dot = u(rng);
  steps_ = 0;
  done_ = false;
}

StepResult CartPoleEnv::step(std::span<const int> actions) {
  if (done_) throw EnvError("cart-pole episode already finished");
  if (actions.size() != 1) throw EnvError("cart-pole expects one action");
  const auto tr = cartpole_step(state_, actions[0]);
  state_ = tr.state;
  ++steps_;
  done_ = tr.terminal || steps_ >= kCartPoleMaxSteps;
  return {tr.reward, done_};
}

// ---------------------------------------------------------------------------
// Wildfire

void WildfireScenario::validate() const {
  if (!(map_size > 0.0)) throw ConfigError("wildfire map size must be positive");
  if (horizon <= 0) throw ConfigError("wildfire horizon must be positive");
  if (!(drone_step >= 0.0) || !(fire_speed >= 0.0) || !(jitter >= 0.0))
    throw ConfigError("wildfire speeds and jitter must be non-negative");
  if (!fires.empty() && fires.size() != 2) throw ConfigError("wildfire scenario needs exactly two fires");
  if (!drones.empty() && drones.size() != 2) throw ConfigError("wildfire scenario needs exactly two drones");
}

namespace {

Point point_from_json(const json& j) { return {j.at("x").get<double>(), j.at("y").get<double>()}; }
json point_to_json(Point p) { return {{"x", p.x}, {"y", p.y}}; }

double distance(Point a, Point b) { return std::hypot(a.x - b.x, a.y - b.y); }

Point clamp_to_map(Point p, double size) { return {std::clamp(p.x, 0.0, size), std::clamp(p.y, 0.0, size)}; }

}  // namespace

WildfireScenario WildfireScenario::from_json(const json& doc) {
  WildfireScenario s;
  try {
    s.map_size = doc.value("map_size", s.map_size);
    s.horizon = doc.value("horizon", s.horizon);
    s.drone_step = doc.value("drone_step", s.drone_step);
    s.fire_speed = doc.value("fire_speed", s.fire_speed);
    s.jitter = doc.value("jitter", s.jitter);
    if (doc.contains("fires"))
      for (const auto& f : doc.at("fires")) {
        FireSpec spec;
        spec.start = point_from_json(f.at("start"));
        if (f.contains("velocity")) {
          spec.velocity = point_from_json(f.at("velocity"));
        } else {
          const double v = s.fire_speed / std::numbers::sqrt2;
          spec.velocity = {-v, v};
        }
        s.fires.push_back(spec);
      }
    if (doc.contains("drones"))
      for (const auto& d : doc.at("drones")) s.drones.push_back(point_from_json(d));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed wildfire scenario: ") + e.what());
  }
  s.validate();
  return s;
}

json WildfireScenario::to_json() const {
  json doc{{"map_size", map_size}, {"horizon", horizon}, {"drone_step", drone_step}, {"fire_speed", fire_speed},
           {"jitter", jitter}};
  if (!fires.empty()) {
    doc["fires"] = json::array();
    for (const auto& f : fires)
      doc["fires"].push_back({{"start", point_to_json(f.start)}, {"velocity", point_to_json(f.velocity)}});
  }
  if (!drones.empty()) {
    doc["drones"] = json::array();
    for (const auto& d : drones) doc["drones"].push_back(point_to_json(d));
  }
  return doc;
}

double wildfire_reward(const WildfireWorld& w, double map_size) {
  const auto& [d1, d2] = w.drones;
  const auto& [f1, f2] = w.fires;
  return -(std::min(distance(d1, f1), distance(d2, f1)) + std::min(distance(d1, f2), distance(d2, f2))) / map_size;
}

Vector wildfire_observation(const WildfireWorld& w, int drone, double map_size) {
  const Point d = w.drones.at(drone);
  const Point f1 = w.fires[0], f2 = w.fires[1];
  const bool closer_to_first = distance(d, f1) <= distance(d, f2);
  Vector obs(6);
  obs << (f1.y - d.y) / map_size, (d.x - f1.x) / map_size, closer_to_first ? 1.0 : 0.0, (f2.y - d.y) / map_size,
      (d.x - f2.x) / map_size, closer_to_first ? 0.0 : 1.0;
  return obs;
}

StepResult wildfire_step(WildfireWorld& w, std::span<const int> actions, const WildfireScenario& sc, Rng& rng) {
  if (actions.size() != w.drones.size()) throw EnvError("wildfire expects one action per drone");
  for (int a : actions)
    if (a < 0 || a > static_cast<int>(DroneAction::Nothing)) throw EnvError("invalid drone action " + std::to_string(a));
  for (std::size_t i = 0; i < w.drones.size(); ++i) {
    Point& d = w.drones[i];
    switch (static_cast<DroneAction>(actions[i])) {
      case DroneAction::North: d.y += sc.drone_step; break;
      case DroneAction::East: d.x += sc.drone_step; break;
      case DroneAction::South: d.y -= sc.drone_step; break;
      case DroneAction::West: d.x -= sc.drone_step; break;
      case DroneAction::Nothing: break;
    }
    d = clamp_to_map(d, sc.map_size);
  }
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < w.fires.size(); ++i) {
    const double jx = sc.jitter * noise(rng);
    const double jy = sc.jitter * noise(rng);
    w.fires[i] = clamp_to_map({w.fires[i].x + w.fire_velocity[i].x + jx, w.fires[i].y + w.fire_velocity[i].y + jy},
                              sc.map_size);
  }
  ++w.t;
  return {wildfire_reward(w, sc.map_size), w.t >= sc.horizon};
}

WildfireEnv::WildfireEnv(WildfireScenario scenario) : scenario_(std::move(scenario)) { scenario_.validate(); }

void WildfireEnv::reset(std::uint64_t seed) {
  rng_ = substream(seed, "env");
  const double size = scenario_.map_size;
  std::uniform_real_distribution<double> anywhere(0.0, size);
  // Fires start near the south-east corner.
  std::uniform_real_distribution<double> east(0.7 * size, 0.9 * size), south(0.1 * size, 0.3 * size);
  const double v = scenario_.fire_speed / std::numbers::sqrt2;
  for (int i = 0; i < 2; ++i) {
    if (scenario_.fires.empty()) {
      const double x = east(rng_);
      const double y = south(rng_);
      world_.fires[i] = {x, y};
      world_.fire_velocity[i] = {-v, v};
    } else {
      world_.fires[i] = scenario_.fires[i].start;
      world_.fire_velocity[i] = scenario_.fires[i].velocity;
    }
  }
  for (int i = 0; i < 2; ++i) {
    if (scenario_.drones.empty()) {
      const double x = anywhere(rng_);
      const double y = anywhere(rng_);
      world_.drones[i] = {x, y};
    } else {
      world_.drones[i] = scenario_.drones[i];
    }
  }
  world_.t = 0;
  done_ = false;
}

std::vector<Vector> WildfireEnv::observe() const {
  return {wildfire_observation(world_, 0, scenario_.map_size), wildfire_observation(world_, 1, scenario_.map_size)};
}

StepResult WildfireEnv::step(std::span<const int> actions) {
  if (done_) throw EnvError("wildfire episode already finished");
  auto r = wildfire_step(world_, actions, scenario_, rng_);
  done_ = r.done;
  return r;
}

// ---------------------------------------------------------------------------

std::vector<std::string> env_names() { return {"chain", "cartpole", "wildfire"}; }

std::unique_ptr<Environment> make_env(const std::string& name, const json& options) {
  if (name == "chain") return std::make_unique<ChainEnv>(chain_config_from_json(options));
  if (name == "cartpole") return std::make_unique<CartPoleEnv>();
  if (name == "wildfire") return std::make_unique<WildfireEnv>(WildfireScenario::from_json(options));
  throw ConfigError("unknown environment '" + name + "'");
}

}  // namespace ddt
