#include "ddt/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include "ddt/tree_io.hpp"

namespace ddt {

using nlohmann::json;

// ---------------------------------------------------------------------------
// TreePolicy

TreePolicy::TreePolicy(SoftTreed tree, bool freeze_alpha) : tree_(std::move(tree)), freeze_alpha_(freeze_alpha) {
  validate(tree_);
}

Vector TreePolicy::output(const Vector& x) const { return eval_soft<double>(tree_, x); }

Vector TreePolicy::gradient(const Vector& x, const Vector& upstream) const {
  return flatten(backward<double>(tree_, x, upstream), tree_.feature_dim, tree_.action_count);
}

Vector TreePolicy::trainable_mask() const {
  Vector mask = Vector::Ones(tree_.parameter_count());
  if (freeze_alpha_) mask -= alpha_mask(tree_);
  return mask;
}

json TreePolicy::to_json() const {
  json doc = tree_to_json(tree_);
  doc["freeze_alpha"] = freeze_alpha_;
  return doc;
}

// ---------------------------------------------------------------------------
// Sampling helpers

int argmax(const Vector& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = i;
  return static_cast<int>(best);
}

int sample_index(const Vector& p, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double draw = u(rng) * p.sum();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    acc += p(i);
    if (draw < acc) return static_cast<int>(i);
  }
  // Rounding left the draw past the last bucket: take the last non-zero one.
  for (Eigen::Index i = p.size() - 1; i >= 0; --i)
    if (p(i) > 0.0) return static_cast<int>(i);
  return 0;
}

double Trajectory::total_reward() const {
  double total = 0.0;
  for (const auto& s : steps) total += s.reward;
  return total;
}

// ---------------------------------------------------------------------------
// Rollouts and returns

std::vector<Trajectory> rollout_agents(const Policy& policy, Environment& env, int max_steps, Rng& rng) {
  if (policy.is_q()) throw InvalidInterpretation("rollout samples from a POLICY model");
  const int agents = env.agent_count();
  std::vector<Trajectory> out(agents);
  std::vector<int> actions(agents);
  for (int t = 0; t < max_steps && !env.done(); ++t) {
    const auto obs = env.observe();
    std::vector<double> log_probs(agents);
    for (int k = 0; k < agents; ++k) {
      const Vector p = policy.output(obs[k]);
      actions[k] = sample_index(p, rng);
      log_probs[k] = std::log(p(actions[k]));
    }
    StepResult r;
    try {
      r = env.step(actions);
    } catch (const EnvError& e) {
      throw EnvError("step " + std::to_string(t) + ": " + e.what());
    }
    for (int k = 0; k < agents; ++k) out[k].steps.push_back({obs[k], actions[k], log_probs[k], r.reward});
  }
  return out;
}

Trajectory rollout(const Policy& policy, Environment& env, int max_steps, Rng& rng) {
  if (env.agent_count() != 1) throw EnvError("rollout expects a single-agent environment; use rollout_agents");
  return std::move(rollout_agents(policy, env, max_steps, rng).front());
}

void compute_returns(Trajectory& traj, double gamma, ReturnConvention convention) {
  const int T = traj.length();
  traj.returns.assign(T, 0.0);
  double acc = 0.0;
  if (convention == ReturnConvention::Conventional) {
    for (int t = T - 1; t >= 0; --t) {
      acc = traj.steps[t].reward + gamma * acc;
      traj.returns[t] = acc;
    }
  } else {
    // Step t' carries gamma^(T-1-t') regardless of t.
    double weight = 1.0;
    for (int t = T - 1; t >= 0; --t) {
      acc += weight * traj.steps[t].reward;
      traj.returns[t] = acc;
      weight *= gamma;
    }
  }
}

// ---------------------------------------------------------------------------
// RMSProp

Vector RmsProp::apply(const Vector& grads, const Vector& params) {
  if (grads.size() != params.size()) throw KeyMismatch("gradient and parameter sizes differ");
  if (v.size() == 0) v = Vector::Zero(params.size());
  if (v.size() != params.size()) throw KeyMismatch("optimizer state does not match parameters");
  v = rho * v + (1.0 - rho) * grads.cwiseAbs2();
  const Vector step = learning_rate * grads.array() / (v.array().sqrt() + eps);
  return ascent ? Vector(params + step) : Vector(params - step);
}

// ---------------------------------------------------------------------------
// Updates

namespace {

void check_finite(const Vector& g, const char* what) {
  if (!g.allFinite()) throw NonFiniteGradient(std::string(what) + ": non-finite gradient, update skipped");
}

void apply_update(Policy& policy, const Vector& delta, RmsProp& optimizer) {
  const Vector masked = delta.cwiseProduct(policy.trainable_mask());
  policy.set_parameters(optimizer.apply(masked, policy.parameters()));
}

std::vector<std::vector<double>> advantages(const std::vector<Trajectory>& trajectories, bool baseline,
                                            bool normalize) {
  std::vector<std::vector<double>> adv;
  double sum = 0.0;
  long count = 0;
  for (const auto& tr : trajectories) {
    if (tr.returns.size() != tr.steps.size()) throw ConfigError("compute_returns must run before the update");
    adv.push_back(tr.returns);
    for (double a : tr.returns) sum += a;
    count += tr.length();
  }
  if (count == 0) return adv;
  const double mean = baseline ? sum / count : 0.0;
  double sq = 0.0;
  for (auto& a : adv)
    for (double& x : a) {
      x -= mean;
      sq += x * x;
    }
  if (normalize) {
    const double sd = std::sqrt(sq / count);
    if (sd > 1e-12)
      for (auto& a : adv)
        for (double& x : a) x /= sd;
  }
  return adv;
}

}  // namespace

Vector pg_delta(const Policy& policy, const std::vector<Trajectory>& trajectories, bool baseline) {
  if (policy.is_q()) throw InvalidInterpretation("policy gradient needs a POLICY model");
  Vector delta = Vector::Zero(policy.parameters().size());
  const auto adv = advantages(trajectories, baseline, false);
  for (std::size_t i = 0; i < trajectories.size(); ++i) {
    const auto& tr = trajectories[i];
    for (int t = 0; t < tr.length(); ++t) {
      const double a_t = adv[i][t];
      if (a_t == 0.0) continue;
      const auto& step = tr.steps[t];
      const Vector p = policy.output(step.state);
      // grad log pi(a|s) = grad pi(a|s) / pi(a|s)
      Vector upstream = Vector::Zero(policy.action_count());
      upstream(step.action) = a_t / p(step.action);
      delta += policy.gradient(step.state, upstream);
    }
  }
  return delta;
}

void pg_step(Policy& policy, const std::vector<Trajectory>& trajectories, RmsProp& optimizer, bool baseline) {
  const Vector delta = pg_delta(policy, trajectories, baseline);
  check_finite(delta, "pg_step");
  optimizer.ascent = true;
  apply_update(policy, delta, optimizer);
}

double td_error(const Policy& q, const Transition& tr, double gamma) {
  if (!q.is_q()) throw InvalidInterpretation("Q-learning needs a Q model");
  const Vector q_s = q.output(tr.state);
  if (tr.action < 0 || tr.action >= q_s.size()) throw DimensionMismatch("action index", q_s.size(), tr.action);
  double target = tr.reward;
  if (!tr.terminal) target += gamma * q.output(tr.next_state).maxCoeff();
  return target - q_s(tr.action);
}

Vector q_delta(const Policy& q, const Transition& tr, double gamma) {
  const double td = td_error(q, tr, gamma);
  Vector upstream = Vector::Zero(q.action_count());
  upstream(tr.action) = 1.0;
  if (td == 0.0) return Vector::Zero(q.parameters().size());
  return td * q.gradient(tr.state, upstream);
}

void q_step(Policy& q, const Transition& tr, double gamma, RmsProp& optimizer) {
  const Vector delta = q_delta(q, tr, gamma);
  check_finite(delta, "q_step");
  optimizer.ascent = true;
  apply_update(q, delta, optimizer);
}

Vector ppo_delta(const Policy& policy, const std::vector<Trajectory>& trajectories, const PpoConfig& config) {
  if (policy.is_q()) throw InvalidInterpretation("PPO needs a POLICY model");
  Vector delta = Vector::Zero(policy.parameters().size());
  const auto adv = advantages(trajectories, config.baseline, config.normalize_advantages);
  for (std::size_t i = 0; i < trajectories.size(); ++i) {
    const auto& tr = trajectories[i];
    for (int t = 0; t < tr.length(); ++t) {
      const auto& step = tr.steps[t];
      const double a_t = adv[i][t];
      const Vector p = policy.output(step.state);
      const double old = std::exp(step.log_prob);
      const double ratio = p(step.action) / old;
      Vector upstream = Vector::Zero(policy.action_count());
      // The min() picks the clipped branch, constant in theta, once the ratio
      // leaves the trust region in the direction the advantage rewards.
      const bool clipped = (a_t > 0.0 && ratio > 1.0 + config.clip) || (a_t < 0.0 && ratio < 1.0 - config.clip);
      if (!clipped && a_t != 0.0) upstream(step.action) = a_t / old;
      if (config.entropy != 0.0) {
        const Vector logp = p.array().max(std::numeric_limits<double>::min()).log();
        upstream.array() -= config.entropy * (logp.array() + 1.0);
      }
      if (upstream.isZero(0.0)) continue;
      delta += policy.gradient(step.state, upstream);
    }
  }
  return delta;
}

void ppo_step(Policy& policy, const std::vector<Trajectory>& trajectories, const PpoConfig& config,
              RmsProp& optimizer) {
  optimizer.ascent = true;
  for (int k = 0; k < config.epochs; ++k) {
    const Vector delta = ppo_delta(policy, trajectories, config);
    check_finite(delta, "ppo_step");
    apply_update(policy, delta, optimizer);
  }
}

// ---------------------------------------------------------------------------
// Training loop

void TrainConfig::validate() const {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0,1]");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be positive");
  if (episodes < 0) throw ConfigError("episodes must be non-negative");
  if (max_steps < 0) throw ConfigError("max_steps must be non-negative");
  if (batch_episodes < 1) throw ConfigError("batch_episodes must be at least 1");
  if (!(ppo.clip > 0.0 && ppo.clip < 1.0)) throw ConfigError("PPO clip must lie in (0,1)");
  if (ppo.epochs < 1) throw ConfigError("PPO epochs must be at least 1");
  if (!(ppo.entropy >= 0.0)) throw ConfigError("entropy coefficient must be non-negative");
}

json TrainConfig::to_json() const {
  return {{"gamma", gamma},
          {"learning_rate", learning_rate},
          {"episodes", episodes},
          {"max_steps", max_steps},
          {"batch_episodes", batch_episodes},
          {"algorithm", algorithm == Algorithm::Ppo ? "ppo" : "pg"},
          {"ppo_clip", ppo.clip},
          {"ppo_epochs", ppo.epochs},
          {"entropy", ppo.entropy},
          {"baseline", ppo.baseline},
          {"normalize_advantages", ppo.normalize_advantages},
          {"returns", returns == ReturnConvention::Verbatim ? "verbatim" : "conventional"},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const json& doc, TrainConfig c) {
  try {
    c.gamma = doc.value("gamma", c.gamma);
    c.learning_rate = doc.value("learning_rate", c.learning_rate);
    c.episodes = doc.value("episodes", c.episodes);
    c.max_steps = doc.value("max_steps", c.max_steps);
    c.batch_episodes = doc.value("batch_episodes", c.batch_episodes);
    if (doc.contains("algorithm")) {
      const auto a = doc.at("algorithm").get<std::string>();
      if (a == "ppo")
        c.algorithm = Algorithm::Ppo;
      else if (a == "pg")
        c.algorithm = Algorithm::PolicyGradient;
      else
        throw ConfigError("unknown algorithm '" + a + "'");
    }
    c.ppo.clip = doc.value("ppo_clip", c.ppo.clip);
    c.ppo.epochs = doc.value("ppo_epochs", c.ppo.epochs);
    c.ppo.entropy = doc.value("entropy", c.ppo.entropy);
    c.ppo.baseline = doc.value("baseline", c.ppo.baseline);
    c.ppo.normalize_advantages = doc.value("normalize_advantages", c.ppo.normalize_advantages);
    if (doc.contains("returns")) {
      const auto r = doc.at("returns").get<std::string>();
      if (r == "verbatim")
        c.returns = ReturnConvention::Verbatim;
      else if (r == "conventional")
        c.returns = ReturnConvention::Conventional;
      else
        throw ConfigError("unknown return convention '" + r + "'");
    }
    c.seed = doc.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed training config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<double> moving_average(const std::vector<double>& values, int window) {
  std::vector<double> out(values.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    sum += values[i];
    if (i >= static_cast<std::size_t>(window)) sum -= values[i - window];
    const std::size_t n = std::min<std::size_t>(i + 1, window);
    out[i] = sum / static_cast<double>(n);
  }
  return out;
}

TrainResult train(Policy& policy, Environment& env, const TrainConfig& config, const EpisodeCallback& on_episode) {
  config.validate();
  TrainResult result;
  Rng env_rng = substream(config.seed, "env");
  Rng sample_rng = substream(config.seed, "sampling");
  RmsProp optimizer;
  optimizer.learning_rate = config.learning_rate;
  const int limit = config.max_steps > 0 ? config.max_steps : env.step_limit();
  std::vector<Trajectory> batch;
  int batched = 0;
  for (int ep = 0; ep < config.episodes; ++ep) {
    env.reset(env_rng());
    auto trajs = rollout_agents(policy, env, limit, sample_rng);
    const double total = trajs.front().total_reward();
    result.episode_rewards.push_back(total);
    if (on_episode) on_episode(ep, total);
    for (auto& tr : trajs) {
      compute_returns(tr, config.gamma, config.returns);
      batch.push_back(std::move(tr));
    }
    if (++batched < config.batch_episodes && ep + 1 < config.episodes) continue;
    if (config.algorithm == Algorithm::Ppo)
      ppo_step(policy, batch, config.ppo, optimizer);
    else
      pg_step(policy, batch, optimizer, config.ppo.baseline);
    ++result.updates;
    batch.clear();
    batched = 0;
  }
  result.moving_average = moving_average(result.episode_rewards);
  return result;
}

std::string curve_csv(const TrainResult& result) {
  std::ostringstream out;
  out << "episode,cumulative_reward,moving_avg_50\n";
  char buf[96];
  for (std::size_t i = 0; i < result.episode_rewards.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", i, result.episode_rewards[i], result.moving_average[i]);
    out << buf;
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Evaluation

EvalSummary evaluate(const ActionFn& act, Environment& env, int episodes, std::uint64_t seed) {
  if (episodes <= 0) throw ConfigError("evaluation needs at least one episode");
  EvalSummary s;
  Rng env_rng = substream(seed, "env");
  Rng sample_rng = substream(seed, "sampling");
  const int agents = env.agent_count();
  std::vector<int> actions(agents);
  for (int ep = 0; ep < episodes; ++ep) {
    env.reset(env_rng());
    double total = 0.0;
    const int limit = env.step_limit();
    for (int t = 0; !env.done() && (limit <= 0 || t < limit); ++t) {
      const auto obs = env.observe();
      for (int k = 0; k < agents; ++k) actions[k] = act(obs[k], sample_rng);
      total += env.step(actions).reward;
    }
    s.rewards.push_back(total);
  }
  s.mean = std::accumulate(s.rewards.begin(), s.rewards.end(), 0.0) / episodes;
  if (episodes > 1) {
    double sq = 0.0;
    for (double r : s.rewards) sq += (r - s.mean) * (r - s.mean);
    s.stddev = std::sqrt(sq / (episodes - 1));
  }
  return s;
}

ActionFn greedy_actions(const Policy& policy) {
  return [&policy](const Vector& x, Rng&) { return argmax(policy.output(x)); };
}

ActionFn sampled_actions(const Policy& policy) {
  return [&policy](const Vector& x, Rng& rng) { return sample_index(policy.output(x), rng); };
}

ActionFn random_actions(int action_count) {
  return [action_count](const Vector&, Rng& rng) {
    std::uniform_int_distribution<int> pick(0, action_count - 1);
    return pick(rng);
  };
}

}  // namespace ddt
