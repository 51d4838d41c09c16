#include <doctest.h>

#include <cmath>
#include <limits>

#include "ddt/analysis.hpp"
#include "ddt/baselines.hpp"
#include "ddt/train.hpp"

using namespace ddt;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  int i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

// Flat index of phi for node 0 of a one-feature tree: [alpha, beta, phi, ...].
constexpr int kPhi = 2;

// Tree policy whose only trainable entry is the root threshold.
class PhiOnly final : public Policy {
 public:
  explicit PhiOnly(SoftTreed t) : inner_(std::move(t)) {}
  int feature_dim() const override { return inner_.feature_dim(); }
  int action_count() const override { return inner_.action_count(); }
  Vector output(const Vector& x) const override { return inner_.output(x); }
  Vector gradient(const Vector& x, const Vector& u) const override { return inner_.gradient(x, u); }
  Vector parameters() const override { return inner_.parameters(); }
  void set_parameters(const Vector& p) override { inner_.set_parameters(p); }
  Vector trainable_mask() const override {
    Vector m = Vector::Zero(parameters().size());
    m(kPhi) = 1.0;
    return m;
  }
  bool is_q() const override { return inner_.is_q(); }
  nlohmann::json to_json() const override { return inner_.to_json(); }
  std::unique_ptr<Policy> clone() const override { return std::make_unique<PhiOnly>(*this); }

 private:
  TreePolicy inner_;
};

Trajectory make_traj(std::initializer_list<double> rewards) {
  Trajectory t;
  for (double r : rewards) t.steps.push_back({vec({0.0}), 0, 0.0, r});
  return t;
}

AnalysisConfig chain_analysis(int start) {
  AnalysisConfig c;
  c.chain.start_state = start;
  return c;
}

// Greedy episode on the chain through the generic tree code; sums the phi
// component of q_delta over its transitions.
double q_episode_delta_phi(double phi, const AnalysisConfig& cfg) {
  TreePolicy q(analysis_q_tree(phi, cfg));
  ChainEnv env(cfg.chain);
  env.reset(0);
  double total = 0.0;
  while (!env.done()) {
    const int s = env.state();
    const Vector x = vec({static_cast<double>(s)});
    const int a = argmax(q.output(x));
    const int acts[1] = {a};
    const auto r = env.step(acts);
    Transition tr{x, a, r.reward, vec({static_cast<double>(env.state())}), is_terminal(cfg.chain, s)};
    total += q_delta(q, tr, cfg.chain.gamma)(kPhi);
  }
  return total;
}

}  // namespace

TEST_CASE("compute_returns") {
  SUBCASE("exponent counted from the end") {
    auto t = make_traj({1, 1, 0});
    compute_returns(t, 0.95, ReturnConvention::Verbatim);
    CHECK(t.returns[0] == doctest::Approx(1.8525).epsilon(1e-14));
    CHECK(t.returns[1] == doctest::Approx(0.95).epsilon(1e-14));
    CHECK(t.returns[2] == 0.0);
  }
  SUBCASE("conventional discounting") {
    auto t = make_traj({1, 1, 0});
    compute_returns(t, 0.95, ReturnConvention::Conventional);
    CHECK(t.returns[0] == doctest::Approx(1.95).epsilon(1e-14));
    CHECK(t.returns[1] == 1.0);
  }
  SUBCASE("zero discount keeps only the final reward") {
    auto t = make_traj({3, 5, 7});
    compute_returns(t, 0.0, ReturnConvention::Verbatim);
    for (double a : t.returns) CHECK(a == 7.0);
  }
  SUBCASE("zero rewards") {
    auto t = make_traj({0, 0, 0, 0});
    compute_returns(t, 0.9, ReturnConvention::Verbatim);
    for (double a : t.returns) CHECK(a == 0.0);
  }
  SUBCASE("matches direct summation") {
    Rng rng(3);
    std::uniform_real_distribution<double> u(-2, 2);
    Trajectory t;
    for (int k = 0; k < 12; ++k) t.steps.push_back({vec({0.0}), 0, 0.0, u(rng)});
    compute_returns(t, 0.9, ReturnConvention::Verbatim);
    const int T = t.length();
    for (int s = 0; s < T; ++s) {
      double direct = 0.0;
      for (int k = s; k < T; ++k) direct += std::pow(0.9, T - 1 - k) * t.steps[k].reward;
      CHECK(t.returns[s] == doctest::Approx(direct).epsilon(1e-13));
    }
  }
}

TEST_CASE("RMSProp") {
  SUBCASE("first step moves by about 0.1") {
    RmsProp opt;
    const Vector p = opt.apply(vec({1.0, 1.0}), vec({0.0, 5.0}));
    CHECK(p(0) == doctest::Approx(1e-2 / (std::sqrt(0.01) + 1e-8)).epsilon(1e-14));
    CHECK(p(0) == doctest::Approx(0.1).epsilon(1e-6));
    CHECK(p(1) - 5.0 == doctest::Approx(p(0)).epsilon(1e-12));
  }
  SUBCASE("zero gradient decays the accumulator only") {
    RmsProp opt;
    opt.apply(vec({2.0}), vec({0.0}));
    const double v = opt.v(0);
    const Vector p = opt.apply(vec({0.0}), vec({3.0}));
    CHECK(p(0) == 3.0);
    CHECK(opt.v(0) == doctest::Approx(0.99 * v).epsilon(1e-15));
  }
  SUBCASE("descent flips the sign") {
    RmsProp opt;
    opt.ascent = false;
    CHECK(opt.apply(vec({1.0}), vec({0.0}))(0) < 0.0);
  }
  SUBCASE("size mismatch") {
    RmsProp opt;
    opt.apply(vec({1.0, 1.0}), vec({0.0, 0.0}));
    CHECK_THROWS_AS(opt.apply(vec({1.0}), vec({0.0})), KeyMismatch);
  }
}

TEST_CASE("rollout reproduces the always-left trace") {
  AnalysisConfig cfg = chain_analysis(3);
  auto tree = analysis_pg_tree(2.5, cfg);
  for (auto& l : tree.leaves) l.w = vec({-60.0, 60.0});
  TreePolicy policy(tree);
  ChainEnv env(cfg.chain);
  env.reset(0);
  Rng rng(1);
  const auto tr = rollout(policy, env, 100, rng);
  REQUIRE(tr.length() == 3);
  const int states[3] = {3, 2, 1};
  const double rewards[3] = {1.0, 1.0, -1.0};
  for (int t = 0; t < 3; ++t) {
    CHECK(tr.steps[t].state(0) == states[t]);
    CHECK(tr.steps[t].reward == rewards[t]);
    CHECK(tr.steps[t].action == kMoveLeft);
  }
  env.reset(0);
  CHECK(rollout(policy, env, 0, rng).length() == 0);
}

TEST_CASE("rollout is deterministic for a seed") {
  auto env = make_env("cartpole");
  Rng init(4);
  auto policy = make_policy(ArchSpec::parse("tree:4"), 4, 2, init);
  env->reset(9);
  Rng a(77);
  const auto t1 = rollout(*policy, *env, 500, a);
  env->reset(9);
  Rng b(77);
  const auto t2 = rollout(*policy, *env, 500, b);
  REQUIRE(t1.length() == t2.length());
  for (int t = 0; t < t1.length(); ++t) {
    CHECK(t1.steps[t].action == t2.steps[t].action);
    CHECK(t1.steps[t].log_prob == t2.steps[t].log_prob);
    CHECK(t1.steps[t].state == t2.steps[t].state);
  }
}

TEST_CASE("log-probability gradient matches finite differences") {
  Rng rng(21);
  std::normal_distribution<double> n(0, 1);
  double worst = 0.0;
  for (int k = 0; k < 200; ++k) {
    const int depth = 1 + k % 3;
    auto tree = init_tree<double>({TopologyKind::Balanced, depth}, 3, 3, Interpretation::Policy, rng);
    for (auto& l : tree.leaves)
      for (int a = 0; a < 3; ++a) l.w(a) = n(rng);
    TreePolicy policy(tree);
    const Vector x = vec({n(rng), n(rng), n(rng)});
    const int a = k % 3;
    const Vector p = policy.output(x);
    Vector up = Vector::Zero(3);
    up(a) = 1.0 / p(a);
    const Vector g = policy.gradient(x, up);
    const Vector theta = policy.parameters();
    const double h = 1e-5;
    for (int i = 0; i < theta.size(); ++i) {
      Vector hi = theta, lo = theta;
      hi(i) += h;
      lo(i) -= h;
      policy.set_parameters(hi);
      const double f_hi = std::log(policy.output(x)(a));
      policy.set_parameters(lo);
      const double f_lo = std::log(policy.output(x)(a));
      const double fd = (f_hi - f_lo) / (2 * h);
      worst = std::max(worst, std::abs(g(i) - fd) / std::max({std::abs(g(i)), std::abs(fd), 1e-6}));
    }
    policy.set_parameters(theta);
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("policy gradient step") {
  AnalysisConfig cfg = chain_analysis(2);
  TreePolicy policy(analysis_pg_tree(2.3, cfg));
  ChainEnv env(cfg.chain);
  Rng rng(5);
  env.reset(0);
  auto tr = rollout(policy, env, 10, rng);

  SUBCASE("zero returns leave parameters unchanged") {
    Trajectory z = tr;
    z.returns.assign(z.steps.size(), 0.0);
    RmsProp opt;
    const Vector before = policy.parameters();
    pg_step(policy, {z}, opt);
    CHECK(policy.parameters() == before);
  }
  SUBCASE("empty batch is a no-op") {
    RmsProp opt;
    const Vector before = policy.parameters();
    pg_step(policy, {}, opt);
    CHECK(policy.parameters() == before);
  }
  SUBCASE("two identical trajectories double the delta") {
    compute_returns(tr, 0.95, ReturnConvention::Conventional);
    const Vector one = pg_delta(policy, {tr});
    const Vector two = pg_delta(policy, {tr, tr});
    CHECK((two - 2.0 * one).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, one.cwiseAbs().maxCoeff()));
  }
  SUBCASE("returns must be computed first") {
    RmsProp opt;
    CHECK_THROWS_AS(pg_step(policy, {tr}, opt), ConfigError);
  }
  SUBCASE("non-finite gradient aborts without an update") {
    compute_returns(tr, 0.95, ReturnConvention::Conventional);
    tr.returns[0] = std::numeric_limits<double>::infinity();
    RmsProp opt;
    const Vector before = policy.parameters();
    CHECK_THROWS_AS(pg_step(policy, {tr}, opt), NonFiniteGradient);
    CHECK(policy.parameters() == before);
  }
}

TEST_CASE("sampled policy gradient agrees with the enumerated update curve") {
  for (int start : {2, 3}) {
    for (double phi : {1.8, 2.2, 2.8, 3.2}) {
      AnalysisConfig cfg = chain_analysis(start);
      TreePolicy policy(analysis_pg_tree(phi, cfg));
      ChainEnv env(cfg.chain);
      Rng rng(1000 + start);
      const int episodes = 40000;
      double sum = 0.0;
      for (int e = 0; e < episodes; ++e) {
        env.reset(static_cast<std::uint64_t>(e));
        auto tr = rollout(policy, env, 100, rng);
        compute_returns(tr, cfg.chain.gamma, ReturnConvention::Conventional);
        sum += pg_delta(policy, {tr})(kPhi);
      }
      const double sampled = sum / episodes;
      const double exact = delta_phi_pg(phi, cfg);
      CAPTURE(start);
      CAPTURE(phi);
      CHECK((sampled > 0) == (exact > 0));
      CHECK(std::abs(sampled - exact) < 0.1 * std::abs(exact) + 1e-3);
    }
  }
}

TEST_CASE("policy gradient moves a perturbed threshold toward the middle") {
  int successes = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    AnalysisConfig cfg = chain_analysis(0);
    PhiOnly policy(analysis_pg_tree(2.2, cfg));
    ChainEnv env(cfg.chain);
    RmsProp opt;
    Rng rng = substream(seed, "sampling");
    Rng resets = substream(seed, "env");
    for (int it = 0; it < 200; ++it) {
      std::vector<Trajectory> batch;
      for (int k = 0; k < 8; ++k) {
        env.reset(resets());
        auto tr = rollout(policy, env, 100, rng);
        compute_returns(tr, cfg.chain.gamma, ReturnConvention::Conventional);
        batch.push_back(std::move(tr));
      }
      pg_step(policy, batch, opt);
    }
    const double phi = policy.parameters()(kPhi);
    CAPTURE(seed);
    CAPTURE(phi);
    successes += (phi >= 2.3 && phi <= 2.7);
  }
  CHECK(successes >= 4);
}

TEST_CASE("Q step") {
  AnalysisConfig cfg = chain_analysis(3);
  TreePolicy q(analysis_q_tree(2.5, cfg));
  SUBCASE("zero TD error gives no update") {
    const Vector x = vec({3.0}), xn = vec({2.0});
    const double target_gap = q.output(x)(1) - cfg.chain.gamma * q.output(xn).maxCoeff();
    Transition tr{x, 1, target_gap, xn, false};
    CHECK(std::abs(td_error(q, tr, cfg.chain.gamma)) < 1e-12);
    RmsProp opt;
    opt.ascent = false;
    const Vector before = q.parameters();
    q_step(q, tr, cfg.chain.gamma, opt);
    CHECK((q.parameters() - before).cwiseAbs().maxCoeff() < 1e-9);
  }
  SUBCASE("zero discount regresses toward the reward") {
    const Vector x = vec({2.7});
    Transition tr{x, 0, 0.4, vec({3.7}), false};
    Vector up = Vector::Zero(2);
    up(0) = 1.0;
    const Vector expected = (0.4 - q.output(x)(0)) * q.gradient(x, up);
    CHECK((q_delta(q, tr, 0.0) - expected).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("terminal transitions drop the bootstrap") {
    const Vector x = vec({1.0});
    Transition tr{x, 0, -1.0, vec({1.0}), true};
    CHECK(td_error(q, tr, 0.95) == doctest::Approx(-1.0 - q.output(x)(0)).epsilon(1e-15));
  }
}

TEST_CASE("episode Q updates equal the closed-form update curve") {
  Rng rng(2024);
  std::uniform_real_distribution<double> u(0.0, 4.0);
  double worst = 0.0;
  for (int k = 0; k < 50; ++k) {
    const double phi = u(rng);
    for (int start : {2, 3}) {
      const AnalysisConfig cfg = chain_analysis(start);
      worst = std::max(worst, std::abs(q_episode_delta_phi(phi, cfg) - delta_phi_q(phi, cfg)));
    }
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("PPO") {
  AnalysisConfig cfg = chain_analysis(0);
  TreePolicy policy(analysis_pg_tree(2.2, cfg));
  ChainEnv env(cfg.chain);
  Rng rng(8);
  std::vector<Trajectory> batch;
  for (int k = 0; k < 6; ++k) {
    env.reset(static_cast<std::uint64_t>(k));
    auto tr = rollout(policy, env, 100, rng);
    compute_returns(tr, 0.95, ReturnConvention::Conventional);
    batch.push_back(std::move(tr));
  }
  SUBCASE("one epoch without clipping is the policy gradient") {
    PpoConfig pc;
    pc.clip = std::numeric_limits<double>::infinity();
    pc.epochs = 1;
    pc.entropy = 0.0;
    pc.baseline = false;
    const Vector a = ppo_delta(policy, batch, pc);
    const Vector b = pg_delta(policy, batch, false);
    CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, b.cwiseAbs().maxCoeff()));
    pc.baseline = true;
    const Vector c = ppo_delta(policy, batch, pc);
    const Vector d = pg_delta(policy, batch, true);
    CHECK((c - d).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, d.cwiseAbs().maxCoeff()));
  }
  SUBCASE("positive advantage beyond the clip contributes nothing") {
    Trajectory tr;
    const Vector x = vec({3.0});
    const double p_now = policy.output(x)(1);
    tr.steps.push_back({x, 1, std::log(p_now / 1.5), 1.0});
    tr.returns = {2.0};
    PpoConfig pc;
    pc.entropy = 0.0;
    pc.baseline = false;
    CHECK(ppo_delta(policy, {tr}, pc).cwiseAbs().maxCoeff() == 0.0);
    tr.steps[0].log_prob = std::log(p_now / 1.1);
    CHECK(ppo_delta(policy, {tr}, pc).cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("training is deterministic") {
  auto run = [] {
    auto env = make_env("cartpole");
    Rng init = substream(3, "policy-init");
    auto policy = make_policy(ArchSpec::parse("tree:2"), 4, 2, init);
    TrainConfig tc;
    tc.episodes = 40;
    tc.seed = 3;
    const auto result = train(*policy, *env, tc);
    return std::make_pair(policy->parameters(), result.episode_rewards);
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("training config validation and curve format") {
  TrainConfig tc;
  tc.gamma = 1.5;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  tc = {};
  tc.learning_rate = 0.0;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  tc = {};
  const auto back = TrainConfig::from_json(tc.to_json());
  CHECK(back.to_json() == tc.to_json());
  TrainResult r;
  r.episode_rewards = {1.0, 3.0};
  r.moving_average = moving_average(r.episode_rewards);
  CHECK(r.moving_average[1] == 2.0);
  CHECK(curve_csv(r) == "episode,cumulative_reward,moving_avg_50\n0,1,1\n1,3,2\n");
}

TEST_CASE("evaluation") {
  auto env = make_env("chain");
  CHECK_THROWS_AS(evaluate(random_actions(2), *env, 0, 1), ConfigError);
  const auto s = evaluate([](const Vector& x, Rng&) { return x(0) <= 2.5 ? kMoveRight : kMoveLeft; }, *env, 10, 1);
  // The optimal crisp policy from s3 collects r+ on every one of the 4 steps.
  CHECK(s.mean == 4.0);
  CHECK(s.stddev == 0.0);
}
