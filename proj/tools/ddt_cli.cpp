// Command-line entry point: train, discretize, analyze, sweep, eval, export.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "build_info.hpp"
#include "ddt/analysis.hpp"
#include "ddt/baselines.hpp"
#include "ddt/crisp.hpp"
#include "ddt/envs.hpp"
#include "ddt/train.hpp"
#include "ddt/tree_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ddt;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfigError = 2, kDiverged = 3, kDegenerate = 4 };

// ---------------------------------------------------------------------------
// Files

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// Write-then-rename so readers never see a half-written file.
void write_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + tmp.string());
    out << text;
    if (!out) throw Error("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_json(const fs::path& path, const json& doc) { write_atomic(path, doc.dump(2) + "\n"); }

json load_config(const std::string& path) {
  json config = json::parse(build::kDefaultConfig);
  if (!path.empty()) config.merge_patch(read_json(path));
  return config;
}

// ---------------------------------------------------------------------------
// Names and models

NameTable names_for_env(const std::string& env) {
  if (env == "cartpole") return {{"x", "x_dot", "theta", "theta_dot"}, {"left", "right"}};
  if (env == "chain") return {{"s"}, {"a1", "a2"}};
  if (env == "wildfire")
    return {{"fire1_north", "fire1_west", "closest_fire1", "fire2_north", "fire2_west", "closest_fire2"},
            {"north", "east", "south", "west", "nothing"}};
  return {};
}

NameTable load_names(const std::string& names_path, const json& model) {
  if (!names_path.empty()) {
    const json doc = read_json(names_path);
    NameTable t;
    t.features = doc.value("features", std::vector<std::string>{});
    t.actions = doc.value("actions", std::vector<std::string>{});
    return t;
  }
  return names_for_env(model.value("env", std::string{}));
}

bool is_crisp(const json& doc) { return doc.value("kind", std::string{}) == "crisp"; }

std::unique_ptr<Environment> env_from_config(const std::string& name, const json& config) {
  json options = json::object();
  if (config.contains("env") && config["env"].contains(name)) options = config["env"][name];
  return make_env(name, options);
}

std::uint64_t eval_seed(std::uint64_t seed) { return substream(seed, "eval")(); }

json eval_json(const EvalSummary& s) { return {{"mean", s.mean}, {"std", s.stddev}, {"episodes", s.rewards.size()}}; }

// ---------------------------------------------------------------------------
// train

struct TrainRequest {
  std::string env = "cartpole";
  std::string arch = "tree:2";
  std::uint64_t seed = 0;
  bool freeze_alpha = false;
  int eval_episodes = 100;
  TrainConfig train;
  json env_options = json::object();
  // State-Action DT only.
  std::string teacher;
  int cart_depth = 6;
  int cart_pairs = 10000;

  json to_json() const {
    return {{"env", env},
            {"arch", arch},
            {"seed", seed},
            {"freeze_alpha", freeze_alpha},
            {"eval_episodes", eval_episodes},
            {"train", train.to_json()},
            {"env_options", env_options},
            {"teacher", teacher},
            {"cart", {{"max_depth", cart_depth}, {"pairs", cart_pairs}}}};
  }

  static TrainRequest from_json(const json& doc) {
    TrainRequest r;
    r.env = doc.at("env").get<std::string>();
    r.arch = doc.at("arch").get<std::string>();
    r.seed = doc.at("seed").get<std::uint64_t>();
    r.freeze_alpha = doc.value("freeze_alpha", false);
    r.eval_episodes = doc.value("eval_episodes", 100);
    r.train = TrainConfig::from_json(doc.at("train"));
    r.env_options = doc.value("env_options", json::object());
    r.teacher = doc.value("teacher", std::string{});
    if (doc.contains("cart")) {
      r.cart_depth = doc["cart"].value("max_depth", r.cart_depth);
      r.cart_pairs = doc["cart"].value("pairs", r.cart_pairs);
    }
    return r;
  }
};

struct RunOutcome {
  json metrics;
  json outputs;
  std::string status = "ok";
};

bool is_cart_arch(const std::string& arch) { return arch.rfind("cart", 0) == 0; }

RunOutcome run_cart(const TrainRequest& req, const fs::path& out) {
  auto env = make_env(req.env, req.env_options);
  const int A = env->action_count();
  std::unique_ptr<Policy> teacher;
  ActionFn act;
  if (req.teacher.empty() || req.teacher == "random") {
    act = random_actions(A);
  } else {
    const json doc = read_json(req.teacher);
    if (is_crisp(doc)) {
      auto crisp = std::make_shared<CrispPolicy>(crisp_from_json(doc));
      act = [crisp](const Vector& x, Rng&) { return eval_crisp(*crisp, x); };
    } else {
      teacher = policy_from_json(doc);
      act = greedy_actions(*teacher);
    }
  }
  const CartDataset data = collect_dataset(act, *env, static_cast<std::size_t>(req.cart_pairs), req.seed);
  const CrispPolicy tree = cart_fit(data, A, {req.cart_depth});
  json model = crisp_to_json(tree);
  model["env"] = req.env;
  write_json(out / "model.json", model);
  write_atomic(out / "model.txt", export_policy(tree, ExportFormat::Text, names_for_env(req.env)));
  write_atomic(out / "dataset.csv", dataset_to_csv(data));
  RunOutcome o;
  o.outputs = {{"model", (out / "model.json").string()},
               {"text", (out / "model.txt").string()},
               {"dataset", (out / "dataset.csv").string()}};
  o.metrics = {{"train_accuracy", accuracy(tree, data)}, {"depth", depth(tree)}, {"pairs", data.size()}};
  if (req.eval_episodes > 0) {
    const auto s = evaluate([&](const Vector& x, Rng&) { return eval_crisp(tree, x); }, *env, req.eval_episodes,
                            eval_seed(req.seed));
    o.metrics["eval"] = eval_json(s);
  }
  return o;
}

RunOutcome run_train(const TrainRequest& req, const fs::path& out) {
  if (is_cart_arch(req.arch)) return run_cart(req, out);
  auto env = make_env(req.env, req.env_options);
  const ArchSpec arch = ArchSpec::parse(req.arch);
  Rng init_rng = substream(req.seed, "policy-init");
  auto policy = make_policy(arch, env->observation_dim(), env->action_count(), init_rng, req.freeze_alpha);
  TrainConfig tc = req.train;
  tc.seed = req.seed;

  RunOutcome o;
  TrainResult result;
  try {
    result = train(*policy, *env, tc);
  } catch (const NonFiniteGradient& e) {
    o.status = std::string("diverged: ") + e.what();
  }
  json model = policy->to_json();
  model["env"] = req.env;
  model["arch"] = req.arch;
  write_json(out / "model.json", model);
  write_atomic(out / "curve.csv", curve_csv(result));
  o.outputs = {{"model", (out / "model.json").string()}, {"curve", (out / "curve.csv").string()}};
  o.metrics["episodes"] = result.episode_rewards.size();
  o.metrics["updates"] = result.updates;
  if (!result.moving_average.empty()) {
    o.metrics["final_moving_avg_50"] = result.moving_average.back();
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < result.moving_average.size(); ++i) {
      if (i + 1 >= static_cast<std::size_t>(kMovingAverageWindow)) best = std::max(best, result.moving_average[i]);
    }
    if (std::isfinite(best)) o.metrics["best_moving_avg_50"] = best;
  }
  if (o.status != "ok" || req.eval_episodes <= 0) return o;
  const auto greedy = evaluate(greedy_actions(*policy), *env, req.eval_episodes, eval_seed(req.seed));
  o.metrics["eval_greedy"] = eval_json(greedy);
  if (req.env == "wildfire") {
    const auto rnd = evaluate(random_actions(env->action_count()), *env, req.eval_episodes, eval_seed(req.seed));
    const auto sampled = evaluate(sampled_actions(*policy), *env, req.eval_episodes, eval_seed(req.seed));
    o.metrics["eval_sampled"] = eval_json(sampled);
    o.metrics["eval_random"] = eval_json(rnd);
    o.metrics["improvement_over_random"] = (greedy.mean - rnd.mean) / std::abs(rnd.mean);
  }
  return o;
}

json manifest(const std::string& command, const json& config, std::uint64_t seed, const RunOutcome& o,
              double seconds) {
  return {{"command", command},  {"version", build::kVersion}, {"config", config},   {"seed", seed},
          {"outputs", o.outputs}, {"metrics", o.metrics},       {"status", o.status}, {"wall_clock_seconds", seconds}};
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int finish_train(const TrainRequest& req, const fs::path& out, const json* expected_metrics) {
  const auto t0 = std::chrono::steady_clock::now();
  const RunOutcome o = run_train(req, out);
  write_json(out / "manifest.json", manifest("train", req.to_json(), req.seed, o, seconds_since(t0)));
  std::cout << o.metrics.dump(2) << "\n";
  if (expected_metrics) {
    const bool same = *expected_metrics == o.metrics;
    std::cout << "metrics reproduced: " << (same ? "yes" : "no") << "\n";
    if (!same) return kFailure;
  }
  if (o.status != "ok") {
    std::cerr << o.status << "\n";
    return kDiverged;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// analyze

RunOutcome run_analyze(const AnalysisConfig& config, const fs::path& out) {
  const auto report = emit_report(config, out);
  RunOutcome o;
  o.metrics = report.summary(config);
  o.metrics.erase("parameters");
  for (const char* name : {"delta_phi_q", "delta_phi_pg", "optimality_q", "optimality_pg", "policy_value", "summary"})
    o.outputs[name] = (out / (std::string(name) + (std::string(name) == "summary" ? ".json" : ".csv"))).string();
  return o;
}

// ---------------------------------------------------------------------------
// discretize / eval / export

CrispPolicy discretize_model(const json& doc, std::vector<std::string>* warnings) {
  const SoftTreed tree = tree_from_json(doc);
  return tree.topology.kind == TopologyKind::RuleList ? discretize_rule_list(tree, warnings)
                                                      : discretize_tree(tree, warnings);
}

ActionFn model_actions(const json& doc, const std::string& mode, std::shared_ptr<Policy>& keep,
                       std::shared_ptr<CrispPolicy>& keep_crisp) {
  if (is_crisp(doc)) {
    keep_crisp = std::make_shared<CrispPolicy>(crisp_from_json(doc));
    auto crisp = keep_crisp;
    return [crisp](const Vector& x, Rng&) { return eval_crisp(*crisp, x); };
  }
  keep = policy_from_json(doc);
  if (mode == "sample") return sampled_actions(*keep);
  if (mode != "greedy") throw ConfigError("eval mode must be 'greedy' or 'sample'");
  return greedy_actions(*keep);
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ConfigError("bad integer list '" + text + "'");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

int run(int argc, char** argv) {
  CLI::App app{"Differentiable decision trees for reinforcement learning"};
  app.set_version_flag("--version", std::string(build::kVersion));
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "JSON config merged over the defaults")->check(CLI::ExistingFile);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model with PPO (or fit a State-Action DT with arch cart:D)");
  std::string t_env = "cartpole", t_arch = "tree:2", t_out, t_manifest, t_teacher;
  std::uint64_t t_seed = 0;
  std::optional<int> t_episodes, t_batch, t_max_steps, t_pairs, t_depth;
  std::optional<double> t_lr, t_gamma, t_entropy, t_clip;
  std::optional<int> t_epochs;
  int t_eval = -1;
  bool t_freeze = false;
  train_cmd->add_option("--env", t_env, "chain | cartpole | wildfire");
  train_cmd->add_option("--arch", t_arch, "tree:L | list:R | mlp:H | cart:D");
  train_cmd->add_option("--seed", t_seed);
  train_cmd->add_option("--episodes", t_episodes);
  train_cmd->add_option("--lr", t_lr, "RMSProp learning rate");
  train_cmd->add_option("--gamma", t_gamma);
  train_cmd->add_option("--batch-episodes", t_batch);
  train_cmd->add_option("--max-steps", t_max_steps);
  train_cmd->add_option("--entropy", t_entropy);
  train_cmd->add_option("--clip", t_clip);
  train_cmd->add_option("--epochs", t_epochs, "PPO epochs per batch");
  train_cmd->add_option("--eval-episodes", t_eval, "greedy evaluation episodes after training");
  train_cmd->add_flag("--freeze-alpha", t_freeze, "keep split steepness fixed");
  train_cmd->add_option("--teacher", t_teacher, "cart: model file whose greedy actions are logged, or 'random'");
  train_cmd->add_option("--pairs", t_pairs, "cart: logged state-action pairs");
  train_cmd->add_option("--max-depth", t_depth, "cart: depth cap (default from cart:D)");
  train_cmd->add_option("--out", t_out, "output directory");
  train_cmd->add_option("--from-manifest", t_manifest, "re-run the configuration stored in a manifest")
      ->check(CLI::ExistingFile);

  // discretize
  auto* disc_cmd = app.add_subcommand("discretize", "Convert a soft tree into a crisp tree");
  std::string d_model, d_out, d_names;
  bool d_prune = false;
  int d_eval = 0;
  std::uint64_t d_seed = 0;
  disc_cmd->add_option("--model", d_model)->required()->check(CLI::ExistingFile);
  disc_cmd->add_option("--out", d_out, "output directory (default: next to the model)");
  disc_cmd->add_flag("--prune", d_prune, "remove redundant decision nodes");
  disc_cmd->add_option("--names", d_names, "JSON {features: [...], actions: [...]}");
  disc_cmd->add_option("--eval-episodes", d_eval, "evaluate soft and crisp policies on the model's environment");
  disc_cmd->add_option("--seed", d_seed);

  // analyze
  auto* an_cmd = app.add_subcommand("analyze", "Chain-MDP update curves, roots and optimality curves");
  std::string a_out = "runs/analysis", a_start, a_manifest;
  std::optional<double> a_alpha, a_gamma;
  std::optional<int> a_grid, a_horizon;
  an_cmd->add_option("--out", a_out);
  an_cmd->add_option("--start", a_start, "fixed | averaged");
  an_cmd->add_option("--alpha", a_alpha);
  an_cmd->add_option("--gamma", a_gamma);
  an_cmd->add_option("--grid", a_grid, "grid points");
  an_cmd->add_option("--horizon", a_horizon, "episode cap (0: n)");
  an_cmd->add_option("--from-manifest", a_manifest)->check(CLI::ExistingFile);

  // sweep
  auto* sw_cmd = app.add_subcommand("sweep", "Train every (size, seed) cell of an architecture family");
  std::string s_env = "cartpole", s_family = "tree", s_sizes, s_seeds = "0,1,2,3,4", s_out = "runs/sweep";
  std::optional<int> s_episodes;
  int s_threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  sw_cmd->add_option("--env", s_env);
  sw_cmd->add_option("--family", s_family, "tree | list | mlp");
  sw_cmd->add_option("--sizes", s_sizes, "comma-separated sizes (default from config)");
  sw_cmd->add_option("--seeds", s_seeds, "comma-separated seeds");
  sw_cmd->add_option("--episodes", s_episodes);
  sw_cmd->add_option("--threads", s_threads);
  sw_cmd->add_option("--out", s_out);

  // eval
  auto* ev_cmd = app.add_subcommand("eval", "Evaluate a soft, MLP or crisp model");
  std::string e_model, e_env, e_mode = "greedy", e_out;
  std::optional<int> e_episodes;
  std::uint64_t e_seed = 0;
  ev_cmd->add_option("--model", e_model)->required()->check(CLI::ExistingFile);
  ev_cmd->add_option("--env", e_env, "default: the environment recorded in the model");
  ev_cmd->add_option("--episodes", e_episodes);
  ev_cmd->add_option("--seed", e_seed);
  ev_cmd->add_option("--mode", e_mode, "greedy | sample");
  ev_cmd->add_option("--out", e_out, "write the result as JSON");

  // export
  auto* ex_cmd = app.add_subcommand("export", "Render a crisp policy as text or DOT");
  std::string x_model, x_format = "text", x_out, x_names;
  ex_cmd->add_option("--model", x_model)->required()->check(CLI::ExistingFile);
  ex_cmd->add_option("--format", x_format, "text | dot");
  ex_cmd->add_option("--out", x_out, "file (default: stdout)");
  ex_cmd->add_option("--names", x_names, "JSON {features: [...], actions: [...]}");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  const json config = load_config(config_path);

  if (*train_cmd) {
    if (!t_manifest.empty()) {
      const json m = read_json(t_manifest);
      if (m.value("command", std::string{}) != "train") throw ConfigError("manifest is not from a train run");
      const TrainRequest req = TrainRequest::from_json(m.at("config"));
      const fs::path out = t_out.empty() ? fs::path(t_manifest).parent_path() / "replay" : fs::path(t_out);
      const json expected = m.at("metrics");
      return finish_train(req, out, &expected);
    }
    TrainRequest req;
    req.env = t_env;
    req.arch = t_arch;
    req.seed = t_seed;
    req.freeze_alpha = t_freeze;
    if (!config["train"].contains(t_env)) throw ConfigError("unknown environment '" + t_env + "'");
    req.train = TrainConfig::from_json(config["train"][t_env]);
    req.env_options = config["env"].value(t_env, json::object());
    if (t_episodes) req.train.episodes = *t_episodes;
    if (t_lr) req.train.learning_rate = *t_lr;
    if (t_gamma) req.train.gamma = *t_gamma;
    if (t_batch) req.train.batch_episodes = *t_batch;
    if (t_max_steps) req.train.max_steps = *t_max_steps;
    if (t_entropy) req.train.ppo.entropy = *t_entropy;
    if (t_clip) req.train.ppo.clip = *t_clip;
    if (t_epochs) req.train.ppo.epochs = *t_epochs;
    req.train.seed = t_seed;
    req.train.validate();
    req.eval_episodes = t_eval >= 0 ? t_eval : config["eval"].value("episodes", 100);
    req.teacher = t_teacher;
    req.cart_pairs = t_pairs.value_or(config["cart"].value("pairs", 10000));
    req.cart_depth = config["cart"].value("max_depth", 6);
    if (is_cart_arch(t_arch)) {
      const auto colon = t_arch.find(':');
      if (colon != std::string::npos) req.cart_depth = parse_int_list(t_arch.substr(colon + 1)).at(0);
      if (t_depth) req.cart_depth = *t_depth;
    } else {
      ArchSpec::parse(t_arch);
    }
    std::string arch_tag = t_arch;
    std::replace(arch_tag.begin(), arch_tag.end(), ':', '-');
    const fs::path out = t_out.empty() ? fs::path("runs") / (t_env + "-" + arch_tag + "-s" + std::to_string(t_seed))
                                       : fs::path(t_out);
    return finish_train(req, out, nullptr);
  }

  if (*disc_cmd) {
    const json doc = read_json(d_model);
    if (is_crisp(doc)) throw ConfigError("model is already crisp");
    std::vector<std::string> warnings;
    CrispPolicy crisp = discretize_model(doc, &warnings);
    if (d_prune) crisp = prune(crisp);
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
    const NameTable names = load_names(d_names, doc);
    const fs::path out = d_out.empty() ? fs::path(d_model).parent_path() : fs::path(d_out);
    json cdoc = crisp_to_json(crisp);
    if (doc.contains("env")) cdoc["env"] = doc["env"];
    write_json(out / "crisp.json", cdoc);
    write_atomic(out / "crisp.txt", export_policy(crisp, ExportFormat::Text, names));
    write_atomic(out / "crisp.dot", export_policy(crisp, ExportFormat::Dot, names));
    std::cout << export_policy(crisp, ExportFormat::Text, names);
    if (d_eval > 0) {
      if (!doc.contains("env")) throw ConfigError("model records no environment to evaluate on");
      auto env = env_from_config(doc["env"].get<std::string>(), config);
      auto soft = policy_from_json(doc);
      const auto s = evaluate(greedy_actions(*soft), *env, d_eval, d_seed);
      const auto c = evaluate([&](const Vector& x, Rng&) { return eval_crisp(crisp, x); }, *env, d_eval, d_seed);
      const json result{{"soft", eval_json(s)}, {"crisp", eval_json(c)}, {"ratio", c.mean / s.mean}};
      write_json(out / "discretize_eval.json", result);
      std::cout << result.dump(2) << "\n";
    }
    return kOk;
  }

  if (*an_cmd) {
    json doc = config["analysis"];
    fs::path out = a_out;
    if (!a_manifest.empty()) {
      const json m = read_json(a_manifest);
      if (m.value("command", std::string{}) != "analyze") throw ConfigError("manifest is not from an analyze run");
      doc = m.at("config");
    }
    if (a_alpha) doc["alpha"] = *a_alpha;
    if (a_gamma) doc["chain"]["gamma"] = *a_gamma;
    if (a_grid) doc["grid_points"] = *a_grid;
    if (a_horizon) doc["chain"]["horizon"] = *a_horizon;
    if (!a_start.empty()) doc["start"] = a_start;
    const AnalysisConfig ac = AnalysisConfig::from_json(doc);
    const auto t0 = std::chrono::steady_clock::now();
    const RunOutcome o = run_analyze(ac, out);
    write_json(out / "manifest.json", manifest("analyze", ac.to_json(), 0, o, seconds_since(t0)));
    std::cout << o.metrics.dump(2) << "\n";
    return kOk;
  }

  if (*sw_cmd) {
    if (s_family != "tree" && s_family != "list" && s_family != "mlp")
      throw ConfigError("sweep family must be tree, list or mlp");
    const std::vector<int> sizes =
        s_sizes.empty() ? config["sweep"].at(s_family).get<std::vector<int>>() : parse_int_list(s_sizes);
    const std::vector<int> seeds = parse_int_list(s_seeds);
    if (sizes.empty()) throw ConfigError("sweep needs at least one size");
    if (seeds.empty()) throw ConfigError("sweep needs at least one seed");
    if (!config["train"].contains(s_env)) throw ConfigError("unknown environment '" + s_env + "'");
    TrainConfig base = TrainConfig::from_json(config["train"][s_env]);
    if (s_episodes) base.episodes = *s_episodes;
    for (int size : sizes) ArchSpec::parse(s_family + ":" + std::to_string(size));
    const json env_options = config["env"].value(s_env, json::object());

    struct Cell {
      int size;
      int seed;
      double value = std::nan("");
      std::string error;
    };
    std::vector<Cell> cells;
    for (int size : sizes)
      for (int seed : seeds) cells.push_back({size, seed});
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i = next++; i < cells.size(); i = next++) {
        Cell& cell = cells[i];
        try {
          auto env = make_env(s_env, env_options);
          Rng init_rng = substream(static_cast<std::uint64_t>(cell.seed), "policy-init");
          auto policy = make_policy(ArchSpec::parse(s_family + ":" + std::to_string(cell.size)),
                                    env->observation_dim(), env->action_count(), init_rng);
          TrainConfig tc = base;
          tc.seed = static_cast<std::uint64_t>(cell.seed);
          const auto result = train(*policy, *env, tc);
          cell.value = result.moving_average.empty() ? std::nan("") : result.moving_average.back();
        } catch (const std::exception& e) {
          cell.error = e.what();
        }
      }
    };
    std::vector<std::thread> pool;
    const int threads = std::max(1, std::min<int>(s_threads, static_cast<int>(cells.size())));
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();

    std::ostringstream table, detail;
    table << "family,size,runs,mean,std\n";
    detail << "family,size,seed,final_moving_avg_50\n";
    char buf[160];
    for (int size : sizes) {
      std::vector<double> vals;
      bool failed = false;
      for (const auto& c : cells) {
        if (c.size != size) continue;
        std::snprintf(buf, sizeof buf, "%s,%d,%d,%.17g\n", s_family.c_str(), size, c.seed, c.value);
        detail << buf;
        if (!c.error.empty()) {
          std::cerr << "cell " << s_family << ":" << size << " seed " << c.seed << " failed: " << c.error << "\n";
          failed = true;
        }
        vals.push_back(c.value);
      }
      double mean = std::nan(""), sd = std::nan("");
      if (!failed) {
        mean = 0.0;
        for (double v : vals) mean += v;
        mean /= vals.size();
        double sq = 0.0;
        for (double v : vals) sq += (v - mean) * (v - mean);
        sd = vals.size() > 1 ? std::sqrt(sq / (vals.size() - 1)) : 0.0;
      }
      std::snprintf(buf, sizeof buf, "%s,%d,%zu,%.17g,%.17g\n", s_family.c_str(), size, vals.size(), mean, sd);
      table << buf;
    }
    const fs::path out = s_out;
    write_atomic(out / "sweep.csv", table.str());
    write_atomic(out / "cells.csv", detail.str());
    std::cout << table.str();
    RunOutcome o;
    o.outputs = {{"table", (out / "sweep.csv").string()}, {"cells", (out / "cells.csv").string()}};
    json cfg{{"env", s_env}, {"family", s_family}, {"sizes", sizes}, {"seeds", seeds}, {"train", base.to_json()}};
    write_json(out / "manifest.json", manifest("sweep", cfg, 0, o, 0.0));
    return kOk;
  }

  if (*ev_cmd) {
    const json doc = read_json(e_model);
    const int episodes = e_episodes.value_or(config["eval"].value("episodes", 100));
    if (episodes <= 0) throw ConfigError("--episodes must be positive");
    std::string env_name = e_env.empty() ? doc.value("env", std::string{}) : e_env;
    if (env_name.empty()) throw ConfigError("no environment given and none recorded in the model");
    auto env = env_from_config(env_name, config);
    std::shared_ptr<Policy> keep;
    std::shared_ptr<CrispPolicy> keep_crisp;
    const ActionFn act = model_actions(doc, e_mode, keep, keep_crisp);
    const auto s = evaluate(act, *env, episodes, e_seed);
    std::printf("%.6f +- %.6f (%d episodes)\n", s.mean, s.stddev, episodes);
    if (!e_out.empty()) {
      json result = eval_json(s);
      result["env"] = env_name;
      result["seed"] = e_seed;
      result["mode"] = is_crisp(doc) ? "crisp" : e_mode;
      result["rewards"] = s.rewards;
      write_json(e_out, result);
    }
    return kOk;
  }

  if (*ex_cmd) {
    const json doc = read_json(x_model);
    if (!is_crisp(doc)) throw ConfigError("export needs a crisp policy (run discretize first)");
    const CrispPolicy crisp = crisp_from_json(doc);
    ExportFormat format;
    if (x_format == "text")
      format = ExportFormat::Text;
    else if (x_format == "dot")
      format = ExportFormat::Dot;
    else
      throw ConfigError("format must be 'text' or 'dot'");
    const std::string text = export_policy(crisp, format, load_names(x_names, doc));
    if (x_out.empty())
      std::cout << text;
    else
      write_atomic(x_out, text);
    return kOk;
  }
  return kConfigError;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const DegenerateNode& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDegenerate;
  } catch (const NonFiniteGradient& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDiverged;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const DimensionMismatch& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}
