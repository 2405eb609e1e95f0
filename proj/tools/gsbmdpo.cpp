#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "gsbmdpo/config.hpp"
#include "gsbmdpo/oracles.hpp"
#include "gsbmdpo/toylab.hpp"
#include "gsbmdpo/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gsbmdpo;

namespace {

// Every training key as a kebab-case string flag; parsing and validation
// happen in config::parse_config so file values and flags share one path.
struct TrainFlags {
  std::string config_file;
  std::string out;
  std::map<std::string, std::string> values;
  std::vector<std::pair<std::string, CLI::Option*>> options;

  void attach(CLI::App& app) {
    app.add_option("--config", config_file, "JSON config file")->check(CLI::ExistingFile);
    app.add_option("--out", out, "Run directory (default: $RUN_OUT_DIR, else runs)");
    for (const auto& key : config::train_keys()) {
      auto* opt = app.add_option("--" + config::kebab(key), values[key], key);
      options.emplace_back(key, opt);
    }
  }

  std::map<std::string, std::string> overrides() const {
    std::map<std::string, std::string> o;
    for (const auto& [key, opt] : options) {
      if (opt->count() > 0) o[key] = values.at(key);
    }
    if (!out.empty()) o["out_dir"] = out;
    return o;
  }

  config::RunConfig parse() const {
    std::optional<fs::path> file;
    if (!config_file.empty()) file = config_file;
    return config::parse_config(file, overrides());
  }
};

json eval_json(const train::EvalResult& r, bool deterministic) {
  return json{{"mean_return", r.mean_return},
              {"mean_episode_length", r.mean_episode_length},
              {"mean_final_distance", r.mean_final_distance},
              {"deterministic", deterministic},
              {"returns", r.returns},
              {"final_distances", r.final_distances}};
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json run_training(const config::RunConfig& run, const fs::path& dir,
                  std::optional<std::size_t> stop_after) {
  config::write_run_records(dir, run);
  train::Trainer trainer(run.train);
  trainer.train(dir, stop_after);
  const auto& cfg = trainer.config();
  const auto r = trainer.evaluate_now();
  json summary{{"algo", cfg.algo},
               {"env", cfg.env},
               {"seed", cfg.seed},
               {"ablation", run.ablation},
               {"env_steps", trainer.env_steps()},
               {"iterations", trainer.iteration()},
               {"final_eval", eval_json(r, cfg.deterministic_eval)}};
  if (cfg.env == "MultiGoalReach") {
    const auto cov = train::goal_mode_coverage(trainer.actor(), trainer.normalizer(), 4000,
                                               cfg.seed + 77);
    summary["goal_modes"] = {{"fractions", cov.fractions}, {"covered", cov.covered}};
  }
  write_json(dir / "summary.json", summary);
  return summary;
}

int cmd_train(const TrainFlags& flags, const std::string& resume,
              std::optional<std::size_t> stop_after) {
  if (!resume.empty()) {
    if (!fs::exists(resume)) {
      std::cerr << "train: checkpoint not found: " << resume << '\n';
      return 2;
    }
    if (flags.out.empty()) {
      std::cerr << "train: --resume needs --out pointing at the original run directory\n";
      return 2;
    }
    auto trainer = train::Trainer::load(resume);
    trainer->train(flags.out, stop_after);
    std::cout << "resumed " << resume << " -> " << flags.out << " at env_steps "
              << trainer->env_steps() << '\n';
    return 0;
  }
  const auto run = flags.parse();
  const fs::path dir = run.out_dir;
  const json s = run_training(run, dir, stop_after);
  std::cout << s.dump(2) << '\n';
  return 0;
}

int cmd_eval(const std::string& checkpoint, std::optional<std::size_t> episodes, bool stochastic,
             std::uint64_t seed, const std::string& out) {
  if (checkpoint.empty() || !fs::exists(checkpoint)) {
    std::cerr << "eval: checkpoint not found: " << (checkpoint.empty() ? "<none>" : checkpoint)
              << "\n";
    return 2;
  }
  auto trainer = train::Trainer::load(checkpoint);
  const auto& cfg = trainer->config();
  const bool det = !stochastic;
  const auto r = train::evaluate(trainer->actor(), trainer->normalizer(), cfg.env,
                                 episodes.value_or(cfg.eval_episodes), det, seed, seed + 1);
  json j{{"checkpoint", checkpoint}, {"algo", cfg.algo}, {"env", cfg.env},
         {"env_steps", trainer->env_steps()}, {"eval", eval_json(r, det)}};
  if (cfg.env == "MultiGoalReach") {
    const auto cov = train::goal_mode_coverage(trainer->actor(), trainer->normalizer(), 4000, seed);
    j["goal_modes"] = {{"fractions", cov.fractions}, {"covered", cov.covered}};
  }
  if (!out.empty()) {
    fs::create_directories(out);
    write_json(fs::path(out) / "eval.json", j);
  }
  std::cout << j.dump(2) << '\n';
  return 0;
}

std::vector<double> parse_reals(const std::string& text, std::size_t expected, const char* what) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) v.push_back(std::stod(item));
  if (v.size() != expected) {
    throw config::ConfigError(std::string(what) + ": expected " + std::to_string(expected) +
                              " comma-separated numbers");
  }
  return v;
}

int cmd_toy(toy::ToyConfig cfg, const std::string& out, const std::string& prefs,
            const std::string& old_weights) {
  if (!prefs.empty()) {
    const auto v = parse_reals(prefs, 4, "preference");
    std::copy(v.begin(), v.end(), cfg.preference.weights.begin());
  }
  if (!old_weights.empty()) {
    const auto v = parse_reals(old_weights, 4, "old-weights");
    std::copy(v.begin(), v.end(), cfg.old_policy.weights.begin());
  }
  const auto r = toy::run_toy(cfg);
  toy::write_toy_outputs(out, cfg, r);
  std::printf("%-8s %8s %8s %8s %8s\n", "", "QI", "QII", "QIII", "QIV");
  auto row = [](const char* name, const toy::Quad& q) {
    std::printf("%-8s %8.4f %8.4f %8.4f %8.4f\n", name, q[0], q[1], q[2], q[3]);
  };
  row("old", r.old_masses);
  row("prefit", r.prefit_masses);
  row("target", r.target_masses);
  row("learned", r.learned_masses);
  std::printf("l1 error %.4f, modes %zu, %.1f s, outputs in %s\n", r.l1_error, r.modes, r.seconds,
              out.c_str());
  return 0;
}

int cmd_verify(const oracles::SuiteOptions& opts, const std::string& out) {
  const auto results = oracles::run_suite(opts);
  bool all = true;
  json table = json::array();
  std::printf("%-34s %-6s %12s %10s  %s\n", "check", "result", "max dev", "tolerance", "detail");
  for (const auto& r : results) {
    all = all && r.passed;
    std::printf("%-34s %-6s %12.3e %10.1e  %s\n", r.name.c_str(), r.passed ? "PASS" : "FAIL",
                r.max_deviation, r.tolerance, r.detail.c_str());
    table.push_back({{"name", r.name},
                     {"passed", r.passed},
                     {"max_deviation", r.max_deviation},
                     {"tolerance", r.tolerance},
                     {"detail", r.detail}});
  }
  if (!out.empty()) {
    fs::create_directories(out);
    write_json(fs::path(out) / "verify.json", json{{"seed", opts.seed}, {"checks", table}});
  }
  std::printf("%s\n", all ? "all checks passed" : "some checks FAILED");
  return all ? 0 : 1;
}

struct Variant {
  std::string name;
  std::map<std::string, std::string> overrides;
};

std::vector<Variant> ablation_grid(const std::vector<std::string>& names,
                                   const std::vector<std::size_t>& flow_steps) {
  std::vector<Variant> grid;
  for (std::size_t n : flow_steps) {
    grid.push_back({"flow" + std::to_string(n), {{"generation_steps", std::to_string(n)}}});
  }
  for (const auto& n : names) {
    if (n == "default") {
      grid.push_back({n, {}});
    } else if (n == "kl0") {
      grid.push_back({n, {{"kl_coef", "0"}}});
    } else if (n == "no-ref") {
      grid.push_back({n, {{"reference_mix", "0"}}});
    } else if (n == "no-clip") {
      grid.push_back({n, {{"clip_ratios", "false"}}});
    } else if (n == "stochastic-eval") {
      grid.push_back({n, {{"deterministic_eval", "false"}}});
    } else {
      throw config::ConfigError("ablate: unknown variant '" + n +
                                "' (default, kl0, no-ref, no-clip, stochastic-eval)");
    }
  }
  return grid;
}

int cmd_ablate(const TrainFlags& flags, std::vector<std::string> variants,
               const std::vector<std::size_t>& flow_steps, std::vector<std::uint64_t> seeds) {
  if (variants.empty() && flow_steps.empty()) {
    variants = {"default", "kl0", "no-ref", "no-clip", "stochastic-eval"};
  }
  const auto base = flags.parse();
  if (seeds.empty()) seeds = {base.train.seed};
  const fs::path root = base.out_dir;
  json rows = json::array();
  for (const auto& v : ablation_grid(variants, flow_steps)) {
    for (std::uint64_t seed : seeds) {
      auto o = flags.overrides();
      for (const auto& [k, val] : v.overrides) o[k] = val;
      o["seed"] = std::to_string(seed);
      o["ablation"] = v.name;
      std::optional<fs::path> file;
      if (!flags.config_file.empty()) file = flags.config_file;
      auto run = config::parse_config(file, o);
      const fs::path dir = root / v.name / ("seed" + std::to_string(seed));
      run.out_dir = dir;
      std::cout << "ablate: " << v.name << " seed " << seed << " -> " << dir.string() << std::endl;
      const json s = run_training(run, dir, std::nullopt);
      rows.push_back({{"variant", v.name},
                      {"seed", seed},
                      {"dir", dir.string()},
                      {"final_return", s["final_eval"]["mean_return"]},
                      {"final_distance", s["final_eval"]["mean_final_distance"]}});
    }
  }
  fs::create_directories(root);
  write_json(root / "ablation.json", rows);
  std::printf("%-18s %6s %14s %14s\n", "variant", "seed", "final return", "final dist");
  for (const auto& r : rows) {
    std::printf("%-18s %6llu %14.4f %14.4f\n", r["variant"].get<std::string>().c_str(),
                static_cast<unsigned long long>(r["seed"].get<std::uint64_t>()),
                r["final_return"].get<double>(), r["final_distance"].get<double>());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Path-space mirror-descent policy optimization laboratory"};
  app.require_subcommand(1);

  auto* train_cmd = app.add_subcommand("train", "Train one run");
  TrainFlags train_flags;
  train_flags.attach(*train_cmd);
  std::string resume;
  std::optional<std::size_t> stop_after;
  train_cmd->add_option("--resume", resume, "Continue from a trainer checkpoint");
  train_cmd->add_option("--stop-after", stop_after, "Stop after this many iterations");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string checkpoint;
  std::optional<std::size_t> episodes;
  bool stochastic = false;
  std::uint64_t eval_seed = 12345;
  std::string eval_out;
  eval_cmd->add_option("--checkpoint", checkpoint, "Trainer checkpoint");
  eval_cmd->add_option("--episodes", episodes, "Episodes (default: the run's eval_episodes)");
  eval_cmd->add_flag("--stochastic", stochastic, "Sample actions instead of the noise-free mode");
  eval_cmd->add_option("--seed", eval_seed, "Evaluation seed");
  eval_cmd->add_option("--out", eval_out, "Directory for eval.json");

  auto* toy_cmd = app.add_subcommand("toy", "Four-mode tilting experiment");
  toy::ToyConfig toy_cfg;
  std::string toy_out = "runs/toy";
  if (const char* env = std::getenv("RUN_OUT_DIR"); env && *env) toy_out = env;
  std::string prefs, old_weights;
  bool toy_no_clip = false;
  toy_cmd->add_option("--out", toy_out, "Output directory");
  toy_cmd->add_option("--seed", toy_cfg.seed, "Seed");
  toy_cmd->add_option("--preference", prefs, "exp(A/beta) per quadrant, e.g. 1.2,1,3,1.4");
  toy_cmd->add_option("--old-weights", old_weights, "Mixture weights per quadrant");
  toy_cmd->add_option("--component-std", toy_cfg.old_policy.std, "Mixture component std");
  toy_cmd->add_option("--beta", toy_cfg.preference.beta, "Tilt temperature");
  toy_cmd->add_option("--sigma-max", toy_cfg.schedule.sigma_max, "Noise at t=0");
  toy_cmd->add_option("--sigma-min", toy_cfg.schedule.sigma_min, "Noise at t=1");
  toy_cmd->add_option("--generation-steps", toy_cfg.schedule.steps, "Euler steps");
  toy_cmd->add_option("--prefit-iterations", toy_cfg.prefit_iterations, "Drift regression steps");
  toy_cmd->add_option("--outer-iterations", toy_cfg.outer_iterations, "Mirror-descent steps");
  toy_cmd->add_option("--paths", toy_cfg.paths_per_iteration, "Paths per mirror-descent step");
  toy_cmd->add_option("--epochs", toy_cfg.epochs, "Epochs per step");
  toy_cmd->add_option("--minibatches", toy_cfg.minibatches, "Minibatches per epoch");
  toy_cmd->add_option("--lr", toy_cfg.lr, "Adam learning rate");
  toy_cmd->add_option("--eval-samples", toy_cfg.eval_samples, "Samples for the mass estimate");
  toy_cmd->add_flag("--no-clip", toy_no_clip, "Use exact path ratios");

  auto* verify_cmd = app.add_subcommand("verify", "Run the oracle suite");
  oracles::SuiteOptions suite;
  std::string verify_out;
  verify_cmd->add_option("--seed", suite.seed, "Seed");
  verify_cmd->add_option("--out", verify_out, "Directory for verify.json");
  verify_cmd->add_option("--chains", suite.chains, "Random chains for the KL checks");
  verify_cmd->add_option("--is-samples", suite.is_samples, "Samples per importance check");

  auto* ablate_cmd = app.add_subcommand("ablate", "Run an ablation grid sequentially");
  TrainFlags ablate_flags;
  ablate_flags.attach(*ablate_cmd);
  std::vector<std::string> variants;
  std::vector<std::size_t> flow_steps;
  std::vector<std::uint64_t> seeds;
  ablate_cmd->add_option("--variants", variants, "default, kl0, no-ref, no-clip, stochastic-eval")
      ->delimiter(',');
  ablate_cmd->add_option("--flow-steps", flow_steps, "Generation-step grid, e.g. 4,8,16,32")
      ->delimiter(',');
  ablate_cmd->add_option("--seeds", seeds, "Seeds, e.g. 0,1,2")->delimiter(',');

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return cmd_train(train_flags, resume, stop_after);
    if (*eval_cmd) return cmd_eval(checkpoint, episodes, stochastic, eval_seed, eval_out);
    if (*toy_cmd) {
      toy_cfg.clip_ratios = !toy_no_clip;
      return cmd_toy(toy_cfg, toy_out, prefs, old_weights);
    }
    if (*verify_cmd) return cmd_verify(suite, verify_out);
    if (*ablate_cmd) return cmd_ablate(ablate_flags, variants, flow_steps, seeds);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
