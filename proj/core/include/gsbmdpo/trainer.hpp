#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gsbmdpo/array.hpp"
#include "gsbmdpo/checkpoint.hpp"
#include "gsbmdpo/critic.hpp"
#include "gsbmdpo/envs.hpp"
#include "gsbmdpo/genpolicy.hpp"
#include "gsbmdpo/optim.hpp"
#include "gsbmdpo/pathobj.hpp"
#include "gsbmdpo/rng.hpp"

namespace gsbmdpo::train {

// One on-policy batch laid out time-major: record t * num_envs + e.
struct RolloutBuffer {
  RolloutBuffer() = default;
  RolloutBuffer(std::size_t num_envs, std::size_t length, std::size_t state_dim,
                std::size_t action_dim);

  std::size_t num_envs = 0;
  std::size_t length = 0;

  Array observations;                          // normalized, [cap, state_dim]
  Array raw_observations;                      // [cap, state_dim]
  Array actions;                               // policy output before env clipping
  std::vector<policy::GenerationPath> paths;   // generative actors
  std::vector<double> old_logp;                // Gaussian actors
  std::vector<double> rewards;
  std::vector<std::uint8_t> dones;
  std::vector<std::uint8_t> valid;
  std::vector<double> values;
  std::vector<double> bootstrap_values;        // per env, after the last step
  std::vector<double> advantages;
  std::vector<double> returns;

  std::size_t filled = 0;
  std::uint64_t generation = 0;

  std::size_t capacity() const { return num_envs * length; }
  std::size_t index(std::size_t t, std::size_t e) const { return t * num_envs + e; }
  bool full() const { return filled == capacity(); }
  void clear();

  // Hash over everything the ratio denominators depend on.
  std::uint64_t fingerprint() const;
};

struct ActorStep {
  double loss = 0.0;
  double drift_cost = 0.0;
  double step_clip_fraction = 0.0;
  double path_clip_fraction = 0.0;
  double mean_abs_path_log_ratio = 0.0;
  double grad_norm = 0.0;
};

// Policy side of an on-policy learner. Implementations own their parameters
// and optimizer.
class Actor {
 public:
  virtual ~Actor() = default;

  virtual std::string algo() const = 0;
  virtual std::size_t state_dim() const = 0;
  virtual std::size_t action_dim() const = 0;

  // Samples one action per row of obs and records whatever the update needs
  // into buffer rows [offset, offset + obs.rows()). ok[i] is false when row i
  // could not be sampled with finite values.
  virtual Array act(const Array& obs, std::span<Rng> rngs, RolloutBuffer& buf,
                    std::size_t offset, std::vector<bool>& ok) = 0;
  virtual Array act_eval(const Array& obs, std::span<Rng> rngs, bool deterministic) const = 0;

  // One gradient step on the listed records. Throws NumericError before
  // touching parameters if the loss is not finite.
  virtual ActorStep update(const RolloutBuffer& buf, std::span<const std::size_t> idx,
                           std::span<const double> advantages, double lr) = 0;

  virtual std::uint64_t parameter_hash() const = 0;
  virtual void save(Checkpoint& ckpt) const = 0;
  virtual void load(const Checkpoint& ckpt) = 0;
};

struct GsbActorConfig {
  policy::DriftFieldConfig field;
  policy::NoiseSchedule schedule;
  objective::ObjectiveConfig objective;
  objective::ClipConfig clip;
  double grad_clip_norm = 1.0;
};

class GsbActor final : public Actor {
 public:
  GsbActor(const GsbActorConfig& cfg, Rng& init_rng);
  GsbActor(const GsbActor&) = delete;
  GsbActor& operator=(const GsbActor&) = delete;

  std::string algo() const override { return "gsb-mdpo"; }
  std::size_t state_dim() const override { return cfg_.field.state_dim; }
  std::size_t action_dim() const override { return cfg_.field.action_dim; }

  Array act(const Array& obs, std::span<Rng> rngs, RolloutBuffer& buf, std::size_t offset,
            std::vector<bool>& ok) override;
  Array act_eval(const Array& obs, std::span<Rng> rngs, bool deterministic) const override;
  ActorStep update(const RolloutBuffer& buf, std::span<const std::size_t> idx,
                   std::span<const double> advantages, double lr) override;

  std::uint64_t parameter_hash() const override;
  void save(Checkpoint& ckpt) const override;
  void load(const Checkpoint& ckpt) override;

  const GsbActorConfig& config() const { return cfg_; }
  policy::DriftField& field() { return field_; }
  const policy::DriftField& field() const { return field_; }

  // Loss and gradients on a batch without an optimizer step; parameter
  // gradients are left in place.
  objective::MdpoDiagnostics loss_and_grad(const RolloutBuffer& buf,
                                           std::span<const std::size_t> idx,
                                           std::span<const double> advantages);

 private:
  GsbActorConfig cfg_;
  policy::DriftField field_;
  std::vector<diff::Parameter*> params_;
  diff::Adam opt_;
};

struct TrainConfig {
  std::string algo = "gsb-mdpo";
  std::string env = "PointMass2D";
  std::uint64_t seed = 0;

  std::size_t total_env_steps = 200000;
  std::size_t num_envs = 64;
  std::size_t rollout_length = 24;
  std::size_t epochs = 4;
  std::size_t minibatches = 4;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  bool normalize_observations = true;
  bool normalize_advantages = true;
  double grad_clip_norm = 1.0;

  double kl_coef = 0.08;
  double reference_mix = 0.02;
  double c_step = 0.1;
  double c_path = 0.4;
  bool clip_ratios = true;

  double actor_lr = 7.5e-4;
  double critic_lr = 1e-3;
  bool cosine_schedule = true;

  std::size_t generation_steps = 16;
  std::string sigma_schedule = "linear";
  double sigma_max = 3.0;
  double sigma_min = 0.3;
  bool sigma_increasing = false;
  std::size_t time_embed_dim = 16;
  double output_scale = 0.25;
  std::vector<std::size_t> actor_hidden = {64, 64};
  std::string actor_activation = "silu";
  std::vector<std::size_t> critic_hidden = {64, 64};
  std::string critic_activation = "elu";

  double ppo_clip = 0.2;
  double ppo_init_log_std = 0.0;

  std::size_t eval_interval = 50000;
  std::size_t eval_episodes = 10;
  bool deterministic_eval = true;
  std::size_t checkpoint_interval = 0;  // in updates; 0 keeps only the latest

  void validate() const;
  std::size_t batch_size() const { return num_envs * rollout_length; }
  policy::NoiseSchedule schedule() const;
  GsbActorConfig gsb_actor_config(std::size_t state_dim, std::size_t action_dim) const;
};

struct Diagnostics {
  std::size_t iteration = 0;
  std::size_t env_steps = 0;
  double mean_return = 0.0;          // NaN when no episode finished this rollout
  double mean_episode_length = 0.0;  // NaN likewise
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double drift_cost = 0.0;
  double step_clip_fraction = 0.0;
  double path_clip_fraction = 0.0;
  double mean_abs_path_log_ratio = 0.0;
  double learning_rate = 0.0;
  std::size_t nonfinite_paths = 0;
  std::size_t aborted_updates = 0;   // cumulative
  double first_actor_grad_norm = 0.0;
  bool aborted = false;
};

struct EvalResult {
  double mean_return = 0.0;
  double mean_episode_length = 0.0;
  double mean_final_distance = 0.0;
  std::vector<double> returns;
  std::vector<double> final_distances;
};

// Runs `episodes` full-horizon episodes in parallel from env seed
// `env_seed`, acting with policy rngs derived from `policy_seed`.
EvalResult evaluate(const Actor& actor, const critic::RunningNormalizer& normalizer,
                    const std::string& env_name, std::size_t episodes, bool deterministic,
                    std::uint64_t env_seed, std::uint64_t policy_seed);
EvalResult evaluate(const Actor& actor, const critic::RunningNormalizer& normalizer,
                    envs::VecEnv& env, bool deterministic, std::uint64_t env_seed,
                    std::uint64_t policy_seed);

struct ModeCoverage {
  std::vector<double> fractions;  // one per goal
  std::size_t covered = 0;        // goals holding at least min_fraction
};

// Stochastic actions at the MultiGoalReach start state, binned by goal
// sector.
ModeCoverage goal_mode_coverage(const Actor& actor, const critic::RunningNormalizer& normalizer,
                                std::size_t samples, std::uint64_t seed,
                                double min_fraction = 0.1);

std::unique_ptr<Actor> make_actor(const TrainConfig& cfg, std::size_t state_dim,
                                  std::size_t action_dim, Rng& init_rng);

// Append-only CSV plus mirrored JSONL.
class MetricsWriter {
 public:
  static const std::vector<std::string>& columns();

  MetricsWriter() = default;
  // Opens (appending when resume is set) <dir>/metrics.csv and metrics.jsonl.
  MetricsWriter(const std::filesystem::path& dir, bool resume);

  void write_update(const TrainConfig& cfg, const Diagnostics& d, double wall_clock);
  void write_eval(const TrainConfig& cfg, std::size_t iteration, std::size_t env_steps,
                  const EvalResult& r, double wall_clock);
  bool is_open() const { return csv_.is_open(); }

 private:
  void emit(const std::vector<std::optional<double>>& numbers, const TrainConfig& cfg,
            const std::string& kind);
  std::ofstream csv_;
  std::ofstream jsonl_;
};

class Trainer {
 public:
  explicit Trainer(TrainConfig cfg);
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  const TrainConfig& config() const { return cfg_; }
  Actor& actor() { return *actor_; }
  const Actor& actor() const { return *actor_; }
  critic::ValueNet& value_net() { return critic_; }
  const critic::RunningNormalizer& normalizer() const { return normalizer_; }
  envs::VecEnv& env() { return *env_; }
  RolloutBuffer& buffer() { return buffer_; }
  const RolloutBuffer& buffer() const { return buffer_; }
  std::size_t env_steps() const { return env_steps_; }
  std::size_t iteration() const { return iteration_; }
  bool finished() const { return env_steps_ >= cfg_.total_env_steps; }

  // Fills the buffer under the current (frozen) policy and normalizer.
  void collect();
  // GAE plus full-batch advantage normalization.
  void compute_advantages();
  // Epoch/minibatch loop on the collected buffer.
  Diagnostics update();
  // collect, compute_advantages, update; bumps counters.
  Diagnostics iterate();

  EvalResult evaluate_now() const;
  bool eval_due() const;

  // Loop until the budget is spent. Writes metrics and checkpoints into
  // out_dir when it is non-empty.
  void train(const std::filesystem::path& out_dir = {},
             std::optional<std::size_t> stop_after_iterations = std::nullopt);

  void save(const std::filesystem::path& path) const;
  static std::unique_ptr<Trainer> load(const std::filesystem::path& path);

 private:
  void restore(const Checkpoint& ckpt);

  TrainConfig cfg_;
  std::unique_ptr<envs::VecEnv> env_;
  std::unique_ptr<Actor> actor_;
  critic::ValueNet critic_;
  std::vector<diff::Parameter*> critic_params_;
  diff::Adam critic_opt_;
  critic::RunningNormalizer normalizer_;
  RolloutBuffer buffer_;
  Array current_obs_;
  std::vector<Rng> policy_rngs_;
  Rng shuffle_rng_;
  std::vector<double> episode_return_;
  std::vector<std::size_t> episode_length_;
  std::vector<double> finished_returns_;
  std::vector<std::size_t> finished_lengths_;
  std::size_t env_steps_ = 0;
  std::size_t iteration_ = 0;
  std::size_t evaluations_ = 0;
  std::size_t next_eval_ = 0;
  std::size_t last_eval_steps_ = 0;
  std::size_t aborted_updates_ = 0;
  std::uint64_t consumed_generation_ = 0;
  double wall_clock_ = 0.0;
};

// FNV-1a over raw bytes.
std::uint64_t hash_bytes(const void* data, std::size_t size, std::uint64_t seed);
std::uint64_t hash_parameters(std::span<const diff::Parameter> params, std::uint64_t seed);

}  // namespace gsbmdpo::train
