#include "gsbmdpo/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "gsbmdpo/baseline.hpp"
#include "gsbmdpo/config.hpp"

namespace gsbmdpo::train {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Stream indices for the independent random sources of a run.
enum Stream : std::uint64_t {
  kEnvStream = 1,
  kPolicyStream = 2,
  kShuffleStream = 3,
  kInitStream = 4,
  kEvalEnvStream = 5,
  kEvalPolicyStream = 6,
};

std::uint64_t derived_seed(std::uint64_t seed, Stream s) {
  return Rng::stream(seed, s).next_u64();
}

std::vector<Rng> rng_streams(std::uint64_t seed, std::size_t n) {
  std::vector<Rng> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(Rng::stream(seed, i));
  return out;
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return kNaN;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

void zero_row(Array& a, std::size_t r) {
  for (auto& v : a.row(r)) v = 0.0;
}

}  // namespace

std::uint64_t hash_bytes(const void* data, std::size_t size, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed ^ 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t hash_parameters(std::span<const diff::Parameter> params, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (const auto& p : params) h = hash_bytes(p.value.data(), p.value.size() * sizeof(double), h);
  return h;
}

// RolloutBuffer

RolloutBuffer::RolloutBuffer(std::size_t envs, std::size_t len, std::size_t state_dim,
                             std::size_t action_dim)
    : num_envs(envs),
      length(len),
      observations(Array::matrix(envs * len, state_dim)),
      raw_observations(Array::matrix(envs * len, state_dim)),
      actions(Array::matrix(envs * len, action_dim)),
      paths(envs * len),
      old_logp(envs * len, 0.0),
      rewards(envs * len, 0.0),
      dones(envs * len, 0),
      valid(envs * len, 0),
      values(envs * len, 0.0),
      bootstrap_values(envs, 0.0),
      advantages(envs * len, 0.0),
      returns(envs * len, 0.0) {}

void RolloutBuffer::clear() {
  filled = 0;
  std::fill(valid.begin(), valid.end(), 0);
}

std::uint64_t RolloutBuffer::fingerprint() const {
  auto mix = [](std::uint64_t h, const auto& v) {
    return hash_bytes(v.data(), v.size() * sizeof(v[0]), h);
  };
  std::uint64_t h = generation;
  h = mix(h, observations.values());
  h = mix(h, actions.values());
  h = mix(h, old_logp);
  h = mix(h, advantages);
  h = mix(h, returns);
  h = mix(h, valid);
  for (const auto& p : paths) {
    h = mix(h, p.nodes.values());
    h = mix(h, p.old_drifts.values());
    h = mix(h, p.old_logp);
  }
  return h;
}

// GsbActor

GsbActor::GsbActor(const GsbActorConfig& cfg, Rng& init_rng)
    : cfg_(cfg), field_(cfg.field, init_rng) {
  cfg_.schedule.validate();
  cfg_.objective.validate();
  cfg_.clip.validate();
  params_ = field_.net().parameter_ptrs();
  opt_ = diff::Adam(params_);
}

Array GsbActor::act(const Array& obs, std::span<Rng> rngs, RolloutBuffer& buf,
                    std::size_t offset, std::vector<bool>& ok) {
  auto paths = policy::sample_paths(field_, cfg_.schedule, obs, rngs, &ok);
  Array actions = Array::matrix(paths.size(), action_dim());
  for (std::size_t i = 0; i < paths.size(); ++i) {
    if (ok[i]) {
      const auto a = paths[i].terminal();
      std::copy(a.begin(), a.end(), actions.row(i).begin());
    }
    std::copy(actions.row(i).begin(), actions.row(i).end(), buf.actions.row(offset + i).begin());
    buf.paths[offset + i] = std::move(paths[i]);
  }
  return actions;
}

Array GsbActor::act_eval(const Array& obs, std::span<Rng> rngs, bool deterministic) const {
  const std::size_t b = rngs.size();
  const std::size_t d = action_dim();
  Array actions = Array::matrix(b, d);
  if (deterministic) {
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < d; ++j) actions.at(i, j) = rngs[i].normal();
    }
    for (std::size_t n = 0; n < cfg_.schedule.steps; ++n) {
      const double dt = cfg_.schedule.dt(n);
      const Array f = field_.evaluate(obs, actions, cfg_.schedule.time(n));
      for (std::size_t k = 0; k < actions.size(); ++k) actions[k] += dt * f[k];
    }
    for (std::size_t i = 0; i < b; ++i) {
      const auto row = actions.row(i);
      if (!std::all_of(row.begin(), row.end(), [](double v) { return std::isfinite(v); })) {
        zero_row(actions, i);
      }
    }
    return actions;
  }
  std::vector<bool> ok;
  const auto paths = policy::sample_paths(field_, cfg_.schedule, obs, rngs, &ok);
  for (std::size_t i = 0; i < b; ++i) {
    if (!ok[i]) continue;
    const auto a = paths[i].terminal();
    std::copy(a.begin(), a.end(), actions.row(i).begin());
  }
  return actions;
}

objective::MdpoDiagnostics GsbActor::loss_and_grad(const RolloutBuffer& buf,
                                                   std::span<const std::size_t> idx,
                                                   std::span<const double> advantages) {
  if (idx.size() != advantages.size()) throw ShapeError("gsb update: batch misaligned");
  const std::size_t b = idx.size();
  const std::size_t steps = cfg_.schedule.steps;
  const std::size_t d = action_dim();

  std::vector<std::span<const double>> states(b);
  std::vector<const policy::GenerationPath*> paths(b);
  Array old_logp = Array::matrix(b * steps, 1);
  Array old_drifts = Array::matrix(b * steps, d);
  for (std::size_t p = 0; p < b; ++p) {
    states[p] = buf.observations.row(idx[p]);
    const auto& path = buf.paths[idx[p]];
    paths[p] = &path;
    for (std::size_t n = 0; n < steps; ++n) {
      old_logp[p * steps + n] = path.old_logp[n];
      for (std::size_t j = 0; j < d; ++j) old_drifts.at(p * steps + n, j) = path.old_drifts.at(n, j);
    }
  }

  field_.net().zero_grad();
  diff::Tape tape;
  const auto batch = policy::recompute_on_paths(tape, field_, cfg_.schedule, states, paths);
  auto out = objective::mdpo_loss(tape, batch.step_logp, batch.drifts, old_logp, old_drifts,
                                  advantages, cfg_.schedule, cfg_.objective, cfg_.clip);
  if (!std::isfinite(out.diag.loss)) throw NumericError("gsb update: non-finite loss");
  tape.backward(out.loss);
  return out.diag;
}

ActorStep GsbActor::update(const RolloutBuffer& buf, std::span<const std::size_t> idx,
                           std::span<const double> advantages, double lr) {
  const auto diag = loss_and_grad(buf, idx, advantages);
  ActorStep step;
  step.loss = diag.loss;
  step.drift_cost = diag.mean_drift_cost;
  step.step_clip_fraction = diag.step_clip_fraction;
  step.path_clip_fraction = diag.path_clip_fraction;
  step.mean_abs_path_log_ratio = diag.mean_abs_path_log_ratio;
  step.grad_norm = diff::clip_grad_norm(params_, cfg_.grad_clip_norm);
  if (!std::isfinite(step.grad_norm)) throw NumericError("gsb update: non-finite gradient");
  opt_.step(lr);
  return step;
}

std::uint64_t GsbActor::parameter_hash() const {
  return hash_parameters(field_.net().parameters(), 1);
}

void GsbActor::save(Checkpoint& ckpt) const {
  ckpt.put_mlp("actor/drift", field_.net());
  ckpt.put_adam("actor/opt", opt_);
}

void GsbActor::load(const Checkpoint& ckpt) {
  ckpt.load_mlp("actor/drift", field_.net());
  ckpt.load_adam("actor/opt", opt_);
}

// TrainConfig

void TrainConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw std::invalid_argument(key + ": " + why);
  };
  if (algo != "gsb-mdpo" && algo != "ppo") fail("algo", "must be gsb-mdpo or ppo");
  if (num_envs < 1) fail("num_envs", "must be >= 1");
  if (rollout_length < 1) fail("rollout_length", "must be >= 1");
  if (total_env_steps < 1) fail("total_env_steps", "must be >= 1");
  if (epochs < 1) fail("epochs", "must be >= 1");
  if (minibatches < 1) fail("minibatches", "must be >= 1");
  if (batch_size() % minibatches != 0) {
    fail("minibatches", "must divide num_envs * rollout_length = " +
                            std::to_string(batch_size()));
  }
  if (!(gamma > 0.0 && gamma <= 1.0)) fail("gamma", "must lie in (0, 1]");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) fail("gae_lambda", "must lie in [0, 1]");
  if (!(grad_clip_norm > 0.0)) fail("grad_clip_norm", "must be positive");
  if (!(kl_coef >= 0.0) || !std::isfinite(kl_coef)) fail("kl_coef", "must be >= 0");
  if (!(reference_mix >= 0.0 && reference_mix <= 1.0)) fail("reference_mix", "must lie in [0, 1]");
  if (!(c_step > 0.0)) fail("c_step", "must be positive");
  if (!(c_path > 0.0)) fail("c_path", "must be positive");
  if (!(actor_lr >= 0.0) || !std::isfinite(actor_lr)) fail("actor_lr", "must be >= 0");
  if (!(critic_lr >= 0.0) || !std::isfinite(critic_lr)) fail("critic_lr", "must be >= 0");
  if (generation_steps < 1) fail("generation_steps", "must be >= 1");
  try {
    (void)policy::schedule_kind_from_string(sigma_schedule);
  } catch (const std::invalid_argument&) {
    fail("sigma_schedule", "must be constant, linear or exponential");
  }
  if (!(sigma_max > 0.0)) fail("sigma_max", "must be positive");
  if (!(sigma_min > 0.0)) fail("sigma_min", "must be positive");
  if (!(output_scale > 0.0)) fail("output_scale", "must be positive");
  for (auto w : actor_hidden) {
    if (w == 0) fail("actor_hidden", "widths must be >= 1");
  }
  for (auto w : critic_hidden) {
    if (w == 0) fail("critic_hidden", "widths must be >= 1");
  }
  try {
    (void)diff::activation_from_string(actor_activation);
  } catch (const std::invalid_argument&) {
    fail("actor_activation", "must be tanh, silu or elu");
  }
  try {
    (void)diff::activation_from_string(critic_activation);
  } catch (const std::invalid_argument&) {
    fail("critic_activation", "must be tanh, silu or elu");
  }
  if (!(ppo_clip > 0.0)) fail("ppo_clip", "must be positive");
  if (!(ppo_init_log_std >= baseline::kLogStdMin && ppo_init_log_std <= baseline::kLogStdMax)) {
    fail("ppo_init_log_std", "must lie in [-5, 2]");
  }
  if (eval_interval < 1) fail("eval_interval", "must be >= 1");
  if (eval_episodes < 1) fail("eval_episodes", "must be >= 1");
}

policy::NoiseSchedule TrainConfig::schedule() const {
  policy::NoiseSchedule s;
  s.kind = policy::schedule_kind_from_string(sigma_schedule);
  s.sigma_max = sigma_max;
  s.sigma_min = sigma_min;
  s.steps = generation_steps;
  s.increasing = sigma_increasing;
  return s;
}

GsbActorConfig TrainConfig::gsb_actor_config(std::size_t state_dim,
                                             std::size_t action_dim) const {
  GsbActorConfig c;
  c.field.state_dim = state_dim;
  c.field.action_dim = action_dim;
  c.field.time_dim = time_embed_dim;
  c.field.hidden = actor_hidden;
  c.field.activation = diff::activation_from_string(actor_activation);
  c.field.output_scale = output_scale;
  c.schedule = schedule();
  c.objective.kl_coef = kl_coef;
  c.objective.reference_mix = reference_mix;
  c.objective.normalize_advantages = normalize_advantages;
  c.clip.c_step = c_step;
  c.clip.c_path = c_path;
  c.clip.enabled = clip_ratios;
  c.grad_clip_norm = grad_clip_norm;
  return c;
}

ModeCoverage goal_mode_coverage(const Actor& actor, const critic::RunningNormalizer& normalizer,
                                std::size_t samples, std::uint64_t seed, double min_fraction) {
  if (actor.state_dim() != 2 || actor.action_dim() != 2) {
    throw ShapeError("goal_mode_coverage: expects a MultiGoalReach actor");
  }
  const Array obs = normalizer.normalize(Array::matrix(samples, 2));
  std::vector<Rng> rngs;
  rngs.reserve(samples);
  for (std::size_t i = 0; i < samples; ++i) rngs.push_back(Rng::stream(seed, i));
  const Array actions = actor.act_eval(obs, rngs, false);
  ModeCoverage out;
  out.fractions.assign(envs::MultiGoalReach::kGoals, 0.0);
  for (std::size_t i = 0; i < samples; ++i) {
    out.fractions[envs::MultiGoalReach::goal_sector(actions.row(i))] +=
        1.0 / static_cast<double>(samples);
  }
  for (double f : out.fractions) {
    if (f >= min_fraction) ++out.covered;
  }
  return out;
}

std::unique_ptr<Actor> make_actor(const TrainConfig& cfg, std::size_t state_dim,
                                  std::size_t action_dim, Rng& init_rng) {
  if (cfg.algo == "gsb-mdpo") {
    return std::make_unique<GsbActor>(cfg.gsb_actor_config(state_dim, action_dim), init_rng);
  }
  if (cfg.algo == "ppo") {
    baseline::PpoActorConfig pc;
    pc.hidden = cfg.actor_hidden;
    pc.activation = diff::activation_from_string(cfg.actor_activation);
    pc.init_log_std = cfg.ppo_init_log_std;
    pc.eps_clip = cfg.ppo_clip;
    pc.grad_clip_norm = cfg.grad_clip_norm;
    return std::make_unique<baseline::PpoActor>(state_dim, action_dim, pc, init_rng);
  }
  throw std::invalid_argument("unknown algorithm '" + cfg.algo + "'");
}

// Evaluation

EvalResult evaluate(const Actor& actor, const critic::RunningNormalizer& normalizer,
                    envs::VecEnv& env, bool deterministic, std::uint64_t env_seed,
                    std::uint64_t policy_seed) {
  const std::size_t n = env.num_envs();
  auto rngs = rng_streams(policy_seed, n);
  Array obs = env.reset(env_seed);
  EvalResult out;
  out.returns.assign(n, 0.0);
  out.final_distances.assign(n, 0.0);
  std::vector<std::uint8_t> finished(n, 0);
  std::vector<std::size_t> lengths(n, 0);
  while (!std::all_of(finished.begin(), finished.end(), [](std::uint8_t f) { return f != 0; })) {
    const Array actions = actor.act_eval(normalizer.normalize(obs), rngs, deterministic);
    auto step = env.step(actions);
    for (std::size_t i = 0; i < n; ++i) {
      if (finished[i]) continue;
      out.returns[i] += step.rewards[i];
      ++lengths[i];
      if (step.dones[i]) {
        finished[i] = 1;
        out.final_distances[i] = step.final_distance[i];
      }
    }
    obs = std::move(step.observations);
  }
  out.mean_return = mean_of(out.returns);
  out.mean_final_distance = mean_of(out.final_distances);
  double len = 0.0;
  for (auto l : lengths) len += static_cast<double>(l);
  out.mean_episode_length = len / static_cast<double>(n);
  return out;
}

EvalResult evaluate(const Actor& actor, const critic::RunningNormalizer& normalizer,
                    const std::string& env_name, std::size_t episodes, bool deterministic,
                    std::uint64_t env_seed, std::uint64_t policy_seed) {
  if (episodes < 1) throw std::invalid_argument("evaluate: episodes must be >= 1");
  auto env = envs::make_env(env_name, episodes);
  return evaluate(actor, normalizer, *env, deterministic, env_seed, policy_seed);
}

// MetricsWriter

const std::vector<std::string>& MetricsWriter::columns() {
  static const std::vector<std::string> cols{
      "kind",          "algo",
      "env",           "seed",
      "iteration",     "env_steps",
      "wall_clock_s",  "mean_return",
      "mean_episode_length", "policy_loss",
      "value_loss",    "drift_cost",
      "step_clip_fraction", "path_clip_fraction",
      "mean_abs_path_log_ratio", "learning_rate",
      "nonfinite_paths", "aborted_updates",
      "eval_return",   "eval_episode_length",
      "eval_final_distance", "eval_deterministic"};
  return cols;
}

MetricsWriter::MetricsWriter(const std::filesystem::path& dir, bool resume) {
  std::filesystem::create_directories(dir);
  const auto csv_path = dir / "metrics.csv";
  const bool fresh = !resume || !std::filesystem::exists(csv_path);
  const auto mode = fresh ? std::ios::out | std::ios::trunc : std::ios::out | std::ios::app;
  csv_.open(csv_path, mode);
  jsonl_.open(dir / "metrics.jsonl", mode);
  if (!csv_ || !jsonl_) throw std::runtime_error("cannot open metrics files in " + dir.string());
  if (fresh) {
    const auto& cols = columns();
    for (std::size_t i = 0; i < cols.size(); ++i) csv_ << (i ? "," : "") << cols[i];
    csv_ << '\n';
    csv_.flush();
  }
}

void MetricsWriter::emit(const std::vector<std::optional<double>>& numbers,
                         const TrainConfig& cfg, const std::string& kind) {
  const auto& cols = columns();
  nlohmann::json row;
  row["kind"] = kind;
  row["algo"] = cfg.algo;
  row["env"] = cfg.env;
  csv_ << kind << ',' << cfg.algo << ',' << cfg.env;
  char buf[64];
  for (std::size_t i = 0; i < numbers.size(); ++i) {
    const auto& name = cols[i + 3];
    csv_ << ',';
    if (numbers[i] && std::isfinite(*numbers[i])) {
      std::snprintf(buf, sizeof buf, "%.17g", *numbers[i]);
      csv_ << buf;
      row[name] = *numbers[i];
    } else if (numbers[i]) {
      csv_ << "nan";
      row[name] = nullptr;
    } else {
      row[name] = nullptr;
    }
  }
  csv_ << '\n';
  csv_.flush();
  jsonl_ << row.dump() << '\n';
  jsonl_.flush();
}

void MetricsWriter::write_update(const TrainConfig& cfg, const Diagnostics& d,
                                 double wall_clock) {
  emit({static_cast<double>(cfg.seed), static_cast<double>(d.iteration),
        static_cast<double>(d.env_steps), wall_clock, d.mean_return, d.mean_episode_length,
        d.policy_loss, d.value_loss, d.drift_cost, d.step_clip_fraction, d.path_clip_fraction,
        d.mean_abs_path_log_ratio, d.learning_rate, static_cast<double>(d.nonfinite_paths),
        static_cast<double>(d.aborted_updates), std::nullopt, std::nullopt, std::nullopt,
        std::nullopt},
       cfg, "update");
}

void MetricsWriter::write_eval(const TrainConfig& cfg, std::size_t iteration,
                               std::size_t env_steps, const EvalResult& r, double wall_clock) {
  emit({static_cast<double>(cfg.seed), static_cast<double>(iteration),
        static_cast<double>(env_steps), wall_clock, std::nullopt, std::nullopt, std::nullopt,
        std::nullopt, std::nullopt, std::nullopt, std::nullopt, std::nullopt, std::nullopt,
        std::nullopt, std::nullopt, r.mean_return, r.mean_episode_length,
        r.mean_final_distance, cfg.deterministic_eval ? 1.0 : 0.0},
       cfg, "eval");
}

// Trainer

Trainer::Trainer(TrainConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  env_ = envs::make_env(cfg_.env, cfg_.num_envs);
  const auto& spec = env_->spec();
  Rng init = Rng::stream(cfg_.seed, kInitStream);
  actor_ = make_actor(cfg_, spec.state_dim, spec.action_dim, init);
  critic_ = critic::ValueNet(spec.state_dim, cfg_.critic_hidden,
                             diff::activation_from_string(cfg_.critic_activation), init);
  critic_params_ = critic_.net().parameter_ptrs();
  critic_opt_ = diff::Adam(critic_params_);
  normalizer_ = critic::RunningNormalizer(spec.state_dim);
  buffer_ = RolloutBuffer(cfg_.num_envs, cfg_.rollout_length, spec.state_dim, spec.action_dim);
  current_obs_ = env_->reset(derived_seed(cfg_.seed, kEnvStream));
  policy_rngs_ = rng_streams(derived_seed(cfg_.seed, kPolicyStream), cfg_.num_envs);
  shuffle_rng_ = Rng::stream(cfg_.seed, kShuffleStream);
  episode_return_.assign(cfg_.num_envs, 0.0);
  episode_length_.assign(cfg_.num_envs, 0);
  next_eval_ = cfg_.eval_interval;
}

void Trainer::collect() {
  const std::size_t n_env = cfg_.num_envs;
  const auto& spec = env_->spec();
  if (current_obs_.rows() != n_env || current_obs_.cols() != spec.state_dim ||
      actor_->state_dim() != spec.state_dim || actor_->action_dim() != spec.action_dim) {
    throw ShapeError("collect: environment and policy dimensions disagree");
  }
  buffer_.clear();
  ++buffer_.generation;
  std::vector<bool> ok;
  for (std::size_t t = 0; t < cfg_.rollout_length; ++t) {
    const std::size_t offset = t * n_env;
    const Array norm = cfg_.normalize_observations ? normalizer_.normalize(current_obs_)
                                                   : current_obs_;
    const auto values = critic_.predict(norm);
    Array actions = actor_->act(norm, policy_rngs_, buffer_, offset, ok);
    auto step = env_->step(actions);
    for (std::size_t e = 0; e < n_env; ++e) {
      const std::size_t r = offset + e;
      std::copy(norm.row(e).begin(), norm.row(e).end(), buffer_.observations.row(r).begin());
      std::copy(current_obs_.row(e).begin(), current_obs_.row(e).end(),
                buffer_.raw_observations.row(r).begin());
      buffer_.rewards[r] = step.rewards[e];
      buffer_.dones[r] = step.dones[e];
      buffer_.values[r] = values[e];
      buffer_.valid[r] = ok[e] ? 1 : 0;
      episode_return_[e] += step.rewards[e];
      ++episode_length_[e];
      if (step.dones[e]) {
        finished_returns_.push_back(episode_return_[e]);
        finished_lengths_.push_back(episode_length_[e]);
        episode_return_[e] = 0.0;
        episode_length_[e] = 0;
      }
    }
    current_obs_ = std::move(step.observations);
    buffer_.filled += n_env;
  }
  const Array norm = cfg_.normalize_observations ? normalizer_.normalize(current_obs_)
                                                 : current_obs_;
  buffer_.bootstrap_values = critic_.predict(norm);
  if (cfg_.normalize_observations) normalizer_.update(buffer_.raw_observations);
  env_steps_ += buffer_.capacity();
}

void Trainer::compute_advantages() {
  if (!buffer_.full()) throw std::logic_error("compute_advantages: buffer is not full");
  const std::size_t n_env = cfg_.num_envs;
  const std::size_t len = cfg_.rollout_length;
  const critic::GaeConfig gcfg{cfg_.gamma, cfg_.gae_lambda};
  std::vector<double> rewards(len), values(len + 1);
  std::vector<std::uint8_t> dones(len);
  for (std::size_t e = 0; e < n_env; ++e) {
    for (std::size_t t = 0; t < len; ++t) {
      const std::size_t r = buffer_.index(t, e);
      rewards[t] = buffer_.rewards[r];
      values[t] = buffer_.values[r];
      dones[t] = buffer_.dones[r];
    }
    values[len] = buffer_.bootstrap_values[e];
    const auto g = critic::gae(rewards, values, dones, gcfg);
    for (std::size_t t = 0; t < len; ++t) {
      buffer_.advantages[buffer_.index(t, e)] = g.advantages[t];
      buffer_.returns[buffer_.index(t, e)] = g.returns[t];
    }
  }
  if (!cfg_.normalize_advantages) return;
  std::vector<double> adv;
  adv.reserve(buffer_.capacity());
  for (std::size_t r = 0; r < buffer_.capacity(); ++r) {
    if (buffer_.valid[r]) adv.push_back(buffer_.advantages[r]);
  }
  objective::normalize_advantages(adv);
  std::size_t k = 0;
  for (std::size_t r = 0; r < buffer_.capacity(); ++r) {
    buffer_.advantages[r] = buffer_.valid[r] ? adv[k++] : 0.0;
  }
}

Diagnostics Trainer::update() {
  if (!buffer_.full()) throw std::logic_error("update: buffer is not full");
  if (buffer_.generation != consumed_generation_ + 1) {
    throw std::logic_error("update: rollout generation " + std::to_string(buffer_.generation) +
                           " was already consumed or skipped");
  }
  consumed_generation_ = buffer_.generation;
  const std::uint64_t snapshot = buffer_.fingerprint();

  Diagnostics d;
  d.env_steps = env_steps_;
  const double consumed = static_cast<double>(env_steps_ - buffer_.capacity());
  const double progress =
      std::clamp(consumed / static_cast<double>(cfg_.total_env_steps), 0.0, 1.0);
  d.learning_rate = cfg_.cosine_schedule ? diff::cosine_lr(cfg_.actor_lr, progress)
                                         : cfg_.actor_lr;

  std::vector<std::size_t> indices;
  for (std::size_t r = 0; r < buffer_.capacity(); ++r) {
    if (buffer_.valid[r]) indices.push_back(r);
  }
  d.nonfinite_paths = buffer_.capacity() - indices.size();

  std::size_t steps_done = 0;
  const std::size_t mb = (indices.size() + cfg_.minibatches - 1) / cfg_.minibatches;
  std::vector<double> adv;
  std::vector<double> targets;
  for (std::size_t epoch = 0; epoch < cfg_.epochs && !d.aborted && mb > 0; ++epoch) {
    std::shuffle(indices.begin(), indices.end(), shuffle_rng_.engine());
    for (std::size_t start = 0; start < indices.size(); start += mb) {
      const std::size_t stop = std::min(indices.size(), start + mb);
      const std::span<const std::size_t> idx(indices.data() + start, stop - start);
      adv.resize(idx.size());
      targets.resize(idx.size());
      Array states = Array::matrix(idx.size(), buffer_.observations.cols());
      for (std::size_t i = 0; i < idx.size(); ++i) {
        adv[i] = buffer_.advantages[idx[i]];
        targets[i] = buffer_.returns[idx[i]];
        const auto row = buffer_.observations.row(idx[i]);
        std::copy(row.begin(), row.end(), states.row(i).begin());
      }

      ActorStep a;
      double vloss = 0.0;
      try {
        a = actor_->update(buffer_, idx, adv, d.learning_rate);
        critic_.net().zero_grad();
        diff::Tape tape;
        const auto loss = critic::value_loss(tape, critic_, states, targets);
        vloss = loss.item();
        if (!std::isfinite(vloss)) throw NumericError("update: non-finite value loss");
        tape.backward(loss);
        diff::clip_grad_norm(critic_params_, cfg_.grad_clip_norm);
        critic_opt_.step(cfg_.critic_lr);
      } catch (const NumericError&) {
        d.aborted = true;
        ++aborted_updates_;
        break;
      }
      if (steps_done == 0) d.first_actor_grad_norm = a.grad_norm;
      ++steps_done;
      d.policy_loss += a.loss;
      d.value_loss += vloss;
      d.drift_cost += a.drift_cost;
      d.step_clip_fraction += a.step_clip_fraction;
      d.path_clip_fraction += a.path_clip_fraction;
      d.mean_abs_path_log_ratio += a.mean_abs_path_log_ratio;
    }
  }
  if (steps_done > 0) {
    const double k = static_cast<double>(steps_done);
    d.policy_loss /= k;
    d.value_loss /= k;
    d.drift_cost /= k;
    d.step_clip_fraction /= k;
    d.path_clip_fraction /= k;
    d.mean_abs_path_log_ratio /= k;
  } else {
    d.policy_loss = d.value_loss = d.drift_cost = kNaN;
    d.mean_abs_path_log_ratio = kNaN;
  }
  if (buffer_.fingerprint() != snapshot) {
    throw std::logic_error("update: old-policy snapshot changed during the update");
  }
  d.aborted_updates = aborted_updates_;
  d.mean_return = mean_of(finished_returns_);
  std::vector<double> lengths(finished_lengths_.begin(), finished_lengths_.end());
  d.mean_episode_length = mean_of(lengths);
  finished_returns_.clear();
  finished_lengths_.clear();
  return d;
}

Diagnostics Trainer::iterate() {
  collect();
  compute_advantages();
  Diagnostics d = update();
  ++iteration_;
  d.iteration = iteration_;
  return d;
}

EvalResult Trainer::evaluate_now() const {
  return evaluate(*actor_, normalizer_, cfg_.env, cfg_.eval_episodes, cfg_.deterministic_eval,
                  derived_seed(cfg_.seed, kEvalEnvStream),
                  derived_seed(cfg_.seed, kEvalPolicyStream));
}

bool Trainer::eval_due() const {
  if (env_steps_ >= next_eval_) return true;
  return finished() && last_eval_steps_ != env_steps_;
}

void Trainer::train(const std::filesystem::path& out_dir,
                    std::optional<std::size_t> stop_after_iterations) {
  MetricsWriter writer;
  std::filesystem::path ckpt_dir;
  if (!out_dir.empty()) {
    writer = MetricsWriter(out_dir, iteration_ > 0);
    ckpt_dir = out_dir / "checkpoints";
    std::filesystem::create_directories(ckpt_dir);
  }
  const auto start = std::chrono::steady_clock::now();
  const double base_wall = wall_clock_;
  auto elapsed = [&] {
    return base_wall +
           std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };
  while (!finished()) {
    const Diagnostics d = iterate();
    wall_clock_ = elapsed();
    if (writer.is_open()) writer.write_update(cfg_, d, wall_clock_);
    if (eval_due()) {
      const EvalResult r = evaluate_now();
      ++evaluations_;
      last_eval_steps_ = env_steps_;
      while (next_eval_ <= env_steps_) next_eval_ += cfg_.eval_interval;
      wall_clock_ = elapsed();
      if (writer.is_open()) writer.write_eval(cfg_, iteration_, env_steps_, r, wall_clock_);
    }
    if (!ckpt_dir.empty()) {
      save(ckpt_dir / "latest.ckpt");
      if (cfg_.checkpoint_interval > 0 && iteration_ % cfg_.checkpoint_interval == 0) {
        save(ckpt_dir / ("iter_" + std::to_string(iteration_) + ".ckpt"));
      }
    }
    if (stop_after_iterations && iteration_ >= *stop_after_iterations) return;
  }
  if (!ckpt_dir.empty()) save(ckpt_dir / "final.ckpt");
}

void Trainer::save(const std::filesystem::path& path) const {
  Checkpoint ckpt;
  ckpt.meta["format"] = "gsbmdpo-trainer";
  ckpt.meta["config"] = config::to_json(cfg_);
  actor_->save(ckpt);
  ckpt.put_mlp("critic", critic_.net());
  ckpt.put_adam("critic/opt", critic_opt_);
  ckpt.meta["normalizer"]["count"] = normalizer_.count();
  ckpt.put("normalizer/mean", Array::vector(normalizer_.mean()));
  ckpt.put("normalizer/variance", Array::vector(normalizer_.variance()));
  env_->save(ckpt, "env");
  auto& rngs = ckpt.meta["rngs"];
  rngs["policy"] = nlohmann::json::array();
  for (const auto& r : policy_rngs_) rngs["policy"].push_back(r.state());
  rngs["shuffle"] = shuffle_rng_.state();
  ckpt.put("episodes/return", Array::vector(episode_return_));
  std::vector<double> lengths(episode_length_.begin(), episode_length_.end());
  ckpt.put("episodes/length", Array::vector(lengths));
  auto& counters = ckpt.meta["counters"];
  counters["env_steps"] = env_steps_;
  counters["iteration"] = iteration_;
  counters["evaluations"] = evaluations_;
  counters["next_eval"] = next_eval_;
  counters["last_eval_steps"] = last_eval_steps_;
  counters["aborted_updates"] = aborted_updates_;
  counters["generation"] = consumed_generation_;
  counters["wall_clock"] = wall_clock_;
  ckpt.save(path);
}

std::unique_ptr<Trainer> Trainer::load(const std::filesystem::path& path) {
  const Checkpoint ckpt = Checkpoint::load(path);
  if (ckpt.meta.value("format", "") != "gsbmdpo-trainer") {
    throw std::invalid_argument(path.string() + " is not a trainer checkpoint");
  }
  auto trainer = std::make_unique<Trainer>(config::from_json(ckpt.meta.at("config")));
  trainer->restore(ckpt);
  return trainer;
}

void Trainer::restore(const Checkpoint& ckpt) {
  actor_->load(ckpt);
  ckpt.load_mlp("critic", critic_.net());
  ckpt.load_adam("critic/opt", critic_opt_);
  normalizer_.set_state(ckpt.meta.at("normalizer").at("count").get<double>(),
                        ckpt.get("normalizer/mean").to_vector(),
                        ckpt.get("normalizer/variance").to_vector());
  env_->load(ckpt, "env");
  current_obs_ = env_->observations();
  const auto& rngs = ckpt.meta.at("rngs");
  const auto& policy = rngs.at("policy");
  if (policy.size() != policy_rngs_.size()) throw ShapeError("checkpoint: policy rng count");
  for (std::size_t i = 0; i < policy_rngs_.size(); ++i) {
    policy_rngs_[i].set_state(policy.at(i).get<std::string>());
  }
  shuffle_rng_.set_state(rngs.at("shuffle").get<std::string>());
  episode_return_ = ckpt.get("episodes/return").to_vector();
  const auto& lengths = ckpt.get("episodes/length").values();
  episode_length_.assign(lengths.begin(), lengths.end());
  const auto& c = ckpt.meta.at("counters");
  env_steps_ = c.at("env_steps").get<std::size_t>();
  iteration_ = c.at("iteration").get<std::size_t>();
  evaluations_ = c.at("evaluations").get<std::size_t>();
  next_eval_ = c.at("next_eval").get<std::size_t>();
  last_eval_steps_ = c.at("last_eval_steps").get<std::size_t>();
  aborted_updates_ = c.at("aborted_updates").get<std::size_t>();
  consumed_generation_ = c.at("generation").get<std::uint64_t>();
  buffer_.generation = consumed_generation_;
  wall_clock_ = c.at("wall_clock").get<double>();
  finished_returns_.clear();
  finished_lengths_.clear();
}

}  // namespace gsbmdpo::train
