#include "gsbmdpo/envs.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace gsbmdpo::envs {
namespace {

double angle_normalize(double x) {
  const double two_pi = 2.0 * std::numbers::pi;
  double r = std::fmod(x + std::numbers::pi, two_pi);
  if (r < 0.0) r += two_pi;
  return r - std::numbers::pi;
}

}  // namespace

VecEnv::VecEnv(EnvSpec spec, std::size_t num_envs, std::size_t physical_dim)
    : spec_(std::move(spec)),
      num_envs_(num_envs),
      phys_(Array::matrix(num_envs, physical_dim)),
      steps_(num_envs, 0),
      rngs_(num_envs) {
  if (num_envs == 0) throw std::invalid_argument("vec env: need at least one instance");
  if (spec_.horizon < 1) throw std::invalid_argument("vec env: horizon must be >= 1");
  if (!std::isfinite(spec_.action_low) || !std::isfinite(spec_.action_high)) {
    throw std::invalid_argument("vec env: action bounds must be finite");
  }
}

Array VecEnv::reset(std::uint64_t seed) {
  for (std::size_t i = 0; i < num_envs_; ++i) {
    rngs_[i] = Rng::stream(seed, i);
    init_instance(phys_.row(i), rngs_[i]);
    steps_[i] = 0;
  }
  return observations();
}

Array VecEnv::observations() const {
  Array obs = Array::matrix(num_envs_, spec_.state_dim);
  for (std::size_t i = 0; i < num_envs_; ++i) observe(phys_.row(i), obs.row(i));
  return obs;
}

StepResult VecEnv::step(const Array& actions) {
  if (actions.rows() != num_envs_ || actions.cols() != spec_.action_dim) {
    throw ShapeError("env step: actions must be [" + std::to_string(num_envs_) + ", " +
                     std::to_string(spec_.action_dim) + "], got " + actions.shape_string());
  }
  StepResult out{Array::matrix(num_envs_, spec_.state_dim), std::vector<double>(num_envs_),
                 std::vector<std::uint8_t>(num_envs_, 0), std::vector<double>(num_envs_, 0.0)};
  std::vector<double> a(spec_.action_dim);
  for (std::size_t i = 0; i < num_envs_; ++i) {
    for (std::size_t j = 0; j < a.size(); ++j) {
      a[j] = std::clamp(actions.at(i, j), spec_.action_low, spec_.action_high);
    }
    const double r = transition(phys_.row(i), a);
    if (!(std::abs(r) <= spec_.reward_bound)) {
      throw std::logic_error(spec_.name + ": reward " + std::to_string(r) +
                             " outside declared bound");
    }
    out.rewards[i] = r;
    if (++steps_[i] >= spec_.horizon) {
      out.dones[i] = 1;
      out.final_distance[i] = goal_distance(i);
      init_instance(phys_.row(i), rngs_[i]);
      steps_[i] = 0;
    }
    observe(phys_.row(i), out.observations.row(i));
  }
  return out;
}

void VecEnv::save(Checkpoint& ckpt, const std::string& prefix) const {
  ckpt.put(prefix + "/phys", phys_);
  std::vector<double> counts(steps_.begin(), steps_.end());
  ckpt.put(prefix + "/steps", Array::vector(counts));
  auto& rng_states = ckpt.meta["rngs"][prefix];
  rng_states = nlohmann::json::array();
  for (const auto& r : rngs_) rng_states.push_back(r.state());
}

void VecEnv::load(const Checkpoint& ckpt, const std::string& prefix) {
  const Array& phys = ckpt.get(prefix + "/phys");
  if (!phys.same_shape(phys_)) throw ShapeError("env checkpoint: shape mismatch");
  phys_ = phys;
  const Array& counts = ckpt.get(prefix + "/steps");
  for (std::size_t i = 0; i < num_envs_; ++i) steps_[i] = static_cast<std::size_t>(counts[i]);
  const auto& rng_states = ckpt.meta.at("rngs").at(prefix);
  for (std::size_t i = 0; i < num_envs_; ++i) {
    rngs_[i].set_state(rng_states.at(i).get<std::string>());
  }
}

// PointMass2D: phys = (px, py, vx, vy).

PointMass2D::PointMass2D(std::size_t num_envs, std::size_t horizon)
    : VecEnv(make_spec(horizon), num_envs, 4) {}

EnvSpec PointMass2D::make_spec(std::size_t horizon) {
  // |v| < 0.5 per axis, so |p| <= 1 + 0.025 * horizon per axis.
  const double reach = 1.0 + 0.025 * static_cast<double>(horizon);
  return EnvSpec{"PointMass2D",
                 4,
                 2,
                 -1.0,
                 1.0,
                 horizon,
                 2.0 * reach * reach + 0.02,
                 "-||p - goal||^2 - 0.01 ||a||^2"};
}

void PointMass2D::init_instance(std::span<double> phys, Rng& rng) {
  phys[0] = rng.uniform(-1.0, 1.0);
  phys[1] = rng.uniform(-1.0, 1.0);
  phys[2] = 0.0;
  phys[3] = 0.0;
}

double PointMass2D::transition(std::span<double> phys, std::span<const double> action) {
  phys[0] += 0.05 * phys[2];
  phys[1] += 0.05 * phys[3];
  phys[2] = 0.9 * phys[2] + 0.05 * action[0];
  phys[3] = 0.9 * phys[3] + 0.05 * action[1];
  const double dx = phys[0] - kGoal[0];
  const double dy = phys[1] - kGoal[1];
  return -(dx * dx + dy * dy) - 0.01 * (action[0] * action[0] + action[1] * action[1]);
}

void PointMass2D::observe(std::span<const double> phys, std::span<double> obs) const {
  std::copy(phys.begin(), phys.end(), obs.begin());
}

double PointMass2D::goal_distance(std::size_t i) const {
  const auto p = phys_row(i);
  return std::hypot(p[0] - kGoal[0], p[1] - kGoal[1]);
}

// MultiGoalReach: phys = (px, py).

MultiGoalReach::MultiGoalReach(std::size_t num_envs, std::size_t horizon)
    : VecEnv(make_spec(horizon), num_envs, 2) {}

EnvSpec MultiGoalReach::make_spec(std::size_t horizon) {
  const double reach = 1.0 + 0.1 * std::sqrt(2.0) * static_cast<double>(horizon);
  return EnvSpec{"MultiGoalReach", 2, 2, -1.0, 1.0, horizon, reach * reach,
                 "-min_k ||p - g_k||^2"};
}

std::array<double, 2> MultiGoalReach::goal(std::size_t k) {
  static constexpr std::array<std::array<double, 2>, kGoals> goals{
      {{1.0, 0.0}, {0.0, 1.0}, {-1.0, 0.0}, {0.0, -1.0}}};
  return goals.at(k);
}

std::size_t MultiGoalReach::goal_sector(std::span<const double> a) {
  std::size_t best = 0;
  double best_dot = -1e300;
  for (std::size_t k = 0; k < kGoals; ++k) {
    const auto g = goal(k);
    const double dot = g[0] * a[0] + g[1] * a[1];
    if (dot > best_dot) {
      best_dot = dot;
      best = k;
    }
  }
  return best;
}

void MultiGoalReach::init_instance(std::span<double> phys, Rng&) {
  phys[0] = 0.0;
  phys[1] = 0.0;
}

double MultiGoalReach::transition(std::span<double> phys, std::span<const double> action) {
  phys[0] += 0.1 * action[0];
  phys[1] += 0.1 * action[1];
  double best = 1e300;
  for (std::size_t k = 0; k < kGoals; ++k) {
    const auto g = goal(k);
    const double dx = phys[0] - g[0];
    const double dy = phys[1] - g[1];
    best = std::min(best, dx * dx + dy * dy);
  }
  return -best;
}

void MultiGoalReach::observe(std::span<const double> phys, std::span<double> obs) const {
  std::copy(phys.begin(), phys.end(), obs.begin());
}

double MultiGoalReach::goal_distance(std::size_t i) const {
  const auto p = phys_row(i);
  double best = 1e300;
  for (std::size_t k = 0; k < kGoals; ++k) {
    const auto g = goal(k);
    best = std::min(best, std::hypot(p[0] - g[0], p[1] - g[1]));
  }
  return best;
}

// PendulumSwingup: phys = (theta, theta_dot).

PendulumSwingup::PendulumSwingup(std::size_t num_envs, std::size_t horizon)
    : VecEnv(make_spec(horizon), num_envs, 2) {}

EnvSpec PendulumSwingup::make_spec(std::size_t horizon) {
  const double bound = std::numbers::pi * std::numbers::pi + 0.1 * 64.0 + 0.001 * 4.0;
  return EnvSpec{"PendulumSwingup", 3, 1, -2.0, 2.0, horizon, bound,
                 "-(th^2 + 0.1 th_dot^2 + 0.001 u^2)"};
}

void PendulumSwingup::init_instance(std::span<double> phys, Rng& rng) {
  phys[0] = rng.uniform(-std::numbers::pi, std::numbers::pi);
  phys[1] = rng.uniform(-1.0, 1.0);
}

double PendulumSwingup::transition(std::span<double> phys, std::span<const double> action) {
  constexpr double g = 10.0;
  constexpr double m = 1.0;
  constexpr double l = 1.0;
  constexpr double dt = 0.05;
  constexpr double max_speed = 8.0;
  const double u = action[0];
  const double th = phys[0];
  const double thdot = phys[1];
  const double thn = angle_normalize(th);
  const double cost = thn * thn + 0.1 * thdot * thdot + 0.001 * u * u;
  double new_thdot = thdot + (3.0 * g / (2.0 * l) * std::sin(th) + 3.0 / (m * l * l) * u) * dt;
  new_thdot = std::clamp(new_thdot, -max_speed, max_speed);
  phys[0] = th + new_thdot * dt;
  phys[1] = new_thdot;
  return -cost;
}

void PendulumSwingup::observe(std::span<const double> phys, std::span<double> obs) const {
  obs[0] = std::cos(phys[0]);
  obs[1] = std::sin(phys[0]);
  obs[2] = phys[1];
}

double PendulumSwingup::goal_distance(std::size_t i) const {
  return std::abs(angle_normalize(phys_row(i)[0]));
}

std::vector<EnvSpec> env_catalog() {
  return {PointMass2D::make_spec(), MultiGoalReach::make_spec(), PendulumSwingup::make_spec()};
}

std::unique_ptr<VecEnv> make_env(const std::string& name, std::size_t num_envs) {
  if (name == "PointMass2D") return std::make_unique<PointMass2D>(num_envs);
  if (name == "MultiGoalReach") return std::make_unique<MultiGoalReach>(num_envs);
  if (name == "PendulumSwingup") return std::make_unique<PendulumSwingup>(num_envs);
  throw std::invalid_argument("unknown environment '" + name + "'");
}

}  // namespace gsbmdpo::envs
