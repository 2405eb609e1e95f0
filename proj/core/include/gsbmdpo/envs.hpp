#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gsbmdpo/array.hpp"
#include "gsbmdpo/checkpoint.hpp"
#include "gsbmdpo/rng.hpp"

namespace gsbmdpo::envs {

struct EnvSpec {
  std::string name;
  std::size_t state_dim = 0;
  std::size_t action_dim = 0;
  double action_low = -1.0;
  double action_high = 1.0;
  std::size_t horizon = 1;
  // Every per-step reward lies in [-reward_bound, reward_bound].
  double reward_bound = 0.0;
  std::string reward;
};

struct StepResult {
  Array observations;                // [num_envs, state_dim], post-reset where done
  std::vector<double> rewards;
  std::vector<std::uint8_t> dones;
  std::vector<double> final_distance;  // goal distance of the state that ended, when done
};

// Fixed-size batch of independent instances. Each instance owns an rng
// stream; finished instances reset automatically.
class VecEnv {
 public:
  VecEnv(EnvSpec spec, std::size_t num_envs, std::size_t physical_dim);
  virtual ~VecEnv() = default;

  const EnvSpec& spec() const { return spec_; }
  std::size_t num_envs() const { return num_envs_; }

  Array reset(std::uint64_t seed);
  // actions is [num_envs, action_dim]; values are clipped to the action box.
  StepResult step(const Array& actions);
  Array observations() const;

  // Task-specific distance to the goal set for instance i.
  virtual double goal_distance(std::size_t i) const = 0;

  const Array& physical_state() const { return phys_; }
  const std::vector<std::size_t>& step_counts() const { return steps_; }

  void save(Checkpoint& ckpt, const std::string& prefix) const;
  void load(const Checkpoint& ckpt, const std::string& prefix);

 protected:
  virtual void init_instance(std::span<double> phys, Rng& rng) = 0;
  // Advances phys in place; returns the reward.
  virtual double transition(std::span<double> phys, std::span<const double> action) = 0;
  virtual void observe(std::span<const double> phys, std::span<double> obs) const = 0;

  std::span<double> phys_row(std::size_t i) { return phys_.row(i); }
  std::span<const double> phys_row(std::size_t i) const { return phys_.row(i); }

 private:
  EnvSpec spec_;
  std::size_t num_envs_;
  Array phys_;
  std::vector<std::size_t> steps_;
  std::vector<Rng> rngs_;
};

// p <- p + 0.05 v; v <- 0.9 v + 0.05 a; reward -||p - goal||^2 - 0.01 ||a||^2.
class PointMass2D : public VecEnv {
 public:
  static constexpr std::size_t kHorizon = 100;
  explicit PointMass2D(std::size_t num_envs, std::size_t horizon = kHorizon);
  static EnvSpec make_spec(std::size_t horizon = kHorizon);
  double goal_distance(std::size_t i) const override;
  static constexpr double kGoal[2] = {0.0, 0.0};

 protected:
  void init_instance(std::span<double> phys, Rng& rng) override;
  double transition(std::span<double> phys, std::span<const double> action) override;
  void observe(std::span<const double> phys, std::span<double> obs) const override;
};

// Four goals at unit distance on the axes, start at their centroid,
// p <- p + 0.1 a, reward -min_k ||p - g_k||^2.
class MultiGoalReach : public VecEnv {
 public:
  static constexpr std::size_t kHorizon = 20;
  static constexpr std::size_t kGoals = 4;
  explicit MultiGoalReach(std::size_t num_envs, std::size_t horizon = kHorizon);
  static EnvSpec make_spec(std::size_t horizon = kHorizon);
  static std::array<double, 2> goal(std::size_t k);
  // Index of the goal whose direction has the largest inner product with a.
  static std::size_t goal_sector(std::span<const double> a);
  double goal_distance(std::size_t i) const override;

 protected:
  void init_instance(std::span<double> phys, Rng& rng) override;
  double transition(std::span<double> phys, std::span<const double> action) override;
  void observe(std::span<const double> phys, std::span<double> obs) const override;
};

// Torque-limited pendulum, observation (cos th, sin th, th_dot), torque in
// [-2, 2], reward -(th^2 + 0.1 th_dot^2 + 0.001 u^2).
class PendulumSwingup : public VecEnv {
 public:
  static constexpr std::size_t kHorizon = 200;
  explicit PendulumSwingup(std::size_t num_envs, std::size_t horizon = kHorizon);
  static EnvSpec make_spec(std::size_t horizon = kHorizon);
  double goal_distance(std::size_t i) const override;

 protected:
  void init_instance(std::span<double> phys, Rng& rng) override;
  double transition(std::span<double> phys, std::span<const double> action) override;
  void observe(std::span<const double> phys, std::span<double> obs) const override;
};

std::vector<EnvSpec> env_catalog();
std::unique_ptr<VecEnv> make_env(const std::string& name, std::size_t num_envs);

}  // namespace gsbmdpo::envs
