#pragma once

#include <span>
#include <string>
#include <vector>

#include "gsbmdpo/array.hpp"
#include "gsbmdpo/mlp.hpp"
#include "gsbmdpo/rng.hpp"
#include "gsbmdpo/tape.hpp"

namespace gsbmdpo::policy {

enum class ScheduleKind { Constant, Linear, Exponential };

ScheduleKind schedule_kind_from_string(const std::string& s);
std::string to_string(ScheduleKind k);

// Noise scale over generation time plus the uniform grid t_n = n / N.
struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::Linear;
  double sigma_max = 3.0;
  double sigma_min = 0.3;
  std::size_t steps = 16;
  // When set, sigma runs from sigma_min at t=0 up to sigma_max at t=1.
  bool increasing = false;

  void validate() const;
  double time(std::size_t n) const;
  double dt(std::size_t n) const;
  // sigma_at(time(n)).
  double sigma(std::size_t n) const;
};

double sigma_at(const NoiseSchedule& sched, double t);

// Sinusoidal features [sin(2 pi k t), cos(2 pi k t)] for k = 1..dim/2.
void time_embedding(double t, std::span<double> out);

struct DriftFieldConfig {
  std::size_t state_dim = 0;
  std::size_t action_dim = 0;
  std::size_t time_dim = 16;
  std::vector<std::size_t> hidden = {64, 64};
  diff::Activation activation = diff::Activation::Silu;
  double output_scale = 0.25;
};

// f(a, t, s): an Mlp over [state, action, time embedding].
class DriftField {
 public:
  DriftField() = default;
  DriftField(const DriftFieldConfig& cfg, Rng& rng);
  DriftField(const DriftFieldConfig& cfg, diff::Mlp net);

  const DriftFieldConfig& config() const { return cfg_; }
  std::size_t state_dim() const { return cfg_.state_dim; }
  std::size_t action_dim() const { return cfg_.action_dim; }
  diff::Mlp& net() { return net_; }
  const diff::Mlp& net() const { return net_; }

  // Row layout [state | action | embedding(t)].
  void write_input(std::span<const double> state, std::span<const double> action, double t,
                   std::span<double> row) const;

  // Drifts for a batch: row i evaluated at (actions[i], t, states[i]).
  Array evaluate(const Array& states, const Array& actions, double t) const;
  std::vector<double> evaluate_one(std::span<const double> state,
                                   std::span<const double> action, double t) const;

 private:
  DriftFieldConfig cfg_;
  diff::Mlp net_;
};

// One action's denoising trajectory with the quantities captured at sampling
// time. nodes is [N+1, d]; old_drifts is [N, d]; old_logp has N entries.
struct GenerationPath {
  Array nodes;
  Array old_drifts;
  std::vector<double> old_logp;

  std::size_t steps() const { return old_logp.size(); }
  std::size_t action_dim() const { return nodes.cols(); }
  std::span<const double> node(std::size_t n) const { return nodes.row(n); }
  std::span<const double> terminal() const { return nodes.row(nodes.rows() - 1); }
  double old_path_logp() const;
};

// a + dt * drift + sigma * sqrt(dt) * eps.
std::vector<double> euler_step(std::span<const double> a, double dt,
                               std::span<const double> drift, double sigma,
                               std::span<const double> eps);

// Isotropic normal log-density at x with mean a + dt * drift and variance
// sigma^2 * dt, computed from the residual (x - a) - dt * drift.
double gaussian_step_logpdf(std::span<const double> a, std::span<const double> x,
                            std::span<const double> drift, double dt, double sigma);

double step_log_likelihood(const DriftField& field, std::span<const double> a_n,
                           std::span<const double> a_next, double t_n, double dt,
                           double sigma, std::span<const double> state);

// Sum of step log-likelihoods; the prior term is excluded.
double path_log_likelihood(const DriftField& field, const GenerationPath& path,
                           const NoiseSchedule& sched, std::span<const double> state);

GenerationPath sample_path(const DriftField& field, const NoiseSchedule& sched,
                           std::span<const double> state, Rng& rng);

// Batched sampling: row i of states uses rngs[i]. Paths whose nodes become
// non-finite are reported through `ok` instead of throwing.
std::vector<GenerationPath> sample_paths(const DriftField& field, const NoiseSchedule& sched,
                                         const Array& states, std::span<Rng> rngs,
                                         std::vector<bool>* ok = nullptr);

// Noise-free generation from a prior draw.
std::vector<double> ode_action(const DriftField& field, const NoiseSchedule& sched,
                               std::span<const double> state, Rng& rng);
std::vector<double> ode_action_from(const DriftField& field, const NoiseSchedule& sched,
                                    std::span<const double> state,
                                    std::span<const double> prior_sample);
Array ode_actions(const DriftField& field, const NoiseSchedule& sched, const Array& states,
                  std::span<Rng> rngs);

// Taped recomputation on stored paths, rows ordered path-major then step:
// row p*N + n holds f(a_p^(n), t_n, s_p).
struct TapedPathBatch {
  diff::Var drifts;       // [B*N, d]
  diff::Var step_logp;    // [B*N, 1]
};

TapedPathBatch recompute_on_paths(diff::Tape& tape, DriftField& field,
                                  const NoiseSchedule& sched,
                                  std::span<const std::span<const double>> states,
                                  std::span<const GenerationPath* const> paths);

}  // namespace gsbmdpo::policy
