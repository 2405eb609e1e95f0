#pragma once

#include <span>
#include <vector>

#include "gsbmdpo/array.hpp"
#include "gsbmdpo/genpolicy.hpp"
#include "gsbmdpo/tape.hpp"

namespace gsbmdpo::objective {

struct ClipConfig {
  double c_step = 0.1;
  double c_path = 0.4;
  // false selects the exact ratio exp(sum of step log-ratios).
  bool enabled = true;

  void validate() const;
};

struct ObjectiveConfig {
  double kl_coef = 0.08;
  double reference_mix = 0.02;
  bool normalize_advantages = true;

  void validate() const;
};

double step_log_ratio(double new_logp, double old_logp);

// exp(clip(sum_n clip(delta_n, -c_step, c_step), -c_path, c_path)).
double clipped_path_ratio(std::span<const double> step_deltas, const ClipConfig& cfg);
double exact_path_ratio(std::span<const double> step_deltas);

// ||mean_a - mean_b||^2 / (2 v): KL between isotropic normals sharing variance v.
double gaussian_step_kl(std::span<const double> mean_a, std::span<const double> mean_b,
                        double variance);

// sum_n dt_n / (2 sigma(t_n)^2) * ||new_n - old_n||^2 over [N, d] drift arrays.
double drift_cost(const Array& new_drifts, const Array& old_drifts,
                  const policy::NoiseSchedule& sched);

std::vector<double> mixed_anchor(std::span<const double> old_drift,
                                 std::span<const double> ref_drift, double eta);

// drift_cost against (1 - eta) * old, i.e. the mixed anchor with a zero
// reference drift.
double anchored_drift_cost(const Array& new_drifts, const Array& old_drifts, double eta,
                           const policy::NoiseSchedule& sched);

struct LossEntry {
  std::vector<double> step_deltas;
  double advantage = 0.0;
  Array new_drifts;
  Array old_drifts;
};

// Value of mean_b[ -r_b * (A_b - kl_coef * C_eta,b) ] without gradients.
double mdpo_loss(std::span<const LossEntry> batch, const policy::NoiseSchedule& sched,
                 const ObjectiveConfig& obj, const ClipConfig& clip);

// In-place normalization to zero mean and unit standard deviation.
void normalize_advantages(std::span<double> adv, double eps = 1e-8);

struct MdpoDiagnostics {
  double loss = 0.0;
  double mean_drift_cost = 0.0;
  double step_clip_fraction = 0.0;
  double path_clip_fraction = 0.0;
  double mean_abs_path_log_ratio = 0.0;
  double mean_ratio = 0.0;
  std::size_t step_pairs = 0;
  std::size_t paths = 0;
};

struct TapedMdpoLoss {
  diff::Var loss;
  MdpoDiagnostics diag;
};

// Taped objective on a recomputed minibatch. new_logp is [B*N, 1] and
// new_drifts [B*N, d] in path-major order; old_logp and old_drifts are the
// matching stored values.
TapedMdpoLoss mdpo_loss(diff::Tape& tape, diff::Var new_logp, diff::Var new_drifts,
                        const Array& old_logp, const Array& old_drifts,
                        std::span<const double> advantages,
                        const policy::NoiseSchedule& sched, const ObjectiveConfig& obj,
                        const ClipConfig& clip);

}  // namespace gsbmdpo::objective
