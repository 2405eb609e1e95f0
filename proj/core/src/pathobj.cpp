#include "gsbmdpo/pathobj.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <stdexcept>

namespace gsbmdpo::objective {
namespace {

double step_weight(const policy::NoiseSchedule& sched, std::size_t n) {
  const double s = sched.sigma(n);
  return sched.dt(n) / (2.0 * s * s);
}

void check_drifts(const Array& a, const Array& b, const policy::NoiseSchedule& sched) {
  if (!a.same_shape(b)) {
    throw ShapeError("drift cost: shape mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
  }
  if (a.rows() != sched.steps) {
    throw ShapeError("drift cost: " + std::to_string(a.rows()) + " steps, schedule has " +
                     std::to_string(sched.steps));
  }
}

}  // namespace

void ClipConfig::validate() const {
  if (!(c_step > 0.0) || !(c_path > 0.0) || !std::isfinite(c_step) || !std::isfinite(c_path)) {
    throw std::invalid_argument("clip thresholds must be positive and finite");
  }
  if (c_step > c_path) {
    std::cerr << "warning: c_step (" << c_step << ") exceeds c_path (" << c_path << ")\n";
  }
}

void ObjectiveConfig::validate() const {
  if (!(kl_coef >= 0.0) || !std::isfinite(kl_coef)) {
    throw std::invalid_argument("kl_coef must be non-negative");
  }
  if (!(reference_mix >= 0.0 && reference_mix <= 1.0)) {
    throw std::invalid_argument("reference_mix must lie in [0,1]");
  }
}

double step_log_ratio(double new_logp, double old_logp) {
  if (!std::isfinite(new_logp) || !std::isfinite(old_logp)) {
    throw NumericError("step_log_ratio: non-finite log-likelihood");
  }
  return new_logp - old_logp;
}

double clipped_path_ratio(std::span<const double> step_deltas, const ClipConfig& cfg) {
  if (step_deltas.empty()) throw std::invalid_argument("clipped_path_ratio: empty path");
  double total = 0.0;
  for (double d : step_deltas) total += std::clamp(d, -cfg.c_step, cfg.c_step);
  return std::exp(std::clamp(total, -cfg.c_path, cfg.c_path));
}

double exact_path_ratio(std::span<const double> step_deltas) {
  double total = 0.0;
  for (double d : step_deltas) total += d;
  return std::exp(total);
}

double gaussian_step_kl(std::span<const double> mean_a, std::span<const double> mean_b,
                        double variance) {
  if (mean_a.size() != mean_b.size()) throw ShapeError("gaussian_step_kl: dimension mismatch");
  if (!(variance > 0.0)) throw std::invalid_argument("gaussian_step_kl: variance must be > 0");
  double ss = 0.0;
  for (std::size_t j = 0; j < mean_a.size(); ++j) {
    const double g = mean_a[j] - mean_b[j];
    ss += g * g;
  }
  return ss / (2.0 * variance);
}

double drift_cost(const Array& new_drifts, const Array& old_drifts,
                  const policy::NoiseSchedule& sched) {
  return anchored_drift_cost(new_drifts, old_drifts, 0.0, sched);
}

std::vector<double> mixed_anchor(std::span<const double> old_drift,
                                 std::span<const double> ref_drift, double eta) {
  if (old_drift.size() != ref_drift.size()) throw ShapeError("mixed_anchor: dimension mismatch");
  if (!(eta >= 0.0 && eta <= 1.0)) throw std::out_of_range("mixed_anchor: eta outside [0,1]");
  std::vector<double> out(old_drift.size());
  for (std::size_t j = 0; j < out.size(); ++j) {
    out[j] = (1.0 - eta) * old_drift[j] + eta * ref_drift[j];
  }
  return out;
}

double anchored_drift_cost(const Array& new_drifts, const Array& old_drifts, double eta,
                           const policy::NoiseSchedule& sched) {
  check_drifts(new_drifts, old_drifts, sched);
  if (!(eta >= 0.0 && eta <= 1.0)) throw std::out_of_range("anchored_drift_cost: eta");
  const std::size_t d = new_drifts.cols();
  double total = 0.0;
  for (std::size_t n = 0; n < sched.steps; ++n) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double g = new_drifts.at(n, j) - (1.0 - eta) * old_drifts.at(n, j);
      ss += g * g;
    }
    total += step_weight(sched, n) * ss;
  }
  return total;
}

double mdpo_loss(std::span<const LossEntry> batch, const policy::NoiseSchedule& sched,
                 const ObjectiveConfig& obj, const ClipConfig& clip) {
  if (batch.empty()) throw std::invalid_argument("mdpo_loss: empty batch");
  double total = 0.0;
  for (const auto& e : batch) {
    const double r = clip.enabled ? clipped_path_ratio(e.step_deltas, clip)
                                  : exact_path_ratio(e.step_deltas);
    const double c = anchored_drift_cost(e.new_drifts, e.old_drifts, obj.reference_mix, sched);
    total += -r * (e.advantage - obj.kl_coef * c);
  }
  return total / static_cast<double>(batch.size());
}

void normalize_advantages(std::span<double> adv, double eps) {
  if (adv.size() < 2) return;
  double mean = 0.0;
  for (double a : adv) mean += a;
  mean /= static_cast<double>(adv.size());
  double var = 0.0;
  for (double a : adv) var += (a - mean) * (a - mean);
  var /= static_cast<double>(adv.size());
  const double sd = std::sqrt(var);
  for (double& a : adv) a = (a - mean) / (sd + eps);
}

TapedMdpoLoss mdpo_loss(diff::Tape& tape, diff::Var new_logp, diff::Var new_drifts,
                        const Array& old_logp, const Array& old_drifts,
                        std::span<const double> advantages,
                        const policy::NoiseSchedule& sched, const ObjectiveConfig& obj,
                        const ClipConfig& clip) {
  const std::size_t b = advantages.size();
  const std::size_t steps = sched.steps;
  if (b == 0) throw std::invalid_argument("mdpo_loss: empty batch");
  const Array& drifts_now = new_drifts.value();
  const std::size_t d = drifts_now.cols();
  if (drifts_now.rows() != b * steps || old_drifts.rows() != b * steps ||
      old_logp.size() != b * steps || new_logp.value().size() != b * steps) {
    throw ShapeError("mdpo_loss: batch entries are not aligned");
  }

  TapedMdpoLoss out;
  auto& diag = out.diag;
  diag.paths = b;
  diag.step_pairs = b * steps;

  // Step log-ratios.
  Array neg_old(old_logp.shape());
  for (std::size_t i = 0; i < old_logp.size(); ++i) neg_old[i] = -old_logp[i];
  diff::Var deltas = tape.add_const(new_logp, neg_old.reshaped(new_logp.value().shape()));
  const Array dv = deltas.value();

  std::size_t step_clipped = 0;
  for (double v : dv.values()) {
    if (std::abs(v) > clip.c_step) ++step_clipped;
  }

  diff::Var path_log_ratio;
  if (clip.enabled) {
    diff::Var clipped = tape.clip(deltas, -clip.c_step, clip.c_step);
    diff::Var summed = tape.row_sum(tape.reshape(clipped, {b, steps}));
    std::size_t path_clipped = 0;
    for (double v : summed.value().values()) {
      if (std::abs(v) > clip.c_path) ++path_clipped;
    }
    diag.path_clip_fraction = static_cast<double>(path_clipped) / static_cast<double>(b);
    path_log_ratio = tape.clip(summed, -clip.c_path, clip.c_path);
  } else {
    path_log_ratio = tape.row_sum(tape.reshape(deltas, {b, steps}));
  }
  diff::Var ratio = tape.exp(path_log_ratio);

  {
    const Array raw = Array(dv).reshaped({b, steps});
    double abs_sum = 0.0;
    for (std::size_t p = 0; p < b; ++p) {
      double s = 0.0;
      for (std::size_t n = 0; n < steps; ++n) s += raw.at(p, n);
      abs_sum += std::abs(s);
    }
    diag.mean_abs_path_log_ratio = abs_sum / static_cast<double>(b);
  }

  // Anchored drift cost per path.
  Array neg_anchor(old_drifts.shape());
  Array weights = Array::matrix(b * steps, 1);
  const double keep = 1.0 - obj.reference_mix;
  for (std::size_t r = 0; r < b * steps; ++r) {
    weights[r] = step_weight(sched, r % steps);
    for (std::size_t j = 0; j < d; ++j) neg_anchor.at(r, j) = -keep * old_drifts.at(r, j);
  }
  diff::Var gap = tape.add_const(new_drifts, std::move(neg_anchor));
  diff::Var per_step = tape.mul_const(tape.row_sum(tape.square(gap)), std::move(weights));
  diff::Var cost = tape.row_sum(tape.reshape(per_step, {b, steps}));

  // -r * (A - kl_coef * C) = r * (kl_coef * C - A)
  Array neg_adv = Array::matrix(b, 1);
  for (std::size_t p = 0; p < b; ++p) neg_adv[p] = -advantages[p];
  diff::Var effective = tape.add_const(tape.scale(cost, obj.kl_coef), std::move(neg_adv));
  out.loss = tape.mean(tape.mul(ratio, effective));

  diag.loss = out.loss.item();
  diag.step_clip_fraction = static_cast<double>(step_clipped) / static_cast<double>(b * steps);
  double cost_sum = 0.0;
  for (double c : cost.value().values()) cost_sum += c;
  diag.mean_drift_cost = cost_sum / static_cast<double>(b);
  double ratio_sum = 0.0;
  for (double r : ratio.value().values()) ratio_sum += r;
  diag.mean_ratio = ratio_sum / static_cast<double>(b);
  return out;
}

}  // namespace gsbmdpo::objective
