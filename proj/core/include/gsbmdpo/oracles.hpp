#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "gsbmdpo/genpolicy.hpp"
#include "gsbmdpo/rng.hpp"
#include "gsbmdpo/tape.hpp"

namespace gsbmdpo::oracles {

// Probability table over an enumerated path space together with the map
// from each path to its terminal symbol.
class DiscretePathMeasure {
 public:
  DiscretePathMeasure() = default;
  // Normalizes nothing; throws unless probabilities are non-negative and sum
  // to 1 within 1e-12.
  DiscretePathMeasure(std::vector<double> probs, std::vector<std::size_t> terminal_of,
                      std::size_t num_terminals);

  // Paths of a Markov chain on `states` symbols over `steps` positions; the
  // terminal is the last symbol. probs are indexed by the base-`states`
  // digits of the path, first position most significant.
  static DiscretePathMeasure chain(std::size_t states, std::size_t steps,
                                   std::vector<double> probs);
  // Initial distribution and per-step transition matrices drawn from a
  // flat Dirichlet.
  static DiscretePathMeasure random_chain(std::size_t states, std::size_t steps, Rng& rng);
  // Any distribution on the same space as `like`, drawn from a flat Dirichlet.
  static DiscretePathMeasure random_like(const DiscretePathMeasure& like, Rng& rng);
  // Normalizes arbitrary non-negative weights.
  static DiscretePathMeasure from_weights(std::vector<double> weights,
                                          std::vector<std::size_t> terminal_of,
                                          std::size_t num_terminals);

  std::size_t num_paths() const { return probs_.size(); }
  std::size_t num_terminals() const { return num_terminals_; }
  double prob(std::size_t path) const { return probs_[path]; }
  const std::vector<double>& probs() const { return probs_; }
  std::size_t terminal(std::size_t path) const { return terminal_of_[path]; }
  const std::vector<std::size_t>& terminal_map() const { return terminal_of_; }
  std::vector<double> terminal_marginal() const;
  bool same_space(const DiscretePathMeasure& other) const;

 private:
  std::vector<double> probs_;
  std::vector<std::size_t> terminal_of_;
  std::size_t num_terminals_ = 0;
};

// sum_tau P log(P / Q). Throws std::domain_error when P is not absolutely
// continuous with respect to Q.
double path_kl(const DiscretePathMeasure& p, const DiscretePathMeasure& q);
double terminal_kl(const DiscretePathMeasure& p, const DiscretePathMeasure& q);
// E_{x ~ pi_P} KL(P(. | x) || Q(. | x)).
double expected_conditional_kl(const DiscretePathMeasure& p, const DiscretePathMeasure& q);
double total_variation(const DiscretePathMeasure& p, const DiscretePathMeasure& q);

// P*(tau) proportional to P_k(tau) exp(A(terminal(tau)) / alpha).
DiscretePathMeasure brute_force_tilt(const DiscretePathMeasure& pk,
                                     std::span<const double> advantage, double alpha);

// E_P[A] - alpha KL(P || P_k).
double tilt_objective(const DiscretePathMeasure& p, const DiscretePathMeasure& pk,
                      std::span<const double> advantage, double alpha);

// Euclidean projection onto the probability simplex.
std::vector<double> project_to_simplex(std::span<const double> v);

struct SimplexAscentResult {
  DiscretePathMeasure measure;
  std::size_t iterations = 0;
  double objective = 0.0;
};

// Ascent on tilt_objective over the simplex, started at P_k. Steps are
// Newton-scaled on the support with a backtracking line search; a projected
// gradient step of size `step` is the fallback when that fails to improve.
SimplexAscentResult simplex_ascent(const DiscretePathMeasure& pk,
                                   std::span<const double> advantage, double alpha,
                                   std::size_t iterations = 10000, double step = 0.01);

// max |P*(tau | x) - P_k(tau | x)| over terminals with positive mass under
// both measures.
double verify_conditional_preservation(const DiscretePathMeasure& pk,
                                       const DiscretePathMeasure& pstar);

struct Improvement {
  double new_expected = 0.0;
  double old_expected = 0.0;
  double kl = 0.0;  // KL(P* || P_k)
  // new - old - alpha * kl; non-negative up to rounding.
  double slack = 0.0;
};
Improvement verify_improvement(const DiscretePathMeasure& pk, std::span<const double> advantage,
                               double alpha);

// P_eta proportional to P_k^(1 - eta) P_ref^eta.
DiscretePathMeasure geometric_mixture(const DiscretePathMeasure& pk,
                                      const DiscretePathMeasure& pref, double eta);
// alpha KL(P||P_k) + beta KL(P||P_ref) - (alpha + beta) KL(P||P_eta),
// eta = beta / (alpha + beta).
double composite_kl_residual(const DiscretePathMeasure& p, const DiscretePathMeasure& pk,
                             const DiscretePathMeasure& pref, double alpha, double beta);
// The same residual for isotropic Gaussians sharing variance `variance`
// with means m (free), m_k and m_ref.
double gaussian_composite_kl_residual(std::span<const double> m, std::span<const double> mk,
                                      std::span<const double> mref, double variance,
                                      double alpha, double beta);
// |lhs - rhs| of alpha||f - fk||^2 + beta||f - fref||^2
//   = (alpha + beta)||f - f_eta||^2 + alpha beta / (alpha + beta) ||fk - fref||^2.
double completing_square_gap(std::span<const double> f, std::span<const double> fk,
                             std::span<const double> fref, double alpha, double beta);

struct IsCheck {
  double is_estimate = 0.0;
  double direct_estimate = 0.0;
  double is_stderr = 0.0;
  double direct_stderr = 0.0;
  std::size_t samples = 0;

  double combined_stderr() const;
  // |is - direct| in combined standard errors.
  double disagreement() const;
  // |estimate - value| / stderr for each estimate.
  double is_z(double value) const;
  double direct_z(double value) const;
};

using Sampler = std::function<std::vector<double>(Rng&)>;
using SampleFn = std::function<double(std::span<const double>)>;

// E_{P_theta}[F] estimated from P_theta samples and from P_k samples weighted
// by exp(log_ratio), log_ratio = log P_theta - log P_k.
IsCheck mc_is_check(const Sampler& sample_old, const Sampler& sample_new,
                    const SampleFn& log_ratio, const SampleFn& f, std::size_t n_samples,
                    Rng& rng);

// Path-level variant on generation paths of two drift fields at one state.
// F receives the whole path.
IsCheck mc_is_path_check(const policy::DriftField& old_field,
                         const policy::DriftField& new_field,
                         const policy::NoiseSchedule& sched, std::span<const double> state,
                         const std::function<double(const policy::GenerationPath&)>& f,
                         std::size_t n_samples, Rng& rng);

// max over paths of |drift_cost(f_a, f_b) - sum_n KL(step_a || step_b)| on
// the given paths.
double verify_girsanov(std::span<const policy::GenerationPath> paths,
                       const policy::DriftField& field_a, const policy::DriftField& field_b,
                       const policy::NoiseSchedule& sched, std::span<const double> state);

struct CheckResult {
  std::string name;
  double max_deviation = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::string detail;
};

struct SuiteOptions {
  std::uint64_t seed = 0;
  std::size_t chains = 1000;
  std::size_t tilt_instances = 20;
  std::size_t sweep_instances = 100;
  std::size_t is_samples = 100000;
  std::size_t girsanov_pairs = 100;
  std::size_t gradient_points = 20;
};

// The whole verification table.
std::vector<CheckResult> run_suite(const SuiteOptions& opts);

// ||analytic - central difference|| / max of the two norms, over every entry
// of every parameter. `loss` builds a fresh tape, returns the loss value and
// runs backward when its argument is true.
double finite_difference_error(std::span<diff::Parameter* const> params,
                               const std::function<double(bool)>& loss, double h = 1e-5);

// mdpo_loss (recomputed on stored paths, away from every clip boundary) and
// value_loss gradients against central differences at `points` random
// parameter settings.
std::vector<CheckResult> gradient_fidelity(std::uint64_t seed, std::size_t points = 20);

}  // namespace gsbmdpo::oracles
