#include "gsbmdpo/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "gsbmdpo/critic.hpp"
#include "gsbmdpo/pathobj.hpp"
#include "gsbmdpo/tape.hpp"

namespace gsbmdpo::oracles {
namespace {

std::vector<double> dirichlet(std::size_t n, Rng& rng) {
  std::vector<double> w(n);
  for (auto& v : w) v = -std::log(1.0 - rng.uniform());
  const double s = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& v : w) v /= s;
  return w;
}

void require_same(const DiscretePathMeasure& p, const DiscretePathMeasure& q, const char* who) {
  if (!p.same_space(q)) throw std::invalid_argument(std::string(who) + ": different path spaces");
}

double kl_terms(std::span<const double> p, std::span<const double> q, const char* who) {
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) {
      throw std::domain_error(std::string(who) + ": P is not absolutely continuous w.r.t. Q");
    }
    kl += p[i] * std::log(p[i] / q[i]);
  }
  return kl;
}

double spread(const std::vector<double>& v) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  return *hi - *lo;
}

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

std::vector<double> random_vector(std::size_t n, Rng& rng, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};

MeanSe mean_se(const std::vector<double>& xs) {
  const double n = static_cast<double>(xs.size());
  double m = 0.0;
  for (double x : xs) m += x;
  m /= n;
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  v /= (n - 1.0);
  return {m, std::sqrt(v / n)};
}

CheckResult make_check(std::string name, double dev, double tol, std::string detail = {}) {
  CheckResult r;
  r.name = std::move(name);
  r.max_deviation = dev;
  r.tolerance = tol;
  r.passed = std::isfinite(dev) && dev < tol;
  r.detail = std::move(detail);
  return r;
}

}  // namespace

DiscretePathMeasure::DiscretePathMeasure(std::vector<double> probs,
                                         std::vector<std::size_t> terminal_of,
                                         std::size_t num_terminals)
    : probs_(std::move(probs)), terminal_of_(std::move(terminal_of)), num_terminals_(num_terminals) {
  if (probs_.empty()) throw std::invalid_argument("DiscretePathMeasure: empty path space");
  if (terminal_of_.size() != probs_.size()) {
    throw std::invalid_argument("DiscretePathMeasure: terminal map size mismatch");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < probs_.size(); ++i) {
    if (!(probs_[i] >= 0.0) || !std::isfinite(probs_[i])) {
      throw std::invalid_argument("DiscretePathMeasure: negative or non-finite probability");
    }
    if (terminal_of_[i] >= num_terminals_) {
      throw std::invalid_argument("DiscretePathMeasure: terminal symbol out of range");
    }
    total += probs_[i];
  }
  if (std::abs(total - 1.0) > 1e-12) {
    throw std::invalid_argument("DiscretePathMeasure: probabilities sum to " +
                                std::to_string(total));
  }
}

DiscretePathMeasure DiscretePathMeasure::chain(std::size_t states, std::size_t steps,
                                               std::vector<double> probs) {
  if (states == 0 || steps == 0) throw std::invalid_argument("chain: empty chain");
  std::size_t n = 1;
  for (std::size_t i = 0; i < steps; ++i) n *= states;
  if (probs.size() != n) throw std::invalid_argument("chain: expected states^steps probabilities");
  std::vector<std::size_t> term(n);
  for (std::size_t p = 0; p < n; ++p) term[p] = p % states;
  return DiscretePathMeasure(std::move(probs), std::move(term), states);
}

DiscretePathMeasure DiscretePathMeasure::random_chain(std::size_t states, std::size_t steps,
                                                      Rng& rng) {
  const std::vector<double> init = dirichlet(states, rng);
  std::vector<std::vector<double>> trans;  // [(step-1) * states + from] -> row
  for (std::size_t k = 1; k < steps; ++k) {
    for (std::size_t s = 0; s < states; ++s) trans.push_back(dirichlet(states, rng));
  }
  std::size_t n = 1;
  for (std::size_t i = 0; i < steps; ++i) n *= states;
  std::vector<double> probs(n);
  std::vector<std::size_t> digits(steps);
  for (std::size_t p = 0; p < n; ++p) {
    std::size_t rest = p;
    for (std::size_t k = steps; k-- > 0;) {
      digits[k] = rest % states;
      rest /= states;
    }
    double pr = init[digits[0]];
    for (std::size_t k = 1; k < steps; ++k) pr *= trans[(k - 1) * states + digits[k - 1]][digits[k]];
    probs[p] = pr;
  }
  // Renormalize away the rounding so the 1e-12 invariant holds comfortably.
  const double s = std::accumulate(probs.begin(), probs.end(), 0.0);
  for (auto& v : probs) v /= s;
  return chain(states, steps, std::move(probs));
}

DiscretePathMeasure DiscretePathMeasure::random_like(const DiscretePathMeasure& like, Rng& rng) {
  return DiscretePathMeasure(dirichlet(like.num_paths(), rng), like.terminal_of_,
                             like.num_terminals_);
}

DiscretePathMeasure DiscretePathMeasure::from_weights(std::vector<double> weights,
                                                      std::vector<std::size_t> terminal_of,
                                                      std::size_t num_terminals) {
  const double s = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(s > 0.0) || !std::isfinite(s)) {
    throw std::domain_error("from_weights: degenerate normalizer");
  }
  for (auto& w : weights) w /= s;
  return DiscretePathMeasure(std::move(weights), std::move(terminal_of), num_terminals);
}

std::vector<double> DiscretePathMeasure::terminal_marginal() const {
  std::vector<double> m(num_terminals_, 0.0);
  for (std::size_t i = 0; i < probs_.size(); ++i) m[terminal_of_[i]] += probs_[i];
  return m;
}

bool DiscretePathMeasure::same_space(const DiscretePathMeasure& other) const {
  return num_terminals_ == other.num_terminals_ && terminal_of_ == other.terminal_of_;
}

double path_kl(const DiscretePathMeasure& p, const DiscretePathMeasure& q) {
  require_same(p, q, "path_kl");
  return kl_terms(p.probs(), q.probs(), "path_kl");
}

double terminal_kl(const DiscretePathMeasure& p, const DiscretePathMeasure& q) {
  require_same(p, q, "terminal_kl");
  const auto mp = p.terminal_marginal();
  const auto mq = q.terminal_marginal();
  return kl_terms(mp, mq, "terminal_kl");
}

double expected_conditional_kl(const DiscretePathMeasure& p, const DiscretePathMeasure& q) {
  require_same(p, q, "expected_conditional_kl");
  const auto mp = p.terminal_marginal();
  const auto mq = q.terminal_marginal();
  std::vector<double> per_terminal(p.num_terminals(), 0.0);
  for (std::size_t i = 0; i < p.num_paths(); ++i) {
    const std::size_t x = p.terminal(i);
    if (p.prob(i) == 0.0) continue;
    if (q.prob(i) == 0.0) {
      throw std::domain_error("expected_conditional_kl: P is not absolutely continuous w.r.t. Q");
    }
    const double cp = p.prob(i) / mp[x];
    const double cq = q.prob(i) / mq[x];
    per_terminal[x] += cp * std::log(cp / cq);
  }
  double total = 0.0;
  for (std::size_t x = 0; x < mp.size(); ++x) total += mp[x] * per_terminal[x];
  return total;
}

double total_variation(const DiscretePathMeasure& p, const DiscretePathMeasure& q) {
  require_same(p, q, "total_variation");
  double s = 0.0;
  for (std::size_t i = 0; i < p.num_paths(); ++i) s += std::abs(p.prob(i) - q.prob(i));
  return 0.5 * s;
}

DiscretePathMeasure brute_force_tilt(const DiscretePathMeasure& pk,
                                     std::span<const double> advantage, double alpha) {
  if (!(alpha > 0.0)) throw std::invalid_argument("brute_force_tilt: alpha must be positive");
  if (advantage.size() != pk.num_terminals()) {
    throw std::invalid_argument("brute_force_tilt: one advantage per terminal required");
  }
  const double neg_inf = -std::numeric_limits<double>::infinity();
  std::vector<double> logw(pk.num_paths(), neg_inf);
  double mx = neg_inf;
  for (std::size_t i = 0; i < pk.num_paths(); ++i) {
    if (pk.prob(i) > 0.0) {
      logw[i] = std::log(pk.prob(i)) + advantage[pk.terminal(i)] / alpha;
      mx = std::max(mx, logw[i]);
    }
  }
  if (!std::isfinite(mx)) throw std::domain_error("brute_force_tilt: degenerate normalizer");
  std::vector<double> w(pk.num_paths());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp(logw[i] - mx);
  return DiscretePathMeasure::from_weights(std::move(w), pk.terminal_map(), pk.num_terminals());
}

double tilt_objective(const DiscretePathMeasure& p, const DiscretePathMeasure& pk,
                      std::span<const double> advantage, double alpha) {
  double e = 0.0;
  for (std::size_t i = 0; i < p.num_paths(); ++i) e += p.prob(i) * advantage[p.terminal(i)];
  return e - alpha * path_kl(p, pk);
}

std::vector<double> project_to_simplex(std::span<const double> v) {
  std::vector<double> u(v.begin(), v.end());
  std::sort(u.begin(), u.end(), std::greater<>());
  double cum = 0.0;
  double theta = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    cum += u[j];
    const double t = (cum - 1.0) / static_cast<double>(j + 1);
    if (u[j] - t > 0.0) theta = t;
  }
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::max(v[i] - theta, 0.0);
  return out;
}

SimplexAscentResult simplex_ascent(const DiscretePathMeasure& pk,
                                   std::span<const double> advantage, double alpha,
                                   std::size_t iterations, double step) {
  if (!(alpha > 0.0)) throw std::invalid_argument("simplex_ascent: alpha must be positive");
  // Optimize over the support of P_k; elsewhere the objective is -inf.
  std::vector<std::size_t> support;
  for (std::size_t i = 0; i < pk.num_paths(); ++i) {
    if (pk.prob(i) > 0.0) support.push_back(i);
  }
  const std::size_t m = support.size();
  std::vector<double> q(m), a(m), p(m);
  for (std::size_t j = 0; j < m; ++j) {
    q[j] = pk.prob(support[j]);
    a[j] = advantage[pk.terminal(support[j])];
    p[j] = q[j];
  }
  auto objective = [&](const std::vector<double>& x) {
    double f = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      f += x[j] * a[j];
      if (x[j] > 0.0) f -= alpha * x[j] * std::log(x[j] / q[j]);
    }
    return f;
  };
  auto gradient = [&](const std::vector<double>& x) {
    std::vector<double> g(m);
    for (std::size_t j = 0; j < m; ++j) g[j] = a[j] - alpha * (std::log(x[j] / q[j]) + 1.0);
    return g;
  };

  // The objective is strongly concave with a diagonal Hessian -alpha / p, so
  // steps are taken in the Hessian-scaled direction restricted to the
  // simplex tangent space. A projected Euclidean gradient step is used as a
  // fallback whenever the scaled step fails to increase the objective.
  std::size_t it = 0;
  double f = objective(p);
  for (; it < iterations; ++it) {
    const auto g = gradient(p);
    double num = 0.0;
    double den = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      num += p[j] * g[j];
      den += p[j];
    }
    const double lambda = num / den;
    std::vector<double> dir(m);
    double decrement = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      dir[j] = p[j] * (g[j] - lambda) / alpha;
      decrement += dir[j] * (g[j] - lambda);
    }
    if (decrement < 1e-26) break;
    double t = 1.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (dir[j] < 0.0) t = std::min(t, -0.99 * p[j] / dir[j]);
    }
    bool moved = false;
    for (int bt = 0; bt < 60; ++bt) {
      std::vector<double> cand(m);
      for (std::size_t j = 0; j < m; ++j) cand[j] = p[j] + t * dir[j];
      const double fc = objective(cand);
      if (fc >= f + 0.25 * t * decrement) {
        p = std::move(cand);
        f = fc;
        moved = true;
        break;
      }
      t *= 0.5;
    }
    if (!moved) {
      std::vector<double> y(m);
      for (std::size_t j = 0; j < m; ++j) y[j] = p[j] + step * g[j];
      auto cand = project_to_simplex(y);
      for (auto& v : cand) v = std::max(v, 1e-300);
      const double fc = objective(cand);
      if (!(fc > f)) break;
      p = std::move(cand);
      f = fc;
    }
  }

  std::vector<double> full(pk.num_paths(), 0.0);
  for (std::size_t j = 0; j < m; ++j) full[support[j]] = p[j];
  SimplexAscentResult out{
      DiscretePathMeasure::from_weights(std::move(full), pk.terminal_map(), pk.num_terminals()),
      it, 0.0};
  out.objective = tilt_objective(out.measure, pk, advantage, alpha);
  return out;
}

double verify_conditional_preservation(const DiscretePathMeasure& pk,
                                       const DiscretePathMeasure& pstar) {
  require_same(pk, pstar, "verify_conditional_preservation");
  const auto mk = pk.terminal_marginal();
  const auto ms = pstar.terminal_marginal();
  double dev = 0.0;
  for (std::size_t i = 0; i < pk.num_paths(); ++i) {
    const std::size_t x = pk.terminal(i);
    if (mk[x] == 0.0 || ms[x] == 0.0) continue;
    dev = std::max(dev, std::abs(pstar.prob(i) / ms[x] - pk.prob(i) / mk[x]));
  }
  return dev;
}

Improvement verify_improvement(const DiscretePathMeasure& pk, std::span<const double> advantage,
                               double alpha) {
  const DiscretePathMeasure ps = brute_force_tilt(pk, advantage, alpha);
  Improvement r;
  for (std::size_t i = 0; i < pk.num_paths(); ++i) {
    r.old_expected += pk.prob(i) * advantage[pk.terminal(i)];
    r.new_expected += ps.prob(i) * advantage[pk.terminal(i)];
  }
  r.kl = path_kl(ps, pk);
  r.slack = r.new_expected - r.old_expected - alpha * r.kl;
  return r;
}

DiscretePathMeasure geometric_mixture(const DiscretePathMeasure& pk,
                                      const DiscretePathMeasure& pref, double eta) {
  require_same(pk, pref, "geometric_mixture");
  if (!(eta >= 0.0 && eta <= 1.0)) throw std::invalid_argument("geometric_mixture: eta in [0,1]");
  std::vector<double> w(pk.num_paths());
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::pow(pk.prob(i), 1.0 - eta) * std::pow(pref.prob(i), eta);
  }
  return DiscretePathMeasure::from_weights(std::move(w), pk.terminal_map(), pk.num_terminals());
}

double composite_kl_residual(const DiscretePathMeasure& p, const DiscretePathMeasure& pk,
                             const DiscretePathMeasure& pref, double alpha, double beta) {
  const double eta = beta / (alpha + beta);
  const DiscretePathMeasure pe = geometric_mixture(pk, pref, eta);
  return alpha * path_kl(p, pk) + beta * path_kl(p, pref) - (alpha + beta) * path_kl(p, pe);
}

double gaussian_composite_kl_residual(std::span<const double> m, std::span<const double> mk,
                                      std::span<const double> mref, double variance,
                                      double alpha, double beta) {
  const double eta = beta / (alpha + beta);
  const std::vector<double> me = objective::mixed_anchor(mk, mref, eta);
  return alpha * objective::gaussian_step_kl(m, mk, variance) +
         beta * objective::gaussian_step_kl(m, mref, variance) -
         (alpha + beta) * objective::gaussian_step_kl(m, me, variance);
}

double completing_square_gap(std::span<const double> f, std::span<const double> fk,
                             std::span<const double> fref, double alpha, double beta) {
  std::vector<double> fe(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) fe[i] = (alpha * fk[i] + beta * fref[i]) / (alpha + beta);
  const double lhs = alpha * sq_dist(f, fk) + beta * sq_dist(f, fref);
  const double rhs = (alpha + beta) * sq_dist(f, fe) + alpha * beta / (alpha + beta) * sq_dist(fk, fref);
  return std::abs(lhs - rhs);
}

double IsCheck::combined_stderr() const {
  return std::sqrt(is_stderr * is_stderr + direct_stderr * direct_stderr);
}
double IsCheck::disagreement() const {
  return std::abs(is_estimate - direct_estimate) / combined_stderr();
}
double IsCheck::is_z(double value) const { return std::abs(is_estimate - value) / is_stderr; }
double IsCheck::direct_z(double value) const {
  return std::abs(direct_estimate - value) / direct_stderr;
}

IsCheck mc_is_check(const Sampler& sample_old, const Sampler& sample_new,
                    const SampleFn& log_ratio, const SampleFn& f, std::size_t n_samples,
                    Rng& rng) {
  if (n_samples < 2) throw std::invalid_argument("mc_is_check: need at least 2 samples");
  std::vector<double> weighted(n_samples), direct(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    const auto x = sample_old(rng);
    weighted[i] = std::exp(log_ratio(x)) * f(x);
  }
  for (std::size_t i = 0; i < n_samples; ++i) direct[i] = f(sample_new(rng));
  const auto w = mean_se(weighted);
  const auto d = mean_se(direct);
  return IsCheck{w.mean, d.mean, w.se, d.se, n_samples};
}

IsCheck mc_is_path_check(const policy::DriftField& old_field,
                         const policy::DriftField& new_field,
                         const policy::NoiseSchedule& sched, std::span<const double> state,
                         const std::function<double(const policy::GenerationPath&)>& f,
                         std::size_t n_samples, Rng& rng) {
  if (n_samples < 2) throw std::invalid_argument("mc_is_path_check: need at least 2 samples");
  std::vector<double> weighted(n_samples), direct(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    const auto path = policy::sample_path(old_field, sched, state, rng);
    const double lr = policy::path_log_likelihood(new_field, path, sched, state) -
                      path.old_path_logp();
    weighted[i] = std::exp(lr) * f(path);
  }
  for (std::size_t i = 0; i < n_samples; ++i) {
    direct[i] = f(policy::sample_path(new_field, sched, state, rng));
  }
  const auto w = mean_se(weighted);
  const auto d = mean_se(direct);
  return IsCheck{w.mean, d.mean, w.se, d.se, n_samples};
}

double verify_girsanov(std::span<const policy::GenerationPath> paths,
                       const policy::DriftField& field_a, const policy::DriftField& field_b,
                       const policy::NoiseSchedule& sched, std::span<const double> state) {
  double dev = 0.0;
  for (const auto& path : paths) {
    const std::size_t n = path.steps();
    const std::size_t d = path.action_dim();
    Array fa = Array::matrix(n, d);
    Array fb = Array::matrix(n, d);
    double kl_sum = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const auto a = path.node(k);
      const double t = sched.time(k);
      const double dt = sched.dt(k);
      const double sigma = sched.sigma(k);
      const auto da = field_a.evaluate_one(state, a, t);
      const auto db = field_b.evaluate_one(state, a, t);
      std::vector<double> ma(d), mb(d);
      for (std::size_t j = 0; j < d; ++j) {
        fa.at(k, j) = da[j];
        fb.at(k, j) = db[j];
        ma[j] = a[j] + dt * da[j];
        mb[j] = a[j] + dt * db[j];
      }
      kl_sum += objective::gaussian_step_kl(ma, mb, sigma * sigma * dt);
    }
    dev = std::max(dev, std::abs(objective::drift_cost(fa, fb, sched) - kl_sum));
  }
  return dev;
}

std::vector<CheckResult> run_suite(const SuiteOptions& opts) {
  std::vector<CheckResult> out;
  constexpr std::size_t kStates = 3;
  constexpr std::size_t kSteps = 3;

  {
    Rng rng = Rng::stream(opts.seed, 101);
    policy::NoiseSchedule sched;
    double dev = 0.0;
    for (std::size_t i = 0; i < opts.girsanov_pairs; ++i) {
      policy::DriftFieldConfig fc;
      fc.state_dim = 3;
      fc.action_dim = 2;
      fc.time_dim = 8;
      fc.hidden = {16, 16};
      fc.output_scale = 1.0;
      const policy::DriftField a(fc, rng);
      const policy::DriftField b(fc, rng);
      const auto state = random_vector(fc.state_dim, rng);
      const auto path = policy::sample_path(a, sched, state, rng);
      dev = std::max(dev, verify_girsanov(std::span(&path, 1), a, b, sched, state));
    }
    out.push_back(make_check("girsanov-drift-cost", dev, 1e-10,
                             std::to_string(opts.girsanov_pairs) + " field pairs"));
  }

  {
    Rng rng = Rng::stream(opts.seed, 102);
    double dominance = 0.0;
    double decomposition = 0.0;
    for (std::size_t i = 0; i < opts.chains; ++i) {
      const auto p = DiscretePathMeasure::random_chain(kStates, kSteps, rng);
      const auto q = DiscretePathMeasure::random_chain(kStates, kSteps, rng);
      const double pk = path_kl(p, q);
      const double tk = terminal_kl(p, q);
      dominance = std::max(dominance, tk - pk);
      decomposition = std::max(decomposition, std::abs(pk - tk - expected_conditional_kl(p, q)));
    }
    out.push_back(make_check("path-kl-dominates-terminal-kl", std::max(dominance, 0.0), 1e-12,
                             std::to_string(opts.chains) + " chains"));
    out.push_back(make_check("kl-chain-rule-decomposition", decomposition, 1e-10,
                             std::to_string(opts.chains) + " chains"));
  }

  {
    Rng rng = Rng::stream(opts.seed, 103);
    double tv = 0.0;
    std::size_t max_iters = 0;
    for (std::size_t i = 0; i < opts.tilt_instances; ++i) {
      const auto pk = DiscretePathMeasure::random_chain(kStates, kSteps, rng);
      const auto adv = random_vector(kStates, rng);
      const double alpha = rng.uniform(0.25, 2.0);
      const auto asc = simplex_ascent(pk, adv, alpha);
      tv = std::max(tv, total_variation(asc.measure, brute_force_tilt(pk, adv, alpha)));
      max_iters = std::max(max_iters, asc.iterations);
    }
    out.push_back(make_check("simplex-ascent-matches-tilt", tv, 1e-6,
                             std::to_string(opts.tilt_instances) + " instances, <= " +
                                 std::to_string(max_iters) + " iterations"));
  }

  {
    Rng rng = Rng::stream(opts.seed, 104);
    double cond = 0.0;
    double violation = 0.0;
    double min_slack = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < opts.sweep_instances; ++i) {
      const auto pk = DiscretePathMeasure::random_chain(kStates, kSteps, rng);
      const auto adv = random_vector(kStates, rng);
      const double alpha = rng.uniform(0.1, 3.0);
      cond = std::max(cond, verify_conditional_preservation(pk, brute_force_tilt(pk, adv, alpha)));
      const auto imp = verify_improvement(pk, adv, alpha);
      violation = std::max(violation, -imp.slack);
      min_slack = std::min(min_slack, imp.slack);
    }
    out.push_back(make_check("conditional-preservation", cond, 1e-10,
                             std::to_string(opts.sweep_instances) + " tilts"));
    std::ostringstream detail;
    detail << opts.sweep_instances << " instances, min slack " << min_slack;
    out.push_back(make_check("advantage-improvement-bound", std::max(violation, 0.0), 1e-12,
                             detail.str()));
  }

  {
    Rng rng = Rng::stream(opts.seed, 105);
    std::vector<double> alphas{0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 64.0, 256.0, 1024.0, 1e5};
    double worst_increase = 0.0;
    double last_tv = 0.0;
    for (std::size_t i = 0; i < opts.sweep_instances; ++i) {
      const auto pk = DiscretePathMeasure::random_chain(kStates, kSteps, rng);
      const auto adv = random_vector(kStates, rng);
      double prev = std::numeric_limits<double>::infinity();
      for (double a : alphas) {
        const double tv = total_variation(brute_force_tilt(pk, adv, a), pk);
        worst_increase = std::max(worst_increase, tv - prev);
        prev = tv;
      }
      last_tv = std::max(last_tv, prev);
    }
    std::ostringstream detail;
    detail << "TV at alpha=1e5 <= " << last_tv;
    out.push_back(make_check("tilt-vanishes-as-alpha-grows",
                             std::max({worst_increase, 0.0, last_tv}), 1e-4, detail.str()));
  }

  {
    // One-step Gaussian policies N(m, s^2 I): F(a) = sum_j a_j^2 for the
    // expectation form and F = log ratio for the KL form.
    Rng rng = Rng::stream(opts.seed, 106);
    constexpr std::size_t d = 2;
    const double s = 0.7;
    const std::vector<double> mk{0.3, -0.2};
    const std::vector<double> mt{0.5, 0.1};
    auto sampler = [&](const std::vector<double>& mean) {
      return [mean, s](Rng& r) {
        std::vector<double> x(d);
        for (std::size_t j = 0; j < d; ++j) x[j] = mean[j] + s * r.normal();
        return x;
      };
    };
    auto log_ratio = [&](std::span<const double> x) {
      return (sq_dist(x, mk) - sq_dist(x, mt)) / (2.0 * s * s);
    };
    auto square = [](std::span<const double> x) {
      double v = 0.0;
      for (double xi : x) v += xi * xi;
      return v;
    };
    const double analytic_mean = sq_dist(mt, std::vector<double>(d, 0.0)) + d * s * s;
    const auto e = mc_is_check(sampler(mk), sampler(mt), log_ratio, square, opts.is_samples, rng);
    const double dev_e = std::max({e.disagreement(), e.is_z(analytic_mean), e.direct_z(analytic_mean)});
    std::ostringstream de;
    de << "is " << e.is_estimate << " direct " << e.direct_estimate << " analytic " << analytic_mean;
    out.push_back(make_check("importance-sampling-expectation", dev_e, 3.0, de.str()));

    const double analytic_kl = objective::gaussian_step_kl(mt, mk, s * s);
    const auto k = mc_is_check(sampler(mk), sampler(mt), log_ratio, log_ratio, opts.is_samples, rng);
    const double dev_k = std::max({k.disagreement(), k.is_z(analytic_kl), k.direct_z(analytic_kl)});
    std::ostringstream dk;
    dk << "is " << k.is_estimate << " direct " << k.direct_estimate << " analytic " << analytic_kl;
    out.push_back(make_check("importance-sampling-kl", dev_k, 3.0, dk.str()));

    policy::NoiseSchedule sched;
    sched.sigma_max = 1.0;
    sched.sigma_min = 0.5;
    sched.steps = 4;
    policy::DriftFieldConfig fc;
    fc.state_dim = 2;
    fc.action_dim = 2;
    fc.time_dim = 4;
    fc.hidden = {8};
    fc.output_scale = 0.3;
    const policy::DriftField old_field(fc, rng);
    const policy::DriftField new_field(fc, rng);
    const std::vector<double> state{0.4, -0.6};
    const auto pth = mc_is_path_check(
        old_field, new_field, sched, state,
        [](const policy::GenerationPath& path) { return path.terminal()[0]; },
        std::max<std::size_t>(opts.is_samples / 5, 2), rng);
    std::ostringstream dp;
    dp << "is " << pth.is_estimate << " direct " << pth.direct_estimate;
    out.push_back(make_check("importance-sampling-path", pth.disagreement(), 3.0, dp.str()));
  }

  {
    Rng rng = Rng::stream(opts.seed, 107);
    const auto pk = DiscretePathMeasure::random_chain(kStates, kSteps, rng);
    const auto pref = DiscretePathMeasure::random_chain(kStates, kSteps, rng);
    double worst = 0.0;
    for (int inst = 0; inst < 5; ++inst) {
      const double alpha = rng.uniform(0.1, 2.0);
      const double beta = rng.uniform(0.01, 1.0);
      std::vector<double> res;
      for (int i = 0; i < 10; ++i) {
        res.push_back(composite_kl_residual(DiscretePathMeasure::random_like(pk, rng), pk, pref,
                                            alpha, beta));
      }
      worst = std::max(worst, spread(res));
    }
    out.push_back(make_check("composite-kl-discrete", worst, 1e-10, "spread over 10 random P"));

    double gworst = 0.0;
    double sq_worst = 0.0;
    for (int inst = 0; inst < 5; ++inst) {
      constexpr std::size_t dim = 4;
      const auto mkv = random_vector(dim, rng);
      const auto mref = random_vector(dim, rng);
      const double alpha = rng.uniform(0.1, 2.0);
      const double beta = rng.uniform(0.01, 1.0);
      const double var = rng.uniform(0.05, 2.0);
      std::vector<double> res;
      for (int i = 0; i < 10; ++i) {
        const auto m = random_vector(dim, rng, 2.0);
        res.push_back(gaussian_composite_kl_residual(m, mkv, mref, var, alpha, beta));
        sq_worst = std::max(sq_worst, completing_square_gap(m, mkv, mref, alpha, beta));
      }
      gworst = std::max(gworst, spread(res));
    }
    out.push_back(make_check("composite-kl-gaussian", gworst, 1e-8, "spread over 10 random means"));
    out.push_back(make_check("completing-the-square", sq_worst, 1e-10, "50 random vectors"));
  }

  for (auto& r : gradient_fidelity(opts.seed, opts.gradient_points)) out.push_back(std::move(r));
  return out;
}

double finite_difference_error(std::span<diff::Parameter* const> params,
                               const std::function<double(bool)>& loss, double h) {
  for (auto* p : params) p->zero_grad();
  loss(true);
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double keep = p->value[i];
      p->value[i] = keep + h;
      const double up = loss(false);
      p->value[i] = keep - h;
      const double down = loss(false);
      p->value[i] = keep;
      const double fd = (up - down) / (2.0 * h);
      const double g = p->grad[i];
      diff += (g - fd) * (g - fd);
      na += g * g;
      nn += fd * fd;
    }
  }
  return std::sqrt(diff) / std::max(std::sqrt(std::max(na, nn)), 1e-300);
}

std::vector<CheckResult> gradient_fidelity(std::uint64_t seed, std::size_t points) {
  constexpr double kStep = 1e-5;
  std::vector<CheckResult> out;

  {
    Rng rng = Rng::stream(seed, 201);
    policy::NoiseSchedule sched;
    sched.steps = 4;
    policy::DriftFieldConfig fc;
    fc.state_dim = 3;
    fc.action_dim = 2;
    fc.time_dim = 4;
    fc.hidden = {12, 12};
    fc.output_scale = 1.0;
    objective::ObjectiveConfig obj;
    obj.kl_coef = 0.5;
    objective::ClipConfig clip;
    constexpr std::size_t kPaths = 6;

    double worst = 0.0;
    std::size_t resampled = 0;
    for (std::size_t pt = 0; pt < points; ++pt) {
      policy::DriftField field(fc, rng);
      std::vector<std::vector<double>> states;
      std::vector<policy::GenerationPath> paths;
      for (std::size_t b = 0; b < kPaths; ++b) {
        states.push_back(random_vector(fc.state_dim, rng));
        paths.push_back(policy::sample_path(field, sched, states.back(), rng));
      }
      Array old_logp = Array::matrix(kPaths * sched.steps, 1);
      Array old_drifts = Array::matrix(kPaths * sched.steps, fc.action_dim);
      for (std::size_t b = 0; b < kPaths; ++b) {
        for (std::size_t n = 0; n < sched.steps; ++n) {
          old_logp[b * sched.steps + n] = paths[b].old_logp[n];
          for (std::size_t j = 0; j < fc.action_dim; ++j) {
            old_drifts.at(b * sched.steps + n, j) = paths[b].old_drifts.at(n, j);
          }
        }
      }
      const auto adv = random_vector(kPaths, rng);
      std::vector<std::span<const double>> sv(states.begin(), states.end());
      std::vector<const policy::GenerationPath*> pv;
      for (const auto& p : paths) pv.push_back(&p);

      // Move away from the sampling parameters, keeping every clip inactive
      // by a margin wider than the difference step.
      const auto params = field.net().parameter_ptrs();
      std::vector<Array> base;
      for (auto* p : params) base.push_back(p->value);
      double scale = 0.02;
      for (;;) {
        for (std::size_t k = 0; k < params.size(); ++k) {
          for (std::size_t i = 0; i < base[k].size(); ++i) {
            params[k]->value[i] = base[k][i] + scale * rng.normal();
          }
        }
        diff::Tape tape;
        const auto batch = policy::recompute_on_paths(tape, field, sched, sv, pv);
        double margin = std::numeric_limits<double>::infinity();
        for (std::size_t b = 0; b < kPaths; ++b) {
          double total = 0.0;
          for (std::size_t n = 0; n < sched.steps; ++n) {
            const std::size_t r = b * sched.steps + n;
            const double d = batch.step_logp.value()[r] - old_logp[r];
            margin = std::min(margin, clip.c_step - std::abs(d));
            total += d;
          }
          margin = std::min(margin, clip.c_path - std::abs(total));
        }
        if (margin > 1e-3) break;
        scale *= 0.5;
        ++resampled;
      }

      auto loss = [&](bool grad) {
        diff::Tape tape;
        const auto batch = policy::recompute_on_paths(tape, field, sched, sv, pv);
        const auto l = objective::mdpo_loss(tape, batch.step_logp, batch.drifts, old_logp,
                                            old_drifts, adv, sched, obj, clip);
        const double v = l.loss.item();
        if (grad) tape.backward(l.loss);
        return v;
      };
      worst = std::max(worst, finite_difference_error(params, loss, kStep));
    }
    std::ostringstream detail;
    detail << points << " points, " << resampled << " perturbations shrunk";
    out.push_back(make_check("mdpo-loss-gradient", worst, 1e-4, detail.str()));
  }

  {
    Rng rng = Rng::stream(seed, 202);
    double worst = 0.0;
    for (std::size_t pt = 0; pt < points; ++pt) {
      critic::ValueNet net(3, {12, 12}, diff::Activation::Elu, rng);
      Array states = Array::matrix(8, 3);
      for (auto& v : states.values()) v = rng.normal();
      const auto targets = random_vector(8, rng, 2.0);
      auto loss = [&](bool grad) {
        diff::Tape tape;
        const auto l = critic::value_loss(tape, net, states, targets);
        const double v = l.item();
        if (grad) tape.backward(l);
        return v;
      };
      const auto params = net.net().parameter_ptrs();
      worst = std::max(worst, finite_difference_error(params, loss, kStep));
    }
    out.push_back(make_check("value-loss-gradient", worst, 1e-4,
                             std::to_string(points) + " points"));
  }
  return out;
}

}  // namespace gsbmdpo::oracles
