#include "gsbmdpo/genpolicy.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace gsbmdpo::policy {
namespace {

bool finite_span(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

// Coefficients of log N(x; mean, sigma^2 dt I) = quad * ||resid||^2 + offset.
struct StepCoefficients {
  double quad;
  double offset;
};

StepCoefficients step_coefficients(std::size_t dim, double dt, double sigma) {
  const double var = sigma * sigma * dt;
  return {-1.0 / (2.0 * var),
          -0.5 * static_cast<double>(dim) * std::log(2.0 * std::numbers::pi * var)};
}

}  // namespace

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "constant") return ScheduleKind::Constant;
  if (s == "linear") return ScheduleKind::Linear;
  if (s == "exponential") return ScheduleKind::Exponential;
  throw std::invalid_argument("unknown noise schedule '" + s + "'");
}

std::string to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::Constant:
      return "constant";
    case ScheduleKind::Linear:
      return "linear";
    case ScheduleKind::Exponential:
      return "exponential";
  }
  return "linear";
}

void NoiseSchedule::validate() const {
  if (!(sigma_max > 0.0) || !(sigma_min > 0.0) || !std::isfinite(sigma_max) ||
      !std::isfinite(sigma_min)) {
    throw std::invalid_argument("noise schedule: sigma_max and sigma_min must be positive");
  }
  if (steps < 1) throw std::invalid_argument("noise schedule: at least one generation step");
}

double NoiseSchedule::time(std::size_t n) const {
  return static_cast<double>(n) / static_cast<double>(steps);
}

double NoiseSchedule::dt(std::size_t n) const { return time(n + 1) - time(n); }

double NoiseSchedule::sigma(std::size_t n) const { return sigma_at(*this, time(n)); }

double sigma_at(const NoiseSchedule& sched, double t) {
  sched.validate();
  if (!(t >= 0.0 && t <= 1.0)) throw std::out_of_range("sigma_at: t must lie in [0,1]");
  const double u = sched.increasing ? 1.0 - t : t;
  switch (sched.kind) {
    case ScheduleKind::Constant:
      return sched.sigma_max;
    case ScheduleKind::Linear:
      return sched.sigma_max + u * (sched.sigma_min - sched.sigma_max);
    case ScheduleKind::Exponential:
      return sched.sigma_max * std::pow(sched.sigma_min / sched.sigma_max, u);
  }
  return sched.sigma_max;
}

void time_embedding(double t, std::span<double> out) {
  const std::size_t half = out.size() / 2;
  for (std::size_t k = 0; k < half; ++k) {
    const double w = 2.0 * std::numbers::pi * static_cast<double>(k + 1) * t;
    out[2 * k] = std::sin(w);
    out[2 * k + 1] = std::cos(w);
  }
  if (out.size() % 2 == 1) out.back() = t;
}

DriftField::DriftField(const DriftFieldConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg_.action_dim == 0) throw std::invalid_argument("drift field: action_dim must be >= 1");
  std::vector<std::size_t> widths{cfg_.state_dim + cfg_.action_dim + cfg_.time_dim};
  widths.insert(widths.end(), cfg_.hidden.begin(), cfg_.hidden.end());
  widths.push_back(cfg_.action_dim);
  net_ = diff::Mlp(widths, cfg_.activation, rng, cfg_.output_scale);
}

DriftField::DriftField(const DriftFieldConfig& cfg, diff::Mlp net)
    : cfg_(cfg), net_(std::move(net)) {
  if (net_.input_width() != cfg_.state_dim + cfg_.action_dim + cfg_.time_dim ||
      net_.output_width() != cfg_.action_dim) {
    throw ShapeError("drift field: network widths do not match configuration");
  }
}

void DriftField::write_input(std::span<const double> state, std::span<const double> action,
                             double t, std::span<double> row) const {
  if (state.size() != cfg_.state_dim) throw ShapeError("drift field: state dimension mismatch");
  if (action.size() != cfg_.action_dim) {
    throw ShapeError("drift field: action dimension mismatch");
  }
  std::size_t k = 0;
  for (double v : state) row[k++] = v;
  for (double v : action) row[k++] = v;
  time_embedding(t, row.subspan(k, cfg_.time_dim));
}

Array DriftField::evaluate(const Array& states, const Array& actions, double t) const {
  const std::size_t b = actions.rows();
  Array in = Array::matrix(b, net_.input_width());
  for (std::size_t i = 0; i < b; ++i) {
    std::span<const double> s = cfg_.state_dim ? states.row(i) : std::span<const double>{};
    write_input(s, actions.row(i), t, in.row(i));
  }
  return net_.evaluate(in);
}

std::vector<double> DriftField::evaluate_one(std::span<const double> state,
                                             std::span<const double> action, double t) const {
  Array in = Array::matrix(1, net_.input_width());
  write_input(state, action, t, in.row(0));
  const Array out = net_.evaluate(in);
  return out.to_vector();
}

double GenerationPath::old_path_logp() const {
  double s = 0.0;
  for (double v : old_logp) s += v;
  return s;
}

std::vector<double> euler_step(std::span<const double> a, double dt,
                               std::span<const double> drift, double sigma,
                               std::span<const double> eps) {
  if (a.size() != drift.size() || a.size() != eps.size()) {
    throw ShapeError("euler_step: dimension mismatch");
  }
  if (!(dt > 0.0)) throw std::invalid_argument("euler_step: dt must be positive");
  if (!finite_span(a) || !finite_span(drift) || !finite_span(eps) || !std::isfinite(sigma) ||
      !std::isfinite(dt)) {
    throw NumericError("euler_step: non-finite input");
  }
  const double noise = sigma * std::sqrt(dt);
  std::vector<double> out(a.size());
  for (std::size_t j = 0; j < a.size(); ++j) out[j] = a[j] + dt * drift[j] + noise * eps[j];
  return out;
}

double gaussian_step_logpdf(std::span<const double> a, std::span<const double> x,
                            std::span<const double> drift, double dt, double sigma) {
  if (!(dt > 0.0) || !(sigma > 0.0)) {
    throw std::invalid_argument("step log-likelihood: dt and sigma must be positive");
  }
  const auto c = step_coefficients(a.size(), dt, sigma);
  double ss = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double r = (x[j] - a[j]) + drift[j] * -dt;
    ss += r * r;
  }
  const double out = ss * c.quad + c.offset;
  if (!std::isfinite(out)) throw NumericError("step log-likelihood: non-finite result");
  return out;
}

double step_log_likelihood(const DriftField& field, std::span<const double> a_n,
                           std::span<const double> a_next, double t_n, double dt,
                           double sigma, std::span<const double> state) {
  const auto f = field.evaluate_one(state, a_n, t_n);
  return gaussian_step_logpdf(a_n, a_next, f, dt, sigma);
}

double path_log_likelihood(const DriftField& field, const GenerationPath& path,
                           const NoiseSchedule& sched, std::span<const double> state) {
  if (path.nodes.rows() != sched.steps + 1) {
    throw ShapeError("path_log_likelihood: path has " + std::to_string(path.nodes.rows()) +
                     " nodes, schedule expects " + std::to_string(sched.steps + 1));
  }
  double total = 0.0;
  for (std::size_t n = 0; n < sched.steps; ++n) {
    total += step_log_likelihood(field, path.node(n), path.node(n + 1), sched.time(n),
                                 sched.dt(n), sched.sigma(n), state);
  }
  return total;
}

GenerationPath sample_path(const DriftField& field, const NoiseSchedule& sched,
                           std::span<const double> state, Rng& rng) {
  if (state.size() != field.state_dim()) throw ShapeError("sample_path: state dimension");
  sched.validate();
  const std::size_t d = field.action_dim();
  const std::size_t steps = sched.steps;
  GenerationPath path{Array::matrix(steps + 1, d), Array::matrix(steps, d),
                      std::vector<double>(steps)};
  for (auto& v : path.nodes.row(0)) v = rng.normal();
  std::vector<double> eps(d);
  for (std::size_t n = 0; n < steps; ++n) {
    const auto f = field.evaluate_one(state, path.node(n), sched.time(n));
    for (auto& e : eps) e = rng.normal();
    const auto next = euler_step(path.node(n), sched.dt(n), f, sched.sigma(n), eps);
    if (!finite_span(next)) throw NumericError("sample_path: non-finite node");
    std::copy(next.begin(), next.end(), path.nodes.row(n + 1).begin());
    std::copy(f.begin(), f.end(), path.old_drifts.row(n).begin());
    path.old_logp[n] = gaussian_step_logpdf(path.node(n), path.node(n + 1), f, sched.dt(n),
                                            sched.sigma(n));
  }
  return path;
}

std::vector<GenerationPath> sample_paths(const DriftField& field, const NoiseSchedule& sched,
                                         const Array& states, std::span<Rng> rngs,
                                         std::vector<bool>* ok) {
  sched.validate();
  const std::size_t b = rngs.size();
  const std::size_t d = field.action_dim();
  const std::size_t steps = sched.steps;
  if (field.state_dim() && (states.rows() != b || states.cols() != field.state_dim())) {
    throw ShapeError("sample_paths: states must be [" + std::to_string(b) + ", " +
                     std::to_string(field.state_dim()) + "], got " + states.shape_string());
  }
  std::vector<GenerationPath> paths(b);
  Array current = Array::matrix(b, d);
  for (std::size_t i = 0; i < b; ++i) {
    paths[i] = GenerationPath{Array::matrix(steps + 1, d), Array::matrix(steps, d),
                              std::vector<double>(steps)};
    for (std::size_t j = 0; j < d; ++j) {
      const double v = rngs[i].normal();
      paths[i].nodes.at(0, j) = v;
      current.at(i, j) = v;
    }
  }
  if (ok) ok->assign(b, true);
  for (std::size_t n = 0; n < steps; ++n) {
    const double dt = sched.dt(n);
    const double sigma = sched.sigma(n);
    const double noise = sigma * std::sqrt(dt);
    const Array f = field.evaluate(states, current, sched.time(n));
    for (std::size_t i = 0; i < b; ++i) {
      auto prev = paths[i].nodes.row(n);
      auto next = paths[i].nodes.row(n + 1);
      for (std::size_t j = 0; j < d; ++j) {
        const double eps = rngs[i].normal();
        next[j] = prev[j] + dt * f.at(i, j) + noise * eps;
        current.at(i, j) = next[j];
        paths[i].old_drifts.at(n, j) = f.at(i, j);
      }
      const bool finite = finite_span(next) && finite_span(f.row(i));
      if (!finite) {
        if (!ok) throw NumericError("sample_paths: non-finite node");
        (*ok)[i] = false;
        // Keep the batch evaluable; the path is dropped by the caller.
        for (std::size_t j = 0; j < d; ++j) {
          next[j] = 0.0;
          current.at(i, j) = 0.0;
          paths[i].old_drifts.at(n, j) = 0.0;
        }
        paths[i].old_logp[n] = 0.0;
        continue;
      }
      paths[i].old_logp[n] = gaussian_step_logpdf(prev, next, f.row(i), dt, sigma);
    }
  }
  return paths;
}

std::vector<double> ode_action_from(const DriftField& field, const NoiseSchedule& sched,
                                    std::span<const double> state,
                                    std::span<const double> prior_sample) {
  sched.validate();
  std::vector<double> a(prior_sample.begin(), prior_sample.end());
  const std::vector<double> zeros(a.size(), 0.0);
  for (std::size_t n = 0; n < sched.steps; ++n) {
    const auto f = field.evaluate_one(state, a, sched.time(n));
    a = euler_step(a, sched.dt(n), f, sched.sigma(n), zeros);
    if (!finite_span(a)) throw NumericError("ode_action: non-finite node");
  }
  return a;
}

std::vector<double> ode_action(const DriftField& field, const NoiseSchedule& sched,
                               std::span<const double> state, Rng& rng) {
  if (state.size() != field.state_dim()) throw ShapeError("ode_action: state dimension");
  std::vector<double> prior(field.action_dim());
  for (auto& v : prior) v = rng.normal();
  return ode_action_from(field, sched, state, prior);
}

Array ode_actions(const DriftField& field, const NoiseSchedule& sched, const Array& states,
                  std::span<Rng> rngs) {
  sched.validate();
  const std::size_t b = rngs.size();
  const std::size_t d = field.action_dim();
  Array a = Array::matrix(b, d);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < d; ++j) a.at(i, j) = rngs[i].normal();
  }
  for (std::size_t n = 0; n < sched.steps; ++n) {
    const double dt = sched.dt(n);
    const Array f = field.evaluate(states, a, sched.time(n));
    for (std::size_t k = 0; k < a.size(); ++k) a[k] = a[k] + dt * f[k];
  }
  if (!a.all_finite()) throw NumericError("ode_actions: non-finite action");
  return a;
}

TapedPathBatch recompute_on_paths(diff::Tape& tape, DriftField& field,
                                  const NoiseSchedule& sched,
                                  std::span<const std::span<const double>> states,
                                  std::span<const GenerationPath* const> paths) {
  const std::size_t b = paths.size();
  const std::size_t steps = sched.steps;
  const std::size_t d = field.action_dim();
  const std::size_t rows = b * steps;
  if (states.size() != b) throw ShapeError("recompute_on_paths: states/paths length mismatch");

  Array input = Array::matrix(rows, field.net().input_width());
  Array neg_dt = Array::matrix(rows, d);
  Array increments = Array::matrix(rows, d);
  Array quad = Array::matrix(rows, 1);
  Array offset = Array::matrix(rows, 1);
  for (std::size_t p = 0; p < b; ++p) {
    const GenerationPath& path = *paths[p];
    if (path.nodes.rows() != steps + 1 || path.action_dim() != d) {
      throw ShapeError("recompute_on_paths: stored path does not match schedule");
    }
    for (std::size_t n = 0; n < steps; ++n) {
      const std::size_t r = p * steps + n;
      field.write_input(states[p], path.node(n), sched.time(n), input.row(r));
      const auto c = step_coefficients(d, sched.dt(n), sched.sigma(n));
      quad[r] = c.quad;
      offset[r] = c.offset;
      for (std::size_t j = 0; j < d; ++j) {
        neg_dt.at(r, j) = -sched.dt(n);
        increments.at(r, j) = path.nodes.at(n + 1, j) - path.nodes.at(n, j);
      }
    }
  }
  diff::Var drifts = field.net().forward(tape, tape.constant(std::move(input)));
  diff::Var resid = tape.add_const(tape.mul_const(drifts, std::move(neg_dt)),
                                   std::move(increments));
  diff::Var ss = tape.row_sum(tape.square(resid));
  diff::Var logp = tape.add_const(tape.mul_const(ss, std::move(quad)), std::move(offset));
  return {drifts, logp};
}

}  // namespace gsbmdpo::policy
