#include "gsbmdpo/toylab.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "gsbmdpo/optim.hpp"
#include "gsbmdpo/pathobj.hpp"
#include "gsbmdpo/trainer.hpp"

namespace gsbmdpo::toy {
namespace {

constexpr std::size_t kChunk = 4096;

void require_simplex(const Quad& w, const char* who) {
  double s = 0.0;
  for (double v : w) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw std::invalid_argument(std::string(who) + ": weights must be non-negative");
    }
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument(std::string(who) + ": weights must sum to 1");
}

policy::DriftFieldConfig field_config(const ToyConfig& cfg) {
  policy::DriftFieldConfig fc;
  fc.state_dim = 1;
  fc.action_dim = 2;
  fc.time_dim = cfg.time_dim;
  fc.hidden = cfg.hidden;
  fc.activation = diff::Activation::Silu;
  fc.output_scale = 1.0;
  return fc;
}

std::vector<std::array<double, 2>> take(const std::vector<std::array<double, 2>>& v,
                                        std::size_t n) {
  return {v.begin(), v.begin() + static_cast<std::ptrdiff_t>(std::min(n, v.size()))};
}

void write_samples(const std::filesystem::path& path,
                   const std::vector<std::array<double, 2>>& samples) {
  std::FILE* f = std::fopen(path.string().c_str(), "w");
  if (!f) throw std::runtime_error("toy: cannot write " + path.string());
  std::fputs("x,y\n", f);
  for (const auto& s : samples) std::fprintf(f, "%.17g,%.17g\n", s[0], s[1]);
  std::fclose(f);
}

}  // namespace

std::size_t quadrant_of(double x, double y) {
  if (x >= 0.0) return y >= 0.0 ? 0 : 3;
  return y >= 0.0 ? 1 : 2;
}

void GmmOldPolicy::validate() const {
  if (!(std > 0.0)) throw std::invalid_argument("toy: component std must be positive");
  require_simplex(weights, "toy old policy");
  for (std::size_t k = 0; k < 4; ++k) {
    if (quadrant_of(means[k][0], means[k][1]) != k || means[k][0] == 0.0 || means[k][1] == 0.0) {
      throw std::invalid_argument("toy: component " + std::to_string(k) +
                                  " mean must lie strictly inside its quadrant");
    }
  }
}

double GmmOldPolicy::density(double x, double y) const {
  const double norm = 1.0 / (2.0 * std::numbers::pi * std * std);
  double p = 0.0;
  for (std::size_t k = 0; k < 4; ++k) {
    const double dx = x - means[k][0];
    const double dy = y - means[k][1];
    p += weights[k] * norm * std::exp(-(dx * dx + dy * dy) / (2.0 * std * std));
  }
  return p;
}

std::array<double, 2> GmmOldPolicy::sample(Rng& rng) const {
  const double u = rng.uniform();
  std::size_t k = 0;
  double c = weights[0];
  while (k < 3 && u >= c) c += weights[++k];
  return {means[k][0] + std * rng.normal(), means[k][1] + std * rng.normal()};
}

void QuadrantPreference::validate() const {
  for (double w : weights) {
    if (!(w > 0.0) || !std::isfinite(w)) {
      throw std::invalid_argument("toy: preference weights must be positive");
    }
  }
  if (!(beta > 0.0)) throw std::invalid_argument("toy: beta must be positive");
}

double QuadrantPreference::advantage(double x, double y) const {
  return beta * std::log(weights[quadrant_of(x, y)]);
}

Quad tilted_quadrant_masses(const Quad& old_weights, const Quad& pref_weights) {
  Quad out{};
  double s = 0.0;
  for (std::size_t k = 0; k < 4; ++k) {
    if (old_weights[k] < 0.0 || pref_weights[k] <= 0.0) {
      throw std::invalid_argument("tilted_quadrant_masses: weights must be non-negative / positive");
    }
    out[k] = old_weights[k] * pref_weights[k];
    s += out[k];
  }
  if (!(s > 0.0)) throw std::domain_error("tilted_quadrant_masses: zero total mass");
  for (auto& v : out) v /= s;
  return out;
}

Quad quadrant_masses(std::span<const std::array<double, 2>> samples) {
  Quad m{};
  if (samples.empty()) return m;
  for (const auto& s : samples) m[quadrant_of(s[0], s[1])] += 1.0;
  for (auto& v : m) v /= static_cast<double>(samples.size());
  return m;
}

double l1(const Quad& a, const Quad& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < 4; ++k) s += std::abs(a[k] - b[k]);
  return s;
}

std::size_t count_modes(std::span<const std::array<double, 2>> samples, double bandwidth,
                        double min_fraction) {
  const std::size_t n = std::min<std::size_t>(samples.size(), 1000);
  if (n == 0) return 0;
  const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
  std::vector<std::array<double, 2>> centers;
  std::vector<std::size_t> counts;
  for (std::size_t i = 0; i < n; ++i) {
    std::array<double, 2> x = samples[i];
    for (int it = 0; it < 100; ++it) {
      double wx = 0.0, wy = 0.0, ws = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double dx = samples[j][0] - x[0];
        const double dy = samples[j][1] - x[1];
        const double w = std::exp(-(dx * dx + dy * dy) * inv);
        wx += w * samples[j][0];
        wy += w * samples[j][1];
        ws += w;
      }
      const std::array<double, 2> nx{wx / ws, wy / ws};
      const double shift = std::hypot(nx[0] - x[0], nx[1] - x[1]);
      x = nx;
      if (shift < 1e-6) break;
    }
    std::size_t c = 0;
    for (; c < centers.size(); ++c) {
      if (std::hypot(centers[c][0] - x[0], centers[c][1] - x[1]) < 0.5 * bandwidth) break;
    }
    if (c == centers.size()) {
      centers.push_back(x);
      counts.push_back(0);
    }
    ++counts[c];
  }
  const double floor = min_fraction * static_cast<double>(n);
  return static_cast<std::size_t>(std::count_if(
      counts.begin(), counts.end(), [&](std::size_t c) { return static_cast<double>(c) >= floor; }));
}

void ToyConfig::validate() const {
  old_policy.validate();
  preference.validate();
  schedule.validate();
  if (hidden.empty()) throw std::invalid_argument("toy: hidden must not be empty");
  if (prefit_iterations == 0 || prefit_batch == 0) {
    throw std::invalid_argument("toy: prefit budget must be positive");
  }
  if (outer_iterations == 0 || paths_per_iteration == 0 || epochs == 0 || minibatches == 0) {
    throw std::invalid_argument("toy: training budget must be positive");
  }
  if (minibatches > paths_per_iteration) {
    throw std::invalid_argument("toy: more minibatches than paths");
  }
  if (!(lr > 0.0) || !(prefit_lr > 0.0)) throw std::invalid_argument("toy: learning rates must be positive");
  if (eval_samples < 2) throw std::invalid_argument("toy: eval_samples must be at least 2");
}

std::vector<std::array<double, 2>> sample_terminals(const policy::DriftField& field,
                                                    const policy::NoiseSchedule& sched,
                                                    std::size_t n, std::uint64_t seed) {
  std::vector<std::array<double, 2>> out;
  out.reserve(n);
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t b = std::min(kChunk, n - start);
    std::vector<Rng> rngs;
    rngs.reserve(b);
    for (std::size_t i = 0; i < b; ++i) rngs.push_back(Rng::stream(seed, start + i));
    const Array states = Array::matrix(b, field.state_dim());
    std::vector<bool> ok;
    const auto paths = policy::sample_paths(field, sched, states, rngs, &ok);
    for (std::size_t i = 0; i < b; ++i) {
      if (!ok[i]) continue;
      const auto t = paths[i].terminal();
      out.push_back({t[0], t[1]});
    }
  }
  return out;
}

policy::DriftField prefit(const ToyConfig& cfg, Quad* fitted_masses) {
  cfg.validate();
  const auto& sched = cfg.schedule;
  const std::size_t steps = sched.steps;
  Rng init = Rng::stream(cfg.seed, 11);
  Rng rng = Rng::stream(cfg.seed, 12);
  policy::DriftField field(field_config(cfg), init);

  // Discrete Brownian bridge from the prior draw to a mixture sample:
  // variance increments v_n = sigma_n^2 dt_n, cumulative before step n, and
  // remaining from step n.
  std::vector<double> v(steps), before(steps + 1, 0.0);
  for (std::size_t n = 0; n < steps; ++n) {
    v[n] = sched.sigma(n) * sched.sigma(n) * sched.dt(n);
    before[n + 1] = before[n] + v[n];
  }
  const double total = before[steps];

  auto params = field.net().parameter_ptrs();
  diff::Adam opt(params);
  const std::size_t b = cfg.prefit_batch;
  const std::size_t width = field.net().input_width();
  const std::array<double, 1> state{0.0};
  for (std::size_t it = 0; it < cfg.prefit_iterations; ++it) {
    Array inputs = Array::matrix(b, width);
    Array targets = Array::matrix(b, 2);
    for (std::size_t i = 0; i < b; ++i) {
      const std::array<double, 2> a0{rng.normal(), rng.normal()};
      const auto x = cfg.old_policy.sample(rng);
      const std::size_t n = std::min<std::size_t>(
          static_cast<std::size_t>(rng.uniform() * static_cast<double>(steps)), steps - 1);
      const double frac = before[n] / total;
      const double sd = std::sqrt(before[n] * (total - before[n]) / total);
      const double remaining = total - before[n];
      std::array<double, 2> an{};
      for (std::size_t j = 0; j < 2; ++j) {
        an[j] = a0[j] + frac * (x[j] - a0[j]) + sd * rng.normal();
        targets.at(i, j) = v[n] / remaining * (x[j] - an[j]) / sched.dt(n);
      }
      field.write_input(state, an, sched.time(n), inputs.row(i));
    }
    field.net().zero_grad();
    diff::Tape tape;
    const diff::Var pred = diff::forward_mlp(tape, field.net(), inputs);
    const diff::Var loss = tape.mean(tape.square(tape.sub(pred, tape.constant(std::move(targets)))));
    tape.backward(loss);
    diff::clip_grad_norm(params, 10.0);
    const double progress = static_cast<double>(it) / static_cast<double>(cfg.prefit_iterations);
    opt.step(diff::cosine_lr(cfg.prefit_lr, progress));
  }

  const auto samples = sample_terminals(field, sched, std::min<std::size_t>(cfg.eval_samples, 20000),
                                        cfg.seed ^ 0x5eedULL);
  const Quad m = quadrant_masses(samples);
  if (fitted_masses) *fitted_masses = m;
  if (l1(m, cfg.old_policy.weights) > 0.1) {
    throw NumericError("toy prefit: quadrant masses off by " +
                       std::to_string(l1(m, cfg.old_policy.weights)) + " (l1)");
  }
  return field;
}

ToyResult run_toy(const ToyConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  ToyResult r;
  r.old_masses = cfg.old_policy.weights;
  r.target_masses = tilted_quadrant_masses(cfg.old_policy.weights, cfg.preference.weights);

  const policy::DriftField fitted = prefit(cfg);

  train::GsbActorConfig ac;
  ac.field = field_config(cfg);
  ac.schedule = cfg.schedule;
  ac.objective.kl_coef = static_cast<double>(cfg.outer_iterations) * cfg.preference.beta;
  ac.objective.reference_mix = 0.0;
  ac.objective.normalize_advantages = false;
  ac.clip.c_step = cfg.c_step;
  ac.clip.c_path = cfg.c_path;
  ac.clip.enabled = cfg.clip_ratios;
  ac.grad_clip_norm = cfg.grad_clip_norm;
  Rng init = Rng::stream(cfg.seed, 13);
  train::GsbActor actor(ac, init);
  auto& dst = actor.field().net().parameters();
  const auto& src = fitted.net().parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i].value = src[i].value;

  const std::size_t b = cfg.paths_per_iteration;
  train::RolloutBuffer buf(b, 1, 1, 2);
  Rng shuffle = Rng::stream(cfg.seed, 14);
  std::vector<std::size_t> order(b);
  std::vector<double> adv(b), mb_adv;
  for (std::size_t k = 0; k < cfg.outer_iterations; ++k) {
    std::vector<Rng> rngs;
    rngs.reserve(b);
    for (std::size_t i = 0; i < b; ++i) rngs.push_back(Rng::stream(cfg.seed + 1000 * (k + 1), i));
    std::vector<bool> ok;
    actor.act(buf.observations, rngs, buf, 0, ok);
    std::vector<std::size_t> usable;
    for (std::size_t i = 0; i < b; ++i) {
      const auto t = buf.paths[i].terminal();
      adv[i] = cfg.preference.advantage(t[0], t[1]);
      if (ok[i]) usable.push_back(i);
    }

    ToyIteration rec;
    rec.iteration = k + 1;
    std::size_t updates = 0;
    const std::size_t mb = (usable.size() + cfg.minibatches - 1) / cfg.minibatches;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
      order = usable;
      std::shuffle(order.begin(), order.end(), shuffle.engine());
      for (std::size_t start = 0; start < order.size(); start += mb) {
        const std::size_t end = std::min(order.size(), start + mb);
        const std::span<const std::size_t> idx(order.data() + start, end - start);
        mb_adv.resize(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) mb_adv[i] = adv[idx[i]];
        const auto step = actor.update(buf, idx, mb_adv, cfg.lr);
        rec.loss += step.loss;
        rec.drift_cost += step.drift_cost;
        rec.step_clip_fraction += step.step_clip_fraction;
        rec.path_clip_fraction += step.path_clip_fraction;
        ++updates;
      }
    }
    const double u = static_cast<double>(std::max<std::size_t>(updates, 1));
    rec.loss /= u;
    rec.drift_cost /= u;
    rec.step_clip_fraction /= u;
    rec.path_clip_fraction /= u;
    rec.masses = quadrant_masses(sample_terminals(actor.field(), cfg.schedule, 20000,
                                                  cfg.seed ^ (0xabcULL + k)));
    rec.l1_error = l1(rec.masses, r.target_masses);
    r.history.push_back(rec);
  }

  r.learned_samples = sample_terminals(actor.field(), cfg.schedule, cfg.eval_samples,
                                       cfg.seed ^ 0xe7a1ULL);
  r.learned_masses = quadrant_masses(r.learned_samples);
  r.l1_error = l1(r.learned_masses, r.target_masses);
  r.modes = count_modes(r.learned_samples);

  r.prefit_samples = sample_terminals(fitted, cfg.schedule, cfg.saved_samples, cfg.seed ^ 0x9f17ULL);
  r.prefit_masses = quadrant_masses(r.prefit_samples);
  r.prefit_l1 = l1(r.prefit_masses, r.old_masses);

  Rng srng = Rng::stream(cfg.seed, 15);
  const double wmax = *std::max_element(cfg.preference.weights.begin(), cfg.preference.weights.end());
  while (r.old_samples.size() < cfg.saved_samples) r.old_samples.push_back(cfg.old_policy.sample(srng));
  while (r.target_samples.size() < cfg.saved_samples) {
    const auto x = cfg.old_policy.sample(srng);
    if (srng.uniform() * wmax < cfg.preference.weights[quadrant_of(x[0], x[1])]) {
      r.target_samples.push_back(x);
    }
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

void write_toy_outputs(const std::filesystem::path& dir, const ToyConfig& cfg,
                       const ToyResult& r) {
  std::filesystem::create_directories(dir);
  using nlohmann::json;
  auto quad = [](const Quad& q) { return json(std::vector<double>(q.begin(), q.end())); };
  json means = json::array();
  for (const auto& m : cfg.old_policy.means) means.push_back({m[0], m[1]});
  json j{{"quadrants", {"QI", "QII", "QIII", "QIV"}},
         {"old", quad(r.old_masses)},
         {"prefit", quad(r.prefit_masses)},
         {"target", quad(r.target_masses)},
         {"learned", quad(r.learned_masses)},
         {"l1_error", r.l1_error},
         {"prefit_l1", r.prefit_l1},
         {"modes", r.modes},
         {"eval_samples", cfg.eval_samples},
         {"seconds", r.seconds},
         {"config",
          {{"seed", cfg.seed},
           {"means", means},
           {"std", cfg.old_policy.std},
           {"old_weights", quad(cfg.old_policy.weights)},
           {"preference_weights", quad(cfg.preference.weights)},
           {"beta", cfg.preference.beta},
           {"sigma_max", cfg.schedule.sigma_max},
           {"sigma_min", cfg.schedule.sigma_min},
           {"generation_steps", cfg.schedule.steps},
           {"outer_iterations", cfg.outer_iterations},
           {"paths_per_iteration", cfg.paths_per_iteration},
           {"epochs", cfg.epochs},
           {"minibatches", cfg.minibatches},
           {"lr", cfg.lr},
           {"clip_ratios", cfg.clip_ratios}}}};
  std::ofstream(dir / "masses.json") << j.dump(2) << '\n';

  std::FILE* f = std::fopen((dir / "toy_history.csv").string().c_str(), "w");
  if (!f) throw std::runtime_error("toy: cannot write toy_history.csv");
  std::fputs("iteration,loss,drift_cost,step_clip_fraction,path_clip_fraction,"
             "mass_q1,mass_q2,mass_q3,mass_q4,l1_error\n",
             f);
  for (const auto& h : r.history) {
    std::fprintf(f, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", h.iteration,
                 h.loss, h.drift_cost, h.step_clip_fraction, h.path_clip_fraction, h.masses[0],
                 h.masses[1], h.masses[2], h.masses[3], h.l1_error);
  }
  std::fclose(f);

  write_samples(dir / "samples_old.csv", r.old_samples);
  write_samples(dir / "samples_prefit.csv", r.prefit_samples);
  write_samples(dir / "samples_target.csv", r.target_samples);
  write_samples(dir / "samples_learned.csv", take(r.learned_samples, cfg.saved_samples));
}

}  // namespace gsbmdpo::toy
