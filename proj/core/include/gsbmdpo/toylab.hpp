#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "gsbmdpo/array.hpp"
#include "gsbmdpo/genpolicy.hpp"
#include "gsbmdpo/rng.hpp"

namespace gsbmdpo::toy {

// Quadrants in the order QI (+,+), QII (-,+), QIII (-,-), QIV (+,-).
using Quad = std::array<double, 4>;

std::size_t quadrant_of(double x, double y);

struct GmmOldPolicy {
  std::array<std::array<double, 2>, 4> means{{{1.0, 1.0}, {-1.0, 1.0}, {-1.0, -1.0}, {1.0, -1.0}}};
  double std = 0.2;
  Quad weights{0.25, 0.25, 0.25, 0.25};

  void validate() const;
  double density(double x, double y) const;
  std::array<double, 2> sample(Rng& rng) const;
};

struct QuadrantPreference {
  // exp(A / beta) per quadrant.
  Quad weights{1.2, 1.0, 3.0, 1.4};
  double beta = 1.0;

  void validate() const;
  // A(x) = beta * log(weight of the quadrant containing x).
  double advantage(double x, double y) const;
};

// old * pref, renormalized.
Quad tilted_quadrant_masses(const Quad& old_weights, const Quad& pref_weights);

Quad quadrant_masses(std::span<const std::array<double, 2>> samples);
double l1(const Quad& a, const Quad& b);

// Mean-shift with a Gaussian kernel; clusters holding less than
// min_fraction of the points are not counted.
std::size_t count_modes(std::span<const std::array<double, 2>> samples, double bandwidth = 0.3,
                        double min_fraction = 0.02);

struct ToyConfig {
  GmmOldPolicy old_policy;
  QuadrantPreference preference;
  std::uint64_t seed = 0;

  policy::NoiseSchedule schedule{policy::ScheduleKind::Linear, 3.0, 0.3, 16, false};
  std::vector<std::size_t> hidden = {64, 64};
  std::size_t time_dim = 16;

  std::size_t prefit_iterations = 3000;
  std::size_t prefit_batch = 512;
  double prefit_lr = 2e-3;

  // The tilt is applied as `outer_iterations` mirror-descent steps, each
  // with KL coefficient outer_iterations * beta against the previous iterate.
  std::size_t outer_iterations = 10;
  std::size_t paths_per_iteration = 4096;
  std::size_t epochs = 6;
  std::size_t minibatches = 8;
  double lr = 1e-3;
  double c_step = 0.1;
  double c_path = 0.4;
  bool clip_ratios = true;
  double grad_clip_norm = 1.0;

  std::size_t eval_samples = 100000;
  std::size_t saved_samples = 5000;

  void validate() const;
};

struct ToyIteration {
  std::size_t iteration = 0;
  double loss = 0.0;
  double drift_cost = 0.0;
  double step_clip_fraction = 0.0;
  double path_clip_fraction = 0.0;
  Quad masses{};
  double l1_error = 0.0;
};

struct ToyResult {
  Quad old_masses{};
  Quad prefit_masses{};
  Quad target_masses{};
  Quad learned_masses{};
  double prefit_l1 = 0.0;  // prefit vs old
  double l1_error = 0.0;   // learned vs target
  std::size_t modes = 0;
  std::vector<ToyIteration> history;
  std::vector<std::array<double, 2>> old_samples;
  std::vector<std::array<double, 2>> prefit_samples;
  std::vector<std::array<double, 2>> target_samples;
  std::vector<std::array<double, 2>> learned_samples;
  double seconds = 0.0;
};

// Terminal actions of n paths from `field` at the dummy state.
std::vector<std::array<double, 2>> sample_terminals(const policy::DriftField& field,
                                                    const policy::NoiseSchedule& sched,
                                                    std::size_t n, std::uint64_t seed);

// Bridge-matching regression of a fresh drift field onto the old policy.
// Throws NumericError when the fitted quadrant masses are more than 0.1
// (l1) away from the mixture weights.
policy::DriftField prefit(const ToyConfig& cfg, Quad* fitted_masses = nullptr);

ToyResult run_toy(const ToyConfig& cfg);

// masses.json, toy_history.csv and one samples_<name>.csv per sample set.
void write_toy_outputs(const std::filesystem::path& dir, const ToyConfig& cfg,
                       const ToyResult& r);

}  // namespace gsbmdpo::toy
