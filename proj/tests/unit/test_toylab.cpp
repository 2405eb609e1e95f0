#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "gsbmdpo/rng.hpp"
#include "gsbmdpo/toylab.hpp"

namespace gsbmdpo::toy {
namespace {

TEST(TiltedMasses, Examples) {
  const Quad m = tilted_quadrant_masses({0.25, 0.25, 0.25, 0.25}, {1, 1, 1, 3});
  EXPECT_NEAR(m[0], 1.0 / 6, 1e-15);
  EXPECT_NEAR(m[1], 1.0 / 6, 1e-15);
  EXPECT_NEAR(m[2], 1.0 / 6, 1e-15);
  EXPECT_NEAR(m[3], 0.5, 1e-15);
  const Quad old{0.1, 0.2, 0.3, 0.4};
  const Quad same = tilted_quadrant_masses(old, {2, 2, 2, 2});
  for (std::size_t q = 0; q < 4; ++q) EXPECT_NEAR(same[q], old[q], 1e-15);
  EXPECT_THROW(tilted_quadrant_masses({0, 0, 0, 0}, {1, 1, 1, 1}), std::domain_error);
}

TEST(TiltedMasses, ShiftInvariance) {
  const Quad old{0.1, 0.2, 0.3, 0.4};
  const Quad pref{1.2, 1.0, 3.0, 1.4};
  const Quad base = tilted_quadrant_masses(old, pref);
  const double shift = std::exp(0.73);
  const Quad shifted =
      tilted_quadrant_masses(old, {pref[0] * shift, pref[1] * shift, pref[2] * shift, pref[3] * shift});
  for (std::size_t q = 0; q < 4; ++q) EXPECT_NEAR(shifted[q], base[q], 1e-15);
}

TEST(TiltedMasses, MatchesQuadrature) {
  Rng rng(1);
  for (int rep = 0; rep < 3; ++rep) {
    GmmOldPolicy old;
    old.std = 0.25;
    double s = 0.0;
    for (auto& w : old.weights) s += (w = rng.uniform(0.1, 1.0));
    for (auto& w : old.weights) w /= s;
    QuadrantPreference pref;
    for (auto& w : pref.weights) w = rng.uniform(0.5, 4.0);

    Quad mass{};
    const double h = 0.01;
    for (double x = -4.0 + h / 2; x < 4.0; x += h) {
      for (double y = -4.0 + h / 2; y < 4.0; y += h) {
        mass[quadrant_of(x, y)] +=
            old.density(x, y) * std::exp(pref.advantage(x, y) / pref.beta) * h * h;
      }
    }
    const double total = mass[0] + mass[1] + mass[2] + mass[3];
    for (auto& m : mass) m /= total;
    const Quad analytic = tilted_quadrant_masses(old.weights, pref.weights);
    for (std::size_t q = 0; q < 4; ++q) EXPECT_NEAR(mass[q], analytic[q], 1e-3);
  }
}

TEST(Quadrants, OrderAndMasses) {
  EXPECT_EQ(quadrant_of(1, 1), 0u);
  EXPECT_EQ(quadrant_of(-1, 1), 1u);
  EXPECT_EQ(quadrant_of(-1, -1), 2u);
  EXPECT_EQ(quadrant_of(1, -1), 3u);
  const std::vector<std::array<double, 2>> pts{{1, 1}, {1, 2}, {-1, -1}, {2, -3}};
  const Quad m = quadrant_masses(pts);
  EXPECT_DOUBLE_EQ(m[0], 0.5);
  EXPECT_DOUBLE_EQ(m[1], 0.0);
  EXPECT_DOUBLE_EQ(l1(m, {0.25, 0.25, 0.25, 0.25}), 0.5);
}

TEST(ModeCount, MixtureAndSingleGaussian) {
  GmmOldPolicy old;
  Rng rng(2);
  std::vector<std::array<double, 2>> mix, single;
  for (int i = 0; i < 4000; ++i) {
    mix.push_back(old.sample(rng));
    single.push_back({0.2 * rng.normal() + 1.0, 0.2 * rng.normal() - 1.0});
  }
  EXPECT_EQ(count_modes(mix), 4u);
  EXPECT_EQ(count_modes(single), 1u);
}

TEST(Config, Validation) {
  ToyConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.preference.weights[1] = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  ToyConfig bad;
  bad.old_policy.weights = {0.5, 0.5, 0.5, 0.5};
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

// Small budget: the pre-fit is the old policy, and equal preferences leave it
// in place.
TEST(RunToy, EqualPreferenceIsNullTilt) {
  ToyConfig cfg;
  cfg.preference.weights = {1.0, 1.0, 1.0, 1.0};
  cfg.hidden = {48, 48};
  cfg.prefit_iterations = 1500;
  cfg.outer_iterations = 2;
  cfg.paths_per_iteration = 1024;
  cfg.epochs = 2;
  cfg.eval_samples = 20000;
  cfg.saved_samples = 500;
  const ToyResult r = run_toy(cfg);
  EXPECT_LT(r.prefit_l1, 0.1);
  EXPECT_LT(l1(r.learned_masses, r.old_masses), 0.05);
  const Quad target = tilted_quadrant_masses(cfg.old_policy.weights, cfg.preference.weights);
  for (std::size_t q = 0; q < 4; ++q) EXPECT_EQ(r.target_masses[q], target[q]);
  EXPECT_EQ(r.history.size(), 2u);
  EXPECT_EQ(r.prefit_samples.size(), 500u);

  const auto dir = std::filesystem::temp_directory_path() / "gsbmdpo_toy_outputs";
  std::filesystem::remove_all(dir);
  write_toy_outputs(dir, cfg, r);
  for (const char* f : {"masses.json", "toy_history.csv", "samples_old.csv", "samples_prefit.csv",
                        "samples_target.csv", "samples_learned.csv"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  }
  std::ifstream in(dir / "masses.json");
  const auto j = nlohmann::json::parse(in);
  EXPECT_DOUBLE_EQ(j["l1_error"].get<double>(), r.l1_error);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace gsbmdpo::toy
