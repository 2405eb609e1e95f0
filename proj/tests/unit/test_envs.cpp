#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "gsbmdpo/envs.hpp"
#include "gsbmdpo/rng.hpp"

namespace gsbmdpo::envs {
namespace {

TEST(Catalog, ThreeNamedSpecs) {
  const auto cat = env_catalog();
  ASSERT_EQ(cat.size(), 3u);
  std::set<std::string> names;
  for (const auto& s : cat) {
    names.insert(s.name);
    EXPECT_GE(s.horizon, 1u);
    EXPECT_TRUE(std::isfinite(s.action_low) && std::isfinite(s.action_high));
  }
  EXPECT_EQ(names, (std::set<std::string>{"PointMass2D", "MultiGoalReach", "PendulumSwingup"}));
  const auto pm = PointMass2D::make_spec();
  EXPECT_EQ(pm.action_dim, 2u);
  EXPECT_EQ(pm.action_low, -1.0);
  EXPECT_EQ(pm.action_high, 1.0);
  EXPECT_EQ(PendulumSwingup::make_spec().horizon, 200u);
  EXPECT_EQ(PendulumSwingup::make_spec().action_high, 2.0);
  EXPECT_THROW(make_env("HalfCheetah", 4), std::invalid_argument);
}

TEST(Reset, DeterministicAndStreamSeparated) {
  PointMass2D a(8), b(8);
  const Array oa = a.reset(123);
  const Array ob = b.reset(123);
  EXPECT_EQ(oa.values(), ob.values());
  std::set<double> xs;
  for (std::size_t i = 0; i < 8; ++i) {
    xs.insert(oa.at(i, 0));
    EXPECT_EQ(oa.at(i, 2), 0.0);
    EXPECT_EQ(oa.at(i, 3), 0.0);
  }
  EXPECT_EQ(xs.size(), 8u);
  EXPECT_NE(a.reset(124).values(), oa.values());
}

TEST(PointMass, Dynamics) {
  PointMass2D env(1);
  const Array start = env.reset(5);
  const auto r0 = env.step(Array::matrix(1, 2));
  EXPECT_EQ(r0.observations.at(0, 0), start.at(0, 0));
  EXPECT_EQ(r0.observations.at(0, 1), start.at(0, 1));

  env.reset(5);
  const auto r1 = env.step(Array::from_rows({{1.0, 0.0}}));
  EXPECT_DOUBLE_EQ(r1.observations.at(0, 2), 0.05);
  EXPECT_EQ(r1.observations.at(0, 3), 0.0);
  const double px = start.at(0, 0), py = start.at(0, 1);
  EXPECT_DOUBLE_EQ(r1.rewards[0], -(px * px + py * py) - 0.01);

  env.reset(5);
  const auto clipped = env.step(Array::from_rows({{7.0, -9.0}}));
  EXPECT_DOUBLE_EQ(clipped.observations.at(0, 2), 0.05);
  EXPECT_DOUBLE_EQ(clipped.observations.at(0, 3), -0.05);
  EXPECT_THROW(env.step(Array::matrix(1, 3)), ShapeError);
}

TEST(PointMass, AutoResetAtHorizon) {
  PointMass2D env(2, 3);
  env.reset(9);
  for (int t = 0; t < 2; ++t) {
    const auto r = env.step(Array::matrix(2, 2));
    EXPECT_EQ(r.dones[0], 0);
  }
  const auto r = env.step(Array::matrix(2, 2));
  EXPECT_EQ(r.dones[0], 1);
  EXPECT_EQ(r.dones[1], 1);
  EXPECT_GT(r.final_distance[0], 0.0);
  EXPECT_EQ(env.step_counts()[0], 0u);
}

TEST(MultiGoal, SymmetricRewardFromCentroid) {
  std::vector<double> rewards;
  for (std::size_t k = 0; k < MultiGoalReach::kGoals; ++k) {
    MultiGoalReach env(1);
    const Array obs = env.reset(0);
    EXPECT_EQ(obs[0], 0.0);
    EXPECT_EQ(obs[1], 0.0);
    const auto g = MultiGoalReach::goal(k);
    const auto r = env.step(Array::from_rows({{g[0], g[1]}}));
    rewards.push_back(r.rewards[0]);
    EXPECT_EQ(MultiGoalReach::goal_sector(std::vector<double>{g[0], g[1]}), k);
  }
  for (double r : rewards) EXPECT_EQ(r, rewards[0]);
}

// Heading straight at any goal and stopping there is optimal, and all four
// such policies earn the same return.
TEST(MultiGoal, FourEquallyOptimalBehaviours) {
  std::vector<double> returns;
  for (std::size_t k = 0; k < MultiGoalReach::kGoals; ++k) {
    MultiGoalReach env(1);
    env.reset(0);
    const auto g = MultiGoalReach::goal(k);
    double total = 0.0;
    for (std::size_t t = 0; t < MultiGoalReach::kHorizon; ++t) {
      const double scale = t < 10 ? 1.0 : 0.0;
      total += env.step(Array::from_rows({{scale * g[0], scale * g[1]}})).rewards[0];
    }
    returns.push_back(total);
  }
  for (double r : returns) EXPECT_NEAR(r, returns[0], 1e-12);
  MultiGoalReach env(1);
  env.reset(0);
  double idle = 0.0;
  for (std::size_t t = 0; t < MultiGoalReach::kHorizon; ++t) {
    idle += env.step(Array::matrix(1, 2)).rewards[0];
  }
  EXPECT_GT(returns[0], idle);
}

class EnvByName : public ::testing::TestWithParam<std::string> {};

TEST_P(EnvByName, BitExactReplayWithinRewardBound) {
  auto run = [&](std::vector<double>& trace) {
    auto env = make_env(GetParam(), 4);
    const auto spec = env->spec();
    Array obs = env->reset(77);
    Rng rng(3);
    for (std::size_t t = 0; t < 2 * spec.horizon + 5; ++t) {
      Array a = Array::matrix(4, spec.action_dim);
      for (auto& v : a.values()) v = rng.uniform(-3.0, 3.0);
      const auto r = env->step(a);
      for (double v : r.observations.values()) trace.push_back(v);
      for (double v : r.rewards) {
        EXPECT_LE(std::abs(v), spec.reward_bound);
        trace.push_back(v);
      }
    }
  };
  std::vector<double> t1, t2;
  run(t1);
  run(t2);
  EXPECT_EQ(t1, t2);
}

INSTANTIATE_TEST_SUITE_P(Catalog, EnvByName,
                         ::testing::Values("PointMass2D", "MultiGoalReach", "PendulumSwingup"));

}  // namespace
}  // namespace gsbmdpo::envs
