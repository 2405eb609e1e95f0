#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "gsbmdpo/critic.hpp"
#include "gsbmdpo/rng.hpp"
#include "gsbmdpo/tape.hpp"

namespace gsbmdpo::critic {
namespace {

TEST(Gae, ZeroSignal) {
  const std::vector<double> r(5, 0.0), v(6, 0.0);
  const std::vector<std::uint8_t> d(5, 0);
  const auto g = gae(r, v, d, {});
  for (double a : g.advantages) EXPECT_EQ(a, 0.0);
}

TEST(Gae, TwoStepExample) {
  const std::vector<double> r{1.0, 1.0}, v{0.0, 0.0, 0.0};
  const std::vector<std::uint8_t> d{0, 0};
  const auto g = gae(r, v, d, {0.5, 1.0});
  EXPECT_DOUBLE_EQ(g.advantages[0], 1.5);
  EXPECT_DOUBLE_EQ(g.advantages[1], 1.0);
  EXPECT_DOUBLE_EQ(g.returns[0], 1.5);
}

TEST(Gae, LambdaZeroIsTdError) {
  Rng rng(1);
  std::vector<double> r(10), v(11);
  std::vector<std::uint8_t> d(10, 0);
  for (auto& x : r) x = rng.normal();
  for (auto& x : v) x = rng.normal();
  d[4] = 1;
  const auto g = gae(r, v, d, {0.9, 0.0});
  for (std::size_t t = 0; t < 10; ++t) {
    const double delta = r[t] + 0.9 * (d[t] ? 0.0 : v[t + 1]) - v[t];
    EXPECT_DOUBLE_EQ(g.advantages[t], delta);
    EXPECT_DOUBLE_EQ(g.returns[t], g.advantages[t] + v[t]);
  }
}

TEST(Gae, RewardToGo) {
  Rng rng(2);
  std::vector<double> r(30), v(31, 0.0);
  const std::vector<std::uint8_t> d(30, 0);
  for (auto& x : r) x = rng.normal();
  const auto g = gae(r, v, d, {0.97, 1.0});
  for (std::size_t t = 0; t < 30; ++t) {
    double brute = 0.0;
    for (std::size_t k = t; k < 30; ++k) brute += std::pow(0.97, k - t) * r[k];
    EXPECT_NEAR(g.advantages[t], brute, 1e-10);
  }
}

TEST(Gae, TerminalTruncatesCredit) {
  Rng rng(3);
  std::vector<double> r(12), v(13);
  std::vector<std::uint8_t> d(12, 0);
  for (auto& x : r) x = rng.normal();
  for (auto& x : v) x = rng.normal();
  d[5] = 1;
  const auto base = gae(r, v, d, {});
  for (std::size_t k = 6; k < 12; ++k) r[k] += 10.0;
  for (std::size_t k = 6; k < 13; ++k) v[k] -= 3.0;
  const auto pert = gae(r, v, d, {});
  for (std::size_t t = 0; t <= 5; ++t) EXPECT_EQ(base.advantages[t], pert.advantages[t]);
}

TEST(Gae, Errors) {
  const std::vector<double> r(3, 0.0), v(3, 0.0);
  const std::vector<std::uint8_t> d(3, 0);
  EXPECT_THROW(gae(r, v, d, {}), ShapeError);
  EXPECT_THROW((GaeConfig{1.5, 0.9}.validate()), std::invalid_argument);
}

TEST(ValueLoss, Examples) {
  Rng rng(4);
  ValueNet net(2, {4}, diff::Activation::Elu, rng);
  for (auto& p : net.net().parameters()) p.value.fill(0.0);
  const Array states = Array::from_rows({{0.1, 0.2}, {0.3, 0.4}});
  const std::vector<double> targets{1.0, -1.0};
  diff::Tape tape;
  EXPECT_DOUBLE_EQ(value_loss(tape, net, states, targets).item(), 1.0);
  const std::vector<double> zeros{0.0, 0.0};
  diff::Tape tape2;
  EXPECT_EQ(value_loss(tape2, net, states, zeros).item(), 0.0);
  diff::Tape tape3;
  EXPECT_THROW(value_loss(tape3, net, Array::matrix(0, 2), std::vector<double>{}),
               std::invalid_argument);
}

TEST(ValueNet, PredictMatchesTapedForward) {
  Rng rng(5);
  ValueNet net(3, {8, 8}, diff::Activation::Elu, rng);
  Array states = Array::matrix(4, 3);
  for (auto& v : states.values()) v = rng.normal();
  const auto pred = net.predict(states);
  ASSERT_EQ(pred.size(), 4u);
  const std::vector<double> targets = pred;
  diff::Tape tape;
  EXPECT_NEAR(value_loss(tape, net, states, targets).item(), 0.0, 1e-28);
}

TEST(RunningNormalizer, SymmetricPair) {
  RunningNormalizer n(1);
  n.update(Array::from_rows({{1.0}, {3.0}}));
  EXPECT_DOUBLE_EQ(n.mean()[0], 2.0);
  EXPECT_DOUBLE_EQ(n.variance()[0], 1.0);
  EXPECT_EQ(n.normalize(Array::from_rows({{2.0}}))[0], 0.0);
}

TEST(RunningNormalizer, FreshIsIdentityAndClips) {
  RunningNormalizer n(2);
  const Array x = Array::from_rows({{5.0, -7.0}});
  EXPECT_EQ(n.normalize(x).values(), x.values());
  n.update(Array::from_rows({{0.0, 0.0}, {0.0, 1e-3}}));
  const Array y = n.normalize(Array::from_rows({{1e6, -1e6}}));
  EXPECT_EQ(y[0], 10.0);
  EXPECT_EQ(y[1], -10.0);
  EXPECT_THROW(n.normalize(Array::matrix(1, 3)), ShapeError);
}

TEST(RunningNormalizer, StreamingMatchesTwoPass) {
  Rng rng(6);
  RunningNormalizer n(1);
  std::vector<double> all;
  for (int batch = 0; batch < 100; ++batch) {
    Array b = Array::matrix(100, 1);
    for (auto& v : b.values()) {
      v = 4.0 + 2.5 * rng.normal();
      all.push_back(v);
    }
    n.update(b);
  }
  double m = 0.0;
  for (double v : all) m += v;
  m /= all.size();
  double var = 0.0;
  for (double v : all) var += (v - m) * (v - m);
  var /= all.size();
  EXPECT_EQ(n.count(), 10000.0);
  EXPECT_NEAR(n.mean()[0], m, 1e-9);
  EXPECT_NEAR(n.variance()[0], var, 1e-9);
}

}  // namespace
}  // namespace gsbmdpo::critic
