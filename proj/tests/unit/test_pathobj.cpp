#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "gsbmdpo/genpolicy.hpp"
#include "gsbmdpo/pathobj.hpp"
#include "gsbmdpo/rng.hpp"
#include "gsbmdpo/tape.hpp"

namespace gsbmdpo::objective {
namespace {

using policy::NoiseSchedule;
using policy::ScheduleKind;

Array random_drifts(std::size_t n, std::size_t d, Rng& rng) {
  Array a = Array::matrix(n, d);
  for (auto& v : a.values()) v = rng.normal();
  return a;
}

TEST(StepLogRatio, Subtraction) {
  EXPECT_EQ(step_log_ratio(-1.0, -1.0), 0.0);
  EXPECT_DOUBLE_EQ(step_log_ratio(-0.5, -1.0), 0.5);
  EXPECT_THROW(step_log_ratio(std::nan(""), 0.0), NumericError);
}

TEST(ClippedPathRatio, Examples) {
  const ClipConfig c{0.1, 0.4, true};
  const std::vector<double> zeros(5, 0.0);
  EXPECT_EQ(clipped_path_ratio(zeros, c), 1.0);
  const std::vector<double> mixed{0.05, -0.2, 0.3};
  EXPECT_NEAR(clipped_path_ratio(mixed, c), std::exp(0.05), 1e-15);
  const std::vector<double> six(6, 0.1);
  EXPECT_NEAR(clipped_path_ratio(six, c), std::exp(0.4), 1e-15);
  EXPECT_THROW(clipped_path_ratio(std::vector<double>{}, c), std::invalid_argument);
}

TEST(ClippedPathRatio, BoundedAndExactInsideBand) {
  const ClipConfig c{0.1, 0.4, true};
  Rng rng(1);
  for (int rep = 0; rep < 1000; ++rep) {
    std::vector<double> d(8);
    for (auto& v : d) v = rng.normal() * 0.5;
    const double r = clipped_path_ratio(d, c);
    EXPECT_GE(r, std::exp(-0.4));
    EXPECT_LE(r, std::exp(0.4));
    std::vector<double> small(4);
    for (auto& v : small) v = rng.uniform(-0.09, 0.09);
    EXPECT_NEAR(clipped_path_ratio(small, c), exact_path_ratio(small), 1e-15);
  }
}

TEST(GaussianStepKl, Examples) {
  const std::vector<double> a{0.3, -1.0};
  EXPECT_EQ(gaussian_step_kl(a, a, 0.7), 0.0);
  EXPECT_DOUBLE_EQ(gaussian_step_kl(std::vector<double>{0.0}, std::vector<double>{1.0}, 1.0), 0.5);
  // Drift gap 2, dt 0.5, sigma 1: mean gap 1, variance 0.5.
  EXPECT_DOUBLE_EQ(gaussian_step_kl(std::vector<double>{1.0}, std::vector<double>{0.0}, 0.5), 1.0);
  EXPECT_THROW(gaussian_step_kl(a, a, 0.0), std::invalid_argument);
}

TEST(DriftCost, Examples) {
  const NoiseSchedule s{ScheduleKind::Constant, 1.0, 1.0, 2, false};
  const Array old = Array::from_rows({{0.0}, {1.0}});
  EXPECT_EQ(drift_cost(old, old, s), 0.0);
  const Array gap = Array::from_rows({{2.0}, {3.0}});
  EXPECT_DOUBLE_EQ(drift_cost(gap, old, s), 2.0);
  const NoiseSchedule s3{ScheduleKind::Constant, 1.0, 1.0, 3, false};
  EXPECT_THROW(drift_cost(gap, old, s3), ShapeError);
}

TEST(DriftCost, EqualsSumOfStepKls) {
  const NoiseSchedule s{ScheduleKind::Linear, 3.0, 0.3, 16, false};
  Rng rng(2);
  for (int rep = 0; rep < 20; ++rep) {
    const Array nodes = random_drifts(s.steps, 3, rng);
    const Array fa = random_drifts(s.steps, 3, rng);
    const Array fb = random_drifts(s.steps, 3, rng);
    double kl = 0.0;
    for (std::size_t n = 0; n < s.steps; ++n) {
      std::vector<double> ma(3), mb(3);
      for (std::size_t j = 0; j < 3; ++j) {
        ma[j] = nodes.at(n, j) + s.dt(n) * fa.at(n, j);
        mb[j] = nodes.at(n, j) + s.dt(n) * fb.at(n, j);
      }
      kl += gaussian_step_kl(ma, mb, s.sigma(n) * s.sigma(n) * s.dt(n));
    }
    EXPECT_NEAR(drift_cost(fa, fb, s), kl, 1e-10);
  }
}

TEST(MixedAnchor, Examples) {
  const std::vector<double> old{1.0, -2.0};
  const std::vector<double> zero{0.0, 0.0};
  EXPECT_EQ(mixed_anchor(old, zero, 0.0), old);
  EXPECT_EQ(mixed_anchor(old, zero, 1.0), zero);
  const auto m = mixed_anchor(old, zero, 0.02);
  EXPECT_DOUBLE_EQ(m[0], 0.98);
  EXPECT_DOUBLE_EQ(m[1], -1.96);
  EXPECT_THROW(mixed_anchor(old, zero, 1.5), std::out_of_range);
}

TEST(AnchoredDriftCost, Examples) {
  const NoiseSchedule s{ScheduleKind::Linear, 3.0, 0.3, 4, false};
  Rng rng(3);
  const Array f = random_drifts(4, 2, rng);
  const Array fk = random_drifts(4, 2, rng);
  EXPECT_EQ(anchored_drift_cost(f, fk, 0.0, s), drift_cost(f, fk, s));
  Array scaled = fk;
  for (auto& v : scaled.values()) v *= 0.9;
  EXPECT_NEAR(anchored_drift_cost(scaled, fk, 0.1, s), 0.0, 1e-30);
}

// alpha |f - fk|^2 + beta |f - fref|^2 - (alpha + beta) |f - f_eta|^2 with
// zero reference drift does not depend on f.
TEST(AnchoredDriftCost, CompletingTheSquareResidualIsConstant) {
  const NoiseSchedule s{ScheduleKind::Linear, 3.0, 0.3, 4, false};
  Rng rng(4);
  const Array fk = random_drifts(4, 2, rng);
  const Array zero = Array::matrix(4, 2);
  const double alpha = 0.7, beta = 0.3;
  const double eta = beta / (alpha + beta);
  std::vector<double> res;
  for (int i = 0; i < 10; ++i) {
    const Array f = random_drifts(4, 2, rng);
    res.push_back(alpha * drift_cost(f, fk, s) + beta * drift_cost(f, zero, s) -
                  (alpha + beta) * anchored_drift_cost(f, fk, eta, s));
  }
  const auto [lo, hi] = std::minmax_element(res.begin(), res.end());
  EXPECT_LT(*hi - *lo, 1e-10);
}

TEST(MdpoLoss, Examples) {
  const NoiseSchedule s{ScheduleKind::Constant, 1.0, 1.0, 2, false};
  const ObjectiveConfig obj{0.5, 0.0, false};
  const ClipConfig clip{};
  LossEntry e;
  e.step_deltas = {0.0, 0.0};
  e.advantage = 2.0;
  e.old_drifts = Array::from_rows({{0.0}, {1.0}});
  e.new_drifts = Array::from_rows({{2.0}, {3.0}});
  EXPECT_DOUBLE_EQ(mdpo_loss(std::span(&e, 1), s, obj, clip), -1.0);

  LossEntry z;
  z.step_deltas = {0.0, 0.0};
  z.advantage = 0.0;
  z.old_drifts = e.old_drifts;
  z.new_drifts = e.old_drifts;
  EXPECT_EQ(mdpo_loss(std::span(&z, 1), s, ObjectiveConfig{0.08, 0.0, true}, clip), 0.0);

  LossEntry other = e;
  other.step_deltas = {0.05, 0.02};
  other.advantage = -1.0;
  const std::vector<LossEntry> both{e, other};
  const double mean = 0.5 * (mdpo_loss(std::span(&e, 1), s, obj, clip) +
                             mdpo_loss(std::span(&other, 1), s, obj, clip));
  EXPECT_NEAR(mdpo_loss(both, s, obj, clip), mean, 1e-15);
  EXPECT_THROW(mdpo_loss(std::span<const LossEntry>{}, s, obj, clip), std::invalid_argument);
}

TEST(MdpoLoss, TapedValueMatchesUntaped) {
  const NoiseSchedule s{ScheduleKind::Linear, 3.0, 0.3, 3, false};
  const ObjectiveConfig obj{0.3, 0.02, false};
  const ClipConfig clip{};
  Rng rng(5);
  std::vector<LossEntry> batch(4);
  Array new_logp = Array::matrix(12, 1), old_logp = Array::matrix(12, 1);
  Array new_drifts = Array::matrix(12, 2), old_drifts = Array::matrix(12, 2);
  std::vector<double> adv;
  for (std::size_t b = 0; b < 4; ++b) {
    batch[b].advantage = rng.normal();
    adv.push_back(batch[b].advantage);
    batch[b].new_drifts = random_drifts(3, 2, rng);
    batch[b].old_drifts = random_drifts(3, 2, rng);
    for (std::size_t n = 0; n < 3; ++n) {
      const std::size_t r = b * 3 + n;
      old_logp[r] = rng.normal();
      new_logp[r] = old_logp[r] + 0.2 * rng.normal();
      batch[b].step_deltas.push_back(new_logp[r] - old_logp[r]);
      for (std::size_t j = 0; j < 2; ++j) {
        new_drifts.at(r, j) = batch[b].new_drifts.at(n, j);
        old_drifts.at(r, j) = batch[b].old_drifts.at(n, j);
      }
    }
  }
  diff::Tape tape;
  const auto taped = mdpo_loss(tape, tape.constant(new_logp), tape.constant(new_drifts), old_logp,
                               old_drifts, adv, s, obj, clip);
  EXPECT_NEAR(taped.loss.item(), mdpo_loss(batch, s, obj, clip), 1e-12);
  EXPECT_GE(taped.diag.step_clip_fraction, 0.0);
  EXPECT_LE(taped.diag.step_clip_fraction, 1.0);
}

TEST(MdpoLoss, ZeroAdvantageAtOldPolicyHasZeroRatioGradient) {
  const NoiseSchedule s{ScheduleKind::Linear, 3.0, 0.3, 3, false};
  const ObjectiveConfig obj{0.08, 0.0, false};
  Rng rng(6);
  diff::Parameter logp("logp", Array::matrix(6, 1));
  for (auto& v : logp.value.values()) v = rng.normal();
  const Array drifts = random_drifts(6, 2, rng);
  diff::Parameter nd("drifts", drifts);
  const std::vector<double> adv{0.0, 0.0};
  diff::Tape tape;
  const auto l = mdpo_loss(tape, tape.parameter(logp), tape.parameter(nd), logp.value, drifts, adv,
                           s, obj, ClipConfig{});
  EXPECT_EQ(l.loss.item(), 0.0);
  tape.backward(l.loss);
  for (double g : logp.grad.values()) EXPECT_EQ(g, 0.0);
  for (double g : nd.grad.values()) EXPECT_EQ(g, 0.0);
}

TEST(NormalizeAdvantages, ZeroMeanUnitStd) {
  Rng rng(7);
  std::vector<double> a(257);
  for (auto& v : a) v = 3.0 + 5.0 * rng.normal();
  normalize_advantages(a);
  double m = 0.0, sq = 0.0;
  for (double v : a) m += v;
  m /= a.size();
  for (double v : a) sq += (v - m) * (v - m);
  EXPECT_LT(std::abs(m), 1e-8);
  EXPECT_LT(std::abs(std::sqrt(sq / a.size()) - 1.0), 1e-6);
  std::vector<double> one{4.0};
  normalize_advantages(one);
  EXPECT_EQ(one[0], 4.0);
}

}  // namespace
}  // namespace gsbmdpo::objective
