#include <cmath>
#include <filesystem>
#include <functional>

#include <gtest/gtest.h>

#include "gsbmdpo/array.hpp"
#include "gsbmdpo/checkpoint.hpp"
#include "gsbmdpo/mlp.hpp"
#include "gsbmdpo/optim.hpp"
#include "gsbmdpo/oracles.hpp"
#include "gsbmdpo/rng.hpp"
#include "gsbmdpo/tape.hpp"

namespace gsbmdpo {
namespace {

using diff::Activation;
using diff::Mlp;
using diff::Parameter;
using diff::Tape;
using diff::Var;

TEST(Array, RejectsMismatchedShape) {
  EXPECT_THROW(Array({2, 3}, std::vector<double>(5, 0.0)), ShapeError);
  const Array m = Array::from_rows({{1.0, 2.0}, {3.0, 4.0}});
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 2u);
  EXPECT_DOUBLE_EQ(m.at(1, 0), 3.0);
}

TEST(ForwardMlp, ZeroNetGivesZeroOutput) {
  Rng rng(1);
  Mlp net({3, 8, 2}, Activation::Tanh, rng);
  for (auto& p : net.parameters()) p.value.fill(0.0);
  const Array x = Array::from_rows({{0.3, -1.2, 4.0}, {7.0, 0.0, -2.5}});
  const Array y = net.evaluate(x);
  ASSERT_EQ(y.rows(), 2u);
  ASSERT_EQ(y.cols(), 2u);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(ForwardMlp, IdentityAffineLayer) {
  Rng rng(2);
  Mlp net({3, 3}, Activation::Silu, rng);
  net.weight(0).value.fill(0.0);
  for (std::size_t i = 0; i < 3; ++i) net.weight(0).value.at(i, i) = 1.0;
  const Array x = Array::from_rows({{0.5, -2.0, 3.25}});
  Tape tape;
  const Var y = diff::forward_mlp(tape, net, x);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(y.value()[i], x[i]);
}

TEST(ForwardMlp, MatchesStraightLineEvaluation) {
  Rng rng(3);
  Mlp net({2, 16, 1}, Activation::Tanh, rng);
  const Array x = Array::from_rows({{0.7, -0.4}});
  Tape tape;
  const double taped = diff::forward_mlp(tape, net, x).item();

  const Array& w0 = net.weight(0).value;
  const Array& b0 = net.bias(0).value;
  const Array& w1 = net.weight(1).value;
  double out = net.bias(1).value[0];
  for (std::size_t j = 0; j < 16; ++j) {
    const double h = std::tanh(x[0] * w0.at(0, j) + x[1] * w0.at(1, j) + b0[j]);
    out += h * w1.at(j, 0);
  }
  EXPECT_NEAR(taped, out, 1e-14);
  EXPECT_NEAR(net.evaluate(x).item(), out, 1e-14);
}

TEST(ForwardMlp, ParameterCountAndErrors) {
  Rng rng(4);
  Mlp net({4, 64, 64, 2}, Activation::Elu, rng);
  EXPECT_EQ(net.parameter_count(), 4u * 64 + 64 + 64 * 64 + 64 + 64 * 2 + 2);
  Tape tape;
  EXPECT_THROW(diff::forward_mlp(tape, net, Array::matrix(1, 3)), ShapeError);
  Array bad = Array::matrix(1, 4);
  bad[0] = std::nan("");
  Tape tape2;
  EXPECT_THROW(diff::forward_mlp(tape2, net, bad), NumericError);
}

TEST(Backward, LinearSumGivesInput) {
  Parameter w("w", Array::vector({0.1, -0.2, 0.3}));
  const Array x = Array::vector({2.0, 5.0, -7.0});
  Tape tape;
  const Var loss = tape.sum(tape.mul_const(tape.parameter(w), x));
  tape.backward(loss);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(w.grad[i], x[i]);
}

TEST(Backward, ActiveClipHasZeroGradient) {
  Parameter w("w", Array::scalar(2.0));
  Tape tape;
  tape.backward(tape.sum(tape.clip(tape.parameter(w), -1.0, 1.0)));
  EXPECT_EQ(w.grad[0], 0.0);

  Parameter v("v", Array::scalar(0.3));
  Tape tape2;
  tape2.backward(tape2.sum(tape2.scale(tape2.clip(tape2.parameter(v), -1.0, 1.0), 3.0)));
  EXPECT_EQ(v.grad[0], 3.0);
}

TEST(Backward, UnreachableParameterGetsZero) {
  Parameter a("a", Array::scalar(1.5));
  Parameter b("b", Array::scalar(-0.5));
  b.grad.fill(0.0);
  Tape tape;
  tape.parameter(b);
  tape.backward(tape.sum(tape.square(tape.parameter(a))));
  EXPECT_DOUBLE_EQ(a.grad[0], 3.0);
  EXPECT_EQ(b.grad[0], 0.0);
}

TEST(Backward, RejectsNonScalarAndReuse) {
  Parameter w("w", Array::vector({1.0, 2.0}));
  Tape tape;
  const Var x = tape.parameter(w);
  EXPECT_THROW(tape.backward(x), ShapeError);
  const Var s = tape.sum(x);
  tape.backward(s);
  EXPECT_TRUE(tape.consumed());
  EXPECT_THROW(tape.backward(s), std::logic_error);
}

// Each primitive on its own, composed with a fixed random projection so the
// upstream gradient is not trivially one.
struct Primitive {
  const char* name;
  std::function<Var(Tape&, Var, Var)> apply;
  double lo, hi;
};

class PrimitiveGradient : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradient, MatchesFiniteDifferences) {
  const std::vector<Primitive> prims = {
      {"add", [](Tape& t, Var a, Var b) { return t.add(a, b); }, -2, 2},
      {"sub", [](Tape& t, Var a, Var b) { return t.sub(a, b); }, -2, 2},
      {"mul", [](Tape& t, Var a, Var b) { return t.mul(a, b); }, -2, 2},
      {"tanh", [](Tape& t, Var a, Var) { return t.tanh(a); }, -2, 2},
      {"silu", [](Tape& t, Var a, Var) { return t.silu(a); }, -3, 3},
      {"elu", [](Tape& t, Var a, Var) { return t.elu(a); }, -3, 3},
      {"square", [](Tape& t, Var a, Var) { return t.square(a); }, -2, 2},
      {"exp", [](Tape& t, Var a, Var) { return t.exp(a); }, -2, 2},
      {"log", [](Tape& t, Var a, Var) { return t.log(a); }, 0.2, 3},
      {"clip", [](Tape& t, Var a, Var) { return t.clip(a, -0.7, 0.9); }, -2, 2},
      {"mean", [](Tape& t, Var a, Var) { return t.mean(a); }, -2, 2},
      {"sum", [](Tape& t, Var a, Var) { return t.sum(t.square(a)); }, -2, 2},
      {"row_sum", [](Tape& t, Var a, Var) { return t.row_sum(a); }, -2, 2},
      {"broadcast_rows",
       [](Tape& t, Var a, Var) { return t.broadcast_rows(t.reshape(t.row_sum(a), {3}), 4); }, -2,
       2},
      {"affine",
       [](Tape& t, Var a, Var b) { return t.affine(a, b, t.reshape(t.row_sum(b), {3})); }, -2, 2},
  };
  const Primitive& prim = prims[static_cast<std::size_t>(GetParam())];
  Rng rng(100 + static_cast<std::uint64_t>(GetParam()));
  for (int point = 0; point < 20; ++point) {
    Parameter a("a", Array::matrix(3, 3));
    Parameter b("b", Array::matrix(3, 3));
    Array proj;
    for (auto& v : a.value.values()) {
      do {
        v = rng.uniform(prim.lo, prim.hi);
      } while (std::string(prim.name) == "clip" &&
               (std::abs(v + 0.7) < 1e-3 || std::abs(v - 0.9) < 1e-3));
    }
    for (auto& v : b.value.values()) v = rng.uniform(-2, 2);
    auto loss = [&](bool grad) {
      Tape t;
      const Var y = prim.apply(t, t.parameter(a), t.parameter(b));
      if (proj.empty()) {
        proj = Array(y.value().shape(), std::vector<double>(y.value().size()));
        for (auto& v : proj.values()) v = rng.uniform(-1, 1);
      }
      const Var l = t.sum(t.mul_const(y, proj));
      const double value = l.item();
      if (grad) t.backward(l);
      return value;
    };
    const std::vector<Parameter*> ps{&a, &b};
    const double err = oracles::finite_difference_error(ps, loss);
    EXPECT_LT(err, 1e-4) << prim.name << " point " << point;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, PrimitiveGradient, ::testing::Range(0, 15));

TEST(Backward, RandomMlpMatchesFiniteDifferences) {
  Rng rng(7);
  for (Activation act : {Activation::Tanh, Activation::Silu, Activation::Elu}) {
    Mlp net({3, 8, 8, 2}, act, rng);
    Array x = Array::matrix(5, 3);
    for (auto& v : x.values()) v = rng.normal();
    auto loss = [&](bool grad) {
      Tape t;
      const Var y = diff::forward_mlp(t, net, x);
      const Var l = t.mean(t.square(y));
      const double value = l.item();
      if (grad) t.backward(l);
      return value;
    };
    EXPECT_LT(oracles::finite_difference_error(net.parameter_ptrs(), loss), 1e-4);
  }
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Parameter w("w", Array::vector({1.0, -2.0}));
  diff::Adam opt({&w});
  w.zero_grad();
  opt.step(0.1);
  EXPECT_EQ(w.value[0], 1.0);
  EXPECT_EQ(w.value[1], -2.0);
  EXPECT_EQ(opt.steps(), 1);
}

TEST(Adam, FirstStepIsSignOfGradient) {
  const double lr = 0.01;
  for (double g : {3.0, -0.25, 0.1}) {
    Parameter w("w", Array::scalar(0.0));
    diff::Adam opt({&w});
    w.grad[0] = g;
    opt.step(lr);
    EXPECT_NEAR(w.value[0], -lr * (g > 0 ? 1.0 : -1.0), 1e-6 * lr);
  }
}

TEST(Adam, ConvergesOnQuadratic) {
  Parameter w("w", Array::scalar(1.0));
  diff::Adam opt({&w});
  for (int i = 0; i < 1000; ++i) {
    w.grad[0] = 2.0 * w.value[0];
    opt.step(0.05);
  }
  EXPECT_LT(std::abs(w.value[0]), 0.05);
  EXPECT_EQ(opt.steps(), 1000);
}

TEST(Adam, NonFiniteGradientLeavesStateUntouched) {
  Parameter w("w", Array::scalar(1.0));
  diff::Adam opt({&w});
  w.grad[0] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(opt.step(0.1), NumericError);
  EXPECT_EQ(w.value[0], 1.0);
  EXPECT_EQ(opt.steps(), 0);
  EXPECT_EQ(opt.first_moments()[0][0], 0.0);
}

TEST(CosineLr, Endpoints) {
  EXPECT_DOUBLE_EQ(diff::cosine_lr(3e-4, 0.0), 3e-4);
  EXPECT_NEAR(diff::cosine_lr(3e-4, 1.0), 0.0, 1e-20);
  EXPECT_NEAR(diff::cosine_lr(1.0, 0.5), 0.5, 1e-15);
  EXPECT_THROW(diff::cosine_lr(1.0, 1.5), std::out_of_range);
  EXPECT_THROW(diff::cosine_lr(1.0, -0.1), std::out_of_range);
}

TEST(ClipGradNorm, RescalesToBound) {
  Parameter a("a", Array::vector({3.0}));
  Parameter b("b", Array::vector({4.0}));
  a.grad[0] = 3.0;
  b.grad[0] = 4.0;
  std::vector<Parameter*> ps{&a, &b};
  EXPECT_DOUBLE_EQ(diff::clip_grad_norm(ps, 1.0), 5.0);
  EXPECT_NEAR(diff::grad_norm(ps), 1.0, 1e-6);
}

TEST(Checkpoint, MlpAndAdamRoundTrip) {
  Rng rng(11);
  Mlp net({2, 5, 3}, Activation::Silu, rng, 0.25);
  diff::Adam opt(net.parameter_ptrs());
  for (auto& p : net.parameters()) {
    for (auto& g : p.grad.values()) g = rng.normal();
  }
  opt.step(1e-3);

  Checkpoint ckpt;
  ckpt.meta["tag"] = "roundtrip";
  ckpt.put_mlp("net", net);
  ckpt.put_adam("opt", opt);
  const auto path = std::filesystem::temp_directory_path() / "gsbmdpo_ckpt_roundtrip.bin";
  ckpt.save(path);
  const Checkpoint back = Checkpoint::load(path);
  std::filesystem::remove(path);

  EXPECT_EQ(back.meta["tag"], "roundtrip");
  Mlp rebuilt = mlp_from_checkpoint(back, "net");
  ASSERT_EQ(rebuilt.widths(), net.widths());
  EXPECT_EQ(rebuilt.activation(), net.activation());
  for (std::size_t i = 0; i < net.parameters().size(); ++i) {
    EXPECT_EQ(rebuilt.parameters()[i].value.values(), net.parameters()[i].value.values());
  }
  Mlp other({2, 5, 3}, Activation::Silu, rng);
  diff::Adam other_opt(other.parameter_ptrs());
  back.load_adam("opt", other_opt);
  EXPECT_EQ(other_opt.steps(), 1);
  EXPECT_EQ(other_opt.second_moments()[0].values(), opt.second_moments()[0].values());
}

}  // namespace
}  // namespace gsbmdpo
