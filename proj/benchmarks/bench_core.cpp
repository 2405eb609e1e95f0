#include <vector>

#include <benchmark/benchmark.h>

#include "gsbmdpo/envs.hpp"
#include "gsbmdpo/genpolicy.hpp"
#include "gsbmdpo/mlp.hpp"
#include "gsbmdpo/pathobj.hpp"
#include "gsbmdpo/rng.hpp"
#include "gsbmdpo/tape.hpp"

namespace {

using namespace gsbmdpo;

Array random_array(std::size_t rows, std::size_t cols, Rng& rng) {
  Array a = Array::matrix(rows, cols);
  for (auto& v : a.values()) v = rng.normal();
  return a;
}

policy::DriftFieldConfig field_config() {
  policy::DriftFieldConfig c;
  c.state_dim = 4;
  c.action_dim = 2;
  return c;
}

const policy::NoiseSchedule kSchedule{policy::ScheduleKind::Linear, 3.0, 0.3, 16, false};

void BM_TapeElementwise(benchmark::State& state) {
  Rng rng(1);
  const Array x = random_array(static_cast<std::size_t>(state.range(0)), 64, rng);
  for (auto _ : state) {
    diff::Tape tape;
    const auto v = tape.constant(x);
    const auto y = tape.sum(tape.mul(tape.tanh(v), tape.exp(tape.mul_const(v, x))));
    benchmark::DoNotOptimize(y.item());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0) * 64);
}
BENCHMARK(BM_TapeElementwise)->Arg(64)->Arg(1024);

void BM_MlpForward(benchmark::State& state) {
  Rng rng(2);
  const diff::Mlp net({22, 64, 64, 2}, diff::Activation::Silu, rng);
  const Array x = random_array(static_cast<std::size_t>(state.range(0)), 22, rng);
  for (auto _ : state) benchmark::DoNotOptimize(net.evaluate(x).data());
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_MlpForward)->Arg(64)->Arg(1024);

void BM_MlpForwardBackward(benchmark::State& state) {
  Rng rng(3);
  diff::Mlp net({22, 64, 64, 2}, diff::Activation::Silu, rng);
  const Array x = random_array(static_cast<std::size_t>(state.range(0)), 22, rng);
  for (auto _ : state) {
    net.zero_grad();
    diff::Tape tape;
    const auto out = net.forward(tape, tape.constant(x));
    tape.backward(tape.sum(tape.mul(out, out)));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_MlpForwardBackward)->Arg(64)->Arg(1024);

void BM_SamplePaths(benchmark::State& state) {
  Rng rng(4);
  const policy::DriftField field(field_config(), rng);
  const auto n = static_cast<std::size_t>(state.range(0));
  const Array states = random_array(n, 4, rng);
  std::vector<Rng> rngs;
  for (std::size_t i = 0; i < n; ++i) rngs.push_back(Rng::stream(5, i));
  for (auto _ : state) {
    auto paths = policy::sample_paths(field, kSchedule, states, rngs);
    benchmark::DoNotOptimize(paths.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_SamplePaths)->Arg(64);

void BM_MdpoLossStep(benchmark::State& state) {
  Rng rng(6);
  policy::DriftField field(field_config(), rng);
  const auto b = static_cast<std::size_t>(state.range(0));
  const Array states = random_array(b, 4, rng);
  std::vector<Rng> rngs;
  for (std::size_t i = 0; i < b; ++i) rngs.push_back(Rng::stream(7, i));
  const auto paths = policy::sample_paths(field, kSchedule, states, rngs);
  std::vector<std::span<const double>> state_rows;
  std::vector<const policy::GenerationPath*> path_ptrs;
  Array old_logp = Array::matrix(b * kSchedule.steps, 1);
  Array old_drifts = Array::matrix(b * kSchedule.steps, 2);
  std::vector<double> adv(b);
  for (std::size_t p = 0; p < b; ++p) {
    state_rows.push_back(states.row(p));
    path_ptrs.push_back(&paths[p]);
    adv[p] = rng.normal();
    for (std::size_t n = 0; n < kSchedule.steps; ++n) {
      old_logp[p * kSchedule.steps + n] = paths[p].old_logp[n];
      for (std::size_t j = 0; j < 2; ++j) {
        old_drifts.at(p * kSchedule.steps + n, j) = paths[p].old_drifts.at(n, j);
      }
    }
  }
  for (auto _ : state) {
    field.net().zero_grad();
    diff::Tape tape;
    const auto batch = policy::recompute_on_paths(tape, field, kSchedule, state_rows, path_ptrs);
    const auto loss = objective::mdpo_loss(tape, batch.step_logp, batch.drifts, old_logp,
                                           old_drifts, adv, kSchedule, {}, {});
    tape.backward(loss.loss);
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_MdpoLossStep)->Arg(384);

void BM_EnvStep(benchmark::State& state, const char* name) {
  auto env = envs::make_env(name, 64);
  env->reset(8);
  Rng rng(9);
  const Array actions = random_array(64, env->spec().action_dim, rng);
  for (auto _ : state) benchmark::DoNotOptimize(env->step(actions).rewards.data());
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK_CAPTURE(BM_EnvStep, PointMass2D, "PointMass2D");
BENCHMARK_CAPTURE(BM_EnvStep, MultiGoalReach, "MultiGoalReach");
BENCHMARK_CAPTURE(BM_EnvStep, PendulumSwingup, "PendulumSwingup");

}  // namespace

BENCHMARK_MAIN();
