#include "gsbmdpo/baseline.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace gsbmdpo::baseline {
namespace {

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

}  // namespace

GaussianActor::GaussianActor(std::size_t state_dim, std::size_t action_dim,
                             std::vector<std::size_t> hidden, diff::Activation act, Rng& rng,
                             double init_log_std) {
  std::vector<std::size_t> widths{state_dim};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(action_dim);
  mean = diff::Mlp(widths, act, rng, 0.01);
  log_std = diff::Parameter("log_std", Array({action_dim}, init_log_std));
}

double GaussianActor::effective_log_std(std::size_t j) const {
  return std::clamp(log_std.value[j], kLogStdMin, kLogStdMax);
}

double gaussian_logp(const GaussianActor& actor, std::span<const double> state,
                     std::span<const double> action) {
  if (state.size() != actor.state_dim() || action.size() != actor.action_dim()) {
    throw ShapeError("gaussian_logp: dimension mismatch");
  }
  Array in = Array::matrix(1, state.size());
  std::copy(state.begin(), state.end(), in.row(0).begin());
  const Array mu = actor.mean.evaluate(in);
  double lp = 0.0;
  for (std::size_t j = 0; j < action.size(); ++j) {
    const double ls = actor.effective_log_std(j);
    const double z = (action[j] - mu[j]) * std::exp(-ls);
    lp += -0.5 * z * z - ls - kHalfLog2Pi;
  }
  return lp;
}

diff::Var gaussian_logp(diff::Tape& tape, GaussianActor& actor, const Array& states,
                        const Array& actions) {
  const std::size_t b = states.rows();
  const std::size_t d = actor.action_dim();
  if (actions.rows() != b || actions.cols() != d) {
    throw ShapeError("gaussian_logp: actions must be [" + std::to_string(b) + ", " +
                     std::to_string(d) + "], got " + actions.shape_string());
  }
  diff::Var mu = diff::forward_mlp(tape, actor.mean, states);
  diff::Var ls = tape.clip(tape.parameter(actor.log_std), kLogStdMin, kLogStdMax);
  diff::Var ls_rows = tape.broadcast_rows(ls, b);
  diff::Var diff = tape.sub(tape.constant(actions), mu);
  diff::Var z = tape.mul(diff, tape.exp(tape.scale(ls_rows, -1.0)));
  diff::Var per_dim = tape.sub(tape.scale(tape.square(z), -0.5), ls_rows);
  return tape.add_const(tape.row_sum(per_dim),
                        Array::matrix(b, 1, -static_cast<double>(d) * kHalfLog2Pi));
}

double ppo_loss(std::span<const PpoSample> batch, double eps_clip) {
  if (batch.empty()) throw std::invalid_argument("ppo_loss: empty batch");
  double total = 0.0;
  for (const auto& s : batch) {
    const double r = std::exp(s.logp_new - s.logp_old);
    const double clipped = std::clamp(r, 1.0 - eps_clip, 1.0 + eps_clip);
    total += -std::min(r * s.advantage, clipped * s.advantage);
  }
  return total / static_cast<double>(batch.size());
}

TapedPpoLoss ppo_loss(diff::Tape& tape, diff::Var logp_new, std::span<const double> logp_old,
                      std::span<const double> advantages, double eps_clip) {
  const std::size_t b = advantages.size();
  if (b == 0) throw std::invalid_argument("ppo_loss: empty batch");
  if (logp_old.size() != b || logp_new.value().size() != b) {
    throw ShapeError("ppo_loss: batch misaligned");
  }
  Array neg_old = Array::matrix(b, 1);
  for (std::size_t i = 0; i < b; ++i) neg_old[i] = -logp_old[i];
  diff::Var ratio = tape.exp(tape.add_const(logp_new, std::move(neg_old)));
  diff::Var clipped = tape.clip(ratio, 1.0 - eps_clip, 1.0 + eps_clip);

  // min(r A, clip(r) A) picks one branch per sample; the selection is
  // piecewise constant in the parameters.
  Array take_raw = Array::matrix(b, 1);
  Array take_clip = Array::matrix(b, 1);
  std::size_t n_clipped = 0;
  for (std::size_t i = 0; i < b; ++i) {
    const double r = ratio.value()[i];
    const double c = clipped.value()[i];
    const double a = advantages[i];
    const bool raw = r * a <= c * a;
    take_raw[i] = raw ? -a : 0.0;
    take_clip[i] = raw ? 0.0 : -a;
    if (!raw) ++n_clipped;
  }
  diff::Var per_sample = tape.add(tape.mul_const(ratio, std::move(take_raw)),
                                  tape.mul_const(clipped, std::move(take_clip)));
  TapedPpoLoss out;
  out.loss = tape.mean(per_sample);
  out.clip_fraction = static_cast<double>(n_clipped) / static_cast<double>(b);
  return out;
}

PpoActor::PpoActor(std::size_t state_dim, std::size_t action_dim, const PpoActorConfig& cfg,
                   Rng& init_rng)
    : cfg_(cfg),
      policy_(state_dim, action_dim, cfg.hidden, cfg.activation, init_rng, cfg.init_log_std) {
  if (!(cfg_.eps_clip > 0.0)) throw std::invalid_argument("ppo: eps_clip must be positive");
  params_ = policy_.mean.parameter_ptrs();
  params_.push_back(&policy_.log_std);
  opt_ = diff::Adam(params_);
}

Array PpoActor::act(const Array& obs, std::span<Rng> rngs, train::RolloutBuffer& buf,
                    std::size_t offset, std::vector<bool>& ok) {
  const std::size_t b = rngs.size();
  const std::size_t d = action_dim();
  const Array mu = policy_.mean.evaluate(obs);
  Array actions = Array::matrix(b, d);
  ok.assign(b, true);
  for (std::size_t i = 0; i < b; ++i) {
    double lp = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double ls = policy_.effective_log_std(j);
      const double eps = rngs[i].normal();
      const double a = mu.at(i, j) + std::exp(ls) * eps;
      actions.at(i, j) = a;
      const double z = (a - mu.at(i, j)) * std::exp(-ls);
      lp += -0.5 * z * z - ls - kHalfLog2Pi;
    }
    if (!std::isfinite(lp)) {
      ok[i] = false;
      for (auto& v : actions.row(i)) v = 0.0;
      lp = 0.0;
    }
    buf.old_logp[offset + i] = lp;
    std::copy(actions.row(i).begin(), actions.row(i).end(), buf.actions.row(offset + i).begin());
  }
  return actions;
}

Array PpoActor::act_eval(const Array& obs, std::span<Rng> rngs, bool deterministic) const {
  Array actions = policy_.mean.evaluate(obs);
  if (!deterministic) {
    for (std::size_t i = 0; i < actions.rows(); ++i) {
      for (std::size_t j = 0; j < actions.cols(); ++j) {
        actions.at(i, j) += std::exp(policy_.effective_log_std(j)) * rngs[i].normal();
      }
    }
  }
  for (auto& v : actions.values()) {
    if (!std::isfinite(v)) v = 0.0;
  }
  return actions;
}

TapedPpoLoss PpoActor::loss_and_grad(const train::RolloutBuffer& buf,
                                     std::span<const std::size_t> idx,
                                     std::span<const double> advantages, double& loss_value) {
  const std::size_t b = idx.size();
  if (advantages.size() != b) throw ShapeError("ppo update: batch misaligned");
  Array states = Array::matrix(b, state_dim());
  Array actions = Array::matrix(b, action_dim());
  std::vector<double> old(b);
  for (std::size_t i = 0; i < b; ++i) {
    const auto s = buf.observations.row(idx[i]);
    const auto a = buf.actions.row(idx[i]);
    std::copy(s.begin(), s.end(), states.row(i).begin());
    std::copy(a.begin(), a.end(), actions.row(i).begin());
    old[i] = buf.old_logp[idx[i]];
  }
  for (auto* p : params_) p->zero_grad();
  diff::Tape tape;
  const diff::Var lp = gaussian_logp(tape, policy_, states, actions);
  auto out = ppo_loss(tape, lp, old, advantages, cfg_.eps_clip);
  loss_value = out.loss.item();
  if (!std::isfinite(loss_value)) throw NumericError("ppo update: non-finite loss");
  tape.backward(out.loss);
  return out;
}

train::ActorStep PpoActor::update(const train::RolloutBuffer& buf,
                                  std::span<const std::size_t> idx,
                                  std::span<const double> advantages, double lr) {
  double loss = 0.0;
  const auto out = loss_and_grad(buf, idx, advantages, loss);
  train::ActorStep step;
  step.loss = loss;
  step.step_clip_fraction = out.clip_fraction;
  step.path_clip_fraction = out.clip_fraction;
  step.grad_norm = diff::clip_grad_norm(params_, cfg_.grad_clip_norm);
  if (!std::isfinite(step.grad_norm)) throw NumericError("ppo update: non-finite gradient");
  opt_.step(lr);
  return step;
}

std::uint64_t PpoActor::parameter_hash() const {
  std::uint64_t h = train::hash_parameters(policy_.mean.parameters(), 2);
  return train::hash_bytes(policy_.log_std.value.data(),
                           policy_.log_std.value.size() * sizeof(double), h);
}

void PpoActor::save(Checkpoint& ckpt) const {
  ckpt.put_mlp("actor/mean", policy_.mean);
  ckpt.put("actor/log_std", policy_.log_std.value);
  ckpt.put_adam("actor/opt", opt_);
}

void PpoActor::load(const Checkpoint& ckpt) {
  ckpt.load_mlp("actor/mean", policy_.mean);
  const Array& ls = ckpt.get("actor/log_std");
  if (!ls.same_shape(policy_.log_std.value)) throw ShapeError("checkpoint: log_std shape");
  policy_.log_std.value = ls;
  ckpt.load_adam("actor/opt", opt_);
}

}  // namespace gsbmdpo::baseline
