#include "gsbmdpo/critic.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace gsbmdpo::critic {

void GaeConfig::validate() const {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must lie in (0,1]");
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw std::invalid_argument("gae_lambda must lie in [0,1]");
  }
}

GaeResult gae(std::span<const double> rewards, std::span<const double> values,
              std::span<const std::uint8_t> dones, const GaeConfig& cfg) {
  const std::size_t horizon = rewards.size();
  if (values.size() != horizon + 1 || dones.size() != horizon) {
    throw ShapeError("gae: expected values of length T+1 and dones of length T");
  }
  GaeResult out{std::vector<double>(horizon), std::vector<double>(horizon)};
  double next_adv = 0.0;
  for (std::size_t k = horizon; k-- > 0;) {
    const double live = dones[k] ? 0.0 : 1.0;
    const double delta = rewards[k] + cfg.gamma * live * values[k + 1] - values[k];
    next_adv = delta + cfg.gamma * cfg.lambda * live * next_adv;
    out.advantages[k] = next_adv;
    out.returns[k] = next_adv + values[k];
  }
  return out;
}

ValueNet::ValueNet(std::size_t state_dim, std::vector<std::size_t> hidden,
                   diff::Activation act, Rng& rng) {
  std::vector<std::size_t> widths{state_dim};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(1);
  net_ = diff::Mlp(widths, act, rng);
}

std::vector<double> ValueNet::predict(const Array& states) const {
  return net_.evaluate(states).to_vector();
}

diff::Var value_loss(diff::Tape& tape, ValueNet& net, const Array& states,
                     std::span<const double> targets) {
  if (targets.empty()) throw std::invalid_argument("value_loss: empty batch");
  if (states.rows() != targets.size()) throw ShapeError("value_loss: batch misaligned");
  diff::Var pred = diff::forward_mlp(tape, net.net(), states);
  Array neg = Array::matrix(targets.size(), 1);
  for (std::size_t i = 0; i < targets.size(); ++i) neg[i] = -targets[i];
  return tape.mean(tape.square(tape.add_const(pred, std::move(neg))));
}

RunningNormalizer::RunningNormalizer(std::size_t dim) : mean_(dim, 0.0), var_(dim, 1.0) {}

void RunningNormalizer::update(const Array& obs) {
  if (obs.cols() != dim()) throw ShapeError("normalizer: dimension mismatch");
  const std::size_t b = obs.size() / dim();
  if (b == 0) return;
  const double nb = static_cast<double>(b);
  for (std::size_t j = 0; j < dim(); ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < b; ++i) m += obs[i * dim() + j];
    m /= nb;
    double m2 = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      const double dv = obs[i * dim() + j] - m;
      m2 += dv * dv;
    }
    if (count_ == 0.0) {
      mean_[j] = m;
      var_[j] = m2 / nb;
      continue;
    }
    const double total = count_ + nb;
    const double delta = m - mean_[j];
    const double merged_m2 = var_[j] * count_ + m2 + delta * delta * count_ * nb / total;
    mean_[j] += delta * nb / total;
    var_[j] = merged_m2 / total;
  }
  count_ += nb;
}

void RunningNormalizer::normalize_row(std::span<const double> in, std::span<double> out) const {
  if (in.size() != dim() || out.size() != dim()) throw ShapeError("normalizer: dimension");
  if (count_ == 0.0) {
    std::copy(in.begin(), in.end(), out.begin());
    return;
  }
  for (std::size_t j = 0; j < dim(); ++j) {
    out[j] = std::clamp((in[j] - mean_[j]) / std::sqrt(var_[j] + 1e-8), -10.0, 10.0);
  }
}

Array RunningNormalizer::normalize(const Array& obs) const {
  if (obs.cols() != dim()) throw ShapeError("normalizer: dimension mismatch");
  Array out(obs.shape());
  const std::size_t b = obs.size() / dim();
  for (std::size_t i = 0; i < b; ++i) {
    normalize_row(obs.span().subspan(i * dim(), dim()), out.span().subspan(i * dim(), dim()));
  }
  return out;
}

void RunningNormalizer::set_state(double count, std::vector<double> mean,
                                  std::vector<double> var) {
  if (mean.size() != var.size()) throw ShapeError("normalizer: state size mismatch");
  count_ = count;
  mean_ = std::move(mean);
  var_ = std::move(var);
}

}  // namespace gsbmdpo::critic
