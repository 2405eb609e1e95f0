#include "gsbmdpo/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace gsbmdpo::diff {

Adam::Adam(std::vector<Parameter*> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  for (const auto* p : params_) {
    m_.emplace_back(p->value.shape(), 0.0);
    v_.emplace_back(p->value.shape(), 0.0);
  }
}

void Adam::step(double lr) {
  if (!(lr >= 0.0)) throw std::invalid_argument("adam: learning rate must be >= 0");
  for (const auto* p : params_) {
    if (!p->grad.same_shape(p->value)) throw ShapeError("adam: gradient shape mismatch");
    if (!p->grad.all_finite()) throw NumericError("adam: non-finite gradient in " + p->name);
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    Array& m = m_[i];
    Array& v = v_[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p.value[j] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

double grad_norm(std::span<Parameter* const> params) {
  double sq = 0.0;
  for (const auto* p : params) {
    for (double g : p->grad.values()) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_grad_norm(std::span<Parameter* const> params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm > max_norm && std::isfinite(norm)) {
    const double s = max_norm / (norm + 1e-12);
    for (auto* p : params) {
      for (auto& g : p->grad.values()) g *= s;
    }
  }
  return norm;
}

double cosine_lr(double lr0, double progress) {
  if (!(progress >= 0.0 && progress <= 1.0)) {
    throw std::out_of_range("cosine_lr: progress must lie in [0,1]");
  }
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace gsbmdpo::diff
