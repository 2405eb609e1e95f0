#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gsbmdpo/array.hpp"
#include "gsbmdpo/tape.hpp"

namespace gsbmdpo::diff {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moments mirror the parameter shapes.
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Parameter*> params, AdamConfig cfg = {});

  // Applies one update from Parameter::grad. Throws NumericError on a
  // non-finite gradient, leaving parameters and moments untouched.
  void step(double lr);

  std::int64_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  std::vector<Array>& first_moments() { return m_; }
  std::vector<Array>& second_moments() { return v_; }
  const std::vector<Array>& first_moments() const { return m_; }
  const std::vector<Array>& second_moments() const { return v_; }
  void set_steps(std::int64_t t) { t_ = t; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Array> m_;
  std::vector<Array> v_;
  std::int64_t t_ = 0;
  AdamConfig cfg_;
};

// Rescales all gradients so their joint L2 norm is at most max_norm. Returns
// the norm before rescaling.
double clip_grad_norm(std::span<Parameter* const> params, double max_norm);
double grad_norm(std::span<Parameter* const> params);

// lr0 * (1 + cos(pi * progress)) / 2.
double cosine_lr(double lr0, double progress);

}  // namespace gsbmdpo::diff
