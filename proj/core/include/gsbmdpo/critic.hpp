#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gsbmdpo/array.hpp"
#include "gsbmdpo/mlp.hpp"
#include "gsbmdpo/tape.hpp"

namespace gsbmdpo::critic {

struct GaeConfig {
  double gamma = 0.99;
  double lambda = 0.95;

  void validate() const;
};

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

// values has one more entry than rewards (bootstrap). dones[t] cuts the
// bootstrap and the recursion across the transition t -> t+1.
GaeResult gae(std::span<const double> rewards, std::span<const double> values,
              std::span<const std::uint8_t> dones, const GaeConfig& cfg);

// State -> scalar value.
class ValueNet {
 public:
  ValueNet() = default;
  ValueNet(std::size_t state_dim, std::vector<std::size_t> hidden, diff::Activation act,
           Rng& rng);

  diff::Mlp& net() { return net_; }
  const diff::Mlp& net() const { return net_; }
  // [B, state_dim] -> B values.
  std::vector<double> predict(const Array& states) const;

 private:
  diff::Mlp net_;
};

// mean_b (V(s_b) - target_b)^2, recorded on the tape.
diff::Var value_loss(diff::Tape& tape, ValueNet& net, const Array& states,
                     std::span<const double> targets);

// Streaming per-dimension mean and population variance (Chan et al. merge).
class RunningNormalizer {
 public:
  RunningNormalizer() = default;
  explicit RunningNormalizer(std::size_t dim);

  std::size_t dim() const { return mean_.size(); }
  double count() const { return count_; }
  const std::vector<double>& mean() const { return mean_; }
  const std::vector<double>& variance() const { return var_; }

  // obs is [B, dim] (or a single row).
  void update(const Array& obs);
  // (obs - mean) / sqrt(var + 1e-8), clipped to +-10. Identity before any
  // update.
  Array normalize(const Array& obs) const;
  void normalize_row(std::span<const double> in, std::span<double> out) const;

  void set_state(double count, std::vector<double> mean, std::vector<double> var);

 private:
  double count_ = 0.0;
  std::vector<double> mean_;
  std::vector<double> var_;
};

}  // namespace gsbmdpo::critic
