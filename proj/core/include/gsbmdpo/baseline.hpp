#pragma once

#include <span>
#include <vector>

#include "gsbmdpo/mlp.hpp"
#include "gsbmdpo/optim.hpp"
#include "gsbmdpo/tape.hpp"
#include "gsbmdpo/trainer.hpp"

namespace gsbmdpo::baseline {

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;

// Diagonal Gaussian with an Mlp mean and a state-independent log-std.
struct GaussianActor {
  diff::Mlp mean;
  diff::Parameter log_std;

  GaussianActor() = default;
  GaussianActor(std::size_t state_dim, std::size_t action_dim, std::vector<std::size_t> hidden,
                diff::Activation act, Rng& rng, double init_log_std = 0.0);

  std::size_t state_dim() const { return mean.input_width(); }
  std::size_t action_dim() const { return mean.output_width(); }
  // log-std after clamping to [kLogStdMin, kLogStdMax].
  double effective_log_std(std::size_t j) const;
};

double gaussian_logp(const GaussianActor& actor, std::span<const double> state,
                     std::span<const double> action);

// Row-wise log densities on the tape: [B, 1].
diff::Var gaussian_logp(diff::Tape& tape, GaussianActor& actor, const Array& states,
                        const Array& actions);

struct PpoSample {
  double logp_new = 0.0;
  double logp_old = 0.0;
  double advantage = 0.0;
};

// mean of -min(r A, clip(r, 1 - eps, 1 + eps) A), r = exp(logp_new - logp_old).
double ppo_loss(std::span<const PpoSample> batch, double eps_clip);

struct TapedPpoLoss {
  diff::Var loss;
  double clip_fraction = 0.0;
};

TapedPpoLoss ppo_loss(diff::Tape& tape, diff::Var logp_new, std::span<const double> logp_old,
                      std::span<const double> advantages, double eps_clip);

struct PpoActorConfig {
  std::vector<std::size_t> hidden = {64, 64};
  diff::Activation activation = diff::Activation::Elu;
  double init_log_std = 0.0;
  double eps_clip = 0.2;
  double grad_clip_norm = 1.0;
};

class PpoActor final : public train::Actor {
 public:
  PpoActor(std::size_t state_dim, std::size_t action_dim, const PpoActorConfig& cfg,
           Rng& init_rng);
  PpoActor(const PpoActor&) = delete;
  PpoActor& operator=(const PpoActor&) = delete;

  std::string algo() const override { return "ppo"; }
  std::size_t state_dim() const override { return policy_.state_dim(); }
  std::size_t action_dim() const override { return policy_.action_dim(); }

  Array act(const Array& obs, std::span<Rng> rngs, train::RolloutBuffer& buf,
            std::size_t offset, std::vector<bool>& ok) override;
  Array act_eval(const Array& obs, std::span<Rng> rngs, bool deterministic) const override;
  train::ActorStep update(const train::RolloutBuffer& buf, std::span<const std::size_t> idx,
                          std::span<const double> advantages, double lr) override;

  std::uint64_t parameter_hash() const override;
  void save(Checkpoint& ckpt) const override;
  void load(const Checkpoint& ckpt) override;

  GaussianActor& policy() { return policy_; }
  const GaussianActor& policy() const { return policy_; }
  std::vector<diff::Parameter*> parameters() { return params_; }

  // Loss and gradients without stepping.
  TapedPpoLoss loss_and_grad(const train::RolloutBuffer& buf, std::span<const std::size_t> idx,
                             std::span<const double> advantages, double& loss_value);

 private:
  PpoActorConfig cfg_;
  GaussianActor policy_;
  std::vector<diff::Parameter*> params_;
  diff::Adam opt_;
};

}  // namespace gsbmdpo::baseline
