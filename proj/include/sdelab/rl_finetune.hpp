#pragma once

#include "sdelab/score_net.hpp"
#include "sdelab/sde_model.hpp"
#include "sdelab/types.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace sdelab {

// Mean of the Gaussian exploration policy, indexed by backward time t.
class PolicyMean {
 public:
  virtual ~PolicyMean() = default;
  virtual int dim() const = 0;
  virtual Points eval(double t, const Points& y) const = 0;
  // Gradient over parameters of sum_i <u_i, mu(t, y_i)>.
  virtual Vec param_gradient(double t, const Points& y, const Points& u) const = 0;
  virtual const Vec& params() const = 0;
  virtual void set_params(const Vec& p) = 0;
};

// mu(t, y) = s_base(T - t, y) + sum_j phi_j(t) (c_j + D_j y), with hat functions
// phi_j on evenly spaced knots over [0, T] and diagonal D_j. Zero parameters
// reproduce the base score exactly.
class AffineCorrectionPolicy final : public PolicyMean {
 public:
  AffineCorrectionPolicy(ScoreFieldPtr base, double horizon, int knots = 6);
  int dim() const override { return base_->dim(); }
  Points eval(double t, const Points& y) const override;
  Vec param_gradient(double t, const Points& y, const Points& u) const override;
  const Vec& params() const override { return params_; }
  void set_params(const Vec& p) override;
  int knots() const { return knots_; }

 private:
  Vec basis(double t) const;

  ScoreFieldPtr base_;
  double horizon_;
  int knots_;
  Vec params_;  // knots x (offset d, slope d)
};

// mu(t, y) = s_theta(T - t, y): fine-tunes a learned score directly.
class ScorePolicy final : public PolicyMean {
 public:
  explicit ScorePolicy(LearnedScore score);
  int dim() const override { return score_.dim(); }
  Points eval(double t, const Points& y) const override;
  Vec param_gradient(double t, const Points& y, const Points& u) const override;
  const Vec& params() const override { return score_.params(); }
  void set_params(const Vec& p) override { score_.set_params(p); }
  const LearnedScore& score() const { return score_; }

 private:
  LearnedScore score_;
};

using Reward = std::function<double(const Vec&)>;
// R(y) = -scale |y - target|^2 / 2.
Reward quadratic_reward(const Vec& target, double scale = 1.0);

struct PolicySpec {
  std::shared_ptr<PolicyMean> policy;
  ScoreFieldPtr pretrained;               // evaluated at forward time T - t
  std::function<double(double)> exploration;  // sigma_t >= 0 at backward time t
  double penalty = 1.0;                   // beta_pen
  Reward reward;
};
// Constant exploration level.
std::function<double(double)> constant_exploration(double sigma);

struct RolloutBatch {
  std::vector<double> grid;   // backward times t_0 < ... < t_N
  std::vector<Points> states; // y_k before step k, k = 0..N-1
  std::vector<Points> actions;
  Mat log_prob;               // n x N, Gaussian policy density of a_k
  Mat running;                // n x N, -(beta/2) g^2(T - t_k) |a_k - mu_pre|^2 dt
  Vec terminal_reward;        // R(y_N)
  Points terminal;            // y_N
  std::size_t size() const { return static_cast<std::size_t>(terminal.rows()); }
};

// Euler-Maruyama simulation of dY = (-f(T - t, Y) + g^2(T - t) a) dt + g(T - t) dB with
// a ~ N(mu(t, Y), sigma_t^2 I), started from n prior draws. Uses the same noise
// streams and step as the "em" sampler, so zero exploration with mu = pretrained
// reproduces that sampler bit for bit.
RolloutBatch rollout(const PolicySpec& spec, const DiffusionModel& model, std::size_t n,
                     const std::vector<double>& grid, std::uint64_t seed);

// Mean of R(y_N) + sum_k running_k.
Estimate objective_estimate(const RolloutBatch& batch);

struct GradientDiagnostics {
  Vec gradient;
  double objective = 0.0;
  double objective_error = 0.0;
};

// Likelihood-ratio gradient sum_k grad log pi(a_k) A_k with A_k the reward-to-go
// minus its batch mean at step k.
Vec policy_gradient(const PolicySpec& spec, const RolloutBatch& batch);
// One ascent step theta += step * gradient.
GradientDiagnostics policy_gradient_step(PolicySpec& spec, const RolloutBatch& batch, double step);

struct FinetuneConfig {
  std::size_t iterations = 1000;
  std::size_t batch = 512;
  std::size_t steps = 100;
  double step_size = 0.01;
  std::size_t eval_every = 100;  // 0 disables the periodic evaluations
  std::size_t eval_batch = 10000;
  std::uint64_t seed = 0;
};

struct FinetunePoint {
  std::size_t iteration = 0;
  double objective = 0.0;
  double objective_error = 0.0;
  double terminal_mean = 0.0;  // first coordinate
};

// Evaluations at iteration 0, every eval_every steps and at the end, each on a
// fresh batch from a fixed evaluation seed (common random numbers across checkpoints).
std::vector<FinetunePoint> finetune(PolicySpec& spec, const DiffusionModel& model, const FinetuneConfig& config);

struct IsoGaussian {
  Vec mean;
  double variance = 1.0;
};
// Maximiser of E R - beta KL(. || N(0, I)) for R(y) = -|y - target|^2 / 2:
// N(target / (1 + beta), beta / (1 + beta) I).
IsoGaussian closed_form_optimum(const Vec& target, double penalty);

}  // namespace sdelab
