#pragma once

#include "sdelab/score_net.hpp"
#include "sdelab/sde_model.hpp"
#include "sdelab/targets.hpp"
#include "sdelab/types.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace sdelab {

enum class Objective { ESM, ISM, SSM, DSM };
// Time weight lambda(t): 1, or sigma_t^2 (which keeps every time on the same scale).
enum class Weighting { Unit, SigmaSquared };

std::string to_string(Objective o);
Objective parse_objective(const std::string& name);
std::string to_string(Weighting w);
Weighting parse_weighting(const std::string& name);

// Per-sample loss contributions; keeping them lets callers pair estimates
// computed on the same draws.
struct LossBatch {
  Vec values;
  Estimate estimate() const { return estimate_mean(values); }
  double mean() const { return values.mean(); }
};

// |s - s_true|^2 on points drawn from the time-t law.
LossBatch esm_loss(const ScoreField& field, const ScoreField& oracle, double t, const Points& x);
// |s|^2 + 2 div s.
LossBatch ism_loss(const ScoreField& field, double t, const Points& x);
// Mean of v^T J_s v over m Gaussian projections per point.
Vec ssm_projection_terms(const ScoreField& field, double t, const Points& x, int m, std::uint64_t seed);
// |s|^2 + 2 (projection term).
LossBatch ssm_loss(const ScoreField& field, double t, const Points& x, int m, std::uint64_t seed);

// Denoising loss at a fixed time with explicit noise: x_t = m x0 + offset + sigma eps and
// the contribution is lambda(t) |s(t, x_t) + eps / sigma|^2.
LossBatch dsm_loss_at(const ScoreField& field, const DiffusionModel& model, double t,
                      const Points& x0, const Points& eps, Weighting weighting);
// Same with t ~ Uniform(t_floor, T) and eps ~ N(0, I) drawn per sample from seed.
LossBatch dsm_loss(const ScoreField& field, const DiffusionModel& model, const Points& x0,
                   Weighting weighting, std::uint64_t seed, double t_floor);

// Forward-perturb x0 to time t with the given noise.
Points perturb(const DiffusionModel& model, double t, const Points& x0, const Points& eps);
Points standard_normal(std::size_t n, int d, std::uint64_t seed, std::uint64_t stream);

// Draws n data points; the argument seed selects the batch.
using DataSource = std::function<Points(std::size_t n, std::uint64_t seed)>;

struct MatchingConfig {
  Objective objective = Objective::DSM;
  Weighting weighting = Weighting::SigmaSquared;
  double t_floor = -1.0;         // < 0 selects 1e-3 T
  std::size_t batch = 256;
  int projections = 1;           // SSM only
  double learning_rate = 1e-3;
  double momentum = 0.9;
  std::size_t decay_start = 1000;  // step size lr * sqrt(decay_start / k) afterwards
  double grad_clip = 0.0;        // max gradient norm, 0 disables
  std::size_t iterations = 1000;
  std::uint64_t seed = 0;
};

struct TracePoint {
  std::size_t iteration = 0;
  double loss = 0.0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  Vec params;
  std::vector<TracePoint> trace;
};

// Minibatch SGD on the configured objective; field holds the final parameters.
// ESM needs the oracle target.
TrainResult train(const MatchingConfig& config, LearnedScore& field, const DataSource& data,
                  const GaussianMixture* oracle = nullptr);
TrainResult train(const MatchingConfig& config, LearnedScore& field, const GaussianMixture& target);

void write_loss_trace(const std::string& path, const std::vector<TracePoint>& trace);

// Oracle-evaluated ESM averaged over t ~ Uniform(t_floor, T) with the configured weight.
Estimate weighted_esm(const ScoreField& field, const GaussianMixture& target, const DiffusionModel& model,
                      Weighting weighting, std::size_t n, std::uint64_t seed, double t_floor);

// Exponential family p_theta ∝ exp(theta . F(x)) on R, described through the
// gradient and Laplacian of F (one entry per statistic).
struct ExpFamilySpec {
  int k = 1;
  std::function<Vec(double)> grad;
  std::function<Vec(double)> laplacian;

  // F(x) = (x, -x^2/2): natural parameters (mu / v, 1 / v) of N(mu, v).
  static ExpFamilySpec gaussian();
};

struct ExpFamilyMoments {
  Mat grad_outer;     // E grad F grad F^T
  Vec laplacian;      // E Laplacian F
};

ExpFamilyMoments expfam_moments(const ExpFamilySpec& spec, const Eigen::Ref<const Vec>& samples);
// theta = -[E grad F grad F^T]^{-1} E Laplacian F.
Vec expfam_solve(const ExpFamilyMoments& moments);
Vec expfam_fit(const ExpFamilySpec& spec, const Eigen::Ref<const Vec>& samples);
// Sandwich covariance M^{-1} Sigma M^{-1} of sqrt(n)(theta_hat - theta), with
// Sigma the covariance of the estimating function grad F grad F^T theta + Laplacian F.
Mat expfam_sandwich(const ExpFamilySpec& spec, const Vec& theta, const Eigen::Ref<const Vec>& samples);

}  // namespace sdelab
