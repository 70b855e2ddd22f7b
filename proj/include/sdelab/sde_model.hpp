#pragma once

#include "sdelab/key_values.hpp"
#include "sdelab/types.hpp"

#include <cstdint>
#include <functional>
#include <numbers>
#include <string>

namespace sdelab {

enum class ModelKind { OU, VE, VP, SubVP, CVP };

// Noise schedule for VE: geometric sigma_min (sigma_max/sigma_min)^(t/T), or
// the linear alternative sigma(t) = t with g(t) = sqrt(2t).
enum class VeSchedule { Geometric, Linear };

std::string to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& name);

struct ModelParams {
  double beta_min = 0.1;
  double beta_max = 20.0;
  double sigma_min = 0.01;
  double sigma_max = 50.0;
  VeSchedule ve_schedule = VeSchedule::Geometric;
  double theta = 1.0;                         // OU mean reversion
  double ou_mean = 0.0;                       // OU centre, applied to every coordinate
  double ou_sigma = std::numbers::sqrt2;      // OU diffusion
};

// Law of X_t given X_0 = x: Normal(mean_factor * x + mean_offset, std^2 I).
struct ConditionalMarginal {
  double mean_factor = 1.0;
  Vec mean_offset;
  double std = 0.0;
};

// Isotropic Gaussian prior used to start backward sampling.
struct PriorSpec {
  Vec mean;
  double variance = 1.0;
};

// Forward SDE dX = (alpha(t) X + c(t)) dt + g(t) dB on R^d. Immutable after
// construction; every schedule quantity is evaluated in closed form.
class DiffusionModel {
 public:
  static DiffusionModel make(ModelKind kind, const ModelParams& params, int dim, double horizon);
  static DiffusionModel from_config(const KeyValues& kv);
  KeyValues to_config() const;

  ModelKind kind() const { return kind_; }
  const ModelParams& params() const { return params_; }
  int dim() const { return dim_; }
  double horizon() const { return horizon_; }
  bool uses_beta() const;
  bool has_offset() const;

  double beta(double t) const;
  double beta_integral(double t) const;

  double drift_slope(double t) const;
  double drift_offset(double t) const;  // c(t), identical on every coordinate
  Vec drift(double t, const Vec& x) const;
  double diffusion(double t) const;
  double diffusion_sq(double t) const;
  double diffusion_sq_integral(double a, double b) const;
  // log m(t) = int_0^t alpha(r) dr.
  double log_mean_factor(double t) const;

  ConditionalMarginal marginal(double t) const;
  double mean_factor(double t) const;
  double marginal_std(double t) const;
  double marginal_var(double t) const;
  double mean_factor_derivative(double t) const;
  // Requires marginal_std(t) > 0 except for the linear VE schedule.
  double marginal_std_derivative(double t) const;

  // One-sided growth of the drift: (x-x').(f(t,x)-f(t,x')) = r_f(t)|x-x'|^2.
  double contraction_rate(double t) const { return drift_slope(t); }

  PriorSpec prior() const;
  SampleBatch prior_sample(std::size_t n, std::uint64_t seed) const;

  std::string hash() const;
  std::string describe() const;

  void check_time(double t, const char* what) const;

 private:
  DiffusionModel() = default;

  ModelKind kind_ = ModelKind::VP;
  ModelParams params_;
  int dim_ = 1;
  double horizon_ = 1.0;
};

// Space-time change onto VE with g(t) = sqrt(2t): s(t) = exp(int_0^t alpha),
// l(t) = sqrt(int_0^t g^2 / s^2).
struct VeReparametrization {
  std::function<double(double)> scale;
  std::function<double(double)> noise_level;
};

VeReparametrization reparam_to_ve(const DiffusionModel& model);

}  // namespace sdelab
