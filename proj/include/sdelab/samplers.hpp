#pragma once

#include "sdelab/score_net.hpp"
#include "sdelab/sde_model.hpp"
#include "sdelab/types.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace sdelab {

// Backward-time schemes. Times below are backward times t in [0, T_eff]; the
// forward time is T - t.
enum class Scheme {
  ExactNoiseEM,              // Euler drift, Brownian increment with exact variance int g^2
  EulerMaruyama,             // Euler drift, increment g(T - t_{k-1}) dB
  ExponentialIntegratorSDE,  // linear part exact, score frozen over the step
  ExponentialIntegratorODE,
  ProbabilityFlowHeun,       // probability-flow ODE, Heun steps
  PredictorCorrector,        // predictor followed by M Langevin steps
};

std::string to_string(Scheme s);
Scheme parse_scheme(const std::string& name);

enum class GridKind { Uniform, Geometric };

struct SamplerConfig {
  Scheme scheme = Scheme::ExactNoiseEM;
  std::size_t steps = 1000;
  GridKind grid = GridKind::Uniform;
  std::vector<double> custom_grid;  // used verbatim when non-empty
  double t_floor = -1.0;            // < 0 selects 1e-3 T
  Scheme predictor = Scheme::ExactNoiseEM;
  int corrector_steps = 1;
  double corrector_eps0 = 1e-3;
  double corrector_decay = 0.999;   // eps_k = eps0 * decay^k
  std::uint64_t seed = 0;
};

// 0 = t_0 < ... < t_N = T - t_floor. Geometric grids space the forward times
// geometrically, refining near the data end.
std::vector<double> make_grid(const DiffusionModel& model, const SamplerConfig& config);

// -f(T - t, y) + g^2(T - t) s(T - t, y).
Vec backward_drift(const DiffusionModel& model, const ScoreField& field, double t, const Vec& y);
// -f(T - t, y) + g^2(T - t) s(T - t, y) / 2.
Vec ode_rhs(const DiffusionModel& model, const ScoreField& field, double t, const Vec& y);

// Psi(s, t) = exp(-int_s^t alpha(T - u) du) = m(T - t) / m(T - s).
double ei_factor(const DiffusionModel& model, double s, double t);
// int_s^t Psi(u, t) g^2(T - u) du in closed form.
double ei_score_coefficient(const DiffusionModel& model, double s, double t);
// Variance of int_s^t Psi(u, t) g(T - u) dB_u.
double ei_noise_variance(const DiffusionModel& model, double s, double t);

// Called with (step index, backward time, state) at k = 0 and after every step.
using SamplerObserver = std::function<void(std::size_t, double, const Points&)>;

// Starts from n prior draws.
SampleBatch sample(const DiffusionModel& model, const ScoreField& field, const SamplerConfig& config,
                   std::size_t n, const SamplerObserver& observer = {});
// Starts from the given backward-time-0 state.
SampleBatch sample_from(const DiffusionModel& model, const ScoreField& field, const SamplerConfig& config,
                        Points init, const SamplerObserver& observer = {});

}  // namespace sdelab
