#include "sdelab/samplers.hpp"

#include "sdelab/rng.hpp"

#include <cmath>

namespace sdelab {
namespace {

constexpr std::uint64_t kChainStream = 0x636861696eull;  // "chain"

void require(bool ok, const std::string& what) {
  if (!ok) throw Error("samplers", what);
}

void require_affine(const DiffusionModel& model) {
  require(!model.has_offset(),
          "exponential integrator needs a drift without offset (OU with nonzero mean is not supported)");
}

void fill_normal(std::vector<Rng>& rngs, Points& xi) {
  for (Eigen::Index i = 0; i < xi.rows(); ++i) {
    Rng& rng = rngs[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < xi.cols(); ++j) xi(i, j) = rng.normal();
  }
}

// -f(T - t, y) for every row.
Points neg_drift(const DiffusionModel& model, double t, const Points& y) {
  const double tf = model.horizon() - t;
  Points out = -model.drift_slope(tf) * y;
  out.array() -= model.drift_offset(tf);
  return out;
}

Points ode_rhs_batch(const DiffusionModel& model, const ScoreField& field, double t, const Points& y) {
  const double tf = model.horizon() - t;
  return neg_drift(model, t, y) + 0.5 * model.diffusion_sq(tf) * field.eval_batch(tf, y);
}

}  // namespace

std::string to_string(Scheme s) {
  switch (s) {
    case Scheme::ExactNoiseEM: return "exact-em";
    case Scheme::EulerMaruyama: return "em";
    case Scheme::ExponentialIntegratorSDE: return "ei-sde";
    case Scheme::ExponentialIntegratorODE: return "ei-ode";
    case Scheme::ProbabilityFlowHeun: return "heun";
    case Scheme::PredictorCorrector: return "pc";
  }
  return "?";
}

Scheme parse_scheme(const std::string& name) {
  for (Scheme s : {Scheme::ExactNoiseEM, Scheme::EulerMaruyama, Scheme::ExponentialIntegratorSDE,
                   Scheme::ExponentialIntegratorODE, Scheme::ProbabilityFlowHeun, Scheme::PredictorCorrector}) {
    if (name == to_string(s)) return s;
  }
  throw Error("samplers", "unknown scheme '" + name + "' (expected exact-em, em, ei-sde, ei-ode, heun or pc)");
}

std::vector<double> make_grid(const DiffusionModel& model, const SamplerConfig& config) {
  const double horizon = model.horizon();
  if (!config.custom_grid.empty()) {
    const auto& g = config.custom_grid;
    require(g.size() >= 2, "grid needs at least two points");
    require(g.front() == 0.0, "grid must start at 0");
    for (std::size_t k = 1; k < g.size(); ++k) require(g[k] > g[k - 1], "grid must be strictly increasing");
    require(g.back() <= horizon, "grid must end at or before T");
    return g;
  }
  require(config.steps >= 1, "empty grid (steps must be >= 1)");
  const double t_floor = config.t_floor < 0.0 ? default_t_floor(model) : config.t_floor;
  require(t_floor >= 0.0 && t_floor < horizon, "t_floor must lie in [0, T)");
  const std::size_t n = config.steps;
  std::vector<double> grid(n + 1);
  if (config.grid == GridKind::Uniform) {
    const double end = horizon - t_floor;
    for (std::size_t k = 0; k <= n; ++k) grid[k] = end * static_cast<double>(k) / static_cast<double>(n);
  } else {
    require(t_floor > 0.0, "geometric grid needs t_floor > 0");
    for (std::size_t k = 0; k <= n; ++k) {
      grid[k] = horizon - horizon * std::pow(t_floor / horizon, static_cast<double>(k) / static_cast<double>(n));
    }
    grid[0] = 0.0;
    grid[n] = horizon - t_floor;
  }
  return grid;
}

Vec backward_drift(const DiffusionModel& model, const ScoreField& field, double t, const Vec& y) {
  const double tf = model.horizon() - t;
  model.check_time(tf, "backward drift");
  const Vec s = field.eval(tf, y);
  require(s.allFinite(), "non-finite score");
  return -model.drift(tf, y) + model.diffusion_sq(tf) * s;
}

Vec ode_rhs(const DiffusionModel& model, const ScoreField& field, double t, const Vec& y) {
  const double tf = model.horizon() - t;
  model.check_time(tf, "ode rhs");
  const Vec s = field.eval(tf, y);
  require(s.allFinite(), "non-finite score");
  return -model.drift(tf, y) + 0.5 * model.diffusion_sq(tf) * s;
}

double ei_factor(const DiffusionModel& model, double s, double t) {
  require_affine(model);
  require(s <= t, "ei_factor needs s <= t");
  const double horizon = model.horizon();
  model.check_time(horizon - s, "ei_factor");
  model.check_time(horizon - t, "ei_factor");
  return std::exp(model.log_mean_factor(horizon - t) - model.log_mean_factor(horizon - s));
}

double ei_score_coefficient(const DiffusionModel& model, double s, double t) {
  require_affine(model);
  require(s <= t, "ei coefficient needs s <= t");
  const double a = model.horizon() - t;  // forward-time interval [a, b]
  const double b = model.horizon() - s;
  const double psi = ei_factor(model, s, t);
  switch (model.kind()) {
    case ModelKind::VE: return model.diffusion_sq_integral(a, b);
    case ModelKind::VP: return 2.0 * (psi - 1.0);
    case ModelKind::CVP: return 2.0 * (1.0 - psi);
    case ModelKind::SubVP: {
      const double ba = model.beta_integral(a);
      const double bb = model.beta_integral(b);
      auto prim = [](double big_b) { return 2.0 * std::exp(0.5 * big_b) + (2.0 / 3.0) * std::exp(-1.5 * big_b); };
      return std::exp(-0.5 * ba) * (prim(bb) - prim(ba));
    }
    case ModelKind::OU: {
      const auto& p = model.params();
      return p.ou_sigma * p.ou_sigma / p.theta * (psi - 1.0);
    }
  }
  return 0.0;
}

double ei_noise_variance(const DiffusionModel& model, double s, double t) {
  const double psi = ei_factor(model, s, t);
  const double a = model.horizon() - t;
  const double b = model.horizon() - s;
  if (model.kind() == ModelKind::VE) return model.diffusion_sq_integral(a, b);
  return std::max(0.0, psi * psi * model.marginal_var(b) - model.marginal_var(a));
}

SampleBatch sample(const DiffusionModel& model, const ScoreField& field, const SamplerConfig& config,
                   std::size_t n, const SamplerObserver& observer) {
  require(n >= 1, "sample needs n >= 1");
  return sample_from(model, field, config, model.prior_sample(n, config.seed).points, observer);
}

SampleBatch sample_from(const DiffusionModel& model, const ScoreField& field, const SamplerConfig& config,
                        Points y, const SamplerObserver& observer) {
  require(y.rows() >= 1, "sample needs n >= 1");
  require(y.cols() == model.dim() && field.dim() == model.dim(), "dimension mismatch between model, field and state");
  require(config.scheme != Scheme::PredictorCorrector || config.corrector_steps >= 1,
          "predictor-corrector needs corrector_steps >= 1");
  require(config.predictor != Scheme::PredictorCorrector && config.predictor != Scheme::ProbabilityFlowHeun,
          "predictor must be a one-step stochastic or EI scheme");
  const std::vector<double> grid = make_grid(model, config);
  const double horizon = model.horizon();
  const Scheme step_scheme = config.scheme == Scheme::PredictorCorrector ? config.predictor : config.scheme;
  if (step_scheme == Scheme::ExponentialIntegratorSDE || step_scheme == Scheme::ExponentialIntegratorODE) {
    require_affine(model);
  }

  std::vector<Rng> rngs;
  rngs.reserve(static_cast<std::size_t>(y.rows()));
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    rngs.emplace_back(config.seed, derive_stream(kChainStream, static_cast<std::uint64_t>(i)));
  }
  Points xi(y.rows(), y.cols());

  if (observer) observer(0, grid[0], y);
  for (std::size_t k = 1; k < grid.size(); ++k) {
    const double t0 = grid[k - 1];
    const double t1 = grid[k];
    const double h = t1 - t0;
    const double tf0 = horizon - t0;  // forward times
    const double tf1 = horizon - t1;

    switch (step_scheme) {
      case Scheme::ExactNoiseEM:
      case Scheme::EulerMaruyama: {
        const Points score = field.eval_batch(tf0, y);
        const Points drift = neg_drift(model, t1, y) + model.diffusion_sq(tf0) * score;
        fill_normal(rngs, xi);
        const double noise_sd = step_scheme == Scheme::ExactNoiseEM
                                    ? std::sqrt(model.diffusion_sq_integral(tf1, tf0))
                                    : model.diffusion(tf0) * std::sqrt(h);
        y += h * drift + noise_sd * xi;
        break;
      }
      case Scheme::ExponentialIntegratorSDE:
      case Scheme::ExponentialIntegratorODE: {
        const double psi = ei_factor(model, t0, t1);
        const double coef = ei_score_coefficient(model, t0, t1);
        const Points score = field.eval_batch(tf0, y);
        if (step_scheme == Scheme::ExponentialIntegratorSDE) {
          fill_normal(rngs, xi);
          y = psi * y + coef * score + std::sqrt(ei_noise_variance(model, t0, t1)) * xi;
        } else {
          y = psi * y + 0.5 * coef * score;
        }
        break;
      }
      case Scheme::ProbabilityFlowHeun: {
        const Points k1 = ode_rhs_batch(model, field, t0, y);
        const Points pred = y + h * k1;
        const Points k2 = ode_rhs_batch(model, field, t1, pred);
        y += 0.5 * h * (k1 + k2);
        break;
      }
      case Scheme::PredictorCorrector: break;
    }

    if (config.scheme == Scheme::PredictorCorrector) {
      const double eps = config.corrector_eps0 * std::pow(config.corrector_decay, static_cast<double>(k));
      for (int l = 0; l < config.corrector_steps; ++l) {
        const Points score = field.eval_batch(tf1, y);
        fill_normal(rngs, xi);
        y += eps * score + std::sqrt(2.0 * eps) * xi;
      }
    }

    if (!y.allFinite()) {
      throw Error("samplers", "non-finite state at step " + std::to_string(k) + " (backward time " +
                                  std::to_string(t1) + ")");
    }
    if (observer) observer(k, t1, y);
  }

  SampleBatch batch;
  batch.points = std::move(y);
  batch.time = horizon - grid.back();
  batch.model_hash = model.hash();
  batch.seed = config.seed;
  batch.scheme = to_string(config.scheme);
  return batch;
}

}  // namespace sdelab
