#include "sdelab/rl_finetune.hpp"

#include "sdelab/rng.hpp"
#include "sdelab/samplers.hpp"

#include <cmath>
#include <numbers>

namespace sdelab {
namespace {

// Shared with the samplers so zero-exploration rollouts replay the "em" chain.
constexpr std::uint64_t kChainStream = 0x636861696eull;   // "chain"
constexpr std::uint64_t kActionStream = 0x616374696full;  // "actio"
constexpr std::uint64_t kEvalStream = 0x6576616cull;      // "eval"

void require(bool ok, const std::string& what) {
  if (!ok) throw Error("rl_finetune", what);
}

void check_spec(const PolicySpec& spec, const DiffusionModel& model) {
  require(spec.policy != nullptr && spec.pretrained != nullptr, "policy and pretrained score are required");
  require(static_cast<bool>(spec.exploration) && static_cast<bool>(spec.reward), "exploration and reward are required");
  require(spec.penalty > 0.0, "penalty must be positive");
  require(spec.policy->dim() == model.dim() && spec.pretrained->dim() == model.dim(), "dimension mismatch");
}

}  // namespace

AffineCorrectionPolicy::AffineCorrectionPolicy(ScoreFieldPtr base, double horizon, int knots)
    : base_(std::move(base)), horizon_(horizon), knots_(knots) {
  require(base_ != nullptr, "base score is required");
  require(horizon_ > 0.0, "horizon must be positive");
  require(knots_ >= 2, "need at least two knots");
  params_ = Vec::Zero(2 * knots_ * base_->dim());
}

Vec AffineCorrectionPolicy::basis(double t) const {
  Vec phi = Vec::Zero(knots_);
  const double spacing = horizon_ / (knots_ - 1);
  for (int j = 0; j < knots_; ++j) phi(j) = std::max(0.0, 1.0 - std::abs(t - j * spacing) / spacing);
  return phi;
}

void AffineCorrectionPolicy::set_params(const Vec& p) {
  require(p.size() == params_.size(), "parameter count mismatch");
  require(p.allFinite(), "non-finite parameters");
  params_ = p;
}

Points AffineCorrectionPolicy::eval(double t, const Points& y) const {
  const int d = dim();
  Points out = base_->eval_batch(horizon_ - t, y);
  const Vec phi = basis(t);
  Eigen::RowVectorXd offset = Eigen::RowVectorXd::Zero(d);
  Eigen::RowVectorXd slope = Eigen::RowVectorXd::Zero(d);
  for (int j = 0; j < knots_; ++j) {
    if (phi(j) == 0.0) continue;
    offset += phi(j) * params_.segment(2 * j * d, d).transpose();
    slope += phi(j) * params_.segment(2 * j * d + d, d).transpose();
  }
  if (offset.isZero(0.0) && slope.isZero(0.0)) return out;
  for (Eigen::Index i = 0; i < y.rows(); ++i) out.row(i) += offset + slope.cwiseProduct(y.row(i));
  return out;
}

Vec AffineCorrectionPolicy::param_gradient(double t, const Points& y, const Points& u) const {
  const int d = dim();
  const Vec phi = basis(t);
  const Eigen::RowVectorXd u_sum = u.colwise().sum();
  const Eigen::RowVectorXd uy_sum = u.cwiseProduct(y).colwise().sum();
  Vec g = Vec::Zero(params_.size());
  for (int j = 0; j < knots_; ++j) {
    if (phi(j) == 0.0) continue;
    g.segment(2 * j * d, d) = phi(j) * u_sum.transpose();
    g.segment(2 * j * d + d, d) = phi(j) * uy_sum.transpose();
  }
  return g;
}

ScorePolicy::ScorePolicy(LearnedScore score) : score_(std::move(score)) {}

Points ScorePolicy::eval(double t, const Points& y) const {
  return score_.eval_batch(score_.model().horizon() - t, y);
}

Vec ScorePolicy::param_gradient(double t, const Points& y, const Points& u) const {
  const std::vector<double> ts(static_cast<std::size_t>(y.rows()), score_.model().horizon() - t);
  return score_.param_gradient(ts, y, u);
}

Reward quadratic_reward(const Vec& target, double scale) {
  return [target, scale](const Vec& y) { return -0.5 * scale * (y - target).squaredNorm(); };
}

std::function<double(double)> constant_exploration(double sigma) {
  require(sigma >= 0.0, "exploration level must be nonnegative");
  return [sigma](double) { return sigma; };
}

RolloutBatch rollout(const PolicySpec& spec, const DiffusionModel& model, std::size_t n,
                     const std::vector<double>& grid, std::uint64_t seed) {
  check_spec(spec, model);
  require(n >= 1, "rollout needs n >= 1");
  require(grid.size() >= 2 && grid.front() == 0.0, "grid must start at 0 and have at least two points");
  for (std::size_t k = 1; k < grid.size(); ++k) require(grid[k] > grid[k - 1], "grid must be strictly increasing");
  require(grid.back() <= model.horizon(), "grid must end at or before T");

  const int d = model.dim();
  const std::size_t steps = grid.size() - 1;
  const double horizon = model.horizon();
  RolloutBatch out;
  out.grid = grid;
  out.states.reserve(steps);
  out.actions.reserve(steps);
  out.log_prob.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(steps));
  out.running.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(steps));

  Points y = model.prior_sample(n, seed).points;
  std::vector<Rng> chain, explore;
  chain.reserve(n);
  explore.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    chain.emplace_back(seed, derive_stream(kChainStream, i));
    explore.emplace_back(seed, derive_stream(kActionStream, i));
  }
  Points xi(y.rows(), d);
  Points eta(y.rows(), d);

  for (std::size_t k = 1; k <= steps; ++k) {
    const double t0 = grid[k - 1];
    const double t1 = grid[k];
    const double h = t1 - t0;
    const double tf0 = horizon - t0;
    const double tf1 = horizon - t1;
    const double sigma = spec.exploration(t0);
    require(sigma >= 0.0 && std::isfinite(sigma), "exploration level must be finite and nonnegative");
    const double g2 = model.diffusion_sq(tf0);

    const Points mu = spec.policy->eval(t0, y);
    const Points mu_pre = spec.pretrained->eval_batch(tf0, y);
    Points a = mu;
    if (sigma > 0.0) {
      for (Eigen::Index i = 0; i < y.rows(); ++i) {
        Rng& r = explore[static_cast<std::size_t>(i)];
        for (int j = 0; j < d; ++j) eta(i, j) = r.normal();
      }
      a += sigma * eta;
    }
    const auto col = static_cast<Eigen::Index>(k - 1);
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      out.running(i, col) = -0.5 * spec.penalty * g2 * (a.row(i) - mu_pre.row(i)).squaredNorm() * h;
      out.log_prob(i, col) =
          sigma > 0.0 ? -0.5 * eta.row(i).squaredNorm() - d * std::log(sigma * std::sqrt(2.0 * std::numbers::pi))
                      : 0.0;
    }
    out.states.push_back(y);

    // Same arithmetic as the "em" sampler step.
    Points drift = -model.drift_slope(tf1) * y;
    drift.array() -= model.drift_offset(tf1);
    drift += g2 * a;
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      Rng& r = chain[static_cast<std::size_t>(i)];
      for (int j = 0; j < d; ++j) xi(i, j) = r.normal();
    }
    y += h * drift + model.diffusion(tf0) * std::sqrt(h) * xi;
    out.actions.push_back(std::move(a));
    if (!y.allFinite()) throw Error("rl_finetune", "non-finite state at step " + std::to_string(k));
  }
  out.terminal = y;
  out.terminal_reward.resize(y.rows());
  for (Eigen::Index i = 0; i < y.rows(); ++i) out.terminal_reward(i) = spec.reward(y.row(i).transpose());
  return out;
}

Estimate objective_estimate(const RolloutBatch& batch) {
  require(batch.size() >= 1, "empty rollout batch");
  const Vec total = batch.terminal_reward + batch.running.rowwise().sum();
  return estimate_mean(total);
}

Vec policy_gradient(const PolicySpec& spec, const RolloutBatch& batch) {
  require(spec.policy != nullptr, "policy is required");
  require(batch.size() >= 1, "empty rollout batch");
  const std::size_t steps = batch.states.size();
  const auto n = static_cast<Eigen::Index>(batch.size());
  // Reward-to-go from step k: sum_{j >= k} running_j + R(y_N).
  Mat to_go(n, static_cast<Eigen::Index>(steps));
  Vec acc = batch.terminal_reward;
  for (std::size_t k = steps; k-- > 0;) {
    acc += batch.running.col(static_cast<Eigen::Index>(k));
    to_go.col(static_cast<Eigen::Index>(k)) = acc;
  }
  Vec grad = Vec::Zero(spec.policy->params().size());
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = batch.grid[k];
    const double sigma = spec.exploration(t);
    require(sigma > 0.0, "policy gradient needs positive exploration");
    const auto kk = static_cast<Eigen::Index>(k);
    const Vec adv = to_go.col(kk).array() - to_go.col(kk).mean();
    const Points mu = spec.policy->eval(t, batch.states[k]);
    // grad_mu log pi = (a - mu) / sigma^2.
    Points u = (batch.actions[k] - mu) / (sigma * sigma);
    for (Eigen::Index i = 0; i < n; ++i) u.row(i) *= adv(i) / static_cast<double>(n);
    grad += spec.policy->param_gradient(t, batch.states[k], u);
  }
  require(grad.allFinite(), "non-finite policy gradient");
  return grad;
}

GradientDiagnostics policy_gradient_step(PolicySpec& spec, const RolloutBatch& batch, double step) {
  require(step > 0.0, "step size must be positive");
  GradientDiagnostics diag;
  diag.gradient = policy_gradient(spec, batch);
  const Estimate obj = objective_estimate(batch);
  diag.objective = obj.value;
  diag.objective_error = obj.std_error;
  spec.policy->set_params(spec.policy->params() + step * diag.gradient);
  return diag;
}

std::vector<FinetunePoint> finetune(PolicySpec& spec, const DiffusionModel& model, const FinetuneConfig& config) {
  check_spec(spec, model);
  require(config.batch >= 2, "batch must be >= 2");
  require(config.steps >= 1, "steps must be >= 1");
  SamplerConfig grid_config;
  grid_config.steps = config.steps;
  const std::vector<double> grid = make_grid(model, grid_config);
  const std::uint64_t eval_seed = derive_stream(config.seed, kEvalStream);

  std::vector<FinetunePoint> trace;
  auto evaluate = [&](std::size_t it) {
    if (config.eval_batch == 0) return;
    const RolloutBatch b = rollout(spec, model, config.eval_batch, grid, eval_seed);
    const Estimate e = objective_estimate(b);
    trace.push_back({it, e.value, e.std_error, b.terminal.col(0).mean()});
  };
  evaluate(0);
  for (std::size_t k = 1; k <= config.iterations; ++k) {
    const RolloutBatch b = rollout(spec, model, config.batch, grid, derive_stream(config.seed, k));
    policy_gradient_step(spec, b, config.step_size);
    if ((config.eval_every > 0 && k % config.eval_every == 0) || k == config.iterations) evaluate(k);
  }
  return trace;
}

IsoGaussian closed_form_optimum(const Vec& target, double penalty) {
  require(penalty > 0.0, "penalty must be positive");
  return {target / (1.0 + penalty), penalty / (1.0 + penalty)};
}

}  // namespace sdelab
