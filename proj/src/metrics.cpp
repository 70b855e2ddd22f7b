#include "sdelab/metrics.hpp"

#include "sdelab/quadrature.hpp"
#include "sdelab/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace sdelab {
namespace {

constexpr std::uint64_t kProjectionStream = 0x70726f6aull;  // "proj"

void require(bool ok, const std::string& what) {
  if (!ok) throw Error("metrics", what);
}

// sqrt(prior^2 e^{K(T)} + eps^2/(2h) int_0^T g^2(t) e^{K(t)} dt), K(t) = int_0^t rate.
double bound_from_rate(const DiffusionModel& model, const RateFn& rate, double h, double eps,
                       double prior_w2) {
  require(h > 0.0 || (h == 0.0 && eps == 0.0), "h must be positive");
  require(eps >= 0.0 && prior_w2 >= 0.0, "eps and prior_w2 must be nonnegative");
  const double horizon = model.horizon();
  auto cumulative = [&](double t) { return t <= 0.0 ? 0.0 : integrate(rate, 0.0, t, 1e-10); };
  double total = prior_w2 * prior_w2 * std::exp(cumulative(horizon));
  if (eps > 0.0) {
    const double inner = integrate(
        [&](double t) { return model.diffusion_sq(t) * std::exp(cumulative(t)); }, 0.0, horizon, 1e-9);
    total += eps * eps / (2.0 * h) * inner;
  }
  return std::sqrt(total);
}

}  // namespace

double w2_gaussian(const Vec& mean1, double var1, const Vec& mean2, double var2) {
  require(var1 >= 0.0 && var2 >= 0.0, "variances must be nonnegative");
  require(mean1.size() == mean2.size(), "dimension mismatch");
  const double ds = std::sqrt(var1) - std::sqrt(var2);
  return std::sqrt((mean1 - mean2).squaredNorm() + static_cast<double>(mean1.size()) * ds * ds);
}

Mat sqrtm_psd(const Mat& a) {
  const Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (a + a.transpose()));
  // Eigenvalues at rounding level are zeroed; their square roots would otherwise
  // inject errors of order sqrt(machine epsilon).
  const double floor = 64.0 * std::numeric_limits<double>::epsilon() * es.eigenvalues().cwiseAbs().maxCoeff();
  const Vec root = es.eigenvalues().unaryExpr([floor](double v) { return v > floor ? std::sqrt(v) : 0.0; });
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

double w2_gaussian(const Vec& mean1, const Mat& cov1, const Vec& mean2, const Mat& cov2) {
  require(mean1.size() == mean2.size() && cov1.rows() == mean1.size() && cov2.rows() == mean2.size(),
          "dimension mismatch");
  const Mat r1 = sqrtm_psd(cov1);
  const Mat cross = sqrtm_psd(r1 * cov2 * r1);
  const double tr = (cov1 + cov2 - 2.0 * cross).trace();
  return std::sqrt(std::max(0.0, (mean1 - mean2).squaredNorm() + tr));
}

double kl_gaussian(const Vec& mean1, double var1, const Vec& mean2, double var2) {
  require(var1 > 0.0 && var2 > 0.0, "variances must be positive");
  const double d = static_cast<double>(mean1.size());
  return 0.5 * (d * var1 / var2 + (mean1 - mean2).squaredNorm() / var2 - d + d * std::log(var2 / var1));
}

GaussianFit fit_gaussian(const Points& x) {
  require(x.rows() >= 2, "need at least two points");
  GaussianFit f;
  f.mean = x.colwise().mean().transpose();
  const Points centred = x.rowwise() - f.mean.transpose();
  f.cov = (centred.transpose() * centred) / static_cast<double>(x.rows() - 1);
  f.iso_var = f.cov.trace() / static_cast<double>(x.cols());
  return f;
}

MetricResult fitted_w2(const Points& x, const Vec& mean, double var) {
  require(x.cols() == mean.size(), "dimension mismatch");
  const GaussianFit f = fit_gaussian(x);
  const double n = static_cast<double>(x.rows());
  const double d = static_cast<double>(x.cols());
  MetricResult r;
  r.name = "fitted_w2";
  r.n_used = static_cast<std::size_t>(x.rows());
  r.value = w2_gaussian(f.mean, f.iso_var, mean, var);
  const double sd_hat = std::sqrt(f.iso_var);
  const double mean_var = f.iso_var / n;                 // per-coordinate variance of the mean
  const double sd_var = f.iso_var / (2.0 * n * d);       // variance of the pooled std estimate
  if (r.value > 1e-12) {
    const double dsd = d * (sd_hat - std::sqrt(var)) / r.value;
    r.mc_error = std::sqrt((f.mean - mean).squaredNorm() / (r.value * r.value) * mean_var + dsd * dsd * sd_var);
  } else {
    r.mc_error = std::sqrt(mean_var);
  }
  return r;
}

double w2_empirical_1d(std::vector<double> a, std::vector<double> b) {
  require(!a.empty() && !b.empty(), "empty batch");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  if (a.size() == b.size()) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(acc / static_cast<double>(a.size()));
  }
  // Walk the merged quantile levels.
  const double wa = 1.0 / static_cast<double>(a.size());
  const double wb = 1.0 / static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double ra = wa, rb = wb, acc = 0.0;
  while (i < a.size() && j < b.size()) {
    const double m = std::min(ra, rb);
    acc += m * (a[i] - b[j]) * (a[i] - b[j]);
    ra -= m;
    rb -= m;
    if (ra <= 1e-15) { ++i; ra = wa; }
    if (rb <= 1e-15) { ++j; rb = wb; }
  }
  return std::sqrt(acc);
}

MetricResult sliced_w2(const Points& a, const Points& b, int n_proj, std::uint64_t seed) {
  require(a.rows() >= 1 && b.rows() >= 1, "empty batch");
  require(a.cols() == b.cols(), "batches have different dimensions");
  require(n_proj >= 1, "n_proj must be >= 1");
  const auto d = a.cols();
  Vec values(n_proj);
  std::vector<double> pa(static_cast<std::size_t>(a.rows())), pb(static_cast<std::size_t>(b.rows()));
  for (int p = 0; p < n_proj; ++p) {
    Rng rng(seed, derive_stream(kProjectionStream, static_cast<std::uint64_t>(p)));
    Vec u(d);
    for (auto& c : u) c = rng.normal();
    u.normalize();
    Eigen::Map<Vec>(pa.data(), a.rows()) = a * u;
    Eigen::Map<Vec>(pb.data(), b.rows()) = b * u;
    values(p) = w2_empirical_1d(pa, pb);
  }
  const Estimate e = estimate_mean(values);
  return {"sliced_w2", e.value, n_proj > 1 ? e.std_error : 0.0, static_cast<std::size_t>(std::min(a.rows(), b.rows()))};
}

MetricResult tv_histogram(const Points& a, const Points& b, int bins) {
  require(a.rows() >= 1 && b.rows() >= 1, "empty batch");
  require(a.cols() == b.cols(), "batches have different dimensions");
  require(a.cols() <= 2, "histogram TV is limited to d <= 2");
  require(bins >= 1, "bins must be >= 1");
  const auto d = a.cols();
  std::vector<double> lo(static_cast<std::size_t>(d)), width(static_cast<std::size_t>(d));
  for (Eigen::Index j = 0; j < d; ++j) {
    const double mn = std::min(a.col(j).minCoeff(), b.col(j).minCoeff());
    const double mx = std::max(a.col(j).maxCoeff(), b.col(j).maxCoeff());
    Points both(a.rows() + b.rows(), 1);
    both << a.col(j), b.col(j);
    const double sd = std::sqrt(fit_gaussian(both).iso_var);
    lo[static_cast<std::size_t>(j)] = mn - 3.0 * sd;
    const double span = std::max(mx - mn + 6.0 * sd, 1e-12);
    width[static_cast<std::size_t>(j)] = span / bins;
  }
  auto cell = [&](const Points& x, Eigen::Index i) {
    long long id = 0;
    for (Eigen::Index j = 0; j < d; ++j) {
      const auto jj = static_cast<std::size_t>(j);
      long long k = static_cast<long long>(std::floor((x(i, j) - lo[jj]) / width[jj]));
      k = std::clamp(k, 0LL, static_cast<long long>(bins) - 1);
      id = id * bins + k;
    }
    return id;
  };
  std::size_t cells = 1;
  for (Eigen::Index j = 0; j < d; ++j) cells *= static_cast<std::size_t>(bins);
  std::vector<std::pair<double, double>> counts(cells);
  for (Eigen::Index i = 0; i < a.rows(); ++i) counts[static_cast<std::size_t>(cell(a, i))].first += 1.0;
  for (Eigen::Index i = 0; i < b.rows(); ++i) counts[static_cast<std::size_t>(cell(b, i))].second += 1.0;
  const double n1 = static_cast<double>(a.rows());
  const double n2 = static_cast<double>(b.rows());
  double tv = 0.0, err = 0.0;
  for (const auto& c : counts) {
    const double p = c.first / n1;
    const double q = c.second / n2;
    tv += std::abs(p - q);
    err += std::sqrt(p * (1.0 - p) / n1 + q * (1.0 - q) / n2);
  }
  return {"tv_histogram", 0.5 * tv, 0.5 * err, static_cast<std::size_t>(std::min(a.rows(), b.rows()))};
}

double vp_tv_bound(double beta_integral_at_T, double second_moment, double eps, double horizon) {
  require(beta_integral_at_T >= 0.0 && second_moment >= 0.0 && eps >= 0.0 && horizon >= 0.0,
          "tv bound inputs must be nonnegative");
  return std::exp(-0.5 * beta_integral_at_T) * std::sqrt(second_moment / 2.0) + eps * std::sqrt(horizon / 2.0);
}

double vp_tv_bound(const DiffusionModel& model, double second_moment, double eps) {
  require(model.kind() == ModelKind::VP, "the total-variation corollary is stated for VP");
  return vp_tv_bound(model.beta_integral(model.horizon()), second_moment, eps, model.horizon());
}

double w2_bound(const DiffusionModel& model, const RateFn& r_f, const RateFn& lipschitz, double h,
                double eps, double prior_w2) {
  const RateFn rate = [&](double s) {
    return -2.0 * r_f(s) + (2.0 * lipschitz(s) + 2.0 * h) * model.diffusion_sq(s);
  };
  return bound_from_rate(model, rate, h, eps, prior_w2);
}

BoundOptimum w2_bound_min(const DiffusionModel& model, const RateFn& r_f, const RateFn& lipschitz,
                          double eps, double prior_w2, double h_min, double h_max, int points) {
  require(h_min > 0.0 && h_max > h_min && points >= 2, "invalid h search range");
  BoundOptimum best{std::numeric_limits<double>::infinity(), h_min};
  for (int i = 0; i < points; ++i) {
    const double h = h_min * std::pow(h_max / h_min, static_cast<double>(i) / (points - 1));
    const double v = w2_bound(model, r_f, lipschitz, h, eps, prior_w2);
    if (v < best.value) best = {v, h};
    if (eps == 0.0) break;  // without score error the bound increases with h
  }
  return best;
}

double u_vp_rate(const DiffusionModel& model, double kappa, double h, double s) {
  const double e = std::exp(-model.beta_integral(s));
  return model.beta(s) * (1.0 + 2.0 * h - 2.0 * kappa / (e + kappa * (1.0 - e)));
}

double w2_bound_vp_logconcave(const DiffusionModel& model, double kappa, double h, double eps,
                              double prior_w2) {
  require(model.kind() == ModelKind::VP, "the log-concave Wasserstein bound is stated for VP");
  require(kappa > 0.0, "kappa must be positive");
  return bound_from_rate(model, [&](double s) { return u_vp_rate(model, kappa, h, s); }, h, eps, prior_w2);
}

double w2_bound_vp_logconcave_score_term(const DiffusionModel& model, double kappa, double h, double eps) {
  return w2_bound_vp_logconcave(model, kappa, h, eps, 0.0);
}

}  // namespace sdelab
