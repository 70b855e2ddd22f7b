#pragma once

#include "sdelab/sde_model.hpp"
#include "sdelab/types.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace sdelab {

struct MetricResult {
  std::string name;
  double value = 0.0;
  double mc_error = 0.0;
  std::size_t n_used = 0;
};

// W2 between N(m1, v1 I) and N(m2, v2 I).
double w2_gaussian(const Vec& mean1, double var1, const Vec& mean2, double var2);
// W2 between general Gaussians: |m1 - m2|^2 + tr(C1 + C2 - 2 (C1^{1/2} C2 C1^{1/2})^{1/2}).
double w2_gaussian(const Vec& mean1, const Mat& cov1, const Vec& mean2, const Mat& cov2);
// KL(N(m1, v1 I) || N(m2, v2 I)).
double kl_gaussian(const Vec& mean1, double var1, const Vec& mean2, double var2);
Mat sqrtm_psd(const Mat& a);

struct GaussianFit {
  Vec mean;
  Mat cov;
  double iso_var = 0.0;  // tr(cov) / d
};
GaussianFit fit_gaussian(const Points& x);

// W2 between the isotropic Gaussian fitted to x and N(mean, var I), with a
// delta-method standard error. Meaningful when x is (close to) Gaussian.
MetricResult fitted_w2(const Points& x, const Vec& mean, double var);

// Mean over random unit directions of the 1D quantile-coupling W2 between the
// projected batches; mc_error is the standard error over directions.
MetricResult sliced_w2(const Points& a, const Points& b, int n_proj = 128, std::uint64_t seed = 0);
// Exact 1D W2 between equal-weight empirical laws (quantile coupling).
double w2_empirical_1d(std::vector<double> a, std::vector<double> b);

// 1/2 sum |p_bin - q_bin| on a shared grid over [min - 3 sd, max + 3 sd]
// (per axis, d <= 2). mc_error = 1/2 sum sqrt(p(1-p)/n1 + q(1-q)/n2).
MetricResult tv_histogram(const Points& a, const Points& b, int bins = 200);

// exp(-int_0^T beta / 2) sqrt(E|x|^2 / 2) + eps sqrt(T / 2) for a VP model over its horizon.
double vp_tv_bound(const DiffusionModel& model, double second_moment, double eps);
double vp_tv_bound(double beta_integral_at_T, double second_moment, double eps, double horizon);

using RateFn = std::function<double(double)>;

// sqrt(prior_w2^2 e^{u(T)} + eps^2 / (2h) int_0^T g^2(t) e^{u(T) - u(T-t)} dt) with
// u(t) = int_{T-t}^T (-2 r_f(s) + (2 L(s) + 2h) g^2(s)) ds, all integrals by quadrature.
// L may be a one-sided Lipschitz bound (negative for contracting scores).
double w2_bound(const DiffusionModel& model, const RateFn& r_f, const RateFn& lipschitz, double h,
                double eps, double prior_w2);
// Minimum of w2_bound over h on a log grid in [h_min, h_max].
struct BoundOptimum {
  double value = 0.0;
  double h = 0.0;
};
BoundOptimum w2_bound_min(const DiffusionModel& model, const RateFn& r_f, const RateFn& lipschitz,
                          double eps, double prior_w2, double h_min = 1e-3, double h_max = 10.0,
                          int points = 200);

// u_VP integrand: beta(s) (1 + 2h - 2 kappa / (e^{-B(s)} + kappa (1 - e^{-B(s)}))).
double u_vp_rate(const DiffusionModel& model, double kappa, double h, double s);
// w2_bound for VP with a kappa-strongly log-concave target (u replaced by u_VP).
double w2_bound_vp_logconcave(const DiffusionModel& model, double kappa, double h, double eps,
                              double prior_w2);
// eps^2 / (2h) int_0^T g^2(t) e^{u(T) - u(T-t)} dt alone, the score-error term.
double w2_bound_vp_logconcave_score_term(const DiffusionModel& model, double kappa, double h, double eps);

}  // namespace sdelab
