#include "sdelab/metrics.hpp"
#include "sdelab/rng.hpp"
#include "sdelab/targets.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace sdelab;

namespace {

Points gaussian_points(std::size_t n, int d, double mean, double sd, std::uint64_t seed) {
  Points x = GaussianMixture::single(Vec::Constant(d, mean), sd * sd).sample(n, seed).points;
  return x;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

}  // namespace

TEST_CASE("Gaussian W2 and KL closed forms") {
  CHECK(w2_gaussian(Vec::Zero(1), 1.0, Vec::Zero(1), 4.0) == doctest::Approx(1.0));
  CHECK(w2_gaussian(Vec::Zero(2), 1.0, Vec{{3.0, 4.0}}, 1.0) == doctest::Approx(5.0));
  CHECK(w2_gaussian(Vec::Zero(2), 1.0, Vec::Zero(2), 1.0) == doctest::Approx(0.0));
  CHECK(w2_gaussian(Vec{{1.0, 0.0}}, Mat::Identity(2, 2) * 2.0, Vec::Zero(2), Mat::Identity(2, 2) * 0.5) ==
        doctest::Approx(w2_gaussian(Vec{{1.0, 0.0}}, 2.0, Vec::Zero(2), 0.5)));
  const Mat a{{2.0, 0.5}, {0.5, 1.0}};
  const Mat r = sqrtm_psd(a);
  CHECK((r * r - a).norm() < 1e-12);
  CHECK(kl_gaussian(Vec::Zero(1), 1.0, Vec::Constant(1, 1.0), 2.0) ==
        doctest::Approx(0.5 * (0.5 + 0.5 - 1.0 + std::log(2.0))));
  CHECK_THROWS_AS(w2_gaussian(Vec::Zero(1), -1.0, Vec::Zero(1), 1.0), Error);
}

TEST_CASE("sliced W2 on shifted and rotated batches") {
  const Points a = gaussian_points(100000, 1, 0.0, 1.0, 1);
  const Points b = gaussian_points(100000, 1, 1.0, 1.0, 2);
  CHECK(sliced_w2(a, b, 16, 0).value == doctest::Approx(1.0).epsilon(0.02));
  CHECK(sliced_w2(a, a, 16, 0).value == doctest::Approx(0.0));

  Mat means(2, 2);
  means << -1.0, 0.0, 1.0, 0.8;
  const GaussianMixture g({0.5, 0.5}, means, {0.2, 0.4});
  const Points x = g.sample(20000, 3).points;
  const Points y = gaussian_points(20000, 2, 0.0, 1.0, 4);
  const double angle = 0.7;
  const Mat rot{{std::cos(angle), -std::sin(angle)}, {std::sin(angle), std::cos(angle)}};
  const MetricResult plain = sliced_w2(x, y, 256, 5);
  const MetricResult rotated = sliced_w2(x * rot.transpose(), y * rot.transpose(), 256, 5);
  CHECK(std::abs(plain.value - rotated.value) < 3 * std::hypot(plain.mc_error, rotated.mc_error));
  CHECK_THROWS_AS(sliced_w2(Points(0, 2), y, 4, 0), Error);
  CHECK_THROWS_AS(sliced_w2(x, a, 4, 0), Error);
}

TEST_CASE("exact 1D empirical W2") {
  CHECK(w2_empirical_1d({0.0, 1.0, 2.0}, {3.0, 1.0, 2.0}) == doctest::Approx(1.0));
}

TEST_CASE("histogram TV") {
  const Points a = gaussian_points(1000000, 1, 0.0, 1.0, 6);
  const Points b = gaussian_points(1000000, 1, 1.0, 1.0, 7);
  CHECK(tv_histogram(a, b, 200).value == doctest::Approx(2 * normal_cdf(0.5) - 1).epsilon(0.01 / 0.3829));
  CHECK(tv_histogram(a, a, 50).value == doctest::Approx(0.0));
  Points far = a;
  far.array() += 100.0;
  CHECK(tv_histogram(a, far, 50).value == doctest::Approx(1.0));
  CHECK_THROWS_AS(tv_histogram(Points::Zero(10, 3), Points::Zero(10, 3), 10), Error);
}

TEST_CASE("VP total variation bound") {
  ModelParams p;
  const DiffusionModel m = DiffusionModel::make(ModelKind::VP, p, 1, 1.0);
  CHECK(vp_tv_bound(m, 1.0, 0.0) == doctest::Approx(std::exp(-5.025) / std::numbers::sqrt2).epsilon(1e-10));
  CHECK(vp_tv_bound(m, 1.0, 0.0) == doctest::Approx(4.63e-3).epsilon(1e-3));
  CHECK(vp_tv_bound(0.0, 2.0, 0.0, 0.0) == doctest::Approx(1.0));
  CHECK(vp_tv_bound(10.05, 1.0, 0.2, 2.0) == doctest::Approx(std::exp(-5.025) / std::numbers::sqrt2 + 0.2));
  double prev = 1e300;
  for (double horizon : {0.5, 1.0, 2.0, 4.0}) {
    const double b = vp_tv_bound(DiffusionModel::make(ModelKind::VP, p, 1, horizon), 1.0, 0.0);
    CHECK(b < prev);
    prev = b;
  }
  CHECK_THROWS_AS(vp_tv_bound(m, -1.0, 0.0), Error);
}

TEST_CASE("W2 bound with constant diffusion matches hand integration") {
  const double c = 0.8, horizon = 1.5, lip = -0.3, h = 0.2, eps = 0.1, w0 = 0.7;
  ModelParams p;
  p.beta_min = c;
  p.beta_max = c;
  const DiffusionModel m = DiffusionModel::make(ModelKind::VP, p, 1, horizon);
  const RateFn zero = [](double) { return 0.0; };
  const RateFn lip_fn = [&](double) { return lip; };
  const double k = (2 * lip + 2 * h) * c;
  const double u = k * horizon;
  const double score_term = eps * eps / (2 * h) * c * std::expm1(u) / k;
  CHECK(w2_bound(m, zero, lip_fn, h, eps, w0) == doctest::Approx(std::sqrt(w0 * w0 * std::exp(u) + score_term)).epsilon(1e-9));
  CHECK(w2_bound(m, zero, lip_fn, h, 0.0, w0) == doctest::Approx(w0 * std::exp(u / 2)).epsilon(1e-10));
  const BoundOptimum best = w2_bound_min(m, zero, lip_fn, eps, w0);
  CHECK(best.value <= w2_bound(m, zero, lip_fn, h, eps, w0) + 1e-12);
  CHECK(best.value == doctest::Approx(w2_bound(m, zero, lip_fn, best.h, eps, w0)));
  CHECK_THROWS_AS(w2_bound(m, zero, lip_fn, 0.0, eps, w0), Error);
}

TEST_CASE("fitted W2 against the generating Gaussian is within its error") {
  const Points x = gaussian_points(200000, 2, 1.0, 0.5, 8);
  const MetricResult r = fitted_w2(x, Vec::Constant(2, 1.0), 0.25);
  CHECK(r.value < 0.01);
  const GaussianFit fit = fit_gaussian(x);
  CHECK(fit.iso_var == doctest::Approx(0.25).epsilon(0.01));
}
