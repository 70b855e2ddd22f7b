#include "sdelab/matching.hpp"
#include "sdelab/rng.hpp"
#include "sdelab/targets.hpp"

#include <doctest.h>

#include <cmath>

using namespace sdelab;

namespace {

DiffusionModel ve_linear(int d) {
  ModelParams p;
  p.ve_schedule = VeSchedule::Linear;
  return DiffusionModel::make(ModelKind::VE, p, d, 1.0);
}

bool within(double a, double b, double se, double k = 3.0) { return std::abs(a - b) <= k * se; }

}  // namespace

TEST_CASE("ESM of a shifted true score is the squared shift") {
  const int d = 2;
  const DiffusionModel m = ve_linear(d);
  const GaussianMixture g = GaussianMixture::single(Vec::Zero(d), 1.0);
  const auto oracle = std::make_shared<OracleScore>(g, m);
  const PerturbedScore shifted(oracle, Vec{{0.3, -0.4}});
  const Points x = g.evolve(m, 0.5).sample(1000, 1).points;
  const LossBatch l = esm_loss(shifted, *oracle, 0.5, x);
  CHECK(l.mean() == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("ISM of the true standard-normal score is minus the dimension") {
  const int d = 3;
  const DiffusionModel m = ve_linear(d);
  const GaussianMixture g = GaussianMixture::single(Vec::Zero(d), 1.0);
  // At t -> 0 the law is the target itself; use s = -x on N(0, I) directly.
  const LinearScore s(-Mat::Identity(d, d), Vec::Zero(d));
  const Points x = g.sample(200000, 2).points;
  const Estimate ism = ism_loss(s, 0.0, x).estimate();
  CHECK(within(ism.value, -d, ism.std_error));
  const OracleScore truth(g, m);
  CHECK(esm_loss(s, truth, 0.0, x).mean() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("ISM and DSM differ from ESM by a field-independent constant") {
  const int d = 2;
  ModelParams p;
  const DiffusionModel m = DiffusionModel::make(ModelKind::VP, p, d, 1.0);
  Mat means(2, d);
  means << -1.0, 0.0, 1.5, 0.5;
  const GaussianMixture g({0.4, 0.6}, means, {0.3, 0.5});
  const double t = 0.3;
  const OracleScore truth(g, m);
  const std::size_t n = 100000;
  const Points x0 = g.sample(n, 3).points;
  const Points eps = standard_normal(n, d, 4, 0);
  const Points xt = perturb(m, t, x0, eps);
  const LinearScore a(Mat::Identity(d, d) * -0.8, Vec{{0.1, 0.2}});
  const LinearScore b(Mat{{-1.5, 0.2}, {0.1, -0.6}}, Vec{{-0.3, 0.0}});
  const Vec ism_a = ism_loss(a, t, xt).values - esm_loss(a, truth, t, xt).values;
  const Vec ism_b = ism_loss(b, t, xt).values - esm_loss(b, truth, t, xt).values;
  const Estimate diff_ism = estimate_mean(Vec(ism_a - ism_b));
  CHECK(within(diff_ism.value, 0.0, diff_ism.std_error));
  const Vec dsm_a = dsm_loss_at(a, m, t, x0, eps, Weighting::Unit).values - esm_loss(a, truth, t, xt).values;
  const Vec dsm_b = dsm_loss_at(b, m, t, x0, eps, Weighting::Unit).values - esm_loss(b, truth, t, xt).values;
  const Estimate diff_dsm = estimate_mean(Vec(dsm_a - dsm_b));
  CHECK(within(diff_dsm.value, 0.0, diff_dsm.std_error));
}

TEST_CASE("sliced projections are unbiased for the Jacobian trace") {
  const Mat a{{-1.2, 0.4, 0.0}, {0.3, -0.5, 0.2}, {0.0, 0.1, 0.7}};
  const LinearScore s(a, Vec::Zero(3));
  const Points x = GaussianMixture::single(Vec::Zero(3), 1.0).sample(20000, 5).points;
  const Estimate proj = estimate_mean(ssm_projection_terms(s, 0.0, x, 1, 6));
  CHECK(within(proj.value, a.trace(), proj.std_error));

  const LossBatch ism = ism_loss(s, 0.0, x);
  const LossBatch ssm = ssm_loss(s, 0.0, x, 200, 7);
  const Estimate diff = estimate_mean(Vec(ssm.values - ism.values));
  CHECK(within(diff.value, 0.0, std::max(diff.std_error, 1e-12)));
}

TEST_CASE("DSM at the exact score of a Gaussian target") {
  const int d = 2;
  const double v = 2.0;
  const double t = 0.5;
  const DiffusionModel m = ve_linear(d);
  const GaussianMixture g = GaussianMixture::single(Vec::Zero(d), v);
  const OracleScore truth(g, m);
  const std::size_t n = 200000;
  const Points x0 = g.sample(n, 8).points;
  const Points eps = standard_normal(n, d, 9, 0);
  const double s2 = t * t;
  const Estimate unit = dsm_loss_at(truth, m, t, x0, eps, Weighting::Unit).estimate();
  CHECK(within(unit.value, d * v / (s2 * (v + s2)), unit.std_error));
  const Estimate weighted = dsm_loss_at(truth, m, t, x0, eps, Weighting::SigmaSquared).estimate();
  CHECK(within(weighted.value, d * v / (v + s2), weighted.std_error));
}

TEST_CASE("DSM over the linear class recovers the Gaussian score coefficient") {
  const DiffusionModel m = ve_linear(1);
  const GaussianMixture g = GaussianMixture::single(Vec::Zero(1), 1.0);
  const double t = 0.8;
  const std::size_t n = 200000;
  const Points x0 = g.sample(n, 10).points;
  const Points eps = standard_normal(n, 1, 11, 0);
  auto loss = [&](double a) {
    return dsm_loss_at(LinearScore(Mat::Constant(1, 1, a), Vec::Zero(1)), m, t, x0, eps, Weighting::Unit).mean();
  };
  // Quadratic in a: three evaluations determine the minimiser.
  const double l0 = loss(-1.0), l1 = loss(0.0), l2 = loss(1.0);
  const double a_star = -0.5 * (l2 - l0) / (l2 - 2 * l1 + l0);
  CHECK(a_star == doctest::Approx(-1.0 / (1.0 + t * t)).epsilon(1e-2));
}

TEST_CASE("DSM training lowers the oracle ESM") {
  ModelParams p;
  const DiffusionModel m = DiffusionModel::make(ModelKind::VP, p, 1, 1.0);
  const GaussianMixture g = GaussianMixture::single(Vec::Constant(1, 1.0), 0.5);
  LearnedScore s = LearnedScore::init(m, Parametrization::Raw, 1, 16);
  const double floor = default_t_floor(m);
  const Estimate before = weighted_esm(s, g, m, Weighting::SigmaSquared, 5000, 2, floor);
  MatchingConfig c;
  c.iterations = 400;
  c.learning_rate = 3e-3;
  const TrainResult r = train(c, s, g);
  CHECK(r.trace.size() >= 1);
  const Estimate after = weighted_esm(s, g, m, Weighting::SigmaSquared, 5000, 2, floor);
  CHECK(after.value < 0.5 * before.value);
  const OracleScore truth(g, m);
  CHECK(weighted_esm(truth, g, m, Weighting::SigmaSquared, 1000, 2, floor).value == doctest::Approx(0.0));
}

TEST_CASE("tweedie training with gradient clipping lowers the oracle ESM") {
  ModelParams p;
  const DiffusionModel m = DiffusionModel::make(ModelKind::VP, p, 1, 1.0);
  const GaussianMixture g = GaussianMixture::single(Vec::Constant(1, 1.0), 0.5);
  LearnedScore s = LearnedScore::init(m, Parametrization::Tweedie, 1, 16);
  const double floor = default_t_floor(m);
  const Estimate before = weighted_esm(s, g, m, Weighting::SigmaSquared, 5000, 2, floor);
  MatchingConfig c;
  c.iterations = 400;
  c.learning_rate = 3e-3;
  c.grad_clip = 1.0;
  train(c, s, g);
  CHECK(weighted_esm(s, g, m, Weighting::SigmaSquared, 5000, 2, floor).value < 0.1 * before.value);
}

TEST_CASE("training is deterministic given the seed") {
  ModelParams p;
  const DiffusionModel m = DiffusionModel::make(ModelKind::VP, p, 2, 1.0);
  const GaussianMixture g = GaussianMixture::single(Vec::Zero(2), 0.5);
  MatchingConfig c;
  c.iterations = 20;
  c.objective = Objective::SSM;
  LearnedScore a = LearnedScore::init(m, Parametrization::Raw, 1, 8);
  LearnedScore b = a;
  train(c, a, g);
  train(c, b, g);
  CHECK(a.params() == b.params());
  c.objective = Objective::ESM;
  CHECK_THROWS_AS(train(c, a, [&](std::size_t n, std::uint64_t s) { return g.sample(n, s).points; }), Error);
}

TEST_CASE("exponential-family estimator on the Gaussian family") {
  const ExpFamilySpec spec = ExpFamilySpec::gaussian();
  const Vec x = (GaussianMixture::single(Vec::Constant(1, 1.0), 1.0).sample(400000, 12).points.col(0));
  const Vec theta = expfam_fit(spec, x);
  CHECK(theta(0) == doctest::Approx(1.0).epsilon(0.02));
  CHECK(theta(1) == doctest::Approx(1.0).epsilon(0.02));
  const Mat gamma = expfam_sandwich(spec, Vec{{1.0, 1.0}}, x);
  const Mat closed{{3.0, 2.0}, {2.0, 2.0}};
  CHECK((gamma - closed).norm() / closed.norm() < 0.03);
  const ExpFamilyMoments pop{Mat{{1.0, -1.0}, {-1.0, 2.0}}, Vec{{0.0, -1.0}}};
  CHECK((expfam_solve(pop) - Vec{{1.0, 1.0}}).norm() < 1e-12);
}
