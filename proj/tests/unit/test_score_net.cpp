#include "sdelab/score_net.hpp"
#include "sdelab/rng.hpp"
#include "sdelab/targets.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdio>

using namespace sdelab;

namespace {

DiffusionModel ve_linear(int d) {
  ModelParams p;
  p.ve_schedule = VeSchedule::Linear;
  return DiffusionModel::make(ModelKind::VE, p, d, 1.0);
}

DiffusionModel vp(int d) { return DiffusionModel::make(ModelKind::VP, ModelParams{}, d, 1.0); }

Mat random_mat(int r, int c, std::uint64_t seed) {
  Rng rng(seed, 0);
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = rng.normal();
  return m;
}

}  // namespace

TEST_CASE("oracle score of a standard normal under unit VE noise") {
  const OracleScore s(GaussianMixture::single(Vec::Zero(2), 1.0), ve_linear(2));
  const Vec v = s.eval(1.0, Vec{{2.0, 0.0}});
  CHECK(v(0) == doctest::Approx(-1.0));
  CHECK(v(1) == doctest::Approx(0.0));
}

TEST_CASE("mlp parameter gradient agrees with finite differences") {
  const Mlp net = Mlp::random(2, 16, 2, 4);
  CHECK(net.param_count() == Mlp::param_count(2, 16, 2));
  const Mat z = random_mat(2, 5, 1);
  const Mat u = random_mat(2, 5, 2);
  const Vec g = net.param_gradient(z, u);
  const double h = 1e-6;
  Vec p = net.params();
  double worst = 0.0;
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    Mlp a = net, b = net;
    Vec pa = p, pb = p;
    pa(k) += h;
    pb(k) -= h;
    a.set_params(pa);
    b.set_params(pb);
    const double fd = ((a.forward(z) - b.forward(z)).cwiseProduct(u)).sum() / (2 * h);
    worst = std::max(worst, std::abs(fd - g(k)) / std::max(1.0, std::abs(fd)));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("mlp jvp and its parameter gradient agree with finite differences") {
  const Mlp net = Mlp::random(3, 8, 2, 7);
  const Mat z = random_mat(3, 4, 3);
  const Mat dz = random_mat(3, 4, 4);
  const Mat c = random_mat(2, 4, 5);
  const double h = 1e-6;
  const Mat fd = (net.forward(z + h * dz) - net.forward(z - h * dz)) / (2 * h);
  CHECK((net.jvp(z, dz) - fd).norm() < 1e-6);
  const Vec g = net.jvp_param_gradient(z, dz, c);
  Vec p = net.params();
  double worst = 0.0;
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    Mlp a = net, b = net;
    Vec pa = p, pb = p;
    pa(k) += h;
    pb(k) -= h;
    a.set_params(pa);
    b.set_params(pb);
    const double f = ((a.jvp(z, dz) - b.jvp(z, dz)).cwiseProduct(c)).sum() / (2 * h);
    worst = std::max(worst, std::abs(f - g(k)) / std::max(1.0, std::abs(f)));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("divergence of the exact Gaussian score") {
  const double var = 2.5;
  const LinearScore s(-Mat::Identity(2, 2) / var, Vec::Zero(2));
  CHECK(s.divergence(0.3, Vec{{1.0, -4.0}}) == doctest::Approx(-2.0 / var));
  const FunctionScore f(2, [&](double, const Vec& x) { return Vec(-x / var); });
  CHECK(f.divergence(0.3, Vec{{1.0, -4.0}}) == doctest::Approx(-2.0 / var).epsilon(1e-7));
  const PerturbedScore p(std::make_shared<LinearScore>(s), Vec{{0.3, 0.4}});
  CHECK(p.error_size() == doctest::Approx(0.5));
  CHECK(p.eval(0.1, Vec{{0.0, 0.0}})(1) == doctest::Approx(0.4));
  CHECK(p.divergence(0.1, Vec{{1.0, 1.0}}) == doctest::Approx(-2.0 / var));
}

TEST_CASE("tweedie parametrization with a zero network is the prior-centred score") {
  const DiffusionModel m = vp(2);
  const LearnedScore s = LearnedScore::init(m, Parametrization::Tweedie, 1, 16, -1.0, 0.0);
  const Vec x{{0.7, -1.2}};
  for (double t : {0.05, 0.3, 1.0}) {
    const double one_minus_sqrt_gamma = -std::expm1(-m.beta_integral(t));
    CHECK((s.eval(t, x) + x / one_minus_sqrt_gamma).norm() < 1e-10);
  }
  const LearnedScore raw = LearnedScore::init(m, Parametrization::Raw, 1, 16, -1.0, 0.0);
  CHECK(raw.eval(0.5, x).norm() == 0.0);
  CHECK_THROWS_AS(LearnedScore::init(ve_linear(2), Parametrization::Tweedie, 1), Error);
}

TEST_CASE("learned score derivatives agree with finite differences") {
  for (Parametrization param : {Parametrization::Raw, Parametrization::Tweedie}) {
    const DiffusionModel m = vp(2);
    const LearnedScore s = LearnedScore::init(m, param, 3, 12, -1.0, 1.0);
    const std::vector<double> ts{0.1, 0.4, 0.9};
    const Points x = random_mat(3, 2, 8);
    const Points v = random_mat(3, 2, 9);
    const double h = 1e-6;
    const Points fd = (s.eval_many(ts, x + h * v) - s.eval_many(ts, x - h * v)) / (2 * h);
    CHECK((s.jvp_many(ts, x, v) - fd).norm() < 1e-5);
    const Vec div = s.divergence_many(ts, x);
    for (int i = 0; i < 3; ++i) {
      CHECK(s.eval(ts[i], x.row(i).transpose()).isApprox(s.eval_many(ts, x).row(i).transpose(), 1e-12));
      double dfd = 0.0;
      for (int j = 0; j < 2; ++j) {
        Vec xp = x.row(i).transpose(), xm = xp;
        xp(j) += h;
        xm(j) -= h;
        dfd += (s.eval(ts[i], xp)(j) - s.eval(ts[i], xm)(j)) / (2 * h);
      }
      CHECK(div(i) == doctest::Approx(dfd).epsilon(1e-5));
    }
    const Points u = random_mat(3, 2, 10);
    const Vec g = s.param_gradient(ts, x, u);
    LearnedScore a = s;
    Vec p = s.params();
    double worst = 0.0;
    for (Eigen::Index k = 0; k < p.size(); k += 7) {
      Vec pa = p, pb = p;
      pa(k) += h;
      pb(k) -= h;
      a.set_params(pa);
      const double fp = a.eval_many(ts, x).cwiseProduct(u).sum();
      a.set_params(pb);
      const double fm = a.eval_many(ts, x).cwiseProduct(u).sum();
      worst = std::max(worst, std::abs((fp - fm) / (2 * h) - g(k)));
    }
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("learned score save and load round trip") {
  const DiffusionModel m = vp(2);
  const LearnedScore s = LearnedScore::init(m, Parametrization::Tweedie, 11, 8);
  const std::string path = "score_roundtrip_test.params";
  s.save(path);
  const LearnedScore back = LearnedScore::load(path, m);
  CHECK_THROWS_AS(LearnedScore::load(path, vp(3)), Error);
  std::remove(path.c_str());
  CHECK(back.params() == s.params());
  CHECK(back.parametrization() == s.parametrization());
  CHECK(back.t_floor() == s.t_floor());
  CHECK(back.eval(0.3, Vec{{0.1, 0.2}}) == s.eval(0.3, Vec{{0.1, 0.2}}));
  CHECK_THROWS_AS(LearnedScore::load("does_not_exist.params", m), Error);
}
