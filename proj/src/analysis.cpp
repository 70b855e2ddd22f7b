#include "sdelab/analysis.hpp"

#include "sdelab/consistency.hpp"
#include "sdelab/matching.hpp"
#include "sdelab/metrics.hpp"
#include "sdelab/quadrature.hpp"
#include "sdelab/rng.hpp"
#include "sdelab/samplers.hpp"
#include "sdelab/score_net.hpp"
#include "sdelab/targets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numbers>

namespace sdelab {
namespace {

constexpr std::uint64_t kSweepStream = 0x7377656570ull;  // "sweep"

void require(bool ok, const std::string& what) {
  if (!ok) throw Error("analysis", what);
}

std::string point_hash(const SweepSpec& spec, const std::string& label, double x, int rep) {
  KeyValues kv = spec.to_config();
  kv.erase("values");
  kv.set("point", label);
  kv.set("x", x);
  kv.set("replication", static_cast<long long>(rep));
  return content_hash(kv.format());
}

std::uint64_t point_seed(const SweepSpec& spec, std::size_t index, int rep) {
  return derive_stream(derive_stream(spec.seed, kSweepStream + index), static_cast<std::uint64_t>(rep));
}

CheckResult at_most(std::string name, double measured, double limit, double mc_error, std::string detail = {}) {
  CheckResult c;
  c.name = std::move(name);
  c.measured = measured;
  c.limit = limit + 3.0 * mc_error;
  c.passed = measured <= c.limit;
  c.detail = std::move(detail);
  return c;
}

std::size_t steps_for(double horizon, double per_unit) {
  return static_cast<std::size_t>(std::max(1.0, std::ceil(per_unit * horizon)));
}

std::string fmt(double v) { return format_double(v); }

std::string label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

// Sandwich covariance of the Gaussian natural-parameter estimator at N(mean, var).
Mat gaussian_sandwich(double mean, double var) {
  Mat m(2, 2);
  m << 1.0, -mean, -mean, mean * mean + var;
  Mat s(2, 2);
  s << 1.0 / var, -mean / var, -mean / var, mean * mean / var + 2.0;
  const Mat mi = m.inverse();
  return mi * s * mi;
}

struct OuPoint {
  double measured = 0.0;
  double mc_error = 0.0;
  double bound = 0.0;
  double best_h = 0.0;
};

// OU target N(target_mean, target_var), constant score offset eps, exact-noise EM.
OuPoint run_ou_point(const KeyValues& fx, double horizon, double eps, std::uint64_t seed) {
  ModelParams p;
  p.theta = fx.get_double_or("theta", 1.0);
  p.ou_sigma = fx.get_double_or("ou_sigma", std::numbers::sqrt2);
  const int d = static_cast<int>(fx.get_int_or("d", 1));
  const DiffusionModel model = DiffusionModel::make(ModelKind::OU, p, d, horizon);
  const double mu0 = fx.get_double_or("target_mean", 0.5);
  const double v0 = fx.get_double_or("target_var", 1.0);
  const GaussianMixture target = GaussianMixture::single(Vec::Constant(d, mu0), v0);
  auto oracle = std::make_shared<OracleScore>(target, model);
  Vec offset = Vec::Zero(d);
  offset(0) = eps;
  const PerturbedScore field(oracle, offset);

  SamplerConfig sc;
  sc.scheme = Scheme::ExactNoiseEM;
  sc.steps = steps_for(horizon, fx.get_double_or("steps_per_unit", 1000.0));
  sc.t_floor = fx.get_double_or("t_floor", 0.0);
  sc.seed = seed;
  const auto n = static_cast<std::size_t>(fx.get_int_or("n", 100000));
  const SampleBatch gen = sample(model, field, sc, n);
  const MetricResult w = fitted_w2(gen.points, Vec::Constant(d, mu0), v0);

  const double theta = p.theta;
  const RateFn r_f = [theta](double) { return -theta; };
  const RateFn lip = [&model, v0](double s) {
    const double m = model.mean_factor(s);
    return -1.0 / (m * m * v0 + model.marginal_var(s));
  };
  const GaussianMixture at_t = target.evolve(model, horizon);
  const PriorSpec prior = model.prior();
  const double prior_w2 = w2_gaussian(prior.mean, prior.variance, at_t.means().row(0).transpose(), at_t.variances()[0]);
  const BoundOptimum b = w2_bound_min(model, r_f, lip, eps, prior_w2);
  return {w.value, w.mc_error, b.value, b.h};
}

// T -> infinity limit of the minimised bound without prior mismatch.
double ou_uniform_limit(const KeyValues& fx, double eps) {
  if (eps == 0.0) return 0.0;
  ModelParams p;
  p.theta = fx.get_double_or("theta", 1.0);
  p.ou_sigma = fx.get_double_or("ou_sigma", std::numbers::sqrt2);
  const double v0 = fx.get_double_or("target_var", 1.0);
  const double theta = p.theta;
  const DiffusionModel model = DiffusionModel::make(ModelKind::OU, p, 1, 60.0 / theta);
  const RateFn r_f = [theta](double) { return -theta; };
  const RateFn lip = [&model, v0](double s) {
    const double m = model.mean_factor(s);
    return -1.0 / (m * m * v0 + model.marginal_var(s));
  };
  return w2_bound_min(model, r_f, lip, eps, 0.0).value;
}

void add_ou_growth_checks(ExperimentReport& rep, const std::vector<double>& horizons, double eps,
                          const std::vector<OuPoint>& pts, double uniform) {
  double sup_bound = uniform;
  for (const auto& pt : pts) sup_bound = std::max(sup_bound, pt.bound);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    rep.checks.push_back(at_most("bounded in T (eps=" + label(eps) + ", T=" + label(horizons[i]) + ")", pts[i].measured,
                                 sup_bound, pts[i].mc_error, "uniform bound over T"));
  }
  for (std::size_t i = 2; i < pts.size(); ++i) {
    const double prev = pts[i - 1].measured - pts[i - 2].measured;
    const double cur = pts[i].measured - pts[i - 1].measured;
    const double se = std::sqrt(pts[i].mc_error * pts[i].mc_error + 2.0 * pts[i - 1].mc_error * pts[i - 1].mc_error +
                                pts[i - 2].mc_error * pts[i - 2].mc_error);
    rep.checks.push_back(at_most("non-growing increments (eps=" + label(eps) + ", T=" + label(horizons[i]) + ")", cur,
                                 std::max(prev, 0.0), se, "increment must not exceed the previous one"));
  }
}

}  // namespace

std::string to_string(Experiment e) {
  switch (e) {
    case Experiment::TVBoundSweep: return "tv_bound";
    case Experiment::W2BoundSweep: return "w2_bound";
    case Experiment::StepOrderSweep: return "step_order";
    case Experiment::ScoreErrorSweep: return "score_error";
    case Experiment::ExpFamilyRateSweep: return "expfam_rate";
    case Experiment::ConsistencyCouplingSweep: return "consistency_coupling";
  }
  return "?";
}

Experiment parse_experiment(const std::string& name) {
  for (Experiment e : {Experiment::TVBoundSweep, Experiment::W2BoundSweep, Experiment::StepOrderSweep,
                       Experiment::ScoreErrorSweep, Experiment::ExpFamilyRateSweep,
                       Experiment::ConsistencyCouplingSweep}) {
    if (name == to_string(e)) return e;
  }
  throw Error("analysis", "unknown experiment '" + name +
                              "' (expected tv_bound, w2_bound, step_order, score_error, expfam_rate or "
                              "consistency_coupling)");
}

SweepSpec SweepSpec::from_config(const KeyValues& kv) {
  SweepSpec s;
  s.experiment = parse_experiment(kv.get("experiment"));
  s.values = kv.get_doubles("values");
  s.replications = static_cast<int>(kv.get_int_or("replications", 1));
  s.seed = static_cast<std::uint64_t>(kv.get_int_or("seed", 0));
  for (const auto& [k, v] : kv.entries()) {
    if (k != "experiment" && k != "values" && k != "replications" && k != "seed") s.fixed.set(k, v);
  }
  return s;
}

KeyValues SweepSpec::to_config() const {
  KeyValues kv = fixed;
  kv.set("experiment", to_string(experiment));
  kv.set("values", values);
  kv.set("replications", static_cast<long long>(replications));
  kv.set("seed", static_cast<long long>(seed));
  return kv;
}

bool ExperimentReport::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed || c.warning_only; });
}

void ExperimentReport::write_csv(const std::string& path) const {
  std::ofstream out(path);
  require(static_cast<bool>(out), "cannot write '" + path + "'");
  out << "config_hash,series,metric,x,value,mc_error\n";
  for (const auto& r : rows) {
    out << r.config_hash << ',' << r.series << ',' << r.metric << ',' << fmt(r.x) << ',' << fmt(r.value) << ','
        << fmt(r.mc_error) << '\n';
  }
}

void ExperimentReport::write_summary(const std::string& path) const {
  std::ofstream out(path);
  require(static_cast<bool>(out), "cannot write '" + path + "'");
  out << "check,status,measured,limit,detail\n";
  for (const auto& c : checks) {
    const char* status = c.passed ? "pass" : (c.warning_only ? "warn" : "fail");
    out << '"' << c.name << "\"," << status << ',' << fmt(c.measured) << ',' << fmt(c.limit) << ",\"" << c.detail
        << "\"\n";
  }
}

SlopeFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size(), "x and y differ in length");
  require(x.size() >= 3, "a slope fit needs at least 3 points");
  const auto n = static_cast<Eigen::Index>(x.size());
  const Eigen::Map<const Vec> xv(x.data(), n), yv(y.data(), n);
  const double mx = xv.mean(), my = yv.mean();
  const double sxx = (xv.array() - mx).square().sum();
  require(sxx > 0.0, "x values are all equal");
  const double sxy = ((xv.array() - mx) * (yv.array() - my)).sum();
  SlopeFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  const double syy = (yv.array() - my).square().sum();
  const double sse = (yv.array() - f.intercept - f.slope * xv.array()).square().sum();
  f.r_squared = syy > 0.0 ? 1.0 - sse / syy : 1.0;
  return f;
}

SlopeFit fit_log_log(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> lx(x.size()), ly(y.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    require(x[i] > 0.0 && i < y.size() && y[i] > 0.0, "log-log fit needs positive values");
    lx[i] = std::log(x[i]);
    ly[i] = std::log(y[i]);
  }
  return fit_line(lx, ly);
}

ExperimentReport run_tv_bound_sweep(const SweepSpec& spec) {
  require(!spec.values.empty(), "tv sweep needs at least one horizon");
  require(spec.replications >= 1, "replications must be >= 1");
  const KeyValues& fx = spec.fixed;
  const double mu = fx.get_double_or("target_mean", 1.0);
  const double var = fx.get_double_or("target_var", 0.5);
  const double eps = fx.get_double_or("eps", 0.0);
  const auto n = static_cast<std::size_t>(fx.get_int_or("n", 100000));
  const int bins = static_cast<int>(fx.get_int_or("bins", 50));
  const double per_unit = fx.get_double_or("steps_per_unit", 1000.0);
  ModelParams p;
  p.beta_min = fx.get_double_or("beta_min", p.beta_min);
  p.beta_max = fx.get_double_or("beta_max", p.beta_max);
  const GaussianMixture target = GaussianMixture::single(Vec::Constant(1, mu), var);

  ExperimentReport rep;
  rep.experiment = Experiment::TVBoundSweep;
  rep.spec_hash = content_hash(spec.to_config().format());
  for (std::size_t i = 0; i < spec.values.size(); ++i) {
    const double horizon = spec.values[i];
    const DiffusionModel model = DiffusionModel::make(ModelKind::VP, p, 1, horizon);
    auto oracle = std::make_shared<OracleScore>(target, model);
    const PerturbedScore field(oracle, Vec::Constant(1, eps));
    const double bound = vp_tv_bound(model, target.second_moment(), eps);
    for (int r = 0; r < spec.replications; ++r) {
      const std::uint64_t seed = point_seed(spec, i, r);
      SamplerConfig sc;
      sc.steps = steps_for(horizon, per_unit);
      sc.seed = seed;
      const SampleBatch gen = sample(model, field, sc, n);
      const SampleBatch ref = target.sample(n, derive_stream(seed, 1));
      const MetricResult tv = tv_histogram(gen.points, ref.points, bins);
      const std::string h = point_hash(spec, "T", horizon, r);
      rep.rows.push_back({h, "measured", "tv", horizon, tv.value, tv.mc_error});
      rep.rows.push_back({h, "bound", "tv", horizon, bound, 0.0});
      rep.checks.push_back(at_most("tv <= bound (T=" + label(horizon) + ")", tv.value, bound, tv.mc_error));
    }
  }
  return rep;
}

ExperimentReport run_step_order_sweep(const SweepSpec& spec) {
  require(spec.values.size() >= 3, "step-order sweep needs at least 3 step sizes");
  const KeyValues& fx = spec.fixed;
  ModelParams p;
  p.beta_min = fx.get_double_or("beta_min", p.beta_min);
  p.beta_max = fx.get_double_or("beta_max", p.beta_max);
  const ModelKind kind = parse_model_kind(fx.get_or("kind", "VP"));
  const double horizon = fx.get_double_or("T", 1.0);
  const DiffusionModel model = DiffusionModel::make(kind, p, 1, horizon);
  const double var = fx.get_double_or("target_var", 4.0);
  const double t_floor = fx.get_double_or("t_floor", 1e-3 * horizon);
  const auto n = static_cast<std::size_t>(fx.get_int_or("n", 200000));
  const Scheme scheme = parse_scheme(fx.get_or("scheme", "em"));
  const GaussianMixture target = GaussianMixture::single(Vec::Zero(1), var);
  const OracleScore field(target, model);
  const GaussianMixture end = target.evolve(model, t_floor);

  std::vector<double> deltas(spec.values);
  std::sort(deltas.begin(), deltas.end(), std::greater<>());
  ExperimentReport rep;
  rep.experiment = Experiment::StepOrderSweep;
  rep.spec_hash = content_hash(spec.to_config().format());
  std::vector<double> errs;
  std::vector<double> ses;
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    const double delta = deltas[i];
    require(delta > 0.0, "step sizes must be positive");
    SamplerConfig sc;
    sc.scheme = scheme;
    sc.t_floor = t_floor;
    sc.steps = static_cast<std::size_t>(std::max(1.0, std::round((horizon - t_floor) / delta)));
    sc.seed = spec.seed;
    const SampleBatch gen = sample(model, field, sc, n);
    const MetricResult w = fitted_w2(gen.points, end.means().row(0).transpose(), end.variances()[0]);
    const std::string h = point_hash(spec, "delta", delta, 0);
    rep.rows.push_back({h, "error", "w2", delta, w.value, w.mc_error});
    rep.rows.push_back({h, "log", "log_w2", std::log(delta), std::log(w.value), w.mc_error / w.value});
    errs.push_back(w.value);
    ses.push_back(w.mc_error);
  }
  const SlopeFit fit = fit_log_log(deltas, errs);
  rep.rows.push_back({rep.spec_hash, "fit", "slope", 0.0, fit.slope, 0.0});
  rep.rows.push_back({rep.spec_hash, "fit", "r_squared", 0.0, fit.r_squared, 0.0});
  CheckResult slope;
  slope.name = "log-log slope in [0.5, 1.5]";
  slope.measured = fit.slope;
  slope.limit = 1.5;
  slope.passed = fit.slope >= 0.5 && fit.slope <= 1.5;
  slope.detail = "R^2 = " + fmt(fit.r_squared);
  rep.checks.push_back(slope);
  for (std::size_t i = 1; i < errs.size(); ++i) {
    CheckResult mono;
    mono.name = "error decreases (delta=" + label(deltas[i]) + ")";
    mono.measured = errs[i];
    mono.limit = errs[i - 1];
    mono.passed = errs[i] < errs[i - 1];
    mono.warning_only = true;
    rep.checks.push_back(mono);
  }
  return rep;
}

ExperimentReport run_score_error_sweep(const SweepSpec& spec) {
  require(!spec.values.empty(), "score-error sweep needs at least one eps");
  const KeyValues& fx = spec.fixed;
  const std::vector<double> horizons = fx.contains("horizons") ? fx.get_doubles("horizons") : std::vector<double>{1, 2, 4};
  ExperimentReport rep;
  rep.experiment = Experiment::ScoreErrorSweep;
  rep.spec_hash = content_hash(spec.to_config().format());
  std::vector<std::vector<OuPoint>> by_eps(spec.values.size());
  for (std::size_t i = 0; i < spec.values.size(); ++i) {
    const double eps = spec.values[i];
    require(eps >= 0.0, "eps must be nonnegative");
    for (std::size_t j = 0; j < horizons.size(); ++j) {
      const OuPoint pt = run_ou_point(fx, horizons[j], eps, point_seed(spec, j, 0));
      const std::string h = point_hash(spec, "eps,T=" + label(horizons[j]), eps, 0);
      const std::string series = "T=" + label(horizons[j]);
      rep.rows.push_back({h, "measured " + series, "w2", eps, pt.measured, pt.mc_error});
      rep.rows.push_back({h, "bound " + series, "w2", eps, pt.bound, 0.0});
      rep.checks.push_back(at_most("w2 <= bound (eps=" + label(eps) + ", " + series + ")", pt.measured, pt.bound,
                                   pt.mc_error, "optimal h = " + fmt(pt.best_h)));
      by_eps[i].push_back(pt);
    }
    add_ou_growth_checks(rep, horizons, eps, by_eps[i], ou_uniform_limit(fx, eps));
  }
  // Larger errors should not help: measured W2 nondecreasing in eps at the longest horizon.
  std::vector<std::size_t> order(spec.values.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return spec.values[a] < spec.values[b]; });
  for (std::size_t k = 1; k < order.size(); ++k) {
    const OuPoint& lo = by_eps[order[k - 1]].back();
    const OuPoint& hi = by_eps[order[k]].back();
    CheckResult c;
    c.name = "w2 nondecreasing in eps (eps=" + label(spec.values[order[k]]) + ")";
    c.measured = hi.measured;
    c.limit = lo.measured - 3.0 * std::hypot(lo.mc_error, hi.mc_error);
    c.passed = hi.measured >= c.limit;
    c.warning_only = true;
    rep.checks.push_back(c);
  }
  return rep;
}

ExperimentReport run_w2_bound_sweep(const SweepSpec& spec) {
  require(!spec.values.empty(), "w2 sweep needs at least one horizon");
  const KeyValues& fx = spec.fixed;
  const double eps = fx.get_double_or("eps", 0.1);
  ExperimentReport rep;
  rep.experiment = Experiment::W2BoundSweep;
  rep.spec_hash = content_hash(spec.to_config().format());
  std::vector<OuPoint> pts;
  for (std::size_t j = 0; j < spec.values.size(); ++j) {
    const double horizon = spec.values[j];
    const OuPoint pt = run_ou_point(fx, horizon, eps, point_seed(spec, j, 0));
    const std::string h = point_hash(spec, "T", horizon, 0);
    rep.rows.push_back({h, "measured", "w2", horizon, pt.measured, pt.mc_error});
    rep.rows.push_back({h, "bound", "w2", horizon, pt.bound, 0.0});
    rep.checks.push_back(at_most("w2 <= bound (T=" + label(horizon) + ")", pt.measured, pt.bound, pt.mc_error,
                                 "optimal h = " + fmt(pt.best_h)));
    pts.push_back(pt);
  }
  add_ou_growth_checks(rep, spec.values, eps, pts, ou_uniform_limit(fx, eps));
  return rep;
}

ExperimentReport run_consistency_coupling_sweep(const SweepSpec& spec) {
  require(!spec.values.empty(), "coupling sweep needs at least one delta");
  const KeyValues& fx = spec.fixed;
  const std::vector<double> times = fx.contains("times") ? fx.get_doubles("times") : std::vector<double>{1.0};
  const int d = static_cast<int>(fx.get_int_or("d", 2));
  const auto n = static_cast<std::size_t>(fx.get_int_or("n", 100000));
  const double tol = fx.get_double_or("tolerance", 0.05);
  const double horizon = *std::max_element(times.begin(), times.end());
  const DiffusionModel model = consistency_model(d, horizon);
  // Exact score of the point mass at 0: -y / t^2.
  const FunctionScore point_score(
      d, [](double t, const Vec& y) { return Vec(-y / (t * t)); },
      [](double t, const Vec&, const Vec& v) { return Vec(-v / (t * t)); });
  const AffineFlow identity = AffineFlow::identity(d);
  const Points x0 = Points::Zero(static_cast<Eigen::Index>(n), d);

  ExperimentReport rep;
  rep.experiment = Experiment::ConsistencyCouplingSweep;
  rep.spec_hash = content_hash(spec.to_config().format());
  std::size_t index = 0;
  for (double t : times) {
    for (double delta : spec.values) {
      if (!(delta > 0.0 && delta < t)) continue;
      const std::uint64_t seed = point_seed(spec, index++, 0);
      const std::vector<double> ts(n, t);
      const ConsistencyPairs cd = build_cd_pairs(model, point_score, x0, ts, delta, seed);
      const ConsistencyPairs ct = build_ct_pairs(model, x0, ts, delta, derive_stream(seed, 1));
      const double theory = coupling_w2_theory(t, delta, d);
      const double gauss = coupling_w2_gaussian(t, delta, d);
      const double emp = coupling_w2_empirical(cd, ct);
      const Estimate cd_id = cd_loss(identity, cd).estimate();
      const Estimate ct_id = ct_loss(identity, ct).estimate();
      const std::string h = point_hash(spec, "delta,t=" + label(t), delta, 0);
      const std::string series = "t=" + label(t);
      rep.rows.push_back({h, "theory " + series, "coupling_w2_sq", delta, theory, 0.0});
      rep.rows.push_back({h, "gaussian " + series, "coupling_w2_sq", delta, gauss, 0.0});
      rep.rows.push_back({h, "empirical " + series, "coupling_w2_sq", delta, emp, 0.0});
      rep.rows.push_back({h, "cd identity " + series, "loss", delta, cd_id.value, cd_id.std_error});
      rep.rows.push_back({h, "ct identity " + series, "loss", delta, ct_id.value, ct_id.std_error});

      CheckResult exact;
      exact.name = "closed form = gaussian W2 (t=" + label(t) + ", delta=" + label(delta) + ")";
      exact.measured = std::abs(theory - gauss);
      exact.limit = 1e-9;
      exact.passed = exact.measured <= exact.limit;
      rep.checks.push_back(exact);
      CheckResult rel;
      rel.name = "empirical within tolerance (t=" + label(t) + ", delta=" + label(delta) + ")";
      rel.measured = std::abs(emp - theory) / theory;
      rel.limit = tol;
      rel.passed = rel.measured <= tol;
      rep.checks.push_back(rel);
      CheckResult order;
      order.name = "cd loss < ct loss for identity (t=" + label(t) + ", delta=" + label(delta) + ")";
      order.measured = cd_id.value;
      order.limit = ct_id.value;
      order.passed = cd_id.value < ct_id.value;
      rep.checks.push_back(order);
    }
  }
  require(index > 0, "no (t, delta) pair with 0 < delta < t");
  return rep;
}

ExperimentReport run_expfam_rate_sweep(const SweepSpec& spec) {
  require(spec.values.size() >= 3, "rate sweep needs at least 3 sample sizes");
  require(spec.replications >= 2, "rate sweep needs at least 2 replications");
  const KeyValues& fx = spec.fixed;
  const double mean = fx.get_double_or("mean", 1.0);
  const double var = fx.get_double_or("var", 1.0);
  require(var > 0.0, "var must be positive");
  const double cov_tol = fx.get_double_or("cov_tolerance", 0.2);
  const ExpFamilySpec fam = ExpFamilySpec::gaussian();
  Vec truth(2);
  truth << mean / var, 1.0 / var;
  const Mat gamma = gaussian_sandwich(mean, var);

  ExperimentReport rep;
  rep.experiment = Experiment::ExpFamilyRateSweep;
  rep.spec_hash = content_hash(spec.to_config().format());
  std::vector<double> ns, errs;
  double last_rel = 0.0;
  for (std::size_t i = 0; i < spec.values.size(); ++i) {
    const auto n = static_cast<std::size_t>(spec.values[i]);
    require(n >= 3, "sample sizes must be >= 3");
    Vec err(spec.replications);
    Mat scaled(spec.replications, 2);
    for (int r = 0; r < spec.replications; ++r) {
      Vec theta;
      // Singular empirical moments (possible at tiny n) are resampled.
      for (std::uint64_t attempt = 0;; ++attempt) {
        require(attempt < 16, "empirical moments stay singular; increase n");
        Rng rng(point_seed(spec, i, r), attempt);
        Vec x(static_cast<Eigen::Index>(n));
        for (auto& v : x) v = mean + std::sqrt(var) * rng.normal();
        try {
          theta = expfam_fit(fam, x);
          break;
        } catch (const Error&) {
        }
      }
      err(r) = (theta - truth).norm();
      scaled.row(r) = std::sqrt(static_cast<double>(n)) * (theta - truth).transpose();
    }
    const Estimate e = estimate_mean(err);
    const Points centred = scaled.rowwise() - scaled.colwise().mean();
    const Mat cov = (centred.transpose() * centred) / static_cast<double>(spec.replications - 1);
    const double rel = (cov - gamma).norm() / gamma.norm();
    const std::string h = point_hash(spec, "n", spec.values[i], 0);
    rep.rows.push_back({h, "error", "mean_abs_error", spec.values[i], e.value, e.std_error});
    rep.rows.push_back({h, "covariance", "relative_cov_error", spec.values[i], rel, 0.0});
    ns.push_back(spec.values[i]);
    errs.push_back(e.value);
    last_rel = rel;
  }
  const SlopeFit fit = fit_log_log(ns, errs);
  rep.rows.push_back({rep.spec_hash, "fit", "slope", 0.0, fit.slope, 0.0});
  rep.rows.push_back({rep.spec_hash, "fit", "r_squared", 0.0, fit.r_squared, 0.0});
  CheckResult slope;
  slope.name = "error rate slope in [-0.6, -0.4]";
  slope.measured = fit.slope;
  slope.limit = -0.4;
  slope.passed = std::abs(fit.slope + 0.5) <= 0.1;
  slope.detail = "R^2 = " + fmt(fit.r_squared);
  rep.checks.push_back(slope);
  CheckResult cov;
  cov.name = "sqrt(n) covariance within tolerance of the sandwich (largest n)";
  cov.measured = last_rel;
  cov.limit = cov_tol;
  cov.passed = last_rel <= cov_tol;
  rep.checks.push_back(cov);
  return rep;
}

ExperimentReport run_sweep(const SweepSpec& spec) {
  switch (spec.experiment) {
    case Experiment::TVBoundSweep: return run_tv_bound_sweep(spec);
    case Experiment::W2BoundSweep: return run_w2_bound_sweep(spec);
    case Experiment::StepOrderSweep: return run_step_order_sweep(spec);
    case Experiment::ScoreErrorSweep: return run_score_error_sweep(spec);
    case Experiment::ExpFamilyRateSweep: return run_expfam_rate_sweep(spec);
    case Experiment::ConsistencyCouplingSweep: return run_consistency_coupling_sweep(spec);
  }
  throw Error("analysis", "unknown experiment");
}

double coupling_w2_small_delta_average(int d) {
  require(d >= 1, "dimension must be >= 1");
  return 2.0 * d * (2.0 - std::numbers::sqrt2) / 3.0;
}

}  // namespace sdelab
