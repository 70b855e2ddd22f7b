// End-to-end acceptance suite: one PASS/FAIL line per criterion.
#include "sdelab/analysis.hpp"
#include "sdelab/consistency.hpp"
#include "sdelab/matching.hpp"
#include "sdelab/metrics.hpp"
#include "sdelab/rl_finetune.hpp"
#include "sdelab/rng.hpp"
#include "sdelab/samplers.hpp"
#include "sdelab/score_net.hpp"
#include "sdelab/sde_model.hpp"
#include "sdelab/targets.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace sdelab;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string g(double v) { return fmt("%.4g", v); }

Outcome from_report(const ExperimentReport& rep, bool strict_warnings = false) {
  Outcome o;
  o.passed = true;
  int failed = 0;
  std::ostringstream why;
  for (const auto& c : rep.checks) {
    const bool ok = c.passed || (c.warning_only && !strict_warnings);
    if (!ok) {
      o.passed = false;
      if (failed++ < 3) why << (failed > 1 ? "; " : "") << c.name << ": " << g(c.measured) << " vs " << g(c.limit);
    }
  }
  o.detail = o.passed ? std::to_string(rep.checks.size()) + " checks pass" : why.str();
  return o;
}

GaussianMixture two_mode_target() {
  Mat means(2, 2);
  means << -1.5, -0.5, 1.5, 0.5;
  return GaussianMixture({0.4, 0.6}, means, {0.3, 0.5});
}

DiffusionModel vp_model(int d) { return DiffusionModel::make(ModelKind::VP, ModelParams{}, d, 1.0); }

double baseline_w2(const GaussianMixture& target, std::size_t n) {
  return sliced_w2(target.sample(n, 101).points, target.sample(n, 102).points, 128, 7).value;
}

constexpr std::size_t kMarginalN = 50000;

Points sde_batch() {
  const DiffusionModel m = vp_model(2);
  const OracleScore s(two_mode_target(), m);
  SamplerConfig c;
  c.scheme = Scheme::ExactNoiseEM;
  c.steps = 1000;
  c.seed = 1;
  return sample(m, s, c, kMarginalN).points;
}

Outcome check_time_reversal() {
  const GaussianMixture target = two_mode_target();
  const double base = baseline_w2(target, kMarginalN);
  const double w = sliced_w2(sde_batch(), target.sample(kMarginalN, 103).points, 128, 7).value;
  return {w <= 3 * base, "sliced W2 " + g(w) + " vs 3x baseline " + g(3 * base)};
}

Outcome check_flow_equivalence() {
  const GaussianMixture target = two_mode_target();
  const DiffusionModel m = vp_model(2);
  const OracleScore s(target, m);
  SamplerConfig c;
  c.scheme = Scheme::ProbabilityFlowHeun;
  c.steps = 1000;
  c.seed = 2;
  const Points ode = sample(m, s, c, kMarginalN).points;
  const double base = baseline_w2(target, kMarginalN);
  const double vs_sde = sliced_w2(ode, sde_batch(), 128, 7).value;
  const double vs_target = sliced_w2(ode, target.sample(kMarginalN, 103).points, 128, 7).value;
  return {vs_sde <= 3 * base && vs_target <= 3 * base,
          "vs SDE " + g(vs_sde) + ", vs target " + g(vs_target) + ", 3x baseline " + g(3 * base)};
}

Outcome check_constant_offset() {
  const DiffusionModel m = vp_model(2);
  const GaussianMixture target = two_mode_target();
  const OracleScore truth(target, m);
  const double t = 0.3;
  const std::size_t n = 100000;
  const Points x0 = target.sample(n, 11).points;
  const Points eps = standard_normal(n, 2, 12, 0);
  const Points xt = perturb(m, t, x0, eps);
  std::vector<Vec> ism_gap, dsm_gap;
  for (std::uint64_t k = 0; k < 5; ++k) {
    const LearnedScore f = LearnedScore::init(m, Parametrization::Raw, 40 + k, 16, -1.0, 1.0);
    const Vec esm = esm_loss(f, truth, t, xt).values;
    ism_gap.push_back(ism_loss(f, t, xt).values - esm);
    dsm_gap.push_back(dsm_loss_at(f, m, t, x0, eps, Weighting::Unit).values - esm);
  }
  double worst = 0.0;
  for (const auto* gaps : {&ism_gap, &dsm_gap}) {
    for (std::size_t a = 0; a < 5; ++a) {
      for (std::size_t b = a + 1; b < 5; ++b) {
        const Estimate e = estimate_mean(Vec((*gaps)[a] - (*gaps)[b]));
        worst = std::max(worst, std::abs(e.value) / e.std_error);
      }
    }
  }
  return {worst <= 3.0, "largest pairwise difference " + g(worst) + " s.e. over 20 pairs"};
}

Outcome check_ssm_unbiased() {
  const Mat a{{-1.2, 0.4, 0.0}, {0.3, -0.5, 0.2}, {0.0, 0.1, 0.7}};
  const LinearScore s(a, Vec::Zero(3));
  const Points x = GaussianMixture::single(Vec::Zero(3), 1.0).sample(20000, 21).points;
  const Estimate proj = estimate_mean(ssm_projection_terms(s, 0.0, x, 1, 22));
  const bool unbiased = std::abs(proj.value - a.trace()) <= 3 * proj.std_error;
  std::vector<double> ms, vars;
  for (int m : {1, 2, 4, 8, 16, 32}) {
    const Vec terms = ssm_projection_terms(s, 0.0, x, m, 23);
    ms.push_back(m);
    vars.push_back((terms.array() - terms.mean()).square().sum() / (terms.size() - 1.0));
  }
  const double slope = fit_log_log(ms, vars).slope;
  return {unbiased && std::abs(slope + 1.0) <= 0.2,
          "projection " + g(proj.value) + " vs trace " + g(a.trace()) + " (s.e. " + g(proj.std_error) +
              "), variance slope " + g(slope)};
}

Outcome check_dsm_minimiser() {
  ModelParams p;
  p.ve_schedule = VeSchedule::Linear;
  const DiffusionModel m = DiffusionModel::make(ModelKind::VE, p, 1, 1.0);
  const double v = 2.0, t = 0.5, s = t;
  const double exact = -1.0 / (v + s * s);
  const GaussianMixture target = GaussianMixture::single(Vec::Zero(1), v);
  const std::size_t n = 200000;
  const Points x0 = target.sample(n, 31).points;
  const Points eps = standard_normal(n, 1, 32, 0);
  const Points xt = perturb(m, t, x0, eps);
  // Normal equations of min_a E |a x_t + eps / sigma|^2.
  const double normal_eq = -(xt.cwiseProduct(eps).sum() / s) / xt.squaredNorm();
  // Minibatch SGD on the same loss.
  double a = 0.0;
  Rng rng(33, 0);
  const int iters = 4000;
  for (int k = 1; k <= iters; ++k) {
    double grad = 0.0;
    for (int b = 0; b < 64; ++b) {
      const auto i = static_cast<Eigen::Index>(rng.below(n));
      grad += 2.0 * (a * xt(i, 0) + eps(i, 0) / s) * xt(i, 0);
    }
    a -= 0.05 / std::sqrt(static_cast<double>(k)) * grad / 64.0;
  }
  const double loss_trained =
      dsm_loss_at(LinearScore(Mat::Constant(1, 1, a), Vec::Zero(1)), m, t, x0, eps, Weighting::Unit).mean();
  const double loss_normal =
      dsm_loss_at(LinearScore(Mat::Constant(1, 1, normal_eq), Vec::Zero(1)), m, t, x0, eps, Weighting::Unit).mean();
  const bool ok = std::abs(normal_eq - exact) <= 1e-2 && std::abs(a - exact) <= 1e-2 && loss_normal <= loss_trained;
  return {ok, "closed form " + g(exact) + ", normal equations " + g(normal_eq) + ", trained " + g(a)};
}

Outcome check_tweedie() {
  const GaussianMixture target = two_mode_target();
  ModelParams ou;
  ou.ou_mean = 0.5;
  Rng rng(41, 0);
  double worst = 0.0;
  int count = 0;
  for (ModelKind k : {ModelKind::VP, ModelKind::VE, ModelKind::SubVP, ModelKind::OU}) {
    const DiffusionModel m = DiffusionModel::make(k, k == ModelKind::OU ? ou : ModelParams{}, 2, 1.0);
    for (int i = 0; i < 250; ++i, ++count) {
      const double t = 1e-3 + (1.0 - 2e-3) * rng.uniform();
      const Vec x{{3 * rng.normal(), 3 * rng.normal()}};
      const Vec lhs = posterior_mean(target, m, t, x);
      const Vec rhs = x + m.marginal_var(t) * exact_score(target.evolve(m, t), x);
      worst = std::max(worst, (lhs - rhs).norm() / std::max(1.0, lhs.norm()));
    }
  }
  return {worst <= 1e-9, std::to_string(count) + " points, worst relative gap " + g(worst)};
}

Outcome check_coupling() {
  SweepSpec s;
  s.experiment = Experiment::ConsistencyCouplingSweep;
  s.values = {0.05, 0.1, 0.2, 0.5};
  s.fixed.set("n", 100000ll);
  s.fixed.set("d", 2ll);
  Outcome o = from_report(run_consistency_coupling_sweep(s));
  const double gap = std::abs(coupling_w2_theory(1.0, 0.1, 2) - coupling_w2_gaussian(1.0, 0.1, 2));
  o.passed = o.passed && gap <= 1e-9;
  o.detail = "theory " + g(coupling_w2_theory(1.0, 0.1, 2)) + " (gap " + g(gap) + "), " + o.detail;
  return o;
}

Outcome check_step_order() {
  SweepSpec s;
  s.experiment = Experiment::StepOrderSweep;
  s.values = {1.0 / 50, 1.0 / 100, 1.0 / 200, 1.0 / 400};
  const ExperimentReport rep = run_step_order_sweep(s);
  Outcome o = from_report(rep, true);
  for (const auto& c : rep.checks) {
    if (c.name.find("slope") != std::string::npos) o.detail = "slope " + g(c.measured) + ", " + o.detail;
  }
  return o;
}

Outcome check_tv_bound() {
  Outcome all{true, ""};
  for (double eps : {0.0, 0.1}) {
    SweepSpec s;
    s.experiment = Experiment::TVBoundSweep;
    s.values = {0.5, 1.0, 2.0, 4.0};
    s.fixed.set("eps", eps);
    const Outcome o = from_report(run_tv_bound_sweep(s));
    all.passed = all.passed && o.passed;
    all.detail += (all.detail.empty() ? "" : "; ") + std::string("eps=") + g(eps) + ": " + o.detail;
  }
  return all;
}

Outcome check_w2_bound() {
  SweepSpec s;
  s.experiment = Experiment::ScoreErrorSweep;
  s.values = {0.0, 0.1, 0.2};
  s.fixed.set("horizons", std::vector<double>{1.0, 2.0, 4.0});
  return from_report(run_score_error_sweep(s));
}

Outcome check_expfam() {
  SweepSpec s;
  s.experiment = Experiment::ExpFamilyRateSweep;
  s.values = {1e2, 1e3, 1e4, 1e5};
  s.replications = 2000;
  const ExperimentReport rep = run_expfam_rate_sweep(s);
  Outcome o = from_report(rep);
  std::string parts;
  for (const auto& c : rep.checks) parts += (parts.empty() ? "" : ", ") + c.name.substr(0, c.name.find(' ')) + " " + g(c.measured);
  o.detail = parts + "; " + o.detail;
  return o;
}

Outcome check_rl_finetune() {
  const DiffusionModel m = vp_model(1);
  PolicySpec spec;
  spec.pretrained = std::make_shared<LinearScore>(-Mat::Identity(1, 1), Vec::Zero(1));
  spec.policy = std::make_shared<AffineCorrectionPolicy>(spec.pretrained, 1.0, 6);
  spec.exploration = constant_exploration(1.0);
  spec.penalty = 1.0;
  const Vec target = Vec::Constant(1, 2.0);
  spec.reward = quadratic_reward(target);
  FinetuneConfig c;
  c.iterations = 2000;
  c.batch = 512;
  c.steps = 100;
  c.step_size = 0.01;
  c.eval_every = 200;
  c.eval_batch = 10000;
  c.seed = 5;
  const auto trace = finetune(spec, m, c);
  const double goal = closed_form_optimum(target, spec.penalty).mean(0);
  bool monotone = true;
  for (std::size_t i = 1; i < trace.size(); ++i) {
    const double tol = 3 * std::hypot(trace[i].objective_error, trace[i - 1].objective_error);
    if (trace[i].objective < trace[i - 1].objective - tol) monotone = false;
  }
  const double mean = trace.back().terminal_mean;
  return {std::abs(mean - goal) <= 0.1 && monotone,
          "terminal mean " + g(mean) + " (optimum " + g(goal) + "), objective " + g(trace.front().objective) +
              " -> " + g(trace.back().objective) + (monotone ? ", monotone" : ", NOT monotone")};
}

Outcome check_learned_pipeline() {
  const DiffusionModel m = vp_model(2);
  const GaussianMixture target = two_mode_target();
  LearnedScore s = LearnedScore::init(m, Parametrization::Raw, 3, 64);
  const double floor = default_t_floor(m);
  const Estimate before = weighted_esm(s, target, m, Weighting::SigmaSquared, 10000, 61, floor);
  MatchingConfig c;
  c.iterations = 20000;
  c.learning_rate = 3e-3;
  c.decay_start = 5000;
  c.seed = 3;
  train(c, s, target);
  const Estimate after = weighted_esm(s, target, m, Weighting::SigmaSquared, 10000, 61, floor);
  SamplerConfig sc;
  sc.steps = 1000;
  sc.seed = 62;
  const std::size_t n = 20000;
  const Points x = sample(m, s, sc, n).points;
  const double w = sliced_w2(x, target.sample(n, 63).points, 128, 7).value;
  const double ratio = before.value / after.value;
  return {ratio >= 10.0 && w <= 0.1,
          "ESM " + g(before.value) + " -> " + g(after.value) + " (" + g(ratio) + "x), sliced W2 " + g(w)};
}

struct Criterion {
  int id;
  std::string name;
  double budget_seconds;  // 0: no runtime limit
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  app.add_option("--only", only, "criterion numbers to run (default all)");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria = {
      {1, "time-reversal fidelity", 60, check_time_reversal},
      {2, "probability-flow marginal equivalence", 60, check_flow_equivalence},
      {3, "ISM/DSM constant offset", 0, check_constant_offset},
      {4, "sliced score matching unbiasedness", 0, check_ssm_unbiased},
      {5, "DSM minimiser recovers the score", 0, check_dsm_minimiser},
      {6, "Tweedie identity", 0, check_tweedie},
      {7, "consistency coupling distance", 0, check_coupling},
      {8, "discretization order", 120, check_step_order},
      {9, "TV bound", 0, check_tv_bound},
      {10, "W2 bound", 0, check_w2_bound},
      {11, "exponential-family estimator", 0, check_expfam},
      {12, "RL fine-tuning", 120, check_rl_finetune},
      {13, "end-to-end learned pipeline", 300, check_learned_pipeline},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (c.budget_seconds > 0 && secs > c.budget_seconds) {
      o.passed = false;
      o.detail += "; over the " + g(c.budget_seconds) + " s budget";
    }
    if (!o.passed) ++failures;
    std::printf("[%s] %2d %s: %s (%.1f s)\n", o.passed ? "PASS" : "FAIL", c.id, c.name.c_str(), o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
