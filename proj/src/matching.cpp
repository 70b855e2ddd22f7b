#include "sdelab/matching.hpp"

#include "sdelab/rng.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

namespace sdelab {
namespace {

constexpr std::uint64_t kSsmStream = 0x73736dull;      // "ssm"
constexpr std::uint64_t kDsmStream = 0x64736dull;      // "dsm"
constexpr std::uint64_t kTimeStream = 0x74696d65ull;   // "time"
constexpr std::uint64_t kNoiseStream = 0x6e6f697365ull;  // "noise"
constexpr std::uint64_t kDataStream = 0x64617461ull;   // "data"

void require(bool ok, const std::string& what) {
  if (!ok) throw Error("matching", what);
}

double weight(const DiffusionModel& model, Weighting w, double t) {
  return w == Weighting::Unit ? 1.0 : model.marginal_var(t);
}

double resolve_floor(const DiffusionModel& model, double t_floor) {
  return t_floor < 0.0 ? default_t_floor(model) : t_floor;
}

std::vector<double> uniform_times(std::size_t n, double lo, double hi, std::uint64_t seed,
                                  std::uint64_t stream) {
  Rng rng(seed, stream);
  std::vector<double> t(n);
  for (auto& ti : t) ti = lo + (hi - lo) * rng.uniform();
  return t;
}

Points perturb_many(const DiffusionModel& model, const std::vector<double>& t, const Points& x0,
                    const Points& eps) {
  Points xt(x0.rows(), x0.cols());
  for (Eigen::Index i = 0; i < x0.rows(); ++i) {
    const ConditionalMarginal cm = model.marginal(t[static_cast<std::size_t>(i)]);
    xt.row(i) = cm.mean_factor * x0.row(i) + cm.mean_offset.transpose() + cm.std * eps.row(i);
  }
  return xt;
}

}  // namespace

std::string to_string(Objective o) {
  switch (o) {
    case Objective::ESM: return "esm";
    case Objective::ISM: return "ism";
    case Objective::SSM: return "ssm";
    case Objective::DSM: return "dsm";
  }
  return "?";
}

Objective parse_objective(const std::string& name) {
  if (name == "esm") return Objective::ESM;
  if (name == "ism") return Objective::ISM;
  if (name == "ssm") return Objective::SSM;
  if (name == "dsm") return Objective::DSM;
  throw Error("matching", "unknown objective '" + name + "' (expected esm, ism, ssm or dsm)");
}

std::string to_string(Weighting w) { return w == Weighting::Unit ? "unit" : "sigma2"; }

Weighting parse_weighting(const std::string& name) {
  if (name == "unit") return Weighting::Unit;
  if (name == "sigma2") return Weighting::SigmaSquared;
  throw Error("matching", "unknown weighting '" + name + "' (expected unit or sigma2)");
}

LossBatch esm_loss(const ScoreField& field, const ScoreField& oracle, double t, const Points& x) {
  require(x.rows() >= 1, "empty batch");
  const Points diff = field.eval_batch(t, x) - oracle.eval_batch(t, x);
  return {diff.rowwise().squaredNorm()};
}

LossBatch ism_loss(const ScoreField& field, double t, const Points& x) {
  require(x.rows() >= 1, "empty batch");
  require(field.dim() <= kExactDivergenceMaxDim,
          "implicit score matching needs the exact divergence (d <= " +
              std::to_string(kExactDivergenceMaxDim) + "); use ssm for larger d");
  const Points s = field.eval_batch(t, x);
  Vec values(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    values(i) = s.row(i).squaredNorm() + 2.0 * field.divergence(t, x.row(i).transpose());
  }
  return {values};
}

Vec ssm_projection_terms(const ScoreField& field, double t, const Points& x, int m, std::uint64_t seed) {
  require(m >= 1, "sliced score matching needs m >= 1 projections");
  Vec out(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Rng rng(seed, derive_stream(kSsmStream, static_cast<std::uint64_t>(i)));
    const Vec xi = x.row(i).transpose();
    double acc = 0.0;
    for (int j = 0; j < m; ++j) {
      Vec v(x.cols());
      for (auto& c : v) c = rng.normal();
      acc += v.dot(field.jvp(t, xi, v));
    }
    out(i) = acc / m;
  }
  return out;
}

LossBatch ssm_loss(const ScoreField& field, double t, const Points& x, int m, std::uint64_t seed) {
  require(x.rows() >= 1, "empty batch");
  const Points s = field.eval_batch(t, x);
  return {s.rowwise().squaredNorm() + 2.0 * ssm_projection_terms(field, t, x, m, seed)};
}

Points perturb(const DiffusionModel& model, double t, const Points& x0, const Points& eps) {
  require(x0.rows() == eps.rows() && x0.cols() == eps.cols(), "data and noise shapes differ");
  return perturb_many(model, std::vector<double>(static_cast<std::size_t>(x0.rows()), t), x0, eps);
}

Points standard_normal(std::size_t n, int d, std::uint64_t seed, std::uint64_t stream) {
  Points out(static_cast<Eigen::Index>(n), d);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(seed, derive_stream(stream, i));
    for (int j = 0; j < d; ++j) out(static_cast<Eigen::Index>(i), j) = rng.normal();
  }
  return out;
}

LossBatch dsm_loss_at(const ScoreField& field, const DiffusionModel& model, double t,
                      const Points& x0, const Points& eps, Weighting weighting) {
  require(x0.rows() >= 1, "empty batch");
  const double sd = model.marginal_std(t);
  require(sd > 0.0, "denoising loss needs sigma_t > 0");
  const Points s = field.eval_batch(t, perturb(model, t, x0, eps));
  const double lam = weight(model, weighting, t);
  return {lam * (s + eps / sd).rowwise().squaredNorm()};
}

LossBatch dsm_loss(const ScoreField& field, const DiffusionModel& model, const Points& x0,
                   Weighting weighting, std::uint64_t seed, double t_floor) {
  require(x0.rows() >= 1, "empty batch");
  t_floor = resolve_floor(model, t_floor);
  const auto n = static_cast<std::size_t>(x0.rows());
  const std::vector<double> t = uniform_times(n, t_floor, model.horizon(), seed, kDsmStream);
  const Points eps = standard_normal(n, static_cast<int>(x0.cols()), seed, kNoiseStream);
  const Points s = field.eval_many(t, perturb_many(model, t, x0, eps));
  Vec values(x0.rows());
  for (Eigen::Index i = 0; i < x0.rows(); ++i) {
    const double ti = t[static_cast<std::size_t>(i)];
    const double sd = model.marginal_std(ti);
    values(i) = weight(model, weighting, ti) * (s.row(i) + eps.row(i) / sd).squaredNorm();
  }
  return {values};
}

Estimate weighted_esm(const ScoreField& field, const GaussianMixture& target, const DiffusionModel& model,
                      Weighting weighting, std::size_t n, std::uint64_t seed, double t_floor) {
  t_floor = resolve_floor(model, t_floor);
  const std::vector<double> t = uniform_times(n, t_floor, model.horizon(), seed, kTimeStream);
  const Points x0 = target.sample(n, derive_stream(seed, kDataStream)).points;
  const Points eps = standard_normal(n, target.dim(), seed, kNoiseStream);
  const Points xt = perturb_many(model, t, x0, eps);
  const Points s = field.eval_many(t, xt);
  Vec values(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const Vec truth = target.evolve(model, t[i]).score(xt.row(r).transpose());
    values(r) = weight(model, weighting, t[i]) * (s.row(r).transpose() - truth).squaredNorm();
  }
  return estimate_mean(values);
}

TrainResult train(const MatchingConfig& config, LearnedScore& field, const DataSource& data,
                  const GaussianMixture* oracle) {
  require(config.batch >= 1, "batch must be >= 1");
  require(config.objective != Objective::SSM || config.projections >= 1, "ssm needs projections >= 1");
  require(config.objective != Objective::ESM || oracle != nullptr,
          "esm training needs an oracle target (Gaussian mixture)");
  require(config.learning_rate > 0.0, "learning rate must be positive");
  const DiffusionModel& model = field.model();
  const double t_floor = std::max(resolve_floor(model, config.t_floor), field.t_floor());
  require(t_floor > 0.0, "t_floor must be positive");
  const int d = field.dim();
  const std::size_t b = config.batch;
  const double inv_b = 1.0 / static_cast<double>(b);

  TrainResult result;
  result.trace.reserve(config.iterations);
  Vec velocity = Vec::Zero(field.params().size());
  const auto start = std::chrono::steady_clock::now();

  for (std::size_t k = 1; k <= config.iterations; ++k) {
    const Points x0 = data(b, derive_stream(config.seed, k));
    require(x0.rows() == static_cast<Eigen::Index>(b) && x0.cols() == d, "data source returned the wrong shape");
    const std::uint64_t it_seed = derive_stream(config.seed ^ 0x5eedull, k);
    const std::vector<double> t = uniform_times(b, t_floor, model.horizon(), it_seed, kTimeStream);
    const Points eps = standard_normal(b, d, it_seed, kNoiseStream);
    const Points xt = perturb_many(model, t, x0, eps);
    const Points s = field.eval_many(t, xt);

    std::vector<double> lam(b);
    for (std::size_t i = 0; i < b; ++i) lam[i] = weight(model, config.weighting, t[i]);

    Points upstream(static_cast<Eigen::Index>(b), d);
    double loss = 0.0;
    Vec grad;
    switch (config.objective) {
      case Objective::DSM: {
        for (std::size_t i = 0; i < b; ++i) {
          const auto r = static_cast<Eigen::Index>(i);
          const auto resid = (s.row(r) + eps.row(r) / model.marginal_std(t[i])).eval();
          loss += lam[i] * resid.squaredNorm();
          upstream.row(r) = 2.0 * lam[i] * inv_b * resid;
        }
        grad = field.param_gradient(t, xt, upstream);
        break;
      }
      case Objective::ESM: {
        for (std::size_t i = 0; i < b; ++i) {
          const auto r = static_cast<Eigen::Index>(i);
          const Vec truth = oracle->evolve(model, t[i]).score(xt.row(r).transpose());
          const auto resid = (s.row(r) - truth.transpose()).eval();
          loss += lam[i] * resid.squaredNorm();
          upstream.row(r) = 2.0 * lam[i] * inv_b * resid;
        }
        grad = field.param_gradient(t, xt, upstream);
        break;
      }
      case Objective::ISM: {
        const Vec div = field.divergence_many(t, xt);
        std::vector<double> w(b);
        for (std::size_t i = 0; i < b; ++i) {
          const auto r = static_cast<Eigen::Index>(i);
          loss += lam[i] * (s.row(r).squaredNorm() + 2.0 * div(r));
          upstream.row(r) = 2.0 * lam[i] * inv_b * s.row(r);
          w[i] = 2.0 * lam[i] * inv_b;
        }
        grad = field.param_gradient(t, xt, upstream) + field.divergence_param_gradient(t, xt, w);
        break;
      }
      case Objective::SSM: {
        const int m = config.projections;
        for (int j = 0; j < m; ++j) {
          const Points v = standard_normal(b, d, it_seed, derive_stream(kSsmStream, static_cast<std::uint64_t>(j)));
          const Points jv = field.jvp_many(t, xt, v);
          Points scaled(v.rows(), v.cols());
          for (std::size_t i = 0; i < b; ++i) {
            const auto r = static_cast<Eigen::Index>(i);
            loss += lam[i] * 2.0 * v.row(r).dot(jv.row(r)) / m;
            scaled.row(r) = std::sqrt(2.0 * lam[i] * inv_b / m) * v.row(r);
          }
          grad = j == 0 ? field.projection_param_gradient(t, xt, scaled)
                        : Vec(grad + field.projection_param_gradient(t, xt, scaled));
        }
        for (std::size_t i = 0; i < b; ++i) {
          const auto r = static_cast<Eigen::Index>(i);
          loss += lam[i] * s.row(r).squaredNorm();
          upstream.row(r) = 2.0 * lam[i] * inv_b * s.row(r);
        }
        grad += field.param_gradient(t, xt, upstream);
        break;
      }
    }
    loss *= inv_b;
    if (!std::isfinite(loss) || !grad.allFinite()) {
      throw Error("matching", "non-finite loss at iteration " + std::to_string(k) +
                                  "; lower learning_rate or raise t_floor");
    }
    if (config.grad_clip > 0.0) {
      const double norm = grad.norm();
      if (norm > config.grad_clip) grad *= config.grad_clip / norm;
    }
    double lr = config.learning_rate;
    if (config.decay_start > 0 && k > config.decay_start) {
      lr *= std::sqrt(static_cast<double>(config.decay_start) / static_cast<double>(k));
    }
    velocity = config.momentum * velocity + grad;
    field.set_params(field.params() - lr * velocity);

    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.trace.push_back({k, loss, wall});
  }
  result.params = field.params();
  return result;
}

TrainResult train(const MatchingConfig& config, LearnedScore& field, const GaussianMixture& target) {
  const DataSource data = [&target](std::size_t n, std::uint64_t seed) { return target.sample(n, seed).points; };
  return train(config, field, data, &target);
}

void write_loss_trace(const std::string& path, const std::vector<TracePoint>& trace) {
  std::ofstream out(path);
  require(static_cast<bool>(out), "cannot write '" + path + "'");
  out << "iteration,loss,wall_time\n";
  for (const auto& p : trace) out << p.iteration << ',' << format_double(p.loss) << ',' << format_double(p.wall_seconds) << '\n';
}

ExpFamilySpec ExpFamilySpec::gaussian() {
  ExpFamilySpec spec;
  spec.k = 2;
  spec.grad = [](double x) { return Vec{{1.0, -x}}; };
  spec.laplacian = [](double) { return Vec{{0.0, -1.0}}; };
  return spec;
}

ExpFamilyMoments expfam_moments(const ExpFamilySpec& spec, const Eigen::Ref<const Vec>& samples) {
  require(samples.size() >= 1, "empty sample");
  ExpFamilyMoments m{Mat::Zero(spec.k, spec.k), Vec::Zero(spec.k)};
  for (Eigen::Index i = 0; i < samples.size(); ++i) {
    const Vec g = spec.grad(samples(i));
    m.grad_outer += g * g.transpose();
    m.laplacian += spec.laplacian(samples(i));
  }
  m.grad_outer /= static_cast<double>(samples.size());
  m.laplacian /= static_cast<double>(samples.size());
  return m;
}

Vec expfam_solve(const ExpFamilyMoments& moments) {
  const Eigen::FullPivLU<Mat> lu(moments.grad_outer);
  require(lu.isInvertible() && lu.rcond() > 1e-12, "moment matrix E[grad F grad F^T] is singular");
  return -lu.solve(moments.laplacian);
}

Vec expfam_fit(const ExpFamilySpec& spec, const Eigen::Ref<const Vec>& samples) {
  return expfam_solve(expfam_moments(spec, samples));
}

Mat expfam_sandwich(const ExpFamilySpec& spec, const Vec& theta, const Eigen::Ref<const Vec>& samples) {
  const ExpFamilyMoments m = expfam_moments(spec, samples);
  Mat sigma = Mat::Zero(spec.k, spec.k);
  for (Eigen::Index i = 0; i < samples.size(); ++i) {
    const Vec g = spec.grad(samples(i));
    const Vec psi = g * g.dot(theta) + spec.laplacian(samples(i));
    sigma += psi * psi.transpose();
  }
  sigma /= static_cast<double>(samples.size());
  const Mat inv = m.grad_outer.inverse();
  return inv * sigma * inv;
}

}  // namespace sdelab
