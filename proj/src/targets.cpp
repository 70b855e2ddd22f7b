#include "sdelab/targets.hpp"

#include "sdelab/quadrature.hpp"
#include "sdelab/rng.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace sdelab {
namespace {

constexpr std::uint64_t kTargetStream = 0x746172676574ull;  // "target"

void require(bool ok, const std::string& what) {
  if (!ok) throw Error("targets", what);
}

}  // namespace

GaussianMixture::GaussianMixture(std::vector<double> weights, Mat means,
                                 std::vector<double> variances)
    : weights_(std::move(weights)), means_(std::move(means)), variances_(std::move(variances)) {
  require(!weights_.empty(), "mixture needs at least one component");
  require(static_cast<Eigen::Index>(weights_.size()) == means_.rows() &&
              weights_.size() == variances_.size(),
          "weights, means and variances disagree on the component count");
  require(means_.cols() >= 1, "mixture dimension must be >= 1");
  double total = 0.0;
  for (double w : weights_) {
    require(w >= 0.0 && std::isfinite(w), "mixture weights must be nonnegative");
    total += w;
  }
  require(std::abs(total - 1.0) <= 1e-12, "mixture weights must sum to 1");
  for (double v : variances_) require(v > 0.0 && std::isfinite(v), "component variances must be > 0");
}

GaussianMixture GaussianMixture::single(const Vec& mean, double variance) {
  return GaussianMixture({1.0}, mean.transpose(), {variance});
}

GaussianMixture GaussianMixture::from_config(const KeyValues& kv) {
  const std::string kind = kv.get_or("target", "gmm");
  if (kind == "swissroll") {
    SwissRoll roll;
    roll.n_turns = kv.get_double_or("swiss_turns", roll.n_turns);
    roll.noise_std = kv.get_double_or("swiss_noise", roll.noise_std);
    roll.scale = kv.get_double_or("swiss_scale", roll.scale);
    return roll.as_mixture(static_cast<int>(kv.get_int_or("swiss_components", 64)));
  }
  require(kind == "gmm", "target must be 'gmm' or 'swissroll', got '" + kind + "'");
  const int d = static_cast<int>(kv.get_int_or("d", 2));
  if (!kv.contains("target_means")) {
    // Default: symmetric two-component mixture along the first axis.
    Mat means = Mat::Zero(2, d);
    means(0, 0) = -2.0;
    means(1, 0) = 2.0;
    return GaussianMixture({0.5, 0.5}, means, {0.25, 0.25});
  }
  const auto rows = kv.get_rows("target_means");
  Mat means(static_cast<Eigen::Index>(rows.size()), d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(static_cast<int>(rows[i].size()) == d,
            "target_means row " + std::to_string(i) + " has wrong dimension");
    for (int j = 0; j < d; ++j) means(static_cast<Eigen::Index>(i), j) = rows[i][static_cast<std::size_t>(j)];
  }
  std::vector<double> weights = kv.contains("target_weights")
                                    ? kv.get_doubles("target_weights")
                                    : std::vector<double>(rows.size(), 1.0 / static_cast<double>(rows.size()));
  std::vector<double> variances = kv.contains("target_variances")
                                      ? kv.get_doubles("target_variances")
                                      : std::vector<double>(rows.size(), 1.0);
  return GaussianMixture(std::move(weights), std::move(means), std::move(variances));
}

KeyValues GaussianMixture::to_config() const {
  KeyValues kv;
  kv.set("target", "gmm");
  kv.set("target_weights", weights_);
  kv.set("target_variances", variances_);
  std::string rows;
  for (Eigen::Index i = 0; i < means_.rows(); ++i) {
    if (i) rows += "; ";
    for (Eigen::Index j = 0; j < means_.cols(); ++j) {
      if (j) rows += ", ";
      rows += format_double(means_(i, j));
    }
  }
  kv.set("target_means", rows);
  return kv;
}

Vec GaussianMixture::mean() const {
  Vec m = Vec::Zero(dim());
  for (int i = 0; i < components(); ++i) m += weights_[static_cast<std::size_t>(i)] * means_.row(i).transpose();
  return m;
}

double GaussianMixture::second_moment() const {
  double s = 0.0;
  for (int i = 0; i < components(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    s += weights_[k] * (means_.row(i).squaredNorm() + dim() * variances_[k]);
  }
  return s;
}

GaussianMixture GaussianMixture::evolve(const DiffusionModel& model, double t) const {
  require(model.dim() == dim(), "model and target dimensions differ");
  const ConditionalMarginal cm = model.marginal(t);
  Mat means = cm.mean_factor * means_;
  means.rowwise() += cm.mean_offset.transpose();
  std::vector<double> vars(variances_.size());
  const double m2 = cm.mean_factor * cm.mean_factor;
  for (std::size_t i = 0; i < vars.size(); ++i) vars[i] = m2 * variances_[i] + cm.std * cm.std;
  return GaussianMixture(weights_, std::move(means), std::move(vars));
}

Vec GaussianMixture::component_log_terms(const Vec& x) const {
  const double d = dim();
  Vec out(components());
  for (int i = 0; i < components(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    const double w = weights_[k];
    if (w == 0.0) {
      out(i) = -std::numeric_limits<double>::infinity();
      continue;
    }
    const double v = variances_[k];
    out(i) = std::log(w) - 0.5 * d * std::log(2.0 * std::numbers::pi * v) -
             (x - means_.row(i).transpose()).squaredNorm() / (2.0 * v);
  }
  return out;
}

double GaussianMixture::log_density(const Vec& x) const {
  const Vec terms = component_log_terms(x);
  const double mx = terms.maxCoeff();
  return mx + std::log((terms.array() - mx).exp().sum());
}

Vec GaussianMixture::responsibilities(const Vec& x) const {
  const Vec terms = component_log_terms(x);
  const double mx = terms.maxCoeff();
  Vec r = (terms.array() - mx).exp();
  return r / r.sum();
}

Vec GaussianMixture::score(const Vec& x) const {
  const Vec r = responsibilities(x);
  Vec s = Vec::Zero(dim());
  for (int i = 0; i < components(); ++i) {
    if (r(i) == 0.0) continue;
    s += r(i) * (means_.row(i).transpose() - x) / variances_[static_cast<std::size_t>(i)];
  }
  return s;
}

Points GaussianMixture::score_batch(const Points& x) const {
  require(x.cols() == dim(), "points have the wrong dimension");
  const Eigen::Index n = x.rows();
  const int k = components();
  Mat logs(n, k);
  for (int i = 0; i < k; ++i) {
    const auto c = static_cast<std::size_t>(i);
    if (weights_[c] == 0.0) {
      logs.col(i).setConstant(-std::numeric_limits<double>::infinity());
      continue;
    }
    const double v = variances_[c];
    const auto diff = (x.rowwise() - means_.row(i)).eval();
    logs.col(i) = (std::log(weights_[c]) - 0.5 * dim() * std::log(2.0 * std::numbers::pi * v)) -
                  diff.rowwise().squaredNorm().array() / (2.0 * v);
  }
  const Vec mx = logs.rowwise().maxCoeff();
  Mat r = (logs.colwise() - mx).array().exp().matrix();
  r = r.array().colwise() / r.rowwise().sum().array();
  Points s = Points::Zero(n, dim());
  for (int i = 0; i < k; ++i) {
    const double inv_v = 1.0 / variances_[static_cast<std::size_t>(i)];
    const auto toward = ((-x).rowwise() + means_.row(i)).eval();
    s += (toward.array().colwise() * (r.col(i).array() * inv_v)).matrix();
  }
  return s;
}

double GaussianMixture::score_divergence(const Vec& x) const {
  // Hessian of log p = sum_i r_i (s_i s_i^T - I/v_i) - s s^T with s_i the component scores.
  const Vec r = responsibilities(x);
  Vec s = Vec::Zero(dim());
  double acc = 0.0;
  for (int i = 0; i < components(); ++i) {
    if (r(i) == 0.0) continue;
    const double v = variances_[static_cast<std::size_t>(i)];
    const Vec si = (means_.row(i).transpose() - x) / v;
    s += r(i) * si;
    acc += r(i) * (si.squaredNorm() - dim() / v);
  }
  return acc - s.squaredNorm();
}

Vec GaussianMixture::score_jvp(const Vec& x, const Vec& dir) const {
  const Vec r = responsibilities(x);
  Vec s = Vec::Zero(dim());
  Vec out = Vec::Zero(dim());
  for (int i = 0; i < components(); ++i) {
    if (r(i) == 0.0) continue;
    const double v = variances_[static_cast<std::size_t>(i)];
    const Vec si = (means_.row(i).transpose() - x) / v;
    s += r(i) * si;
    out += r(i) * (si * si.dot(dir) - dir / v);
  }
  return out - s * s.dot(dir);
}

SampleBatch GaussianMixture::sample(std::size_t n, std::uint64_t seed) const {
  require(n >= 1, "sample needs n >= 1");
  std::vector<double> cdf(weights_.size());
  std::partial_sum(weights_.begin(), weights_.end(), cdf.begin());
  SampleBatch batch;
  batch.points.resize(static_cast<Eigen::Index>(n), dim());
  for (std::size_t r = 0; r < n; ++r) {
    Rng rng(seed, derive_stream(kTargetStream, r));
    const double u = rng.uniform() * cdf.back();
    std::size_t comp = 0;
    while (comp + 1 < cdf.size() && (u > cdf[comp] || weights_[comp] == 0.0)) ++comp;
    const double sd = std::sqrt(variances_[comp]);
    for (int j = 0; j < dim(); ++j) {
      batch.points(static_cast<Eigen::Index>(r), j) =
          means_(static_cast<Eigen::Index>(comp), j) + sd * rng.normal();
    }
  }
  batch.seed = seed;
  batch.scheme = "target";
  return batch;
}

std::string GaussianMixture::hash() const { return content_hash(to_config().format()); }

Vec exact_score(const GaussianMixture& evolved, const Vec& x) { return evolved.score(x); }

Vec posterior_mean(const GaussianMixture& target, const DiffusionModel& model, double t,
                   const Vec& x) {
  const ConditionalMarginal cm = model.marginal(t);
  const GaussianMixture evolved = target.evolve(model, t);
  const Vec r = evolved.responsibilities(x);
  const double m = cm.mean_factor;
  const double var_noise = cm.std * cm.std;
  Vec out = Vec::Zero(target.dim());
  for (int i = 0; i < target.components(); ++i) {
    if (r(i) == 0.0) continue;
    const double v = target.variances()[static_cast<std::size_t>(i)];
    const Vec mu = target.means().row(i).transpose();
    // X_0 | X_t = x, component i: Gaussian with this mean.
    const double gain = m * v / (m * m * v + var_noise);
    const Vec x0_mean = mu + gain * (x - m * mu - cm.mean_offset);
    out += r(i) * (m * x0_mean + cm.mean_offset);
  }
  return out;
}

SampleBatch SwissRoll::sample(std::size_t n, std::uint64_t seed) const {
  require(n >= 1, "sample needs n >= 1");
  const double start = 1.5 * std::numbers::pi;
  const double span = 2.0 * std::numbers::pi * n_turns;
  const double norm = start + span;
  SampleBatch batch;
  batch.points.resize(static_cast<Eigen::Index>(n), 2);
  for (std::size_t r = 0; r < n; ++r) {
    Rng rng(seed, derive_stream(kTargetStream, r));
    const double angle = start + span * rng.uniform();
    const auto row = static_cast<Eigen::Index>(r);
    batch.points(row, 0) = scale * angle * std::cos(angle) / norm + noise_std * rng.normal();
    batch.points(row, 1) = scale * angle * std::sin(angle) / norm + noise_std * rng.normal();
  }
  batch.seed = seed;
  batch.scheme = "swissroll";
  return batch;
}

GaussianMixture SwissRoll::as_mixture(int components) const {
  require(components >= 1, "swiss roll mixture needs >= 1 component");
  const double start = 1.5 * std::numbers::pi;
  const double span = 2.0 * std::numbers::pi * n_turns;
  const double norm = start + span;
  Mat means(components, 2);
  double max_gap = 0.0;
  for (int k = 0; k < components; ++k) {
    const double angle = start + span * (k + 0.5) / components;
    means(k, 0) = scale * angle * std::cos(angle) / norm;
    means(k, 1) = scale * angle * std::sin(angle) / norm;
    if (k > 0) max_gap = std::max(max_gap, (means.row(k) - means.row(k - 1)).norm());
  }
  const double var = noise_std * noise_std + 0.25 * max_gap * max_gap;
  return GaussianMixture(std::vector<double>(static_cast<std::size_t>(components), 1.0 / components),
                         std::move(means), std::vector<double>(static_cast<std::size_t>(components), var));
}

}  // namespace sdelab
