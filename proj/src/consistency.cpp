#include "sdelab/consistency.hpp"

#include "sdelab/metrics.hpp"
#include "sdelab/rng.hpp"

#include <chrono>
#include <cmath>

namespace sdelab {
namespace {

constexpr std::uint64_t kPairStream = 0x70616972ull;    // "pair"
constexpr std::uint64_t kSecondStream = 0x7365636full;  // "seco"
constexpr std::uint64_t kTimeStream = 0x74696d65ull;    // "time"

void require(bool ok, const std::string& what) {
  if (!ok) throw Error("consistency", what);
}

double weight_at(const TimeWeight& w, double t) { return w ? w(t) : 1.0; }

void check_rows(const std::vector<double>& t, const Points& y, int dim) {
  require(!t.empty() && static_cast<Eigen::Index>(t.size()) == y.rows(), "one time per row is required");
  require(y.cols() == dim, "dimension mismatch");
}

// Row-wise m(t) x0 + offset + sigma_t eps.
Points perturb_rows(const DiffusionModel& model, const std::vector<double>& t, const Points& x0, const Points& eps) {
  Points out(x0.rows(), x0.cols());
  for (Eigen::Index i = 0; i < x0.rows(); ++i) {
    const ConditionalMarginal m = model.marginal(t[static_cast<std::size_t>(i)]);
    out.row(i) = m.mean_factor * x0.row(i) + m.mean_offset.transpose() + m.std * eps.row(i);
  }
  return out;
}

// Forward probability-flow velocity f - g^2 s / 2 at each row.
Points flow_velocity(const DiffusionModel& model, const ScoreField& field, const std::vector<double>& t,
                     const Points& y) {
  const Points s = field.eval_many(t, y);
  Points v(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const double ti = t[static_cast<std::size_t>(i)];
    v.row(i) = model.drift_slope(ti) * y.row(i) - 0.5 * model.diffusion_sq(ti) * s.row(i);
    v.row(i).array() += model.drift_offset(ti);
  }
  return v;
}

LossBatch pair_loss(const FlowMap& flow, const ConsistencyPairs& pairs, const TimeWeight& weight,
                    const FlowMap* lagged) {
  check_rows(pairs.t, pairs.y_plus, flow.dim());
  const FlowMap& target = lagged ? *lagged : flow;
  std::vector<double> earlier(pairs.t);
  for (double& s : earlier) s -= pairs.delta;
  const Points a = flow.apply(pairs.t, pairs.y_plus);
  const Points b = target.apply(earlier, pairs.y_minus);
  LossBatch out;
  out.values.resize(a.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    out.values(i) = weight_at(weight, pairs.t[static_cast<std::size_t>(i)]) * (a.row(i) - b.row(i)).squaredNorm();
  }
  return out;
}

Points divide_rows(const Points& a, const std::vector<double>& t) {
  Points out = a;
  for (Eigen::Index i = 0; i < a.rows(); ++i) out.row(i) /= t[static_cast<std::size_t>(i)];
  return out;
}

}  // namespace

DiffusionModel consistency_model(int dim, double horizon) {
  ModelParams p;
  p.ve_schedule = VeSchedule::Linear;
  return DiffusionModel::make(ModelKind::VE, p, dim, horizon);
}

Points FlowMap::apply(double t, const Points& y) const {
  return apply(std::vector<double>(static_cast<std::size_t>(y.rows()), t), y);
}

AffineFlow::AffineFlow(Vec centre, std::function<double(double)> scale, std::function<double(double)> scale_rate)
    : centre_(std::move(centre)), scale_(std::move(scale)), scale_rate_(std::move(scale_rate)) {
  require(centre_.size() >= 1, "flow dimension must be >= 1");
  require(static_cast<bool>(scale_) && static_cast<bool>(scale_rate_), "scale functions are required");
}

AffineFlow AffineFlow::identity(int dim) {
  return AffineFlow(Vec::Zero(dim), [](double) { return 1.0; }, [](double) { return 0.0; });
}

AffineFlow AffineFlow::constant(const Vec& value) {
  return AffineFlow(value, [](double) { return 0.0; }, [](double) { return 0.0; });
}

AffineFlow AffineFlow::point_mass(int dim, double t_floor) {
  require(t_floor > 0.0, "t_floor must be positive");
  return AffineFlow(Vec::Zero(dim), [t_floor](double t) { return t_floor / t; },
                    [t_floor](double t) { return -t_floor / (t * t); });
}

AffineFlow AffineFlow::gaussian(const Vec& mean, double var, double t_floor) {
  require(var > 0.0 && t_floor >= 0.0, "gaussian flow needs var > 0 and t_floor >= 0");
  const double top = var + t_floor * t_floor;
  auto scale = [var, top](double t) { return std::sqrt(top / (var + t * t)); };
  auto rate = [var, scale](double t) { return -scale(t) * t / (var + t * t); };
  return AffineFlow(mean, scale, rate);
}

Points AffineFlow::apply(const std::vector<double>& t, const Points& y) const {
  check_rows(t, y, dim());
  Points out(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    out.row(i) = centre_.transpose() + scale_(t[static_cast<std::size_t>(i)]) * (y.row(i) - centre_.transpose());
  }
  return out;
}

Points AffineFlow::directional(const std::vector<double>& t, const Points& y, const Points& v) const {
  check_rows(t, y, dim());
  require(v.rows() == y.rows() && v.cols() == y.cols(), "direction shape mismatch");
  Points out(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const double ti = t[static_cast<std::size_t>(i)];
    out.row(i) = scale_rate_(ti) * (y.row(i) - centre_.transpose()) + scale_(ti) * v.row(i);
  }
  return out;
}

FlowNet::FlowNet(Mlp net, DiffusionModel model, double t_floor, double sigma_data)
    : net_(std::move(net)), model_(std::move(model)), t_floor_(t_floor), sigma_data_(sigma_data) {
  const int d = model_.dim();
  require(net_.in_dim() == d + kTimeFeatures && net_.out_dim() == d, "network shape does not match the model");
  require(t_floor_ > 0.0 && t_floor_ < model_.horizon(), "t_floor must lie in (0, T)");
  require(sigma_data_ > 0.0, "sigma_data must be positive");
}

FlowNet FlowNet::init(const DiffusionModel& model, std::uint64_t seed, int width, double t_floor, double out_scale) {
  const int d = model.dim();
  const double tf = t_floor < 0.0 ? default_t_floor(model) : t_floor;
  return FlowNet(Mlp::random(d + kTimeFeatures, width, d, seed, out_scale), model, tf);
}

double FlowNet::c_skip(double t) const {
  const double u = t - t_floor_;
  const double s2 = sigma_data_ * sigma_data_;
  return s2 / (u * u + s2);
}

double FlowNet::c_out(double t) const {
  return sigma_data_ * (t - t_floor_) / std::sqrt(sigma_data_ * sigma_data_ + t * t);
}

double FlowNet::c_skip_rate(double t) const {
  const double u = t - t_floor_;
  const double s2 = sigma_data_ * sigma_data_;
  const double den = u * u + s2;
  return -2.0 * s2 * u / (den * den);
}

double FlowNet::c_out_rate(double t) const {
  const double q = sigma_data_ * sigma_data_ + t * t;
  const double r = std::sqrt(q);
  return sigma_data_ * (1.0 / r - (t - t_floor_) * t / (q * r));
}

Mat FlowNet::inputs(const std::vector<double>& t, const Points& y) const {
  check_rows(t, y, dim());
  const int d = dim();
  Mat z(d + kTimeFeatures, y.rows());
  z.topRows(d) = y.transpose();
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    z.col(i).tail(kTimeFeatures) = time_features(model_, t[static_cast<std::size_t>(i)]);
  }
  return z;
}

Mat FlowNet::input_tangents(const std::vector<double>& t, const Points& v) const {
  const int d = dim();
  Mat dz(d + kTimeFeatures, v.rows());
  dz.topRows(d) = v.transpose();
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    dz.col(i).tail(kTimeFeatures) = time_features_derivative(model_, t[static_cast<std::size_t>(i)]);
  }
  return dz;
}

Points FlowNet::apply(const std::vector<double>& t, const Points& y) const {
  const Mat o = net_.forward(inputs(t, y));
  Points out(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const double ti = t[static_cast<std::size_t>(i)];
    out.row(i) = c_skip(ti) * y.row(i) + c_out(ti) * o.col(i).transpose();
  }
  return out;
}

Points FlowNet::directional(const std::vector<double>& t, const Points& y, const Points& v) const {
  require(v.rows() == y.rows() && v.cols() == y.cols(), "direction shape mismatch");
  const Mat z = inputs(t, y);
  const Mat o = net_.forward(z);
  const Mat jo = net_.jvp(z, input_tangents(t, v));
  Points out(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const double ti = t[static_cast<std::size_t>(i)];
    out.row(i) = c_skip_rate(ti) * y.row(i) + c_skip(ti) * v.row(i) + c_out_rate(ti) * o.col(i).transpose() +
                 c_out(ti) * jo.col(i).transpose();
  }
  return out;
}

Vec FlowNet::param_gradient(const std::vector<double>& t, const Points& y, const Points& u) const {
  require(u.rows() == y.rows() && u.cols() == y.cols(), "upstream shape mismatch");
  Mat scaled = u.transpose();
  for (Eigen::Index i = 0; i < y.rows(); ++i) scaled.col(i) *= c_out(t[static_cast<std::size_t>(i)]);
  return net_.param_gradient(inputs(t, y), scaled);
}

Vec FlowNet::directional_param_gradient(const std::vector<double>& t, const Points& y, const Points& v,
                                        const Points& c) const {
  require(v.rows() == y.rows() && c.rows() == y.rows() && v.cols() == y.cols() && c.cols() == y.cols(),
          "direction shape mismatch");
  const Mat z = inputs(t, y);
  Mat by_rate = c.transpose();
  Mat by_out = c.transpose();
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const double ti = t[static_cast<std::size_t>(i)];
    by_rate.col(i) *= c_out_rate(ti);
    by_out.col(i) *= c_out(ti);
  }
  return net_.param_gradient(z, by_rate) + net_.jvp_param_gradient(z, input_tangents(t, v), by_out);
}

ConsistencyPairs build_cd_pairs(const DiffusionModel& model, const ScoreField& field, const Points& x0,
                                const std::vector<double>& t, double delta, std::uint64_t seed) {
  check_rows(t, x0, model.dim());
  require(field.dim() == model.dim(), "score dimension does not match the model");
  require(delta > 0.0, "delta must be positive");
  for (double ti : t) {
    require(delta < ti, "delta must be smaller than t");
    model.check_time(ti, "cd pair");
  }
  ConsistencyPairs p;
  p.mode = PairMode::CD;
  p.delta = delta;
  p.t = t;
  p.x0 = x0;
  p.y_plus = perturb_rows(model, t, x0, standard_normal(t.size(), model.dim(), seed, kPairStream));
  p.y_minus = p.y_plus - delta * flow_velocity(model, field, t, p.y_plus);
  return p;
}

ConsistencyPairs build_ct_pairs(const DiffusionModel& model, const Points& x0, const std::vector<double>& t,
                                double delta, std::uint64_t seed) {
  check_rows(t, x0, model.dim());
  require(delta > 0.0, "delta must be positive");
  std::vector<double> earlier(t);
  for (double& s : earlier) {
    require(delta < s, "delta must be smaller than t");
    model.check_time(s, "ct pair");
    s -= delta;
  }
  ConsistencyPairs p;
  p.mode = PairMode::CT;
  p.delta = delta;
  p.t = t;
  p.x0 = x0;
  p.y_plus = perturb_rows(model, t, x0, standard_normal(t.size(), model.dim(), seed, kPairStream));
  p.y_minus = perturb_rows(model, earlier, x0, standard_normal(t.size(), model.dim(), seed, kSecondStream));
  return p;
}

LossBatch cd_loss(const FlowMap& flow, const ConsistencyPairs& pairs, const TimeWeight& weight,
                  const FlowMap* lagged) {
  require(pairs.mode == PairMode::CD, "cd_loss needs distillation pairs (got training pairs)");
  return pair_loss(flow, pairs, weight, lagged);
}

LossBatch ct_loss(const FlowMap& flow, const ConsistencyPairs& pairs, const TimeWeight& weight,
                  const FlowMap* lagged) {
  require(pairs.mode == PairMode::CT, "ct_loss needs training pairs (got distillation pairs)");
  return pair_loss(flow, pairs, weight, lagged);
}

LossBatch continuous_cd_loss(const FlowMap& flow, const DiffusionModel& model, const ScoreField& field,
                             const std::vector<double>& t, const Points& y_plus, const TimeWeight& weight) {
  check_rows(t, y_plus, flow.dim());
  const Points dir = flow.directional(t, y_plus, flow_velocity(model, field, t, y_plus));
  LossBatch out;
  out.values.resize(dir.rows());
  for (Eigen::Index i = 0; i < dir.rows(); ++i) {
    out.values(i) = weight_at(weight, t[static_cast<std::size_t>(i)]) * dir.row(i).squaredNorm();
  }
  return out;
}

LossBatch continuous_ct_loss(const FlowMap& flow, const std::vector<double>& t, const Points& y_plus,
                             const Points& x0, const TimeWeight& weight) {
  check_rows(t, y_plus, flow.dim());
  require(x0.rows() == y_plus.rows() && x0.cols() == y_plus.cols(), "x0 shape mismatch");
  for (double s : t) require(s > 0.0, "t must be positive");
  const Points dir = flow.directional(t, y_plus, divide_rows(y_plus - x0, t));
  const Points f = flow.apply(t, y_plus);
  LossBatch out;
  out.values.resize(dir.rows());
  for (Eigen::Index i = 0; i < dir.rows(); ++i) {
    out.values(i) = weight_at(weight, t[static_cast<std::size_t>(i)]) * f.row(i).dot(dir.row(i));
  }
  return out;
}

double coupling_w2_theory(double t, double delta, int d) {
  require(delta > 0.0 && delta < t, "need 0 < delta < t");
  require(d >= 1, "dimension must be >= 1");
  const double s = t - delta;
  return 2.0 * d * (t * t + s * s - std::sqrt(t * t * t * t + s * s * s * s));
}

double coupling_w2_gaussian(double t, double delta, int d) {
  require(delta > 0.0 && delta < t, "need 0 < delta < t");
  require(d >= 1, "dimension must be >= 1");
  const double s = t - delta;
  // Joint law of (y_plus, y_minus), coordinates ordered (plus, minus) per axis.
  Mat cd = Mat::Zero(2 * d, 2 * d);
  Mat ct = Mat::Zero(2 * d, 2 * d);
  for (int j = 0; j < d; ++j) {
    cd(j, j) = t * t;
    cd(d + j, d + j) = s * s;
    cd(j, d + j) = cd(d + j, j) = t * s;
    ct(j, j) = t * t;
    ct(d + j, d + j) = s * s;
  }
  const Vec zero = Vec::Zero(2 * d);
  const double w = w2_gaussian(zero, cd, zero, ct);
  return w * w;
}

double coupling_w2_empirical(const ConsistencyPairs& cd, const ConsistencyPairs& ct) {
  require(cd.mode == PairMode::CD && ct.mode == PairMode::CT, "need one distillation and one training pair set");
  require(cd.y_plus.cols() == ct.y_plus.cols(), "pair sets have different dimensions");
  auto joint = [](const ConsistencyPairs& p) {
    Points z(p.y_plus.rows(), 2 * p.y_plus.cols());
    z << p.y_plus, p.y_minus;
    return fit_gaussian(z);
  };
  const GaussianFit a = joint(cd);
  const GaussianFit b = joint(ct);
  const double w = w2_gaussian(a.mean, a.cov, b.mean, b.cov);
  return w * w;
}

std::string to_string(ConsistencyMode m) {
  switch (m) {
    case ConsistencyMode::CD: return "cd";
    case ConsistencyMode::CT: return "ct";
    case ConsistencyMode::ContinuousCD: return "continuous-cd";
    case ConsistencyMode::ContinuousCT: return "continuous-ct";
  }
  return "?";
}

ConsistencyMode parse_consistency_mode(const std::string& name) {
  for (ConsistencyMode m : {ConsistencyMode::CD, ConsistencyMode::CT, ConsistencyMode::ContinuousCD,
                            ConsistencyMode::ContinuousCT}) {
    if (name == to_string(m)) return m;
  }
  throw Error("consistency", "unknown mode '" + name + "' (expected cd, ct, continuous-cd or continuous-ct)");
}

std::vector<TracePoint> train_consistency(const ConsistencyConfig& config, FlowNet& flow, const DataSource& data,
                                          const ScoreField* field) {
  const bool distill = config.mode == ConsistencyMode::CD || config.mode == ConsistencyMode::ContinuousCD;
  require(!distill || field != nullptr, "distillation needs a pretrained score");
  require(config.batch >= 1, "batch must be >= 1");
  require(config.learning_rate > 0.0, "learning rate must be positive");
  require(config.ema >= 0.0 && config.ema < 1.0, "ema must lie in [0, 1)");
  const DiffusionModel& model = flow.model();
  const bool discrete = config.mode == ConsistencyMode::CD || config.mode == ConsistencyMode::CT;
  require(!discrete || config.delta > 0.0, "delta must be positive");
  const double t_min = config.t_min < 0.0 ? flow.t_floor() + (discrete ? config.delta : 0.0) : config.t_min;
  const double t_max = config.t_max < 0.0 ? model.horizon() : config.t_max;
  require(t_min > 0.0 && t_max > t_min && t_max <= model.horizon(), "invalid time range");
  require(!discrete || t_min - config.delta >= flow.t_floor() * (1.0 - 1e-12), "t_min - delta falls below t_floor");

  const int d = flow.dim();
  const std::size_t b = config.batch;
  const double inv_b = 1.0 / static_cast<double>(b);
  FlowNet lagged = flow;
  Vec velocity = Vec::Zero(flow.params().size());
  std::vector<TracePoint> trace;
  trace.reserve(config.iterations);
  const auto start = std::chrono::steady_clock::now();

  for (std::size_t k = 1; k <= config.iterations; ++k) {
    const Points x0 = data(b, derive_stream(config.seed, k));
    require(x0.rows() == static_cast<Eigen::Index>(b) && x0.cols() == d, "data source returned the wrong shape");
    const std::uint64_t it_seed = derive_stream(config.seed ^ 0x5eedull, k);
    std::vector<double> t(b);
    Rng trng(it_seed, kTimeStream);
    for (double& s : t) s = t_min + (t_max - t_min) * trng.uniform();

    double loss = 0.0;
    Vec grad;
    Points upstream(static_cast<Eigen::Index>(b), d);
    if (discrete) {
      const ConsistencyPairs pairs = config.mode == ConsistencyMode::CD
                                         ? build_cd_pairs(model, *field, x0, t, config.delta, it_seed)
                                         : build_ct_pairs(model, x0, t, config.delta, it_seed);
      std::vector<double> earlier(t);
      for (double& s : earlier) s -= config.delta;
      const Points a = flow.apply(t, pairs.y_plus);
      const Points target = lagged.apply(earlier, pairs.y_minus);
      const Points resid = a - target;
      loss = resid.squaredNorm() * inv_b;
      upstream = 2.0 * inv_b * resid;
      grad = flow.param_gradient(t, pairs.y_plus, upstream);
    } else {
      const Points yp = perturb_rows(model, t, x0, standard_normal(b, d, it_seed, kPairStream));
      if (config.mode == ConsistencyMode::ContinuousCD) {
        const Points v = flow_velocity(model, *field, t, yp);
        const Points dir = flow.directional(t, yp, v);
        loss = dir.squaredNorm() * inv_b;
        grad = flow.directional_param_gradient(t, yp, v, 2.0 * inv_b * dir);
      } else {
        // The tangent is held fixed, as with the lagged target of the discrete loss.
        const Points dir = flow.directional(t, yp, divide_rows(yp - x0, t));
        const Points f = flow.apply(t, yp);
        loss = f.cwiseProduct(dir).sum() * inv_b;
        grad = flow.param_gradient(t, yp, inv_b * dir);
      }
    }
    if (!std::isfinite(loss) || !grad.allFinite()) {
      throw Error("consistency", "non-finite loss at iteration " + std::to_string(k) + "; lower learning_rate");
    }
    velocity = config.momentum * velocity + grad;
    flow.set_params(flow.params() - config.learning_rate * velocity);
    lagged.set_params(config.ema * lagged.params() + (1.0 - config.ema) * flow.params());

    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    trace.push_back({k, loss, wall});
  }
  return trace;
}

SampleBatch one_step_sample(const FlowMap& flow, const DiffusionModel& model, std::size_t n, std::uint64_t seed) {
  require(n >= 1, "n must be >= 1");
  require(flow.dim() == model.dim(), "flow dimension does not match the model");
  SampleBatch batch = model.prior_sample(n, seed);
  batch.points = flow.apply(model.horizon(), batch.points);
  batch.scheme = "one-step";
  batch.time = 0.0;
  return batch;
}

}  // namespace sdelab
