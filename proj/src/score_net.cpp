#include "sdelab/score_net.hpp"

#include "sdelab/rng.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace sdelab {
namespace {

constexpr std::uint64_t kInitStream = 0x6d6c70ull;  // "mlp"

void require(bool ok, const std::string& what) {
  if (!ok) throw Error("score_net", what);
}

void require_finite(const Vec& x) {
  require(x.allFinite(), "non-finite input");
}

using ConstMap = Eigen::Map<const Mat>;
using MutMap = Eigen::Map<Mat>;

}  // namespace

// Column-major views into the flat parameter vector:
// W1 (width x in), b1, W2 (width x width), b2, W3 (out x width), b3.
struct Mlp::Views {
  std::size_t w1, b1, w2, b2, w3, b3;
  explicit Views(const Mlp& m) {
    w1 = 0;
    b1 = w1 + static_cast<std::size_t>(m.width_ * m.in_);
    w2 = b1 + static_cast<std::size_t>(m.width_);
    b2 = w2 + static_cast<std::size_t>(m.width_ * m.width_);
    w3 = b2 + static_cast<std::size_t>(m.width_);
    b3 = w3 + static_cast<std::size_t>(m.out_ * m.width_);
  }
};

Mlp::Mlp(int in_dim, int width, int out_dim) : in_(in_dim), width_(width), out_(out_dim) {
  require(in_dim >= 1 && width >= 1 && out_dim >= 1, "network sizes must be positive");
  params_ = Vec::Zero(static_cast<Eigen::Index>(param_count(in_dim, width, out_dim)));
}

std::size_t Mlp::param_count(int in_dim, int width, int out_dim) {
  const auto i = static_cast<std::size_t>(in_dim);
  const auto w = static_cast<std::size_t>(width);
  const auto o = static_cast<std::size_t>(out_dim);
  return w * i + w + w * w + w + o * w + o;
}

Mlp Mlp::random(int in_dim, int width, int out_dim, std::uint64_t seed, double out_scale) {
  Mlp m(in_dim, width, out_dim);
  const Views v(m);
  Rng rng(seed, kInitStream);
  auto fill = [&](std::size_t off, std::size_t count, double sd) {
    for (std::size_t k = 0; k < count; ++k) m.params_(static_cast<Eigen::Index>(off + k)) = sd * rng.normal();
  };
  fill(v.w1, v.b1 - v.w1, 1.0 / std::sqrt(in_dim));
  fill(v.w2, v.b2 - v.w2, 1.0 / std::sqrt(width));
  fill(v.w3, v.b3 - v.w3, out_scale / std::sqrt(width));
  return m;
}

void Mlp::set_params(const Vec& p) {
  require(p.size() == params_.size(), "parameter vector has the wrong length");
  require(p.allFinite(), "non-finite parameters");
  params_ = p;
}

Mat Mlp::forward(const Mat& z) const {
  require(z.rows() == in_, "network input has the wrong size");
  const Views v(*this);
  const double* p = params_.data();
  const ConstMap w1(p + v.w1, width_, in_), w2(p + v.w2, width_, width_), w3(p + v.w3, out_, width_);
  const ConstMap b1(p + v.b1, width_, 1), b2(p + v.b2, width_, 1), b3(p + v.b3, out_, 1);
  const Mat h1 = ((w1 * z).colwise() + b1.col(0)).array().tanh().matrix();
  const Mat h2 = ((w2 * h1).colwise() + b2.col(0)).array().tanh().matrix();
  return (w3 * h2).colwise() + b3.col(0);
}

Mat Mlp::jvp(const Mat& z, const Mat& dz) const {
  require(z.rows() == in_ && dz.rows() == in_ && z.cols() == dz.cols(), "jvp shape mismatch");
  const Views v(*this);
  const double* p = params_.data();
  const ConstMap w1(p + v.w1, width_, in_), w2(p + v.w2, width_, width_), w3(p + v.w3, out_, width_);
  const ConstMap b1(p + v.b1, width_, 1), b2(p + v.b2, width_, 1);
  const Mat h1 = ((w1 * z).colwise() + b1.col(0)).array().tanh().matrix();
  const Mat h2 = ((w2 * h1).colwise() + b2.col(0)).array().tanh().matrix();
  const Mat dh1 = ((1.0 - h1.array().square()) * (w1 * dz).array()).matrix();
  const Mat dh2 = ((1.0 - h2.array().square()) * (w2 * dh1).array()).matrix();
  return w3 * dh2;
}

Vec Mlp::param_gradient(const Mat& z, const Mat& u) const {
  require(z.rows() == in_ && u.rows() == out_ && z.cols() == u.cols(), "gradient shape mismatch");
  const Views v(*this);
  const double* p = params_.data();
  const ConstMap w1(p + v.w1, width_, in_), w2(p + v.w2, width_, width_), w3(p + v.w3, out_, width_);
  const ConstMap b1(p + v.b1, width_, 1), b2(p + v.b2, width_, 1);
  const Mat h1 = ((w1 * z).colwise() + b1.col(0)).array().tanh().matrix();
  const Mat h2 = ((w2 * h1).colwise() + b2.col(0)).array().tanh().matrix();

  Vec g = Vec::Zero(params_.size());
  double* q = g.data();
  MutMap(q + v.w3, out_, width_) = u * h2.transpose();
  MutMap(q + v.b3, out_, 1) = u.rowwise().sum();
  const Mat ga2 = ((1.0 - h2.array().square()) * (w3.transpose() * u).array()).matrix();
  MutMap(q + v.w2, width_, width_) = ga2 * h1.transpose();
  MutMap(q + v.b2, width_, 1) = ga2.rowwise().sum();
  const Mat ga1 = ((1.0 - h1.array().square()) * (w2.transpose() * ga2).array()).matrix();
  MutMap(q + v.w1, width_, in_) = ga1 * z.transpose();
  MutMap(q + v.b1, width_, 1) = ga1.rowwise().sum();
  return g;
}

Vec Mlp::jvp_param_gradient(const Mat& z, const Mat& dz, const Mat& c) const {
  require(z.rows() == in_ && dz.rows() == in_ && c.rows() == out_ && z.cols() == dz.cols() &&
              z.cols() == c.cols(),
          "jvp gradient shape mismatch");
  const Views v(*this);
  const double* p = params_.data();
  const ConstMap w1(p + v.w1, width_, in_), w2(p + v.w2, width_, width_), w3(p + v.w3, out_, width_);
  const ConstMap b1(p + v.b1, width_, 1), b2(p + v.b2, width_, 1);

  // Forward and tangent passes.
  const Mat h1 = ((w1 * z).colwise() + b1.col(0)).array().tanh().matrix();
  const Mat h2 = ((w2 * h1).colwise() + b2.col(0)).array().tanh().matrix();
  const Mat s1 = (1.0 - h1.array().square()).matrix();
  const Mat s2 = (1.0 - h2.array().square()).matrix();
  const Mat da1 = w1 * dz;
  const Mat dh1 = (s1.array() * da1.array()).matrix();
  const Mat da2 = w2 * dh1;
  const Mat dh2 = (s2.array() * da2.array()).matrix();

  // Reverse sweep of L = sum <c, W3 dh2>, through both tangent and primal paths.
  Vec g = Vec::Zero(params_.size());
  double* q = g.data();
  MutMap(q + v.w3, out_, width_) = c * dh2.transpose();
  const Mat g_dh2 = w3.transpose() * c;
  const Mat g_da2 = (s2.array() * g_dh2.array()).matrix();
  const Mat g_h2 = (-2.0 * h2.array() * da2.array() * g_dh2.array()).matrix();
  const Mat g_dh1 = w2.transpose() * g_da2;
  const Mat g_a2 = (s2.array() * g_h2.array()).matrix();
  MutMap(q + v.w2, width_, width_) = g_da2 * dh1.transpose() + g_a2 * h1.transpose();
  MutMap(q + v.b2, width_, 1) = g_a2.rowwise().sum();
  const Mat g_da1 = (s1.array() * g_dh1.array()).matrix();
  const Mat g_h1 = (w2.transpose() * g_a2).array() - 2.0 * h1.array() * da1.array() * g_dh1.array();
  const Mat g_a1 = (s1.array() * g_h1.array()).matrix();
  MutMap(q + v.w1, width_, in_) = g_da1 * dz.transpose() + g_a1 * z.transpose();
  MutMap(q + v.b1, width_, 1) = g_a1.rowwise().sum();
  return g;
}

Vec time_features(const DiffusionModel& model, double t) {
  Vec f(kTimeFeatures);
  f << t / model.horizon(), model.marginal_std(t), model.mean_factor(t);
  return f;
}

Vec time_features_derivative(const DiffusionModel& model, double t) {
  Vec f(kTimeFeatures);
  f << 1.0 / model.horizon(), model.marginal_std_derivative(t), model.mean_factor_derivative(t);
  return f;
}

Points ScoreField::eval_batch(double t, const Points& x) const {
  Points out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) out.row(i) = eval(t, x.row(i).transpose()).transpose();
  return out;
}

Points ScoreField::eval_many(const std::vector<double>& t, const Points& x) const {
  require(static_cast<Eigen::Index>(t.size()) == x.rows(), "times and points disagree in count");
  Points out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    out.row(i) = eval(t[static_cast<std::size_t>(i)], x.row(i).transpose()).transpose();
  }
  return out;
}

double ScoreField::divergence(double t, const Vec& x) const {
  require(dim() <= kExactDivergenceMaxDim,
          "exact divergence is limited to d <= " + std::to_string(kExactDivergenceMaxDim) +
              "; use sliced score matching instead");
  double acc = 0.0;
  Vec e = Vec::Zero(dim());
  for (int j = 0; j < dim(); ++j) {
    e(j) = 1.0;
    acc += jvp(t, x, e)(j);
    e(j) = 0.0;
  }
  return acc;
}

OracleScore::OracleScore(GaussianMixture target, DiffusionModel model)
    : target_(std::move(target)), model_(std::move(model)) {
  require(target_.dim() == model_.dim(), "target and model dimensions differ");
}

Vec OracleScore::eval(double t, const Vec& x) const {
  require_finite(x);
  return target_.evolve(model_, t).score(x);
}

Points OracleScore::eval_batch(double t, const Points& x) const {
  require(x.allFinite(), "non-finite input");
  return target_.evolve(model_, t).score_batch(x);
}

Vec OracleScore::jvp(double t, const Vec& x, const Vec& v) const {
  return target_.evolve(model_, t).score_jvp(x, v);
}

double OracleScore::divergence(double t, const Vec& x) const {
  return target_.evolve(model_, t).score_divergence(x);
}

LinearScore::LinearScore(Mat a, Vec b) : a_(std::move(a)), b_(std::move(b)) {
  require(a_.rows() == b_.size() && a_.cols() == b_.size(), "linear field must be square");
}

LinearScore LinearScore::constant(const Vec& b) { return LinearScore(Mat::Zero(b.size(), b.size()), b); }

Vec LinearScore::eval(double, const Vec& x) const {
  require_finite(x);
  return a_ * x + b_;
}

Vec LinearScore::jvp(double, const Vec&, const Vec& v) const { return a_ * v; }

double LinearScore::divergence(double, const Vec&) const { return a_.trace(); }

FunctionScore::FunctionScore(int dim, Fn fn, JvpFn jvp)
    : dim_(dim), fn_(std::move(fn)), jvp_(std::move(jvp)) {
  require(dim >= 1 && fn_, "function field needs a callable and d >= 1");
}

Vec FunctionScore::eval(double t, const Vec& x) const {
  require_finite(x);
  return fn_(t, x);
}

Vec FunctionScore::jvp(double t, const Vec& x, const Vec& v) const {
  if (jvp_) return jvp_(t, x, v);
  const double h = 1e-5 * std::max(1.0, x.norm()) / std::max(1e-300, v.norm());
  return (fn_(t, x + h * v) - fn_(t, x - h * v)) / (2.0 * h);
}

PerturbedScore::PerturbedScore(ScoreFieldPtr base, Vec offset)
    : base_(std::move(base)), offset_(std::move(offset)) {
  require(base_ != nullptr, "perturbed field needs a base");
  require(offset_.size() == base_->dim(), "perturbation has the wrong dimension");
}

Vec PerturbedScore::eval(double t, const Vec& x) const { return base_->eval(t, x) + offset_; }

Points PerturbedScore::eval_batch(double t, const Points& x) const {
  Points out = base_->eval_batch(t, x);
  out.rowwise() += offset_.transpose();
  return out;
}

Vec PerturbedScore::jvp(double t, const Vec& x, const Vec& v) const { return base_->jvp(t, x, v); }

double PerturbedScore::divergence(double t, const Vec& x) const { return base_->divergence(t, x); }

std::string to_string(Parametrization p) { return p == Parametrization::Raw ? "raw" : "tweedie"; }

Parametrization parse_parametrization(const std::string& name) {
  if (name == "raw") return Parametrization::Raw;
  if (name == "tweedie") return Parametrization::Tweedie;
  throw Error("score_net", "unknown parametrization '" + name + "' (expected raw or tweedie)");
}

LearnedScore::LearnedScore(Mlp net, DiffusionModel model, Parametrization param, double t_floor)
    : net_(std::move(net)), model_(std::move(model)), param_(param), t_floor_(t_floor) {
  require(net_.in_dim() == model_.dim() + kTimeFeatures && net_.out_dim() == model_.dim(),
          "network shape does not fit the model dimension");
  require(param_ == Parametrization::Raw || model_.kind() == ModelKind::VP,
          "tweedie parametrization requires a VP model");
  require(t_floor_ >= 0.0 && t_floor_ < model_.horizon(), "t_floor must lie in [0, T)");
}

LearnedScore LearnedScore::init(const DiffusionModel& model, Parametrization param,
                                std::uint64_t seed, int width, double t_floor, double out_scale) {
  if (t_floor < 0.0) t_floor = default_t_floor(model);
  return LearnedScore(Mlp::random(model.dim() + kTimeFeatures, width, model.dim(), seed, out_scale),
                      model, param, t_floor);
}

void LearnedScore::output_coefficients(double t, double& c_net, double& c_x) const {
  model_.check_time(t, "learned score");
  if (param_ == Parametrization::Raw) {
    c_net = 1.0;
    c_x = 0.0;
    return;
  }
  if (t < t_floor_) {
    throw Error("score_net", "tweedie parametrization evaluated at t = " + std::to_string(t) +
                                 " below t_floor = " + std::to_string(t_floor_));
  }
  // gamma = exp(-2B): gamma^{1/4} = m(t), 1 - sqrt(gamma) = -expm1(-B) = sigma_t^2.
  const double b = model_.beta_integral(t);
  const double one_minus_sqrt_gamma = -std::expm1(-b);
  c_net = std::exp(-0.5 * b) / one_minus_sqrt_gamma;
  c_x = 1.0 / one_minus_sqrt_gamma;
}

Mat LearnedScore::inputs(const std::vector<double>& t, const Points& x) const {
  require(static_cast<Eigen::Index>(t.size()) == x.rows(), "times and points disagree in count");
  require(x.cols() == dim(), "points have the wrong dimension");
  Mat z(net_.in_dim(), x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    z.col(i).head(dim()) = x.row(i).transpose();
    z.col(i).tail(kTimeFeatures) = time_features(model_, t[static_cast<std::size_t>(i)]);
  }
  require(z.allFinite(), "non-finite input");
  return z;
}

Vec LearnedScore::eval(double t, const Vec& x) const {
  Points p = x.transpose();
  return eval_batch(t, p).row(0).transpose();
}

Points LearnedScore::eval_batch(double t, const Points& x) const {
  return eval_many(std::vector<double>(static_cast<std::size_t>(x.rows()), t), x);
}

Points LearnedScore::eval_many(const std::vector<double>& t, const Points& x) const {
  const Mat out = net_.forward(inputs(t, x));
  Points s(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double c_net = 0.0, c_x = 0.0;
    output_coefficients(t[static_cast<std::size_t>(i)], c_net, c_x);
    s.row(i) = (c_net * out.col(i) - c_x * x.row(i).transpose()).transpose();
  }
  return s;
}

Vec LearnedScore::jvp(double t, const Vec& x, const Vec& v) const {
  Points p = x.transpose();
  const Mat z = inputs({t}, p);
  Mat dz = Mat::Zero(z.rows(), 1);
  dz.col(0).head(dim()) = v;
  double c_net = 0.0, c_x = 0.0;
  output_coefficients(t, c_net, c_x);
  return c_net * net_.jvp(z, dz).col(0) - c_x * v;
}

Points LearnedScore::jvp_many(const std::vector<double>& t, const Points& x, const Points& v) const {
  const Mat z = inputs(t, x);
  Mat dz = Mat::Zero(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) dz.col(i).head(dim()) = v.row(i).transpose();
  const Mat jo = net_.jvp(z, dz);
  Points out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double c_net = 0.0, c_x = 0.0;
    output_coefficients(t[static_cast<std::size_t>(i)], c_net, c_x);
    out.row(i) = (c_net * jo.col(i) - c_x * v.row(i).transpose()).transpose();
  }
  return out;
}

Vec LearnedScore::divergence_many(const std::vector<double>& t, const Points& x) const {
  require(dim() <= kExactDivergenceMaxDim, "exact divergence is limited to small d");
  const Mat z = inputs(t, x);
  Vec trace = Vec::Zero(x.rows());
  for (int j = 0; j < dim(); ++j) {
    Mat dz = Mat::Zero(z.rows(), z.cols());
    dz.row(j).setOnes();
    trace += net_.jvp(z, dz).row(j).transpose();
  }
  Vec out(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double c_net = 0.0, c_x = 0.0;
    output_coefficients(t[static_cast<std::size_t>(i)], c_net, c_x);
    out(i) = c_net * trace(i) - c_x * dim();
  }
  return out;
}

Vec LearnedScore::param_gradient(const std::vector<double>& t, const Points& x,
                                 const Points& upstream) const {
  require(upstream.rows() == x.rows() && upstream.cols() == x.cols(), "upstream shape mismatch");
  Mat u(dim(), x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double c_net = 0.0, c_x = 0.0;
    output_coefficients(t[static_cast<std::size_t>(i)], c_net, c_x);
    u.col(i) = c_net * upstream.row(i).transpose();
  }
  return net_.param_gradient(inputs(t, x), u);
}

Vec LearnedScore::param_gradient(double t, const Vec& x, const Vec& upstream) const {
  Points p = x.transpose();
  Points u = upstream.transpose();
  return param_gradient(std::vector<double>{t}, p, u);
}

Vec LearnedScore::projection_param_gradient(const std::vector<double>& t, const Points& x,
                                            const Points& v) const {
  const Mat z = inputs(t, x);
  Mat dz = Mat::Zero(z.rows(), z.cols());
  Mat c(dim(), x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double c_net = 0.0, c_x = 0.0;
    output_coefficients(t[static_cast<std::size_t>(i)], c_net, c_x);
    dz.col(i).head(dim()) = v.row(i).transpose();
    c.col(i) = c_net * v.row(i).transpose();
  }
  return net_.jvp_param_gradient(z, dz, c);
}

Vec LearnedScore::divergence_param_gradient(const std::vector<double>& t, const Points& x,
                                            const std::vector<double>& w) const {
  require(dim() <= kExactDivergenceMaxDim, "exact divergence gradient is limited to small d");
  require(w.size() == t.size(), "weights and times disagree in count");
  const Mat z = inputs(t, x);
  Vec g = Vec::Zero(static_cast<Eigen::Index>(net_.param_count()));
  for (int j = 0; j < dim(); ++j) {
    Mat dz = Mat::Zero(z.rows(), z.cols());
    Mat c = Mat::Zero(dim(), z.cols());
    dz.row(j).setOnes();
    for (Eigen::Index i = 0; i < z.cols(); ++i) {
      double c_net = 0.0, c_x = 0.0;
      output_coefficients(t[static_cast<std::size_t>(i)], c_net, c_x);
      c(j, i) = w[static_cast<std::size_t>(i)] * c_net;
    }
    g += net_.jvp_param_gradient(z, dz, c);
  }
  return g;
}

void LearnedScore::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), "cannot write '" + path + "'");
  out << "sdelab-params v1\n"
      << "dim " << dim() << "\n"
      << "width " << net_.width() << "\n"
      << "time_features " << kTimeFeatures << "\n"
      << "parametrization " << to_string(param_) << "\n"
      << "t_floor " << format_double(t_floor_) << "\n"
      << "model_hash " << model_.hash() << "\n"
      << "count " << net_.param_count() << "\n"
      << "---\n";
  out.write(reinterpret_cast<const char*>(net_.params().data()),
            static_cast<std::streamsize>(net_.param_count() * sizeof(double)));
  require(static_cast<bool>(out), "failed writing '" + path + "'");
}

LearnedScore LearnedScore::load(const std::string& path, const DiffusionModel& model) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "cannot open '" + path + "'");
  std::string line;
  std::getline(in, line);
  require(line == "sdelab-params v1", "'" + path + "' is not a parameter file");
  int dim = 0, width = 0, features = 0;
  std::size_t count = 0;
  double t_floor = 0.0;
  std::string param = "raw", hash;
  while (std::getline(in, line) && line != "---") {
    std::istringstream ls(line);
    std::string key, value;
    ls >> key >> value;
    if (key == "dim") dim = std::stoi(value);
    else if (key == "width") width = std::stoi(value);
    else if (key == "time_features") features = std::stoi(value);
    else if (key == "parametrization") param = value;
    else if (key == "t_floor") t_floor = parse_double(key, value);
    else if (key == "model_hash") hash = value;
    else if (key == "count") count = static_cast<std::size_t>(std::stoull(value));
  }
  require(line == "---", "parameter header is truncated");
  require(features == kTimeFeatures && dim == model.dim(),
          "parameter shape (d=" + std::to_string(dim) + ") does not match the model (d=" +
              std::to_string(model.dim()) + ")");
  require(count == Mlp::param_count(dim + features, width, dim), "parameter count does not match the header shape");
  require(hash == model.hash(), "parameters were trained for a different model (hash " + hash + ")");
  Vec p(static_cast<Eigen::Index>(count));
  in.read(reinterpret_cast<char*>(p.data()), static_cast<std::streamsize>(count * sizeof(double)));
  require(static_cast<std::size_t>(in.gcount()) == count * sizeof(double), "parameter payload is truncated");
  Mlp net(dim + features, width, dim);
  net.set_params(p);
  return LearnedScore(std::move(net), model, parse_parametrization(param), t_floor);
}

}  // namespace sdelab
