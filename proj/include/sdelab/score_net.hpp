#pragma once

#include "sdelab/sde_model.hpp"
#include "sdelab/targets.hpp"
#include "sdelab/types.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace sdelab {

// in -> tanh(W) -> tanh(W) -> out perceptron with a flat parameter vector.
// Batched methods take one input per column.
class Mlp {
 public:
  Mlp(int in_dim, int width, int out_dim);
  // Weights ~ N(0, 1/fan_in), zero biases; the output layer is scaled by
  // out_scale (0 gives an identically zero network).
  static Mlp random(int in_dim, int width, int out_dim, std::uint64_t seed, double out_scale = 1.0);

  int in_dim() const { return in_; }
  int width() const { return width_; }
  int out_dim() const { return out_; }
  static std::size_t param_count(int in_dim, int width, int out_dim);
  std::size_t param_count() const { return static_cast<std::size_t>(params_.size()); }
  const Vec& params() const { return params_; }
  void set_params(const Vec& p);

  Mat forward(const Mat& z) const;
  // Directional derivative d out / dz . dz, per column.
  Mat jvp(const Mat& z, const Mat& dz) const;
  // Gradient over parameters of sum_cols <u, out>.
  Vec param_gradient(const Mat& z, const Mat& u) const;
  // Gradient over parameters of sum_cols <c, jvp(z, dz)>.
  Vec jvp_param_gradient(const Mat& z, const Mat& dz, const Mat& c) const;

 private:
  struct Views;
  int in_ = 0;
  int width_ = 0;
  int out_ = 0;
  Vec params_;
};

// (t/T, sigma_t, m(t)), the schedule features appended to x.
constexpr int kTimeFeatures = 3;
Vec time_features(const DiffusionModel& model, double t);
Vec time_features_derivative(const DiffusionModel& model, double t);

// Unified evaluator (t, x) -> R^d for exact and learned scores.
class ScoreField {
 public:
  virtual ~ScoreField() = default;
  virtual int dim() const = 0;
  virtual Vec eval(double t, const Vec& x) const = 0;
  // Row-wise evaluation at a common time.
  virtual Points eval_batch(double t, const Points& x) const;
  // Row-wise evaluation with one time per row.
  virtual Points eval_many(const std::vector<double>& t, const Points& x) const;
  // Jacobian in x applied to v.
  virtual Vec jvp(double t, const Vec& x, const Vec& v) const = 0;
  // Exact divergence from dim() directional passes; dim() > kExactDivergenceMaxDim
  // is refused (use sliced score matching there).
  virtual double divergence(double t, const Vec& x) const;

  Vec operator()(double t, const Vec& x) const { return eval(t, x); }
};

constexpr int kExactDivergenceMaxDim = 8;

using ScoreFieldPtr = std::shared_ptr<const ScoreField>;

// Exact score of a Gaussian-mixture target pushed through the model.
class OracleScore final : public ScoreField {
 public:
  OracleScore(GaussianMixture target, DiffusionModel model);
  int dim() const override { return target_.dim(); }
  Vec eval(double t, const Vec& x) const override;
  Points eval_batch(double t, const Points& x) const override;
  Vec jvp(double t, const Vec& x, const Vec& v) const override;
  double divergence(double t, const Vec& x) const override;
  const GaussianMixture& target() const { return target_; }
  const DiffusionModel& model() const { return model_; }

 private:
  GaussianMixture target_;
  DiffusionModel model_;
};

// s(t, x) = A x + b, independent of t.
class LinearScore final : public ScoreField {
 public:
  LinearScore(Mat a, Vec b);
  static LinearScore constant(const Vec& b);
  int dim() const override { return static_cast<int>(b_.size()); }
  Vec eval(double t, const Vec& x) const override;
  Vec jvp(double t, const Vec& x, const Vec& v) const override;
  double divergence(double t, const Vec& x) const override;
  const Mat& matrix() const { return a_; }
  const Vec& offset() const { return b_; }

 private:
  Mat a_;
  Vec b_;
};

// Arbitrary callable; the Jacobian is taken by central differences unless given.
class FunctionScore final : public ScoreField {
 public:
  using Fn = std::function<Vec(double, const Vec&)>;
  using JvpFn = std::function<Vec(double, const Vec&, const Vec&)>;
  FunctionScore(int dim, Fn fn, JvpFn jvp = {});
  int dim() const override { return dim_; }
  Vec eval(double t, const Vec& x) const override;
  Vec jvp(double t, const Vec& x, const Vec& v) const override;

 private:
  int dim_;
  Fn fn_;
  JvpFn jvp_;
};

// base(t, x) + offset: a controlled score error with E|error|^2 = |offset|^2.
class PerturbedScore final : public ScoreField {
 public:
  PerturbedScore(ScoreFieldPtr base, Vec offset);
  int dim() const override { return base_->dim(); }
  Vec eval(double t, const Vec& x) const override;
  Points eval_batch(double t, const Points& x) const override;
  Vec jvp(double t, const Vec& x, const Vec& v) const override;
  double divergence(double t, const Vec& x) const override;
  double error_size() const { return offset_.norm(); }

 private:
  ScoreFieldPtr base_;
  Vec offset_;
};

enum class Parametrization { Raw, Tweedie };
std::string to_string(Parametrization p);
Parametrization parse_parametrization(const std::string& name);

// s_theta built on an Mlp over (x, time features).
// Raw: s = net. Tweedie (VP only): s = gamma^{1/4}/(1 - sqrt(gamma)) net - x/(1 - sqrt(gamma))
// with gamma(t) = exp(-2 int_0^t beta).
class LearnedScore final : public ScoreField {
 public:
  LearnedScore(Mlp net, DiffusionModel model, Parametrization param, double t_floor);
  // Fresh network with the default width 64.
  static LearnedScore init(const DiffusionModel& model, Parametrization param, std::uint64_t seed,
                           int width = 64, double t_floor = -1.0, double out_scale = 0.1);

  int dim() const override { return model_.dim(); }
  Vec eval(double t, const Vec& x) const override;
  Points eval_batch(double t, const Points& x) const override;
  Vec jvp(double t, const Vec& x, const Vec& v) const override;

  Points eval_many(const std::vector<double>& t, const Points& x) const override;
  // Row-wise Jacobian-vector products and divergences with one time per row.
  Points jvp_many(const std::vector<double>& t, const Points& x, const Points& v) const;
  Vec divergence_many(const std::vector<double>& t, const Points& x) const;
  // Gradient over parameters of sum_i <upstream_i, s(t_i, x_i)>.
  Vec param_gradient(const std::vector<double>& t, const Points& x, const Points& upstream) const;
  Vec param_gradient(double t, const Vec& x, const Vec& upstream) const;
  // Gradient over parameters of sum_i <v_i, J_x s(t_i, x_i) v_i>.
  Vec projection_param_gradient(const std::vector<double>& t, const Points& x, const Points& v) const;
  // Gradient over parameters of sum_i w_i div s(t_i, x_i).
  Vec divergence_param_gradient(const std::vector<double>& t, const Points& x,
                                const std::vector<double>& w) const;

  const Mlp& net() const { return net_; }
  const Vec& params() const { return net_.params(); }
  void set_params(const Vec& p) { net_.set_params(p); }
  const DiffusionModel& model() const { return model_; }
  Parametrization parametrization() const { return param_; }
  double t_floor() const { return t_floor_; }

  // Text header followed by the raw little-endian doubles.
  void save(const std::string& path) const;
  static LearnedScore load(const std::string& path, const DiffusionModel& model);

 private:
  // Output map s = c_net * net - c_x * x at time t.
  void output_coefficients(double t, double& c_net, double& c_x) const;
  Mat inputs(const std::vector<double>& t, const Points& x) const;

  Mlp net_;
  DiffusionModel model_;
  Parametrization param_;
  double t_floor_;
};

// Default early-stopping time used by samplers and singular parametrizations.
inline double default_t_floor(const DiffusionModel& model) { return 1e-3 * model.horizon(); }

}  // namespace sdelab
