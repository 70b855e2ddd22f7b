#pragma once

#include "sdelab/matching.hpp"
#include "sdelab/score_net.hpp"
#include "sdelab/sde_model.hpp"
#include "sdelab/types.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace sdelab {

// The VE model with sigma(t) = t used throughout this module.
DiffusionModel consistency_model(int dim, double horizon = 1.0);

// Approximation F(t, y) of the probability-flow map taking the state at
// forward time t down to t_floor.
class FlowMap {
 public:
  virtual ~FlowMap() = default;
  virtual int dim() const = 0;
  virtual Points apply(const std::vector<double>& t, const Points& y) const = 0;
  // (d/dt + v . grad_y) F at each row.
  virtual Points directional(const std::vector<double>& t, const Points& y, const Points& v) const = 0;
  Points apply(double t, const Points& y) const;
};

// F(t, y) = centre + a(t) (y - centre).
class AffineFlow final : public FlowMap {
 public:
  AffineFlow(Vec centre, std::function<double(double)> scale, std::function<double(double)> scale_rate);
  static AffineFlow identity(int dim);
  static AffineFlow constant(const Vec& value);
  // Exact flow for a point mass at 0 under the sigma(t) = t model: y t_floor / t.
  static AffineFlow point_mass(int dim, double t_floor);
  // Exact flow for N(mean, var I) under the sigma(t) = t model.
  static AffineFlow gaussian(const Vec& mean, double var, double t_floor);

  int dim() const override { return static_cast<int>(centre_.size()); }
  using FlowMap::apply;
  Points apply(const std::vector<double>& t, const Points& y) const override;
  Points directional(const std::vector<double>& t, const Points& y, const Points& v) const override;

 private:
  Vec centre_;
  std::function<double(double)> scale_;
  std::function<double(double)> scale_rate_;
};

// F(t, y) = c_skip(t) y + c_out(t) net(y, time features) with c_skip(t_floor) = 1
// and c_out(t_floor) = 0, so F(t_floor, .) is the identity.
class FlowNet final : public FlowMap {
 public:
  FlowNet(Mlp net, DiffusionModel model, double t_floor, double sigma_data = 0.5);
  static FlowNet init(const DiffusionModel& model, std::uint64_t seed, int width = 64,
                      double t_floor = -1.0, double out_scale = 0.1);

  int dim() const override { return model_.dim(); }
  using FlowMap::apply;
  Points apply(const std::vector<double>& t, const Points& y) const override;
  Points directional(const std::vector<double>& t, const Points& y, const Points& v) const override;

  // Gradient over parameters of sum_i <u_i, F(t_i, y_i)>.
  Vec param_gradient(const std::vector<double>& t, const Points& y, const Points& u) const;
  // Gradient over parameters of sum_i <c_i, (d/dt + v_i . grad) F(t_i, y_i)>.
  Vec directional_param_gradient(const std::vector<double>& t, const Points& y, const Points& v,
                                 const Points& c) const;

  const Vec& params() const { return net_.params(); }
  void set_params(const Vec& p) { net_.set_params(p); }
  const DiffusionModel& model() const { return model_; }
  double t_floor() const { return t_floor_; }
  double c_skip(double t) const;
  double c_out(double t) const;
  double c_skip_rate(double t) const;
  double c_out_rate(double t) const;

 private:
  Mat inputs(const std::vector<double>& t, const Points& y) const;
  Mat input_tangents(const std::vector<double>& t, const Points& v) const;

  Mlp net_;
  DiffusionModel model_;
  double t_floor_;
  double sigma_data_;
};

enum class PairMode { CD, CT };

struct ConsistencyPairs {
  PairMode mode = PairMode::CD;
  double delta = 0.0;
  std::vector<double> t;  // forward time of y_plus, per row
  Points y_plus;
  Points y_minus;
  Points x0;
};

// y_plus ~ N(m x0, sigma_t^2), y_minus = y_plus + delta (-f + g^2 s / 2)(t, y_plus).
ConsistencyPairs build_cd_pairs(const DiffusionModel& model, const ScoreField& field, const Points& x0,
                                const std::vector<double>& t, double delta, std::uint64_t seed);
// y_plus and y_minus perturbed independently from the same x0 to times t and t - delta.
ConsistencyPairs build_ct_pairs(const DiffusionModel& model, const Points& x0, const std::vector<double>& t,
                                double delta, std::uint64_t seed);

using TimeWeight = std::function<double(double)>;

// lambda(t) |F(t, y_plus) - F_lag(t - delta, y_minus)|^2; lagged defaults to flow.
LossBatch cd_loss(const FlowMap& flow, const ConsistencyPairs& pairs, const TimeWeight& weight = {},
                  const FlowMap* lagged = nullptr);
LossBatch ct_loss(const FlowMap& flow, const ConsistencyPairs& pairs, const TimeWeight& weight = {},
                  const FlowMap* lagged = nullptr);

// lambda(t) |(d/dt + (f - g^2 s / 2) . grad) F(t, y_plus)|^2.
LossBatch continuous_cd_loss(const FlowMap& flow, const DiffusionModel& model, const ScoreField& field,
                             const std::vector<double>& t, const Points& y_plus, const TimeWeight& weight = {});
// lambda(t) F . (d/dt + ((y_plus - x0) / t) . grad) F at (t, y_plus).
LossBatch continuous_ct_loss(const FlowMap& flow, const std::vector<double>& t, const Points& y_plus,
                             const Points& x0, const TimeWeight& weight = {});

// 2d (t^2 + (t - delta)^2 - sqrt(t^4 + (t - delta)^4)): squared W2 between the
// CD and CT pair laws for a point-mass target.
double coupling_w2_theory(double t, double delta, int d);
// Same quantity from the Gaussian W2 formula applied to the two joint covariances.
double coupling_w2_gaussian(double t, double delta, int d);
// Squared W2 between Gaussians fitted to the joint (y_plus, y_minus) samples.
double coupling_w2_empirical(const ConsistencyPairs& cd, const ConsistencyPairs& ct);

enum class ConsistencyMode { CD, CT, ContinuousCD, ContinuousCT };
std::string to_string(ConsistencyMode m);
ConsistencyMode parse_consistency_mode(const std::string& name);

struct ConsistencyConfig {
  ConsistencyMode mode = ConsistencyMode::CD;
  double delta = 0.01;
  double t_min = -1.0;  // < 0 selects t_floor + delta
  double t_max = -1.0;  // < 0 selects T
  std::size_t batch = 256;
  std::size_t iterations = 1000;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double ema = 0.0;  // lagged copy: theta_lag <- ema theta_lag + (1 - ema) theta
  std::uint64_t seed = 0;
};

// Trains the flow; field is the pretrained score (required for CD modes).
std::vector<TracePoint> train_consistency(const ConsistencyConfig& config, FlowNet& flow, const DataSource& data,
                                          const ScoreField* field);

// F(T, Y_0) with Y_0 drawn from the model prior.
SampleBatch one_step_sample(const FlowMap& flow, const DiffusionModel& model, std::size_t n, std::uint64_t seed);

}  // namespace sdelab
