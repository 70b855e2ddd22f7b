#include "sdelab/sde_model.hpp"

#include "sdelab/quadrature.hpp"
#include "sdelab/rng.hpp"

#include <cmath>
#include <sstream>

namespace sdelab {
namespace {

constexpr std::uint64_t kPriorStream = 0x7072696f72ull;  // "prior"

void require(bool ok, const std::string& what) {
  if (!ok) throw Error("sde_models", what);
}

}  // namespace

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::OU: return "OU";
    case ModelKind::VE: return "VE";
    case ModelKind::VP: return "VP";
    case ModelKind::SubVP: return "SubVP";
    case ModelKind::CVP: return "CVP";
  }
  return "?";
}

ModelKind parse_model_kind(const std::string& name) {
  if (name == "OU" || name == "ou") return ModelKind::OU;
  if (name == "VE" || name == "ve") return ModelKind::VE;
  if (name == "VP" || name == "vp") return ModelKind::VP;
  if (name == "SubVP" || name == "subvp" || name == "subVP") return ModelKind::SubVP;
  if (name == "CVP" || name == "cvp") return ModelKind::CVP;
  throw Error("sde_models", "unknown model kind '" + name + "' (expected OU, VE, VP, SubVP, CVP)");
}

DiffusionModel DiffusionModel::make(ModelKind kind, const ModelParams& params, int dim,
                                    double horizon) {
  require(dim >= 1, "dimension must be >= 1, got " + std::to_string(dim));
  require(horizon > 0.0 && std::isfinite(horizon), "horizon T must be > 0");
  switch (kind) {
    case ModelKind::VP:
    case ModelKind::SubVP:
    case ModelKind::CVP:
      require(params.beta_min > 0.0, "beta_min must be > 0");
      require(params.beta_min <= params.beta_max,
              "schedule constants not ordered: beta_min > beta_max");
      break;
    case ModelKind::VE:
      if (params.ve_schedule == VeSchedule::Geometric) {
        require(params.sigma_min > 0.0, "sigma_min must be > 0");
        require(params.sigma_min < params.sigma_max,
                "schedule constants not ordered: need sigma_min < sigma_max");
      }
      break;
    case ModelKind::OU:
      require(params.theta > 0.0, "OU theta must be > 0");
      require(params.ou_sigma > 0.0, "OU sigma must be > 0");
      break;
  }
  DiffusionModel m;
  m.kind_ = kind;
  m.params_ = params;
  m.dim_ = dim;
  m.horizon_ = horizon;
  return m;
}

DiffusionModel DiffusionModel::from_config(const KeyValues& kv) {
  ModelParams p;
  p.beta_min = kv.get_double_or("beta_min", p.beta_min);
  p.beta_max = kv.get_double_or("beta_max", p.beta_max);
  p.sigma_min = kv.get_double_or("sigma_min", p.sigma_min);
  p.sigma_max = kv.get_double_or("sigma_max", p.sigma_max);
  const std::string sched = kv.get_or("ve_schedule", "geometric");
  if (sched == "geometric") {
    p.ve_schedule = VeSchedule::Geometric;
  } else if (sched == "linear") {
    p.ve_schedule = VeSchedule::Linear;
  } else {
    throw Error("sde_models", "ve_schedule must be 'geometric' or 'linear', got '" + sched + "'");
  }
  p.theta = kv.get_double_or("theta", p.theta);
  p.ou_mean = kv.get_double_or("ou_mean", p.ou_mean);
  p.ou_sigma = kv.get_double_or("ou_sigma", p.ou_sigma);
  const auto kind = parse_model_kind(kv.get_or("kind", "VP"));
  const auto dim = kv.get_int_or("d", 2);
  const double horizon = kv.get_double_or("T", 1.0);
  return make(kind, p, static_cast<int>(dim), horizon);
}

KeyValues DiffusionModel::to_config() const {
  KeyValues kv;
  kv.set("kind", to_string(kind_));
  kv.set("d", static_cast<long long>(dim_));
  kv.set("T", horizon_);
  switch (kind_) {
    case ModelKind::VP:
    case ModelKind::SubVP:
    case ModelKind::CVP:
      kv.set("beta_min", params_.beta_min);
      kv.set("beta_max", params_.beta_max);
      break;
    case ModelKind::VE:
      kv.set("ve_schedule", params_.ve_schedule == VeSchedule::Linear ? "linear" : "geometric");
      if (params_.ve_schedule == VeSchedule::Geometric) {
        kv.set("sigma_min", params_.sigma_min);
        kv.set("sigma_max", params_.sigma_max);
      }
      break;
    case ModelKind::OU:
      kv.set("theta", params_.theta);
      kv.set("ou_mean", params_.ou_mean);
      kv.set("ou_sigma", params_.ou_sigma);
      break;
  }
  return kv;
}

bool DiffusionModel::uses_beta() const {
  return kind_ == ModelKind::VP || kind_ == ModelKind::SubVP || kind_ == ModelKind::CVP;
}

bool DiffusionModel::has_offset() const {
  return kind_ == ModelKind::OU && params_.ou_mean != 0.0;
}

void DiffusionModel::check_time(double t, const char* what) const {
  const double slack = 1e-12 * horizon_;
  if (!(t >= -slack && t <= horizon_ + slack)) {
    std::ostringstream os;
    os << what << ": time " << t << " outside [0, " << horizon_ << "]";
    throw Error("sde_models", os.str());
  }
}

double DiffusionModel::beta(double t) const {
  require(uses_beta(), "beta schedule undefined for " + to_string(kind_));
  return params_.beta_min + (t / horizon_) * (params_.beta_max - params_.beta_min);
}

double DiffusionModel::beta_integral(double t) const {
  require(uses_beta(), "beta schedule undefined for " + to_string(kind_));
  check_time(t, "beta_integral");
  return params_.beta_min * t + (t * t / (2.0 * horizon_)) * (params_.beta_max - params_.beta_min);
}

double DiffusionModel::drift_slope(double t) const {
  switch (kind_) {
    case ModelKind::VP:
    case ModelKind::SubVP: return -0.5 * beta(t);
    case ModelKind::CVP: return 0.5 * beta(t);
    case ModelKind::VE: return 0.0;
    case ModelKind::OU: return -params_.theta;
  }
  return 0.0;
}

double DiffusionModel::drift_offset(double) const {
  return kind_ == ModelKind::OU ? params_.theta * params_.ou_mean : 0.0;
}

Vec DiffusionModel::drift(double t, const Vec& x) const {
  Vec out = drift_slope(t) * x;
  if (const double c = drift_offset(t); c != 0.0) out.array() += c;
  return out;
}

double DiffusionModel::diffusion_sq(double t) const {
  switch (kind_) {
    case ModelKind::VP:
    case ModelKind::CVP: return beta(t);
    case ModelKind::SubVP: {
      const double b = params_.beta_min * t +
                       (t * t / (2.0 * horizon_)) * (params_.beta_max - params_.beta_min);
      return beta(t) * (-std::expm1(-2.0 * b));
    }
    case ModelKind::VE: {
      if (params_.ve_schedule == VeSchedule::Linear) return 2.0 * t;
      const double log_ratio = std::log(params_.sigma_max / params_.sigma_min);
      const double sigma = params_.sigma_min * std::exp(log_ratio * t / horizon_);
      return sigma * sigma * 2.0 * log_ratio / horizon_;
    }
    case ModelKind::OU: return params_.ou_sigma * params_.ou_sigma;
  }
  return 0.0;
}

double DiffusionModel::diffusion(double t) const { return std::sqrt(std::max(0.0, diffusion_sq(t))); }

double DiffusionModel::diffusion_sq_integral(double a, double b) const {
  auto cumulative = [this](double t) -> double {
    switch (kind_) {
      case ModelKind::VP:
      case ModelKind::CVP: return beta_integral(t);
      case ModelKind::SubVP: {
        const double bi = beta_integral(t);
        return bi + 0.5 * std::expm1(-2.0 * bi);
      }
      case ModelKind::VE: {
        if (params_.ve_schedule == VeSchedule::Linear) return t * t;
        const double log_ratio = std::log(params_.sigma_max / params_.sigma_min);
        return params_.sigma_min * params_.sigma_min * std::exp(2.0 * log_ratio * t / horizon_);
      }
      case ModelKind::OU: return params_.ou_sigma * params_.ou_sigma * t;
    }
    return 0.0;
  };
  return cumulative(b) - cumulative(a);
}

double DiffusionModel::log_mean_factor(double t) const {
  switch (kind_) {
    case ModelKind::VP:
    case ModelKind::SubVP: return -0.5 * beta_integral(t);
    case ModelKind::CVP: return 0.5 * beta_integral(t);
    case ModelKind::VE: return 0.0;
    case ModelKind::OU: return -params_.theta * t;
  }
  return 0.0;
}

double DiffusionModel::mean_factor(double t) const { return std::exp(log_mean_factor(t)); }

double DiffusionModel::marginal_var(double t) const {
  check_time(t, "marginal");
  switch (kind_) {
    case ModelKind::VP: return -std::expm1(-beta_integral(t));
    case ModelKind::SubVP: {
      const double s = -std::expm1(-beta_integral(t));
      return s * s;
    }
    case ModelKind::CVP: return std::expm1(beta_integral(t));
    case ModelKind::VE: {
      if (params_.ve_schedule == VeSchedule::Linear) return t * t;
      const double log_ratio = std::log(params_.sigma_max / params_.sigma_min);
      return params_.sigma_min * params_.sigma_min * std::expm1(2.0 * log_ratio * t / horizon_);
    }
    case ModelKind::OU: {
      const double th = params_.theta;
      return params_.ou_sigma * params_.ou_sigma / (2.0 * th) * (-std::expm1(-2.0 * th * t));
    }
  }
  return 0.0;
}

double DiffusionModel::marginal_std(double t) const { return std::sqrt(marginal_var(t)); }

ConditionalMarginal DiffusionModel::marginal(double t) const {
  ConditionalMarginal cm;
  cm.mean_factor = mean_factor(t);
  cm.std = marginal_std(t);
  cm.mean_offset = Vec::Constant(dim_, kind_ == ModelKind::OU
                                           ? params_.ou_mean * (-std::expm1(-params_.theta * t))
                                           : 0.0);
  return cm;
}

double DiffusionModel::mean_factor_derivative(double t) const {
  return drift_slope(t) * mean_factor(t);
}

double DiffusionModel::marginal_std_derivative(double t) const {
  if (kind_ == ModelKind::VE && params_.ve_schedule == VeSchedule::Linear) return 1.0;
  const double sd = marginal_std(t);
  require(sd > 0.0, "marginal std derivative undefined where the std vanishes");
  const double var_rate = 2.0 * drift_slope(t) * sd * sd + diffusion_sq(t);
  return var_rate / (2.0 * sd);
}

PriorSpec DiffusionModel::prior() const {
  PriorSpec p;
  p.mean = Vec::Zero(dim_);
  switch (kind_) {
    case ModelKind::VP:
    case ModelKind::SubVP: p.variance = 1.0; break;
    case ModelKind::CVP:
      p.variance = std::expm1(0.5 * horizon_ * (params_.beta_max + params_.beta_min));
      break;
    case ModelKind::VE:
      p.variance = params_.ve_schedule == VeSchedule::Linear
                       ? horizon_ * horizon_
                       : params_.sigma_max * params_.sigma_max - params_.sigma_min * params_.sigma_min;
      break;
    case ModelKind::OU:
      p.mean.setConstant(params_.ou_mean);
      p.variance = params_.ou_sigma * params_.ou_sigma / (2.0 * params_.theta);
      break;
  }
  return p;
}

SampleBatch DiffusionModel::prior_sample(std::size_t n, std::uint64_t seed) const {
  require(n >= 1, "prior_sample needs n >= 1");
  const PriorSpec p = prior();
  const double sd = std::sqrt(p.variance);
  SampleBatch batch;
  batch.points.resize(static_cast<Eigen::Index>(n), dim_);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(seed, derive_stream(kPriorStream, i));
    for (int j = 0; j < dim_; ++j) {
      batch.points(static_cast<Eigen::Index>(i), j) = p.mean(j) + sd * rng.normal();
    }
  }
  batch.time = horizon_;
  batch.model_hash = hash();
  batch.seed = seed;
  batch.scheme = "prior";
  return batch;
}

std::string DiffusionModel::hash() const { return content_hash(to_config().format()); }

std::string DiffusionModel::describe() const {
  std::ostringstream os;
  os << to_string(kind_) << "(d=" << dim_ << ", T=" << horizon_;
  if (uses_beta()) os << ", beta=[" << params_.beta_min << ", " << params_.beta_max << "]";
  if (kind_ == ModelKind::VE) {
    if (params_.ve_schedule == VeSchedule::Linear) {
      os << ", sigma(t)=t";
    } else {
      os << ", sigma=[" << params_.sigma_min << ", " << params_.sigma_max << "]";
    }
  }
  if (kind_ == ModelKind::OU) {
    os << ", theta=" << params_.theta << ", mu=" << params_.ou_mean << ", sigma=" << params_.ou_sigma;
  }
  os << ")";
  return os.str();
}

VeReparametrization reparam_to_ve(const DiffusionModel& model) {
  if (model.has_offset()) {
    throw Error("sde_models",
                "reparam_to_ve needs a drift of the form alpha(t) x; OU with nonzero mean has an "
                "offset c(t) = theta*mu");
  }
  VeReparametrization r;
  // With c = 0 the marginal std satisfies sigma_t^2 = s(t)^2 int_0^t g^2/s^2, so l = sigma_t/s.
  r.scale = [model](double t) { return model.mean_factor(t); };
  r.noise_level = [model](double t) { return model.marginal_std(t) / model.mean_factor(t); };
  return r;
}

}  // namespace sdelab
