#pragma once

#include "sdelab/key_values.hpp"
#include "sdelab/sde_model.hpp"
#include "sdelab/types.hpp"

#include <cstdint>
#include <vector>

namespace sdelab {

// Mixture of isotropic Gaussians sum_i w_i N(mu_i, v_i I). Serves as p_data
// and, evolved through an affine SDE, as the exact time-t law.
class GaussianMixture {
 public:
  GaussianMixture(std::vector<double> weights, Mat means, std::vector<double> variances);

  static GaussianMixture single(const Vec& mean, double variance);
  static GaussianMixture from_config(const KeyValues& kv);
  KeyValues to_config() const;

  int dim() const { return static_cast<int>(means_.cols()); }
  int components() const { return static_cast<int>(weights_.size()); }
  const std::vector<double>& weights() const { return weights_; }
  const Mat& means() const { return means_; }  // components x d
  const std::vector<double>& variances() const { return variances_; }

  Vec mean() const;
  // E|X|^2.
  double second_moment() const;

  // Law of X_t when X_0 follows this mixture.
  GaussianMixture evolve(const DiffusionModel& model, double t) const;

  double log_density(const Vec& x) const;
  Vec responsibilities(const Vec& x) const;
  Vec score(const Vec& x) const;
  // Row-wise score, vectorised over the batch.
  Points score_batch(const Points& x) const;
  // Divergence of the score (trace of the log-density Hessian).
  double score_divergence(const Vec& x) const;
  // Jacobian of the score applied to v.
  Vec score_jvp(const Vec& x, const Vec& v) const;

  SampleBatch sample(std::size_t n, std::uint64_t seed) const;

  std::string hash() const;

 private:
  // Per-component log weights plus Gaussian log-normaliser terms at x.
  Vec component_log_terms(const Vec& x) const;

  std::vector<double> weights_;
  Mat means_;
  std::vector<double> variances_;
};

// Exact time-t score of the evolved mixture.
Vec exact_score(const GaussianMixture& evolved, const Vec& x);

// E(mu_t(X_0) | X_t = x) where mu_t(x0) = m(t) x0 + offset(t), computed from
// the per-component Gaussian posteriors of X_0.
Vec posterior_mean(const GaussianMixture& target, const DiffusionModel& model, double t,
                   const Vec& x);

// Planar Swiss roll: radius grows with the angle along n_turns turns.
struct SwissRoll {
  double n_turns = 1.5;
  double noise_std = 0.05;
  double scale = 1.0;

  SampleBatch sample(std::size_t n, std::uint64_t seed) const;
  // Equal-weight mixture laid along the spiral; used where an oracle score
  // is needed for demo runs.
  GaussianMixture as_mixture(int components = 64) const;
};

}  // namespace sdelab
