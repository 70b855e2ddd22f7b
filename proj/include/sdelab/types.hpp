#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdelab {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
// One sample per row.
using Points = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Thrown for every contract violation inside the library. The message is
// prefixed with the owning module, e.g. "samplers: empty grid".
class Error : public std::runtime_error {
 public:
  Error(const std::string& module, const std::string& what)
      : std::runtime_error(module + ": " + what), module_(module) {}
  const std::string& module() const noexcept { return module_; }

 private:
  std::string module_;
};

// A Monte-Carlo estimate: sample mean and its standard error.
struct Estimate {
  double value = 0.0;
  double std_error = 0.0;
  std::size_t n = 0;
};

Estimate estimate_mean(const std::vector<double>& values);
Estimate estimate_mean(const Eigen::Ref<const Vec>& values);

struct SampleBatch {
  Points points;               // n x d
  double time = 0.0;           // forward-diffusion time the batch represents
  std::string model_hash;      // empty when not produced by a model
  std::uint64_t seed = 0;
  std::string scheme;          // producer tag ("prior", "target", sampler scheme...)

  std::size_t size() const { return static_cast<std::size_t>(points.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(points.cols()); }
};

}  // namespace sdelab
