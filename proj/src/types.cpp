#include "sdelab/types.hpp"

#include <cmath>

namespace sdelab {

Estimate estimate_mean(const Eigen::Ref<const Vec>& values) {
  Estimate e;
  e.n = static_cast<std::size_t>(values.size());
  if (e.n == 0) return e;
  e.value = values.mean();
  if (e.n > 1) {
    const double var = (values.array() - e.value).square().sum() / static_cast<double>(e.n - 1);
    e.std_error = std::sqrt(var / static_cast<double>(e.n));
  }
  return e;
}

Estimate estimate_mean(const std::vector<double>& values) {
  return estimate_mean(Eigen::Map<const Vec>(values.data(), static_cast<Eigen::Index>(values.size())));
}

}  // namespace sdelab
