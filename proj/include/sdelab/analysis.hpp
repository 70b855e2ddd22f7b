#pragma once

#include "sdelab/key_values.hpp"
#include "sdelab/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace sdelab {

enum class Experiment { TVBoundSweep, W2BoundSweep, StepOrderSweep, ScoreErrorSweep, ExpFamilyRateSweep,
                        ConsistencyCouplingSweep };
std::string to_string(Experiment e);
Experiment parse_experiment(const std::string& name);

// values: the swept variable (T, eps, step size, n or delta depending on the
// experiment). fixed: the remaining settings; see each run_* for its keys.
struct SweepSpec {
  Experiment experiment = Experiment::TVBoundSweep;
  std::vector<double> values;
  KeyValues fixed;
  int replications = 1;
  std::uint64_t seed = 0;

  // Keys: experiment, values, replications, seed; everything else goes to fixed.
  static SweepSpec from_config(const KeyValues& kv);
  KeyValues to_config() const;
};

struct ReportRow {
  std::string config_hash;
  std::string series;   // e.g. "measured", "bound"
  std::string metric;
  double x = 0.0;       // swept value
  double value = 0.0;
  double mc_error = 0.0;
};

struct CheckResult {
  std::string name;
  bool passed = false;
  bool warning_only = false;  // failures reported without failing the report
  double measured = 0.0;
  double limit = 0.0;
  std::string detail;
};

struct ExperimentReport {
  Experiment experiment = Experiment::TVBoundSweep;
  std::string spec_hash;
  std::vector<ReportRow> rows;
  std::vector<CheckResult> checks;
  bool passed() const;
  void write_csv(const std::string& path) const;
  void write_summary(const std::string& path) const;
};

struct SlopeFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
};
// Least-squares line through (x, y).
SlopeFit fit_line(const std::vector<double>& x, const std::vector<double>& y);
// Line through (log x, log y).
SlopeFit fit_log_log(const std::vector<double>& x, const std::vector<double>& y);

// values = horizons T. Keys: target_mean (1), target_var (0.5), eps (0),
// n (100000), bins (50), steps_per_unit (1000), beta_min, beta_max.
ExperimentReport run_tv_bound_sweep(const SweepSpec& spec);
// values = step sizes (backward time, fraction of T). Keys: kind (VP), T (1),
// target_var (4), n (200000), t_floor (1e-3), scheme (em).
ExperimentReport run_step_order_sweep(const SweepSpec& spec);
// values = score error sizes eps. Keys: horizons (1,2,4), theta (1), ou_sigma
// (sqrt 2), target_mean (0.5), n (100000), steps_per_unit (1000).
ExperimentReport run_score_error_sweep(const SweepSpec& spec);
// Same experiment reported against the bound only, one value per (T, eps).
ExperimentReport run_w2_bound_sweep(const SweepSpec& spec);
// values = delta. Keys: times (1), d (2), n (100000), tolerance (0.05).
ExperimentReport run_consistency_coupling_sweep(const SweepSpec& spec);
// values = sample sizes. Keys: mean (1), var (1), replications from the spec.
ExperimentReport run_expfam_rate_sweep(const SweepSpec& spec);

ExperimentReport run_sweep(const SweepSpec& spec);

// Expected squared coupling distance for t ~ Uniform(0, 1) in the delta -> 0
// limit: 2 d (2 - sqrt 2) / 3.
double coupling_w2_small_delta_average(int d);

}  // namespace sdelab
