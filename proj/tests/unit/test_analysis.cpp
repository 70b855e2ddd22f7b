#include "sdelab/analysis.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

using namespace sdelab;

TEST_CASE("line fits are exact on exact data") {
  const SlopeFit f = fit_line({0, 1, 2, 3}, {1, 3, 5, 7});
  CHECK(f.slope == doctest::Approx(2.0));
  CHECK(f.intercept == doctest::Approx(1.0));
  CHECK(f.r_squared == doctest::Approx(1.0));
  const SlopeFit g = fit_log_log({1e2, 1e3, 1e4}, {0.1, 0.1 / std::sqrt(10.0), 0.01});
  CHECK(g.slope == doctest::Approx(-0.5));
  CHECK_THROWS_AS(fit_line({1.0}, {1.0}), Error);
  CHECK_THROWS_AS(fit_log_log({1.0, -1.0}, {1.0, 1.0}), Error);
}

TEST_CASE("sweep spec config round trip") {
  const SweepSpec s =
      SweepSpec::from_config(KeyValues::parse("experiment = step_order\nvalues = 0.1, 0.05\nseed = 4\nn = 1000\n"));
  CHECK(s.experiment == Experiment::StepOrderSweep);
  CHECK(s.values == std::vector<double>{0.1, 0.05});
  CHECK(s.seed == 4);
  CHECK(s.fixed.get_int("n") == 1000);
  CHECK(!s.fixed.contains("seed"));
  const SweepSpec back = SweepSpec::from_config(s.to_config());
  CHECK(back.to_config().format() == s.to_config().format());
  for (Experiment e : {Experiment::TVBoundSweep, Experiment::W2BoundSweep, Experiment::StepOrderSweep,
                       Experiment::ScoreErrorSweep, Experiment::ExpFamilyRateSweep,
                       Experiment::ConsistencyCouplingSweep}) {
    CHECK(parse_experiment(to_string(e)) == e);
  }
  CHECK_THROWS_AS(parse_experiment("tv"), Error);
}

TEST_CASE("coupling sweep passes and is reproducible") {
  SweepSpec s;
  s.experiment = Experiment::ConsistencyCouplingSweep;
  s.values = {0.1, 0.4};
  s.fixed.set("n", 20000ll);
  const ExperimentReport a = run_sweep(s);
  const ExperimentReport b = run_sweep(s);
  CHECK(a.passed());
  CHECK(a.checks.size() == 6);
  REQUIRE(a.rows.size() == b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    CHECK(a.rows[i].value == b.rows[i].value);
    CHECK(a.rows[i].config_hash == b.rows[i].config_hash);
  }
  const std::string path = "analysis_report_test.csv";
  a.write_csv(path);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header.find("config_hash") != std::string::npos);
  in.close();
  std::remove(path.c_str());
}

TEST_CASE("reduced exponential-family sweep recovers the root-n rate") {
  SweepSpec s;
  s.experiment = Experiment::ExpFamilyRateSweep;
  s.values = {100, 1000, 10000};
  s.replications = 300;
  const ExperimentReport r = run_sweep(s);
  CHECK(r.passed());
}

TEST_CASE("reduced step-order sweep") {
  SweepSpec s;
  s.experiment = Experiment::StepOrderSweep;
  s.values = {0.04, 0.02, 0.01};
  s.fixed.set("n", 50000ll);
  const ExperimentReport r = run_sweep(s);
  bool slope_ok = false;
  for (const auto& c : r.checks) {
    if (c.name.find("slope") != std::string::npos) slope_ok = c.passed;
  }
  CHECK(slope_ok);
}

TEST_CASE("invalid sweeps are rejected") {
  SweepSpec s;
  s.experiment = Experiment::ConsistencyCouplingSweep;
  CHECK_THROWS_AS(run_sweep(s), Error);
  s.values = {2.0};
  CHECK_THROWS_AS(run_sweep(s), Error);
}
