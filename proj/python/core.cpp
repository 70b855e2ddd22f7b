#include "sdelab/analysis.hpp"
#include "sdelab/cli.hpp"
#include "sdelab/matching.hpp"
#include "sdelab/metrics.hpp"
#include "sdelab/samplers.hpp"
#include "sdelab/score_net.hpp"
#include "sdelab/sde_model.hpp"
#include "sdelab/targets.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>
#include <string>
#include <vector>

namespace py = pybind11;
using namespace sdelab;

namespace {

// Python dicts become KeyValues; lists join with ',', lists of lists with ';'.
std::string to_text(const py::handle& v) {
  if (py::isinstance<py::bool_>(v)) return v.cast<bool>() ? "1" : "0";
  if (py::isinstance<py::int_>(v)) return std::to_string(v.cast<long long>());
  if (py::isinstance<py::float_>(v)) return format_double(v.cast<double>());
  if (py::isinstance<py::str>(v)) return v.cast<std::string>();
  if (py::hasattr(v, "tolist")) return to_text(v.attr("tolist")());
  if (py::isinstance<py::sequence>(v)) {
    std::string out;
    bool nested = false;
    for (const auto& item : v.cast<py::sequence>()) {
      if (py::isinstance<py::sequence>(item) && !py::isinstance<py::str>(item)) nested = true;
    }
    for (const auto& item : v.cast<py::sequence>()) {
      if (!out.empty()) out += nested ? ";" : ",";
      out += to_text(item);
    }
    return out;
  }
  return py::str(v).cast<std::string>();
}

KeyValues to_kv(const py::dict& d) {
  KeyValues kv;
  for (const auto& [k, v] : d) kv.set(k.cast<std::string>(), to_text(v));
  return kv;
}

py::dict to_dict(const KeyValues& kv) {
  py::dict d;
  for (const auto& [k, v] : kv.entries()) d[py::str(k)] = v;
  return d;
}

// Schema defaults for every key not given, so the same names work here and on the command line.
KeyValues with_defaults(const py::dict& d) {
  KeyValues kv;
  for (const auto& key : config_schema()) {
    if (!key.fallback.empty()) kv.set(key.name, key.fallback);
  }
  KeyValues given = to_kv(d);
  validate_config(given);
  kv.merge(given);
  return kv;
}

SamplerConfig sampler_config(const KeyValues& cfg) {
  SamplerConfig sc;
  sc.scheme = parse_scheme(cfg.get("scheme"));
  sc.steps = static_cast<std::size_t>(cfg.get_int("steps"));
  const std::string grid = cfg.get("grid");
  if (grid != "uniform" && grid != "geometric") throw Error("python", "grid must be 'uniform' or 'geometric'");
  sc.grid = grid == "uniform" ? GridKind::Uniform : GridKind::Geometric;
  sc.t_floor = cfg.get_double("t_floor");
  sc.predictor = parse_scheme(cfg.get("predictor"));
  sc.corrector_steps = static_cast<int>(cfg.get_int("corrector_steps"));
  sc.corrector_eps0 = cfg.get_double("corrector_eps0");
  sc.corrector_decay = cfg.get_double("corrector_decay");
  sc.seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
  return sc;
}

MatchingConfig matching_config(const KeyValues& cfg) {
  MatchingConfig mc;
  mc.objective = parse_objective(cfg.get("objective"));
  mc.weighting = parse_weighting(cfg.get("weighting"));
  mc.t_floor = cfg.get_double("t_floor");
  mc.batch = static_cast<std::size_t>(cfg.get_int("batch"));
  mc.projections = static_cast<int>(cfg.get_int("projections"));
  mc.learning_rate = cfg.get_double("learning_rate");
  mc.momentum = cfg.get_double("momentum");
  mc.decay_start = static_cast<std::size_t>(cfg.get_int("decay_start"));
  mc.grad_clip = cfg.get_double("grad_clip");
  mc.iterations = static_cast<std::size_t>(cfg.get_int("iterations"));
  mc.seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
  return mc;
}

py::dict metric_dict(const MetricResult& m) {
  py::dict d;
  d["name"] = m.name;
  d["value"] = m.value;
  d["mc_error"] = m.mc_error;
  d["n_used"] = m.n_used;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Score-based diffusion toolkit";

  static py::exception<Error> error(m, "SdelabError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(error, e.what());
    }
  });

  py::class_<DiffusionModel>(m, "DiffusionModel")
      .def_static("from_config", [](const py::dict& d) { return DiffusionModel::from_config(with_defaults(d)); },
                  py::arg("config") = py::dict())
      .def("to_config", [](const DiffusionModel& self) { return to_dict(self.to_config()); })
      .def_property_readonly("kind", [](const DiffusionModel& self) { return to_string(self.kind()); })
      .def_property_readonly("dim", &DiffusionModel::dim)
      .def_property_readonly("horizon", &DiffusionModel::horizon)
      .def("beta_integral", &DiffusionModel::beta_integral)
      .def("diffusion", &DiffusionModel::diffusion)
      .def("drift_slope", &DiffusionModel::drift_slope)
      .def("mean_factor", &DiffusionModel::mean_factor)
      .def("marginal_std", &DiffusionModel::marginal_std)
      .def("prior_sample",
           [](const DiffusionModel& self, std::size_t n, std::uint64_t seed) {
             return self.prior_sample(n, seed).points;
           },
           py::arg("n"), py::arg("seed") = 0)
      .def("hash", &DiffusionModel::hash)
      .def("__repr__", &DiffusionModel::describe);

  py::class_<GaussianMixture>(m, "GaussianMixture")
      .def(py::init<std::vector<double>, Mat, std::vector<double>>(), py::arg("weights"), py::arg("means"),
           py::arg("variances"))
      .def_static("from_config", [](const py::dict& d) { return GaussianMixture::from_config(to_kv(d)); })
      .def_property_readonly("dim", &GaussianMixture::dim)
      .def_property_readonly("weights", &GaussianMixture::weights)
      .def_property_readonly("means", &GaussianMixture::means)
      .def_property_readonly("variances", &GaussianMixture::variances)
      .def("mean", &GaussianMixture::mean)
      .def("second_moment", &GaussianMixture::second_moment)
      .def("evolve", &GaussianMixture::evolve, py::arg("model"), py::arg("t"))
      .def("log_density", &GaussianMixture::log_density)
      .def("score", &GaussianMixture::score_batch, py::arg("x"))
      .def("sample",
           [](const GaussianMixture& self, std::size_t n, std::uint64_t seed) { return self.sample(n, seed).points; },
           py::arg("n"), py::arg("seed") = 0);

  py::class_<ScoreField, std::shared_ptr<ScoreField>>(m, "ScoreField")
      .def_property_readonly("dim", &ScoreField::dim)
      .def("__call__", &ScoreField::eval_batch, py::arg("t"), py::arg("x"))
      .def("divergence", &ScoreField::divergence, py::arg("t"), py::arg("x"));

  py::class_<OracleScore, ScoreField, std::shared_ptr<OracleScore>>(m, "OracleScore")
      .def(py::init<GaussianMixture, DiffusionModel>(), py::arg("target"), py::arg("model"));

  py::class_<LearnedScore, ScoreField, std::shared_ptr<LearnedScore>>(m, "LearnedScore")
      .def_static(
          "init",
          [](const DiffusionModel& model, const std::string& parametrization, std::uint64_t seed, int width) {
            return std::make_shared<LearnedScore>(
                LearnedScore::init(model, parse_parametrization(parametrization), seed, width));
          },
          py::arg("model"), py::arg("parametrization") = "raw", py::arg("seed") = 0, py::arg("width") = 64)
      .def_static("load",
                  [](const std::string& path, const DiffusionModel& model) {
                    return std::make_shared<LearnedScore>(LearnedScore::load(path, model));
                  })
      .def("save", &LearnedScore::save)
      .def_property("params", &LearnedScore::params, &LearnedScore::set_params);

  m.def(
      "train",
      [](LearnedScore& field, const GaussianMixture& target, const py::dict& config) {
        const MatchingConfig mc = matching_config(with_defaults(config));
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train(mc, field, target);
        }
        std::vector<std::pair<std::size_t, double>> trace;
        for (const auto& p : r.trace) trace.emplace_back(p.iteration, p.loss);
        return trace;
      },
      py::arg("field"), py::arg("target"), py::arg("config") = py::dict(),
      "Fits field in place; returns (iteration, loss) pairs.");

  m.def(
      "weighted_esm",
      [](const ScoreField& field, const GaussianMixture& target, const DiffusionModel& model, const std::string& weighting,
         std::size_t n, std::uint64_t seed) {
        const Estimate e = weighted_esm(field, target, model, parse_weighting(weighting), n, seed, -1.0);
        return std::make_pair(e.value, e.std_error);
      },
      py::arg("field"), py::arg("target"), py::arg("model"), py::arg("weighting") = "sigma2",
      py::arg("n") = 10000, py::arg("seed") = 0);

  m.def(
      "sample",
      [](const DiffusionModel& model, const ScoreField& field, std::size_t n, const py::dict& config) {
        const SamplerConfig sc = sampler_config(with_defaults(config));
        py::gil_scoped_release release;
        return sample(model, field, sc, n).points;
      },
      py::arg("model"), py::arg("field"), py::arg("n"), py::arg("config") = py::dict());

  m.def("w2_gaussian", py::overload_cast<const Vec&, double, const Vec&, double>(&w2_gaussian));
  m.def("kl_gaussian", &kl_gaussian);
  m.def(
      "sliced_w2",
      [](const Points& a, const Points& b, int n_proj, std::uint64_t seed) {
        return metric_dict(sliced_w2(a, b, n_proj, seed));
      },
      py::arg("a"), py::arg("b"), py::arg("n_proj") = 128, py::arg("seed") = 0);
  m.def(
      "tv_histogram", [](const Points& a, const Points& b, int bins) { return metric_dict(tv_histogram(a, b, bins)); },
      py::arg("a"), py::arg("b"), py::arg("bins") = 50);
  m.def(
      "fitted_w2", [](const Points& x, const Vec& mean, double var) { return metric_dict(fitted_w2(x, mean, var)); },
      py::arg("x"), py::arg("mean"), py::arg("var"));

  m.def(
      "run_sweep",
      [](const py::dict& config) {
        const SweepSpec spec = SweepSpec::from_config(to_kv(config));
        ExperimentReport report;
        {
          py::gil_scoped_release release;
          report = run_sweep(spec);
        }
        py::list rows;
        for (const auto& r : report.rows) {
          py::dict d;
          d["series"] = r.series;
          d["metric"] = r.metric;
          d["x"] = r.x;
          d["value"] = r.value;
          d["mc_error"] = r.mc_error;
          rows.append(d);
        }
        py::list checks;
        for (const auto& c : report.checks) {
          py::dict d;
          d["name"] = c.name;
          d["passed"] = c.passed;
          d["warning_only"] = c.warning_only;
          d["measured"] = c.measured;
          d["limit"] = c.limit;
          d["detail"] = c.detail;
          checks.append(d);
        }
        py::dict out;
        out["experiment"] = to_string(report.experiment);
        out["passed"] = report.passed();
        out["rows"] = rows;
        out["checks"] = checks;
        return out;
      },
      py::arg("config"));

  m.def(
      "cli",
      [](const std::vector<std::string>& args) {
        std::vector<std::string> argv{"sdelab"};
        argv.insert(argv.end(), args.begin(), args.end());
        std::vector<char*> ptrs;
        for (auto& a : argv) ptrs.push_back(a.data());
        return cli_main(static_cast<int>(ptrs.size()), ptrs.data());
      },
      py::arg("args"), "Runs the command-line tool in-process; returns its exit code.");
}
