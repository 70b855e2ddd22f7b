#include "sdelab/cli.hpp"

#include "sdelab/consistency.hpp"
#include "sdelab/matching.hpp"
#include "sdelab/metrics.hpp"
#include "sdelab/quadrature.hpp"
#include "sdelab/rl_finetune.hpp"
#include "sdelab/rng.hpp"
#include "sdelab/samplers.hpp"
#include "sdelab/score_net.hpp"
#include "sdelab/sde_model.hpp"
#include "sdelab/targets.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>

namespace sdelab {
namespace {

namespace fs = std::filesystem;

void require(bool ok, const std::string& what) {
  if (!ok) throw Error("cli", what);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "cannot read '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

const ConfigKey* find_key(const std::string& name) {
  for (const auto& k : config_schema()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

KeyValues parse_overrides(const std::vector<std::string>& overrides) {
  KeyValues kv;
  for (const auto& item : overrides) {
    const auto eq = item.find('=');
    require(eq != std::string::npos && eq > 0, "override '" + item + "' must look like key=value");
    kv.merge(KeyValues::parse(item.substr(0, eq) + " = " + item.substr(eq + 1)));
  }
  return kv;
}

// ---- pieces shared by the commands ----

GaussianMixture make_target(const KeyValues& cfg) { return GaussianMixture::from_config(cfg); }

DataSource make_data(const KeyValues& cfg) {
  if (cfg.get("target") == "swissroll") {
    SwissRoll roll;
    roll.n_turns = cfg.get_double("swiss_turns");
    roll.noise_std = cfg.get_double("swiss_noise");
    roll.scale = cfg.get_double("swiss_scale");
    return [roll](std::size_t n, std::uint64_t seed) { return roll.sample(n, seed).points; };
  }
  const GaussianMixture target = make_target(cfg);
  return [target](std::size_t n, std::uint64_t seed) { return target.sample(n, seed).points; };
}

ScoreFieldPtr make_score(const KeyValues& cfg, const DiffusionModel& model, const GaussianMixture& target) {
  const std::string kind = cfg.get("score");
  if (kind == "oracle") return std::make_shared<OracleScore>(target, model);
  require(kind == "learned", "score must be 'oracle' or 'learned', got '" + kind + "'");
  return std::make_shared<LearnedScore>(LearnedScore::load(cfg.get("score_path"), model));
}

SamplerConfig make_sampler_config(const KeyValues& cfg) {
  SamplerConfig sc;
  sc.scheme = parse_scheme(cfg.get("scheme"));
  sc.steps = static_cast<std::size_t>(cfg.get_int("steps"));
  const std::string grid = cfg.get("grid");
  require(grid == "uniform" || grid == "geometric", "grid must be 'uniform' or 'geometric', got '" + grid + "'");
  sc.grid = grid == "uniform" ? GridKind::Uniform : GridKind::Geometric;
  sc.t_floor = cfg.get_double("t_floor");
  sc.predictor = parse_scheme(cfg.get("predictor"));
  sc.corrector_steps = static_cast<int>(cfg.get_int("corrector_steps"));
  sc.corrector_eps0 = cfg.get_double("corrector_eps0");
  sc.corrector_decay = cfg.get_double("corrector_decay");
  sc.seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
  return sc;
}

std::size_t positive_count(const KeyValues& cfg, const std::string& key) {
  const long long v = cfg.get_int(key);
  require(v >= 1, "key '" + key + "' must be >= 1");
  return static_cast<std::size_t>(v);
}

void write_metrics(const std::string& path, const std::vector<MetricResult>& metrics) {
  std::ofstream out(path);
  require(static_cast<bool>(out), "cannot write '" + path + "'");
  out << "metric,value,mc_error,n_used\n";
  for (const auto& m : metrics) {
    out << m.name << ',' << format_double(m.value) << ',' << format_double(m.mc_error) << ',' << m.n_used << '\n';
  }
}

std::vector<MetricResult> compare_to_target(const KeyValues& cfg, const Points& x, const GaussianMixture& target) {
  const auto seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
  const Points ref = make_data(cfg)(static_cast<std::size_t>(x.rows()), derive_stream(seed, 0x726566ull));
  std::vector<MetricResult> out;
  out.push_back(sliced_w2(x, ref, static_cast<int>(cfg.get_int("n_proj")), seed));
  if (x.cols() <= 2) out.push_back(tv_histogram(x, ref, static_cast<int>(cfg.get_int("bins"))));
  if (target.components() == 1 && cfg.get("target") == "gmm") {
    out.push_back(fitted_w2(x, target.means().row(0).transpose(), target.variances()[0]));
  }
  return out;
}

// ---- commands: each validates what it needs before producing any output ----

void cmd_train(const KeyValues& cfg, OutputStage& stage) {
  const DiffusionModel model = DiffusionModel::from_config(cfg);
  const GaussianMixture target = make_target(cfg);
  MatchingConfig mc;
  mc.objective = parse_objective(cfg.get("objective"));
  mc.weighting = parse_weighting(cfg.get("weighting"));
  mc.t_floor = cfg.get_double("t_floor");
  mc.batch = positive_count(cfg, "batch");
  mc.projections = static_cast<int>(cfg.get_int("projections"));
  mc.learning_rate = cfg.get_double("learning_rate");
  mc.momentum = cfg.get_double("momentum");
  mc.decay_start = static_cast<std::size_t>(cfg.get_int("decay_start"));
  mc.grad_clip = cfg.get_double("grad_clip");
  mc.iterations = positive_count(cfg, "iterations");
  mc.seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
  const Parametrization param = parse_parametrization(cfg.get("parametrization"));
  LearnedScore field = LearnedScore::init(model, param, mc.seed, static_cast<int>(cfg.get_int("width")),
                                          cfg.get_double("t_floor"));
  const auto eval_n = positive_count(cfg, "eval_n");
  const double floor = std::max(field.t_floor(), mc.t_floor < 0.0 ? default_t_floor(model) : mc.t_floor);
  const Estimate before = weighted_esm(field, target, model, mc.weighting, eval_n, mc.seed ^ 0xe5ull, floor);
  const TrainResult res = train(mc, field, make_data(cfg), &target);
  const Estimate after = weighted_esm(field, target, model, mc.weighting, eval_n, mc.seed ^ 0xe5ull, floor);

  field.save(stage.stage("score.params"));
  write_loss_trace(stage.stage("loss_trace.csv"), res.trace);
  write_metrics(stage.stage("train_metrics.csv"),
                {{"oracle_esm_initial", before.value, before.std_error, before.n},
                 {"oracle_esm_final", after.value, after.std_error, after.n},
                 {"final_loss", res.trace.back().loss, 0.0, mc.batch}});
}

void cmd_sample(const KeyValues& cfg, OutputStage& stage) {
  const DiffusionModel model = DiffusionModel::from_config(cfg);
  const SamplerConfig sc = make_sampler_config(cfg);
  const auto n = positive_count(cfg, "n");
  const GaussianMixture target = make_target(cfg);
  const ScoreFieldPtr field = make_score(cfg, model, target);
  const SampleBatch batch = sample(model, *field, sc, n);
  write_points_csv(stage.stage("samples.csv"), batch.points);
}

void cmd_eval(const KeyValues& cfg, OutputStage& stage) {
  const DiffusionModel model = DiffusionModel::from_config(cfg);
  const GaussianMixture target = make_target(cfg);
  const Points x = read_points_csv(cfg.get("samples_path"));
  require(x.cols() == target.dim(), "samples have dimension " + std::to_string(x.cols()) + " but the target has " +
                                        std::to_string(target.dim()));
  std::vector<MetricResult> metrics = compare_to_target(cfg, x, target);
  if (cfg.get("score") == "learned") {
    const LearnedScore field = LearnedScore::load(cfg.get("score_path"), model);
    const Weighting w = parse_weighting(cfg.get("weighting"));
    const Estimate e = weighted_esm(field, target, model, w, positive_count(cfg, "eval_n"),
                                    static_cast<std::uint64_t>(cfg.get_int("seed")), field.t_floor());
    metrics.push_back({"oracle_esm", e.value, e.std_error, e.n});
  }
  write_metrics(stage.stage("metrics.csv"), metrics);
}

int cmd_sweep(const KeyValues& explicit_cfg, const KeyValues& cfg, OutputStage& stage) {
  KeyValues kv = explicit_cfg;
  kv.set("seed", cfg.get("seed"));
  require(kv.contains("experiment"), "missing required key 'experiment'");
  require(kv.contains("values"), "missing required key 'values'");
  SweepSpec spec = SweepSpec::from_config(kv);
  if (!kv.contains("replications") && spec.experiment == Experiment::ExpFamilyRateSweep) spec.replications = 1000;
  const ExperimentReport rep = run_sweep(spec);
  const std::string stem = to_string(spec.experiment);
  rep.write_csv(stage.stage(stem + "_report.csv"));
  rep.write_summary(stage.stage(stem + "_summary.csv"));
  emit_plot_data(rep, stage);
  for (const auto& c : rep.checks) {
    std::cout << (c.passed ? "pass" : (c.warning_only ? "warn" : "FAIL")) << "  " << c.name << "  (" << c.measured
              << " vs " << c.limit << ")\n";
  }
  return rep.passed() ? 0 : 3;
}

void cmd_consistency(const KeyValues& cfg, OutputStage& stage) {
  const int d = static_cast<int>(cfg.get_int("d"));
  const DiffusionModel model = consistency_model(d, cfg.get_double("T"));
  const GaussianMixture target = make_target(cfg);
  ConsistencyConfig cc;
  cc.mode = parse_consistency_mode(cfg.get("mode"));
  cc.delta = cfg.get_double("delta");
  cc.t_min = cfg.get_double("t_min");
  cc.t_max = cfg.get_double("t_max");
  cc.batch = positive_count(cfg, "batch");
  cc.iterations = positive_count(cfg, "iterations");
  cc.learning_rate = cfg.get_double("learning_rate");
  cc.momentum = cfg.get_double("momentum");
  cc.ema = cfg.get_double("ema");
  cc.seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
  const auto n = positive_count(cfg, "n");
  const ScoreFieldPtr field = make_score(cfg, model, target);
  FlowNet flow = FlowNet::init(model, cc.seed, static_cast<int>(cfg.get_int("width")), cfg.get_double("t_floor"));
  const std::vector<TracePoint> trace = train_consistency(cc, flow, make_data(cfg), field.get());
  const SampleBatch out = one_step_sample(flow, model, n, cc.seed);
  write_loss_trace(stage.stage("loss_trace.csv"), trace);
  write_points_csv(stage.stage("one_step_samples.csv"), out.points);
  write_metrics(stage.stage("metrics.csv"), compare_to_target(cfg, out.points, target));
}

void cmd_finetune(const KeyValues& cfg, OutputStage& stage) {
  const DiffusionModel model = DiffusionModel::from_config(cfg);
  const GaussianMixture target = make_target(cfg);
  const int d = model.dim();
  Vec goal = Vec::Constant(d, 2.0);
  if (cfg.contains("reward_target")) {
    const auto v = cfg.get_doubles("reward_target");
    require(static_cast<int>(v.size()) == d, "reward_target needs " + std::to_string(d) + " values");
    goal = Eigen::Map<const Vec>(v.data(), d);
  }
  PolicySpec spec;
  spec.pretrained = make_score(cfg, model, target);
  spec.policy = std::make_shared<AffineCorrectionPolicy>(spec.pretrained, model.horizon(),
                                                         static_cast<int>(cfg.get_int("knots")));
  spec.exploration = constant_exploration(cfg.get_double("exploration"));
  spec.penalty = cfg.get_double("penalty");
  spec.reward = quadratic_reward(goal, cfg.get_double("reward_scale"));
  FinetuneConfig fc;
  fc.iterations = positive_count(cfg, "iterations");
  fc.batch = positive_count(cfg, "batch");
  fc.steps = positive_count(cfg, "rl_steps");
  fc.step_size = cfg.get_double("step_size");
  fc.eval_every = static_cast<std::size_t>(cfg.get_int("eval_every"));
  fc.eval_batch = static_cast<std::size_t>(cfg.get_int("eval_batch"));
  fc.seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
  const auto n = positive_count(cfg, "n");
  const auto trace = finetune(spec, model, fc);

  SamplerConfig grid_config;
  grid_config.steps = fc.steps;
  const RolloutBatch final_batch = rollout(spec, model, n, make_grid(model, grid_config), derive_stream(fc.seed, 0xf1ull));
  {
    std::ofstream out(stage.stage("objective_trace.csv"));
    require(static_cast<bool>(out), "cannot write the objective trace");
    out << "iteration,objective,objective_error,terminal_mean\n";
    for (const auto& p : trace) {
      out << p.iteration << ',' << format_double(p.objective) << ',' << format_double(p.objective_error) << ','
          << format_double(p.terminal_mean) << '\n';
    }
  }
  write_points_csv(stage.stage("finetuned_samples.csv"), final_batch.terminal);
}

std::string default_out_dir() {
  if (const char* env = std::getenv("SDELAB_OUT_DIR"); env != nullptr && *env != '\0') return env;
  return "sdelab_out";
}

}  // namespace

const std::vector<ConfigKey>& config_schema() {
  using T = ValueType;
  static const std::vector<ConfigKey> keys = {
      {"kind", T::Text, "VP", "forward model: OU, VE, VP, subVP or CVP"},
      {"d", T::Integer, "2", "dimension"},
      {"T", T::Real, "1", "horizon"},
      {"beta_min", T::Real, "0.1", "VP-family schedule start"},
      {"beta_max", T::Real, "20", "VP-family schedule end"},
      {"sigma_min", T::Real, "0.01", "VE geometric schedule start"},
      {"sigma_max", T::Real, "50", "VE geometric schedule end"},
      {"ve_schedule", T::Text, "geometric", "geometric or linear"},
      {"theta", T::Real, "1", "OU mean reversion"},
      {"ou_mean", T::Real, "0", "OU centre"},
      {"ou_sigma", T::Real, "1.4142135623730951", "OU diffusion"},
      {"seed", T::Integer, "0", "global seed"},
      {"target", T::Text, "gmm", "gmm or swissroll"},
      {"target_means", T::Rows, "", "mixture means, rows separated by ';'"},
      {"target_weights", T::RealList, "", "mixture weights"},
      {"target_variances", T::RealList, "", "mixture variances"},
      {"swiss_turns", T::Real, "1.5", "Swiss roll turns"},
      {"swiss_noise", T::Real, "0.05", "Swiss roll noise"},
      {"swiss_scale", T::Real, "1", "Swiss roll radius"},
      {"swiss_components", T::Integer, "64", "mixture components standing in for the Swiss roll"},
      {"score", T::Text, "oracle", "oracle or learned"},
      {"score_path", T::Text, "", "parameter file written by train"},
      {"parametrization", T::Text, "raw", "raw or tweedie"},
      {"width", T::Integer, "64", "hidden width"},
      {"t_floor", T::Real, "-1", "early-stopping time, < 0 selects 1e-3 T"},
      {"objective", T::Text, "dsm", "esm, ism, ssm or dsm"},
      {"weighting", T::Text, "sigma2", "unit or sigma2"},
      {"batch", T::Integer, "256", "minibatch size"},
      {"projections", T::Integer, "1", "ssm projections"},
      {"learning_rate", T::Real, "0.001", "step size"},
      {"momentum", T::Real, "0.9", "heavy-ball momentum"},
      {"decay_start", T::Integer, "1000", "iteration after which the step decays as 1/sqrt(k)"},
      {"grad_clip", T::Real, "0", "gradient norm clip, 0 disables"},
      {"iterations", T::Integer, "1000", "optimisation steps"},
      {"scheme", T::Text, "exact-em", "exact-em, em, ei-sde, ei-ode, heun or pc"},
      {"steps", T::Integer, "1000", "sampler steps"},
      {"grid", T::Text, "uniform", "uniform or geometric"},
      {"n", T::Integer, "10000", "number of samples"},
      {"predictor", T::Text, "exact-em", "predictor of the pc scheme"},
      {"corrector_steps", T::Integer, "1", "Langevin steps per pc step"},
      {"corrector_eps0", T::Real, "0.001", "initial Langevin step"},
      {"corrector_decay", T::Real, "0.999", "Langevin step decay"},
      {"samples_path", T::Text, "", "CSV of points for eval"},
      {"n_proj", T::Integer, "128", "sliced W2 directions"},
      {"bins", T::Integer, "50", "histogram bins per axis"},
      {"eval_n", T::Integer, "10000", "points for oracle ESM evaluation"},
      {"mode", T::Text, "cd", "cd, ct, continuous-cd or continuous-ct"},
      {"delta", T::Real, "0.01", "consistency pair gap"},
      {"ema", T::Real, "0", "lagged-copy averaging"},
      {"t_min", T::Real, "-1", "consistency training time range start"},
      {"t_max", T::Real, "-1", "consistency training time range end"},
      {"reward_target", T::RealList, "", "quadratic reward centre (default 2 per coordinate)"},
      {"reward_scale", T::Real, "1", "quadratic reward scale"},
      {"penalty", T::Real, "1", "KL penalty weight"},
      {"exploration", T::Real, "0.1", "Gaussian exploration level"},
      {"knots", T::Integer, "6", "time knots of the policy correction"},
      {"step_size", T::Real, "0.01", "policy-gradient step"},
      {"rl_steps", T::Integer, "100", "rollout grid steps"},
      {"eval_every", T::Integer, "100", "objective evaluation period"},
      {"eval_batch", T::Integer, "10000", "rollouts per objective evaluation"},
      {"experiment", T::Text, "", "sweep experiment"},
      {"values", T::RealList, "", "swept values"},
      {"replications", T::Integer, "", "sweep replications"},
      {"target_mean", T::Real, "", "sweep: Gaussian target mean"},
      {"target_var", T::Real, "", "sweep: Gaussian target variance"},
      {"eps", T::Real, "", "sweep: score error size"},
      {"steps_per_unit", T::Real, "", "sweep: sampler steps per unit horizon"},
      {"horizons", T::RealList, "", "sweep: horizons"},
      {"times", T::RealList, "", "sweep: consistency times"},
      {"tolerance", T::Real, "", "sweep: relative tolerance"},
      {"mean", T::Real, "", "sweep: exponential-family mean"},
      {"var", T::Real, "", "sweep: exponential-family variance"},
      {"cov_tolerance", T::Real, "", "sweep: covariance tolerance"},
  };
  return keys;
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::string nearest_key(const std::string& name) {
  std::string best;
  std::size_t best_d = std::string::npos;
  for (const auto& k : config_schema()) {
    const std::size_t dist = edit_distance(name, k.name);
    if (dist < best_d) {
      best_d = dist;
      best = k.name;
    }
  }
  return best;
}

void validate_config(const KeyValues& kv) {
  for (const auto& [key, value] : kv.entries()) {
    const ConfigKey* k = find_key(key);
    if (k == nullptr) throw Error("config", "unknown key '" + key + "' (did you mean '" + nearest_key(key) + "'?)");
    switch (k->type) {
      case ValueType::Real: kv.get_double(key); break;
      case ValueType::Integer: kv.get_int(key); break;
      case ValueType::RealList: kv.get_doubles(key); break;
      case ValueType::Rows: kv.get_rows(key); break;
      case ValueType::Text:
        if (value.empty()) throw Error("config", "key '" + key + "' is empty");
        break;
    }
  }
}

KeyValues explicit_config(const std::string& path, const std::vector<std::string>& overrides) {
  KeyValues kv = path.empty() ? KeyValues{} : KeyValues::load(path);
  kv.merge(parse_overrides(overrides));
  validate_config(kv);
  return kv;
}

KeyValues resolve_config(const std::string& path, const std::vector<std::string>& overrides) {
  KeyValues kv;
  for (const auto& k : config_schema()) {
    if (!k.fallback.empty()) kv.set(k.name, k.fallback);
  }
  kv.merge(explicit_config(path, overrides));
  return kv;
}

void write_points_csv(const std::string& path, const Points& x) {
  std::ofstream out(path);
  require(static_cast<bool>(out), "cannot write '" + path + "'");
  for (Eigen::Index j = 0; j < x.cols(); ++j) out << (j ? "," : "") << 'x' << j;
  out << '\n';
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) out << (j ? "," : "") << format_double(x(i, j));
    out << '\n';
  }
}

Points read_points_csv(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "cannot read '" + path + "'");
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "'" + path + "' is empty");
  const auto cols = static_cast<Eigen::Index>(std::count(line.begin(), line.end(), ',') + 1);
  std::vector<double> values;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    Eigen::Index c = 0;
    while (std::getline(ss, cell, ',')) {
      values.push_back(parse_double(path, cell));
      ++c;
    }
    require(c == cols, "'" + path + "' row " + std::to_string(rows + 1) + " has " + std::to_string(c) +
                           " columns, expected " + std::to_string(cols));
    ++rows;
  }
  require(rows >= 1, "'" + path + "' has no data rows");
  return Eigen::Map<const Points>(values.data(), static_cast<Eigen::Index>(rows), cols);
}

OutputStage::OutputStage(std::string dir) : dir_(std::move(dir)) {}

OutputStage::~OutputStage() {
  if (committed_) return;
  for (const auto& t : temps_) {
    std::error_code ec;
    fs::remove(t, ec);
  }
}

std::string OutputStage::final_path(const std::string& name) const { return (fs::path(dir_) / name).string(); }

std::string OutputStage::stage(const std::string& name) {
  require(!committed_, "outputs already committed");
  require(std::find(names_.begin(), names_.end(), name) == names_.end(), "output '" + name + "' staged twice");
  fs::create_directories(dir_);
  const std::string temp = (fs::path(dir_) / ("." + name + ".partial")).string();
  names_.push_back(name);
  temps_.push_back(temp);
  return temp;
}

void OutputStage::commit() {
  require(!committed_, "outputs already committed");
  for (std::size_t i = 0; i < names_.size(); ++i) fs::rename(temps_[i], final_path(names_[i]));
  committed_ = true;
}

std::vector<std::string> emit_plot_data(const ExperimentReport& report, OutputStage& stage) {
  require(!report.rows.empty(), "cannot emit plot data for an empty report");
  std::map<std::string, std::vector<const ReportRow*>> by_metric;
  for (const auto& r : report.rows) by_metric[r.metric].push_back(&r);
  std::vector<std::string> names;
  for (const auto& [metric, rows] : by_metric) {
    const std::string name = to_string(report.experiment) + "_plot_" + metric + ".csv";
    std::ofstream out(stage.stage(name));
    require(static_cast<bool>(out), "cannot write plot data");
    out << "x,y,y_err,series\n";
    for (const ReportRow* r : rows) {
      out << format_double(r->x) << ',' << format_double(r->value) << ',' << format_double(r->mc_error) << ','
          << r->series << '\n';
    }
    names.push_back(name);
  }
  return names;
}

std::string config_hash(const std::string& command, const KeyValues& config) {
  return content_hash("command = " + command + "\n" + config.format());
}

std::string RunManifest::to_json() const {
  nlohmann::ordered_json j;
  j["command"] = command;
  nlohmann::ordered_json c = nlohmann::ordered_json::object();
  for (const auto& [k, v] : config.entries()) c[k] = v;
  j["config"] = c;
  j["seed"] = seed;
  j["config_hash"] = config_hash;
  j["started"] = started;
  j["finished"] = finished;
  nlohmann::ordered_json outs = nlohmann::ordered_json::array();
  for (const auto& [name, hash] : outputs) outs.push_back({{"file", name}, {"content_hash", hash}});
  j["outputs"] = outs;
  return j.dump(2) + "\n";
}

int cli_main(int argc, char** argv) {
  CLI::App app{"Score-based diffusion toolkit: training, sampling, evaluation and experiments"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir = default_out_dir();
  long long seed = -1;
  app.add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
  app.add_option("--set", overrides, "inline override key=value (repeatable)");
  app.add_option("--seed", seed, "global seed (overrides the config)");
  app.add_option("--out", out_dir, "output directory (default $SDELAB_OUT_DIR or ./sdelab_out)");

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"train", "fit a score network by score matching"},
      {"sample", "run a backward sampler"},
      {"eval", "compare a sample CSV with the target"},
      {"sweep", "run a verification sweep"},
      {"consistency", "train a consistency map and draw one-step samples"},
      {"finetune", "policy-gradient fine-tuning against a quadratic reward"},
  };
  for (const auto& [name, help] : commands) app.add_subcommand(name, help)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    if (seed >= 0) overrides.push_back("seed=" + std::to_string(seed));
    const KeyValues explicit_cfg = explicit_config(config_path, overrides);
    const KeyValues cfg = resolve_config(config_path, overrides);
    RunManifest manifest;
    manifest.command = command;
    manifest.config = command == "sweep" ? explicit_cfg : cfg;
    if (command == "sweep") manifest.config.set("seed", cfg.get("seed"));
    manifest.seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
    manifest.config_hash = config_hash(command, manifest.config);
    manifest.started = utc_now();

    OutputStage stage(out_dir);
    int code = 0;
    if (command == "train") cmd_train(cfg, stage);
    else if (command == "sample") cmd_sample(cfg, stage);
    else if (command == "eval") cmd_eval(cfg, stage);
    else if (command == "sweep") code = cmd_sweep(explicit_cfg, cfg, stage);
    else if (command == "consistency") cmd_consistency(cfg, stage);
    else if (command == "finetune") cmd_finetune(cfg, stage);

    manifest.finished = utc_now();
    for (const auto& name : stage.names()) {
      manifest.outputs.emplace_back(name, content_hash(read_file((fs::path(out_dir) / ("." + name + ".partial")).string())));
    }
    {
      std::ofstream out(stage.stage("manifest.json"));
      require(static_cast<bool>(out), "cannot write the manifest");
      out << manifest.to_json();
    }
    stage.commit();
    std::cout << "wrote " << stage.names().size() << " files to " << out_dir << " (config " << manifest.config_hash
              << ")\n";
    return code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace sdelab
