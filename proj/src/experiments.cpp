#include "mlab/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <set>

#include "mlab/parallel.hpp"
#include "mlab/rng.hpp"
#include "mlab/verify.hpp"

#ifndef MLAB_VERSION
#define MLAB_VERSION "dev"
#endif

namespace mlab {

using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<double> logspace(double from, double to, int count) {
  std::vector<double> out;
  if (count == 1) return {from};
  for (int i = 0; i < count; ++i)
    out.push_back(from * std::pow(to / from, static_cast<double>(i) / (count - 1)));
  return out;
}

const std::vector<double> kBetas{0.0, 0.3, 0.6, 0.8, 0.9, 0.95};
const std::vector<std::uint64_t> kFiveSeeds{0, 1, 2, 3, 4};

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  return out;
}

// ---- config parsing --------------------------------------------------------

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

// A list of numbers, or {"logspace": [from, to, count]}.
void read_grid(const json& j, const char* key, std::vector<double>& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (v.is_object()) {
    check_keys(v, {"logspace"}, key);
    const auto& p = v.at("logspace");
    if (!p.is_array() || p.size() != 3) throw ConfigError(std::string(key) + ": logspace needs [from, to, count]");
    const double from = p[0].get<double>(), to = p[1].get<double>();
    const int count = p[2].get<int>();
    if (!(from > 0.0) || !(to > 0.0) || count < 1) throw ConfigError(std::string(key) + ": bad logspace");
    out = logspace(from, to, count);
  } else {
    read(j, key, out);
  }
}

Sampler parse_sampler(const std::string& s) {
  if (s == "with_replacement") return Sampler::with_replacement;
  if (s == "without_replacement_cyclic" || s == "cyclic") return Sampler::without_replacement_cyclic;
  throw ConfigError("unknown sampler '" + s + "'");
}

// ---- per-cell runners ------------------------------------------------------

void fill_from_bias(GridResult& g, const BiasReport& r) {
  g.train_loss = r.train_loss_final;
  g.test_loss = r.test_loss;
  g.crossings = r.crossings_plus + r.crossings_minus;
  g.stop_reason = to_string(r.stop_reason);
}

DiscreteHyper cell_hyper(const ExperimentConfig& cfg, const GridCell& c) {
  DiscreteHyper h = cfg.discrete;
  h.gamma = c.gamma;
  h.beta = c.beta;
  return h;
}

void run_diagonal_discrete(const ExperimentConfig& cfg, const std::shared_ptr<const Dataset>& ds, GridResult& g) {
  const DiscreteHyper h = cell_hyper(cfg, g.cell);
  const Vec init = diagonal_init(ds->d(), cfg.alpha);
  TrajectoryLog log;
  if (cfg.scenario == Scenario::smgd_grid) {
    const Eigen::Index d = ds->d();
    log = run_smgd(ds, {init.head(d), init.tail(d)}, h, derive_seed(cfg.master_seed, g.cell.index));
  } else {
    log = run_mgd(ModelSpec::diagonal_net(ds), init, h);
  }
  g.steps = log.terminal_step;
  g.stop_reason = to_string(log.stop_reason);
  g.train_loss = log.final_loss;
  g.crossings = log.total_crossings();
  if (log.stop_reason == StopReason::diverged) {
    g.test_loss = kNaN;
    return;
  }
  BiasReport r = bias_report(log, *ds, cfg.alpha, h, false);
  r.seed = g.cell.seed;
  fill_from_bias(g, r);
  g.bias = std::move(r);
}

void run_diagonal_flow(const ExperimentConfig& cfg, const std::shared_ptr<const Dataset>& ds, GridResult& g) {
  const ModelSpec spec = ModelSpec::diagonal_net(ds);
  const Vec init = diagonal_init(ds->d(), cfg.alpha);
  const ContinuousTrajectory traj =
      g.cell.lambda == 0.0 ? integrate_gf(spec, init, cfg.integrator)
                           : integrate_mgf(spec, g.cell.lambda, {init, Vec::Zero(init.size()), 0.0}, cfg.integrator);
  g.steps = traj.accepted_steps;
  g.stop_reason = to_string(traj.stop_reason);
  g.train_loss = traj.final_loss;
  g.crossings = traj.total_crossings();
  if (traj.stop_reason == StopReason::diverged) {
    g.test_loss = kNaN;
    return;
  }
  BiasReport r = bias_report(traj, *ds, cfg.alpha, false);
  r.seed = g.cell.seed;
  fill_from_bias(g, r);
  g.bias = std::move(r);
}

void run_teacher_student(const ExperimentConfig& cfg, const TeacherStudentInstance& ts, GridResult& g) {
  const TrajectoryLog log = run_mgd(ts.student, ts.student_init, cell_hyper(cfg, g.cell));
  g.steps = log.terminal_step;
  g.stop_reason = to_string(log.stop_reason);
  g.train_loss = log.final_loss;
  if (log.stop_reason == StopReason::diverged) {
    g.test_loss = kNaN;
    return;
  }
  const Vec pred = mlp_forward(std::get<MlpModel>(ts.student.kind()), log.terminal_state, ts.test.features);
  g.test_loss = 0.5 * (pred - ts.test.targets).squaredNorm() / static_cast<double>(pred.size());
}

Vec deep_linear_init(const ExperimentConfig& cfg, Eigen::Index dim, std::uint64_t seed) {
  CounterRng rng(seed, stream::init);
  Vec w(dim);
  for (Eigen::Index i = 0; i < dim; ++i) w(i) = cfg.deep_init_std * rng.normal();
  return w;
}

void run_deep_linear(const ExperimentConfig& cfg, const std::shared_ptr<const Dataset>& ds, GridResult& g) {
  const ModelSpec spec = ModelSpec::deep_linear(cfg.deep_widths, ds);
  const Vec init = deep_linear_init(cfg, spec.parameter_dim(), g.cell.seed);
  const TrajectoryLog log = run_mgd(spec, init, cell_hyper(cfg, g.cell));
  g.steps = log.terminal_step;
  g.stop_reason = to_string(log.stop_reason);
  g.train_loss = log.final_loss;
  if (log.stop_reason == StopReason::diverged) {
    g.test_loss = kNaN;
    return;
  }
  const Vec theta = deep_linear_effective(std::get<MlpModel>(spec.kind()), log.terminal_state);
  g.test_loss = population_test_loss(theta, *ds->ground_truth, ds->mean, ds->stddev);
}

void run_bias_verify_cell(const ExperimentConfig& cfg, const std::shared_ptr<const Dataset>& ds, GridResult& g) {
  if (g.cell.continuous)
    run_diagonal_flow(cfg, ds, g);
  else
    run_diagonal_discrete(cfg, ds, g);
  if (!g.bias) return;
  const BiasReport& r = *g.bias;
  const DualCertificate cert = solve_min_entropy_interpolator(*ds, EntropyScale(r.delta_inf), r.theta_tilde0);
  g.normalized_distance = (r.theta_recovered - cert.theta).norm() / cert.theta.norm();
  g.gf_test_loss = population_test_loss(cert.theta, *ds->ground_truth, ds->mean, ds->stddev);
}

// ---- grid plumbing ---------------------------------------------------------

std::vector<GridCell> lattice_cells(const ExperimentConfig& cfg) {
  std::vector<GridCell> cells;
  for (double gamma : cfg.gammas)
    for (double beta : cfg.betas)
      for (std::uint64_t seed : cfg.seeds) {
        GridCell c;
        c.index = static_cast<int>(cells.size());
        c.gamma = gamma;
        c.beta = beta;
        c.lambda = lambda_of(gamma, beta);
        c.seed = seed;
        cells.push_back(c);
      }
  return cells;
}

std::vector<GridCell> lambda_cells(const ExperimentConfig& cfg, int first_index) {
  std::vector<GridCell> cells;
  for (double lambda : cfg.lambdas)
    for (std::uint64_t seed : cfg.seeds) {
      GridCell c;
      c.index = first_index + static_cast<int>(cells.size());
      c.lambda = lambda;
      c.seed = seed;
      c.continuous = true;
      cells.push_back(c);
    }
  return cells;
}

std::map<std::uint64_t, std::shared_ptr<const Dataset>> sparse_instances(const ExperimentConfig& cfg) {
  std::map<std::uint64_t, std::shared_ptr<const Dataset>> out;
  for (std::uint64_t seed : cfg.seeds) {
    SparseRegressionSpec spec = cfg.data;
    spec.seed = seed;
    out[seed] = std::make_shared<const Dataset>(gen_sparse_regression(spec));
  }
  return out;
}

std::vector<BiasReport> collect_bias(const std::vector<GridResult>& cells) {
  std::vector<BiasReport> out;
  for (const auto& g : cells)
    if (g.ok && g.bias) out.push_back(*g.bias);
  return out;
}

json level_line_json(const std::vector<AggregateRow>& rows) {
  try {
    const LevelLineReport r = level_line_of(rows);
    return {{"ratio", r.ratio}, {"within", r.within}, {"total", r.total}, {"buckets", r.buckets}, {"cells", r.cells}};
  } catch (const std::exception& e) {
    return {{"error", e.what()}};
  }
}

std::string short_num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", x);
  return buf;
}

// ---- quadratic demo --------------------------------------------------------

void write_path_csv(const std::vector<Vec>& path, double dt, const ModelSpec& spec, const std::filesystem::path& file) {
  auto out = open_out(file);
  out << "k,t,w_1,w_2,loss\n";
  for (std::size_t k = 0; k < path.size(); ++k)
    out << k << ',' << format_double(k * dt) << ',' << format_double(path[k](0)) << ','
        << format_double(path[k](1)) << ',' << format_double(network_value(spec, path[k])) << '\n';
}

void run_quadratic_demo(const ExperimentConfig& cfg, ScenarioResult& res) {
  const ModelSpec spec = quadratic_demo_spec();
  const Vec init = quadratic_demo_init();
  const double T = quadratic_demo_horizon;
  const bool write = !cfg.out_dir.empty();
  std::vector<CheckReport> checks;
  json pairs = json::array();

  for (double gamma : cfg.gammas)
    for (double beta : cfg.betas) {
      const std::string tag = "g" + short_num(gamma) + "_b" + short_num(beta);
      const double eps = epsilon_of(gamma, beta), lambda = lambda_of(gamma, beta);
      const long K = static_cast<long>(std::floor(T / eps + 1e-9));
      const HyperPair half = acceleration_pair(gamma, beta, 0.5);
      const HyperPair fast = acceleration_pair(gamma, beta, 2.0);

      const auto mgd = mgd_iterates(spec, init, gamma, beta, K);
      const auto mgd_half = mgd_iterates(spec, init, half.gamma, half.beta, 2 * K);
      const auto mgd_fast = mgd_iterates(spec, init, fast.gamma, fast.beta, K / 2);
      const auto gd = mgd_iterates(spec, init, gamma, 0.0, static_cast<long>(std::floor(T / gamma + 1e-9)));
      const auto gd_fast = mgd_iterates(spec, init, 4.0 * gamma, 0.0, static_cast<long>(std::floor(T / (4.0 * gamma) + 1e-9)));
      IntegratorConfig ic = cfg.integrator;
      ic.max_time = K * eps;
      ic.stop_loss = 0.0;
      ic.sample_times.clear();
      for (long k = 1; k <= K; ++k) ic.sample_times.push_back(k * eps);
      const auto flow = integrate_mgf(spec, lambda, {init, Vec::Zero(2), 0.0}, ic);

      checks.push_back(check_discretization_correspondence(gamma, beta, spec, init, T));
      checks.push_back(check_epsilon_halving(gamma, beta, spec, init, T));
      checks.push_back(check_acceleration_rule(gamma, beta, 2, spec, init, T));
      for (auto& r : check_gd_contrast(gamma, 2, spec, init, T)) checks.push_back(r);
      pairs.push_back({{"gamma", gamma}, {"beta", beta}, {"lambda", lambda}, {"epsilon", eps}, {"tag", tag}});

      if (write) {
        write_path_csv(mgd, eps, spec, cfg.out_dir / ("demo_mgd_" + tag + ".csv"));
        write_path_csv(mgd_half, epsilon_of(half.gamma, half.beta), spec, cfg.out_dir / ("demo_mgd_half_" + tag + ".csv"));
        write_path_csv(mgd_fast, epsilon_of(fast.gamma, fast.beta), spec, cfg.out_dir / ("demo_mgd_accel_" + tag + ".csv"));
        write_path_csv(gd, gamma, spec, cfg.out_dir / ("demo_gd_" + tag + ".csv"));
        write_path_csv(gd_fast, 4.0 * gamma, spec, cfg.out_dir / ("demo_gd_fast_" + tag + ".csv"));
        write_path_csv(flow.states, eps, spec, cfg.out_dir / ("demo_mgf_" + tag + ".csv"));
        for (const char* stem : {"demo_mgd_", "demo_mgd_half_", "demo_mgd_accel_", "demo_gd_", "demo_gd_fast_", "demo_mgf_"})
          res.files.push_back(cfg.out_dir / (stem + tag + ".csv"));
      }
    }

  json jchecks = json::array();
  for (const auto& r : checks)
    jchecks.push_back({{"check", r.name}, {"pass", r.pass}, {"measured", r.measured}, {"threshold", r.threshold}});
  res.summary = {{"pairs", pairs}, {"checks", jchecks}};
  if (write) {
    write_check_csv(checks, cfg.out_dir / "demo_checks.csv");
    res.files.push_back(cfg.out_dir / "demo_checks.csv");
  }
}

std::string fmt_cell(double x) { return std::isnan(x) ? "" : format_double(x); }

}  // namespace

// ---- scenario names ----------------------------------------------------------

std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::quadratic_demo: return "quadratic_demo";
    case Scenario::mgf_lambda_sweep: return "mgf_lambda_sweep";
    case Scenario::mgd_grid: return "mgd_grid";
    case Scenario::smgd_grid: return "smgd_grid";
    case Scenario::teacher_student_grid: return "teacher_student_grid";
    case Scenario::deep_linear_grid: return "deep_linear_grid";
    case Scenario::bias_verify: return "bias_verify";
  }
  return "?";
}

const std::vector<Scenario>& all_scenarios() {
  static const std::vector<Scenario> all{Scenario::quadratic_demo,       Scenario::mgf_lambda_sweep,
                                         Scenario::mgd_grid,             Scenario::smgd_grid,
                                         Scenario::teacher_student_grid, Scenario::deep_linear_grid,
                                         Scenario::bias_verify};
  return all;
}

Scenario parse_scenario(const std::string& name) {
  std::string n = name;
  std::replace(n.begin(), n.end(), '-', '_');
  for (Scenario s : all_scenarios())
    if (to_string(s) == n) return s;
  throw ConfigError("unknown scenario '" + name + "'");
}

// ---- configs -----------------------------------------------------------------

ExperimentConfig default_config(Scenario s) {
  ExperimentConfig cfg;
  cfg.scenario = s;
  cfg.seeds = kFiveSeeds;
  cfg.out_dir = std::filesystem::path("runs") / to_string(s);
  cfg.discrete.max_steps = 1'000'000;
  cfg.discrete.stop_loss = 1e-8;
  cfg.discrete.sample_every = 10'000;
  cfg.discrete.record_theta = false;
  switch (s) {
    case Scenario::quadratic_demo:
      cfg.gammas = {0.01};
      cfg.betas = {0.9};
      cfg.seeds = {0};
      break;
    case Scenario::mgf_lambda_sweep:
      cfg.lambdas = logspace(1e-2, 1.0, 30);
      cfg.lambdas.insert(cfg.lambdas.begin(), 0.0);
      cfg.integrator.stop_loss = 1e-10;
      break;
    case Scenario::mgd_grid:
      cfg.gammas = logspace(1e-3, 1e-1, 9);
      cfg.betas = kBetas;
      break;
    case Scenario::smgd_grid:
      cfg.gammas = logspace(1e-3, 1e-1, 5);
      cfg.betas = kBetas;
      cfg.discrete.batch_size = 5;
      break;
    case Scenario::teacher_student_grid:
      cfg.gammas = logspace(1e-3, 1e-1, 10);
      cfg.betas = kBetas;
      cfg.seeds = {0};
      cfg.discrete.stop_loss = 1e-5;
      cfg.discrete.max_steps = 300'000;
      break;
    case Scenario::deep_linear_grid:
      cfg.gammas = logspace(1e-4, 1e-2, 5);
      cfg.betas = {0.0, 0.3, 0.6, 0.8, 0.9};
      cfg.discrete.max_steps = 1000;
      cfg.discrete.stop_loss = 0.0;
      cfg.discrete.sample_every = 1000;
      break;
    case Scenario::bias_verify:
      cfg.gammas = {0.01, 0.03, 0.1};
      cfg.betas = {0.0, 0.5, 0.9};
      cfg.lambdas = {0.05, 0.1, 0.3};
      cfg.seeds = {0};
      cfg.integrator.stop_loss = 1e-10;
      break;
  }
  return cfg;
}

ExperimentConfig config_from_json(const json& j, std::optional<Scenario> scenario) {
  check_keys(j, {"scenario", "data", "teacher", "alpha", "lambdas", "gammas", "betas", "seeds", "master_seed",
                 "out_dir", "workers", "integrator", "discrete", "deep"},
             "config");
  if (!scenario) {
    if (!j.contains("scenario")) throw ConfigError("config: missing 'scenario'");
    scenario = parse_scenario(j.at("scenario").get<std::string>());
  }
  ExperimentConfig cfg = default_config(*scenario);
  if (j.contains("data")) {
    const json& d = j.at("data");
    check_keys(d, {"n", "d", "s", "mean", "stddev"}, "data");
    read(d, "n", cfg.data.n);
    read(d, "d", cfg.data.d);
    read(d, "s", cfg.data.s);
    read(d, "mean", cfg.data.mean);
    read(d, "stddev", cfg.data.stddev);
  }
  if (j.contains("teacher")) {
    const json& t = j.at("teacher");
    check_keys(t, {"input_dim", "teacher_width", "student_width", "n_samples", "n_test"}, "teacher");
    read(t, "input_dim", cfg.teacher.input_dim);
    read(t, "teacher_width", cfg.teacher.teacher_width);
    read(t, "student_width", cfg.teacher.student_width);
    read(t, "n_samples", cfg.teacher.n_samples);
    read(t, "n_test", cfg.teacher.n_test);
  }
  read(j, "alpha", cfg.alpha);
  read_grid(j, "lambdas", cfg.lambdas);
  read_grid(j, "gammas", cfg.gammas);
  read_grid(j, "betas", cfg.betas);
  read(j, "seeds", cfg.seeds);
  read(j, "master_seed", cfg.master_seed);
  if (j.contains("out_dir")) cfg.out_dir = j.at("out_dir").get<std::string>();
  read(j, "workers", cfg.workers);
  if (j.contains("integrator")) {
    const json& ic = j.at("integrator");
    check_keys(ic, {"rel_tol", "abs_tol", "max_time", "stop_loss", "max_steps", "guard"}, "integrator");
    read(ic, "rel_tol", cfg.integrator.rel_tol);
    read(ic, "abs_tol", cfg.integrator.abs_tol);
    read(ic, "max_time", cfg.integrator.max_time);
    read(ic, "stop_loss", cfg.integrator.stop_loss);
    read(ic, "max_steps", cfg.integrator.max_steps);
    read(ic, "guard", cfg.integrator.guard);
  }
  if (j.contains("discrete")) {
    const json& dc = j.at("discrete");
    check_keys(dc, {"max_steps", "stop_loss", "batch_size", "sampler", "sample_every"}, "discrete");
    read(dc, "max_steps", cfg.discrete.max_steps);
    read(dc, "stop_loss", cfg.discrete.stop_loss);
    read(dc, "batch_size", cfg.discrete.batch_size);
    read(dc, "sample_every", cfg.discrete.sample_every);
    if (dc.contains("sampler")) cfg.discrete.sampler = parse_sampler(dc.at("sampler").get<std::string>());
  }
  if (j.contains("deep")) {
    const json& dl = j.at("deep");
    check_keys(dl, {"widths", "init_std"}, "deep");
    read(dl, "widths", cfg.deep_widths);
    read(dl, "init_std", cfg.deep_init_std);
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path, std::optional<Scenario> scenario) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j, scenario);
}

json to_json(const ExperimentConfig& cfg) {
  return {
      {"scenario", to_string(cfg.scenario)},
      {"data", {{"n", cfg.data.n}, {"d", cfg.data.d}, {"s", cfg.data.s}, {"mean", cfg.data.mean},
                {"stddev", cfg.data.stddev}}},
      {"teacher", {{"input_dim", cfg.teacher.input_dim}, {"teacher_width", cfg.teacher.teacher_width},
                   {"student_width", cfg.teacher.student_width}, {"n_samples", cfg.teacher.n_samples},
                   {"n_test", cfg.teacher.n_test}}},
      {"alpha", cfg.alpha},
      {"lambdas", cfg.lambdas},
      {"gammas", cfg.gammas},
      {"betas", cfg.betas},
      {"seeds", cfg.seeds},
      {"master_seed", cfg.master_seed},
      {"out_dir", cfg.out_dir.string()},
      {"workers", cfg.workers},
      {"integrator", {{"rel_tol", cfg.integrator.rel_tol}, {"abs_tol", cfg.integrator.abs_tol},
                      {"max_time", cfg.integrator.max_time}, {"stop_loss", cfg.integrator.stop_loss},
                      {"max_steps", cfg.integrator.max_steps}, {"guard", cfg.integrator.guard}}},
      {"discrete", {{"max_steps", cfg.discrete.max_steps}, {"stop_loss", cfg.discrete.stop_loss},
                    {"batch_size", cfg.discrete.batch_size}, {"sampler", to_string(cfg.discrete.sampler)},
                    {"sample_every", cfg.discrete.sample_every}}},
      {"deep", {{"widths", cfg.deep_widths}, {"init_std", cfg.deep_init_std}}},
  };
}

void validate(const ExperimentConfig& cfg) {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (cfg.seeds.empty()) fail("seeds must be nonempty");
  if (cfg.workers < 1) fail("workers must be at least 1");
  if (!(cfg.alpha > 0.0)) fail("alpha must be positive");
  const bool lattice = cfg.scenario != Scenario::mgf_lambda_sweep;
  if (lattice && (cfg.gammas.empty() || cfg.betas.empty())) fail("gamma and beta grids must be nonempty");
  if (cfg.scenario == Scenario::mgf_lambda_sweep && cfg.lambdas.empty()) fail("lambda grid must be nonempty");
  for (double g : cfg.gammas)
    if (!(g > 0.0)) fail("gammas must be positive");
  for (double b : cfg.betas)
    if (!(b >= 0.0 && b < 1.0)) fail("betas must lie in [0, 1)");
  for (double l : cfg.lambdas)
    if (!(l >= 0.0)) fail("lambdas must be nonnegative");
  try {
    validate(cfg.integrator);
    DiscreteHyper h = cfg.discrete;
    h.gamma = 1.0;
    h.beta = 0.0;
    validate(h);
  } catch (const ContractError& e) {
    fail(e.what());
  }
  if (cfg.scenario == Scenario::smgd_grid && cfg.discrete.batch_size > cfg.data.n) fail("batch_size exceeds n");
  if (cfg.scenario == Scenario::deep_linear_grid) {
    if (cfg.deep_widths.size() < 2 || cfg.deep_widths.front() != cfg.data.d || cfg.deep_widths.back() != 1)
      fail("deep widths must start at d and end at 1");
    if (!(cfg.deep_init_std > 0.0)) fail("deep init_std must be positive");
  }
}

std::vector<GridResult> run_grid(const std::vector<GridCell>& cells, int workers,
                                 const std::function<void(GridResult&)>& body) {
  std::vector<GridResult> out(cells.size());
  parallel_for(cells.size(), workers, [&](std::size_t i) {
    GridResult& g = out[i];
    g.cell = cells[i];
    const auto t0 = std::chrono::steady_clock::now();
    try {
      body(g);
    } catch (const std::exception& e) {
      g.ok = false;
      g.error = e.what();
      g.bias.reset();
    }
    g.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  });
  return out;
}

// ---- aggregation -------------------------------------------------------------

int ScenarioResult::failed() const {
  return static_cast<int>(std::count_if(cells.begin(), cells.end(), [](const GridResult& g) { return !g.ok; }));
}

std::vector<AggregateRow> aggregate_over_seeds(const std::vector<GridResult>& cells) {
  struct Acc {
    AggregateRow row;
    std::vector<double> test, train, delta, l1;
  };
  std::vector<Acc> groups;
  std::map<std::tuple<double, double, double>, std::size_t> where;
  for (const auto& g : cells) {
    const auto key = std::make_tuple(g.cell.gamma, g.cell.beta, g.cell.lambda);
    auto it = where.find(key);
    if (it == where.end()) {
      it = where.emplace(key, groups.size()).first;
      Acc a;
      a.row.gamma = g.cell.gamma;
      a.row.beta = g.cell.beta;
      a.row.lambda = g.cell.lambda;
      groups.push_back(std::move(a));
    }
    if (!g.ok || !std::isfinite(g.test_loss)) continue;
    Acc& a = groups[it->second];
    a.test.push_back(g.test_loss);
    a.train.push_back(g.train_loss);
    if (g.bias) {
      a.delta.push_back(g.bias->delta_inf.norm());
      a.l1.push_back(g.bias->l1_norm);
    }
  }
  auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
    if (v.empty()) {
      mean = sd = kNaN;
      return;
    }
    mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    sd = 0.0;
    if (v.size() > 1) {
      for (double x : v) sd += (x - mean) * (x - mean);
      sd = std::sqrt(sd / static_cast<double>(v.size() - 1));
    }
  };
  std::vector<AggregateRow> out;
  for (auto& a : groups) {
    a.row.count = static_cast<int>(a.test.size());
    stats(a.test, a.row.test_loss_mean, a.row.test_loss_std);
    stats(a.train, a.row.train_loss_mean, a.row.train_loss_std);
    stats(a.delta, a.row.delta_inf_l2_mean, a.row.delta_inf_l2_std);
    stats(a.l1, a.row.l1_norm_mean, a.row.l1_norm_std);
    out.push_back(a.row);
  }
  return out;
}

LevelLineReport level_line_diagnostic(std::span<const LevelLineCell> cells, int buckets_per_decade) {
  require(buckets_per_decade >= 1, "level_line_diagnostic: need at least one bucket per decade");
  require(cells.size() >= 2, "level_line_diagnostic: degenerate grid (fewer than two cells)");
  std::set<double> betas;
  std::map<long, std::vector<double>> buckets;
  std::vector<double> all;
  for (const auto& c : cells) {
    require(c.gamma > 0.0 && c.beta >= 0.0 && c.beta < 1.0, "level_line_diagnostic: bad cell coordinates");
    require(std::isfinite(c.test_loss) && c.test_loss > 0.0, "level_line_diagnostic: test loss must be positive");
    betas.insert(c.beta);
    const double lambda = lambda_of(c.gamma, c.beta);
    const long b = static_cast<long>(std::floor(buckets_per_decade * std::log10(lambda) + 1e-9));
    const double v = std::log(c.test_loss);
    buckets[b].push_back(v);
    all.push_back(v);
  }
  require(betas.size() >= 2, "level_line_diagnostic: degenerate grid (fewer than two beta values)");
  auto sum_sq_dev = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s;
  };
  LevelLineReport r;
  r.total = sum_sq_dev(all);
  require(r.total > 0.0, "level_line_diagnostic: degenerate grid (constant test loss)");
  for (const auto& [key, v] : buckets) r.within += sum_sq_dev(v);
  r.ratio = r.within / r.total;
  r.buckets = static_cast<int>(buckets.size());
  r.cells = static_cast<int>(cells.size());
  return r;
}

LevelLineReport level_line_of(const std::vector<AggregateRow>& rows) {
  std::vector<LevelLineCell> cells;
  for (const auto& r : rows)
    if (r.count > 0 && r.gamma > 0.0 && std::isfinite(r.test_loss_mean) && r.test_loss_mean > 0.0)
      cells.push_back({r.gamma, r.beta, r.test_loss_mean});
  return level_line_diagnostic(cells);
}

// ---- output ------------------------------------------------------------------

void write_cells_csv(const std::vector<GridResult>& cells, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "index,gamma,beta,lambda,seed,status,stop_reason,steps,train_loss,test_loss,crossings,error\n";
  for (const auto& g : cells) {
    std::string err = g.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out << g.cell.index << ',' << format_double(g.cell.gamma) << ',' << format_double(g.cell.beta) << ','
        << format_double(g.cell.lambda) << ',' << g.cell.seed << ',' << (g.ok ? "ok" : "failed") << ','
        << g.stop_reason << ',' << g.steps << ',' << fmt_cell(g.train_loss) << ',' << fmt_cell(g.test_loss) << ','
        << g.crossings << ',' << err << '\n';
  }
}

void write_aggregate_csv(const std::vector<AggregateRow>& rows, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "gamma,beta,lambda,count,test_loss_mean,test_loss_std,train_loss_mean,train_loss_std,"
         "delta_inf_l2_mean,delta_inf_l2_std,l1_norm_mean,l1_norm_std\n";
  for (const auto& r : rows)
    out << format_double(r.gamma) << ',' << format_double(r.beta) << ',' << format_double(r.lambda) << ','
        << r.count << ',' << fmt_cell(r.test_loss_mean) << ',' << fmt_cell(r.test_loss_std) << ','
        << fmt_cell(r.train_loss_mean) << ',' << fmt_cell(r.train_loss_std) << ','
        << fmt_cell(r.delta_inf_l2_mean) << ',' << fmt_cell(r.delta_inf_l2_std) << ','
        << fmt_cell(r.l1_norm_mean) << ',' << fmt_cell(r.l1_norm_std) << '\n';
}

// ---- driver ------------------------------------------------------------------

ScenarioResult run_scenario(const ExperimentConfig& cfg) {
  validate(cfg);
  ScenarioResult res;
  res.config = cfg;
  const bool write = !cfg.out_dir.empty();
  if (write) std::filesystem::create_directories(cfg.out_dir);
  auto emit = [&](const std::string& name) {
    res.files.push_back(cfg.out_dir / name);
    return cfg.out_dir / name;
  };

  switch (cfg.scenario) {
    case Scenario::quadratic_demo: {
      run_quadratic_demo(cfg, res);
      break;
    }
    case Scenario::mgf_lambda_sweep: {
      const auto data = sparse_instances(cfg);
      res.cells = run_grid(lambda_cells(cfg, 0), cfg.workers,
                            [&](GridResult& g) { run_diagonal_flow(cfg, data.at(g.cell.seed), g); });
      res.aggregate = aggregate_over_seeds(res.cells);
      json thr = json::array();
      for (std::uint64_t seed : cfg.seeds) {
        const Dataset& ds = *data.at(seed);
        const double t = small_lambda_threshold(ds, Vec::Constant(ds.d(), cfg.alpha * cfg.alpha));
        double largest = 0.0;
        std::vector<std::pair<double, long>> runs;
        for (const auto& g : res.cells)
          if (g.cell.seed == seed && g.ok) runs.emplace_back(g.cell.lambda, g.crossings);
        std::sort(runs.begin(), runs.end());
        for (const auto& [l, c] : runs) {
          if (c != 0) break;
          largest = l;
        }
        thr.push_back({{"seed", seed}, {"threshold", t}, {"largest_crossing_free", largest}});
      }
      res.summary = {{"small_lambda", thr}};
      if (write) {
        auto out = open_out(emit("thresholds.csv"));
        out << "seed,threshold,largest_crossing_free\n";
        for (const auto& t : thr)
          out << t["seed"].get<std::uint64_t>() << ',' << format_double(t["threshold"].get<double>()) << ','
              << format_double(t["largest_crossing_free"].get<double>()) << '\n';
      }
      break;
    }
    case Scenario::mgd_grid:
    case Scenario::smgd_grid: {
      const auto data = sparse_instances(cfg);
      res.cells = run_grid(lattice_cells(cfg), cfg.workers,
                            [&](GridResult& g) { run_diagonal_discrete(cfg, data.at(g.cell.seed), g); });
      res.aggregate = aggregate_over_seeds(res.cells);
      res.summary = {{"level_line", level_line_json(res.aggregate)}};
      break;
    }
    case Scenario::teacher_student_grid: {
      std::map<std::uint64_t, TeacherStudentInstance> inst;
      for (std::uint64_t seed : cfg.seeds) {
        TeacherStudentSpec ts = cfg.teacher;
        ts.seed = seed;
        inst.emplace(seed, gen_teacher_student(ts));
      }
      res.cells = run_grid(lattice_cells(cfg), cfg.workers,
                            [&](GridResult& g) { run_teacher_student(cfg, inst.at(g.cell.seed), g); });
      res.aggregate = aggregate_over_seeds(res.cells);
      res.summary = {{"level_line", level_line_json(res.aggregate)}};
      break;
    }
    case Scenario::deep_linear_grid: {
      const auto data = sparse_instances(cfg);
      res.cells = run_grid(lattice_cells(cfg), cfg.workers,
                            [&](GridResult& g) { run_deep_linear(cfg, data.at(g.cell.seed), g); });
      res.aggregate = aggregate_over_seeds(res.cells);
      res.summary = {{"level_line", level_line_json(res.aggregate)}};
      break;
    }
    case Scenario::bias_verify: {
      const auto data = sparse_instances(cfg);
      std::vector<GridCell> cells = lattice_cells(cfg);
      for (const auto& c : lambda_cells(cfg, static_cast<int>(cells.size()))) cells.push_back(c);
      res.cells = run_grid(cells, cfg.workers,
                            [&](GridResult& g) { run_bias_verify_cell(cfg, data.at(g.cell.seed), g); });
      res.aggregate = aggregate_over_seeds(res.cells);
      double worst_nd = 0.0, worst_kkt = 0.0;
      int converged = 0;
      for (const auto& g : res.cells) {
        if (!g.ok || !g.bias || g.bias->stop_reason != StopReason::converged) continue;
        ++converged;
        worst_nd = std::max(worst_nd, g.normalized_distance);
        worst_kkt = std::max(worst_kkt, g.bias->kkt_residual);
      }
      res.summary = {{"converged_runs", converged},
                     {"max_normalized_distance", worst_nd},
                     {"max_kkt_residual", worst_kkt}};
      if (write) {
        auto out = open_out(emit("bias_verify.csv"));
        out << "index,kind,gamma,beta,lambda,seed,stop_reason,crossings,s_source,normalized_distance,"
               "kkt_residual,test_loss,gf_test_loss\n";
        for (const auto& g : res.cells) {
          if (!g.ok || !g.bias) continue;
          out << g.cell.index << ',' << (g.cell.continuous ? "mgf" : "mgd") << ',' << format_double(g.cell.gamma)
              << ',' << format_double(g.cell.beta) << ',' << format_double(g.cell.lambda) << ',' << g.cell.seed
              << ',' << g.stop_reason << ',' << g.crossings << ',' << g.bias->s_source << ','
              << format_double(g.normalized_distance) << ',' << format_double(g.bias->kkt_residual) << ','
              << format_double(g.test_loss) << ',' << format_double(g.gf_test_loss) << '\n';
        }
      }
      break;
    }
  }

  if (!write) return res;
  if (cfg.scenario != Scenario::quadratic_demo) {
    write_cells_csv(res.cells, emit("cells.csv"));
    write_aggregate_csv(res.aggregate, emit("aggregate.csv"));
    const auto reports = collect_bias(res.cells);
    if (!reports.empty()) write_bias_csv(reports, emit("bias.csv"));
  }
  {
    auto out = open_out(emit("summary.json"));
    out << res.summary.dump(2) << '\n';
  }

  json manifest;
  manifest["scenario"] = to_string(cfg.scenario);
  manifest["version"] = MLAB_VERSION;
  manifest["config"] = to_json(cfg);
  manifest["summary"] = res.summary;
  json jcells = json::array();
  for (const auto& g : res.cells) {
    json c = {{"index", g.cell.index}, {"status", g.ok ? "ok" : "failed"}, {"wall_seconds", g.wall_seconds}};
    if (!g.ok) c["error"] = g.error;
    jcells.push_back(c);
  }
  manifest["cells"] = jcells;
  manifest["failed_cells"] = res.failed();
  json files = json::array();
  for (const auto& f : res.files) files.push_back(f.filename().string());
  files.push_back("manifest.json");
  manifest["files"] = files;
  auto out = open_out(cfg.out_dir / "manifest.json");
  out << manifest.dump(2) << '\n';
  res.files.push_back(cfg.out_dir / "manifest.json");
  return res;
}

}  // namespace mlab
