#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "mlab/experiments.hpp"

using namespace mlab;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mlab_test_" + name);
  fs::remove_all(p);
  return p;
}

ExperimentConfig small_grid(const fs::path& out) {
  ExperimentConfig cfg = default_config(Scenario::mgd_grid);
  cfg.gammas = {0.02, 0.05};
  cfg.betas = {0.0, 0.5};
  cfg.seeds = {0, 1};
  cfg.discrete.max_steps = 3000;
  cfg.discrete.stop_loss = 1e-6;
  cfg.out_dir = out;
  return cfg;
}

}  // namespace

TEST(Config, Names) {
  for (Scenario s : all_scenarios()) {
    EXPECT_EQ(parse_scenario(to_string(s)), s);
    std::string kebab = to_string(s);
    std::replace(kebab.begin(), kebab.end(), '_', '-');
    EXPECT_EQ(parse_scenario(kebab), s);
  }
  EXPECT_THROW(parse_scenario("nope"), ConfigError);
}

TEST(Config, Defaults) {
  const ExperimentConfig g = default_config(Scenario::mgd_grid);
  EXPECT_EQ(g.betas, (std::vector<double>{0.0, 0.3, 0.6, 0.8, 0.9, 0.95}));
  EXPECT_EQ(g.seeds, (std::vector<std::uint64_t>{0, 1, 2, 3, 4}));
  EXPECT_EQ(g.data.n, 20);
  EXPECT_EQ(g.data.d, 30);
  EXPECT_EQ(g.data.s, 5);
  EXPECT_EQ(g.data.mean, 1.0);
  EXPECT_EQ(g.alpha, 0.01);
  EXPECT_EQ(g.gammas.size(), 9u);
  EXPECT_NEAR(g.gammas.front(), 1e-3, 1e-18);
  EXPECT_NEAR(g.gammas.back(), 1e-1, 1e-16);
  const ExperimentConfig sweep = default_config(Scenario::mgf_lambda_sweep);
  EXPECT_EQ(sweep.lambdas.front(), 0.0);
  for (Scenario s : all_scenarios()) EXPECT_NO_THROW(validate(default_config(s))) << to_string(s);
}

TEST(Config, JsonOverlayAndRoundTrip) {
  const nlohmann::json j = nlohmann::json::parse(R"({
    "scenario": "mgd-grid",
    "gammas": {"logspace": [0.001, 0.1, 3]},
    "betas": [0.0, 0.9],
    "seeds": [7],
    "data": {"mean": 0.0},
    "discrete": {"max_steps": 10, "sampler": "with_replacement"}
  })");
  const ExperimentConfig cfg = config_from_json(j);
  EXPECT_EQ(cfg.scenario, Scenario::mgd_grid);
  ASSERT_EQ(cfg.gammas.size(), 3u);
  EXPECT_NEAR(cfg.gammas[1], 0.01, 1e-17);
  EXPECT_EQ(cfg.betas, (std::vector<double>{0.0, 0.9}));
  EXPECT_EQ(cfg.seeds, (std::vector<std::uint64_t>{7}));
  EXPECT_EQ(cfg.data.mean, 0.0);
  EXPECT_EQ(cfg.data.n, 20);
  EXPECT_EQ(cfg.discrete.max_steps, 10);
  EXPECT_EQ(cfg.discrete.sampler, Sampler::with_replacement);

  const ExperimentConfig again = config_from_json(to_json(cfg));
  EXPECT_EQ(to_json(again), to_json(cfg));
}

TEST(Config, Rejections) {
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"scenario": "mgd_grid", "gamma": [1]})")), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"gammas": [1]})")), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"scenario": "mgd_grid", "data": {"q": 1}})")),
               ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"scenario": "mgd_grid", "alpha": "x"})")), ConfigError);
  ExperimentConfig cfg = default_config(Scenario::mgd_grid);
  cfg.betas = {1.0};
  EXPECT_THROW(validate(cfg), ConfigError);
  cfg = default_config(Scenario::mgd_grid);
  cfg.seeds.clear();
  EXPECT_THROW(validate(cfg), ConfigError);
  cfg = default_config(Scenario::mgf_lambda_sweep);
  cfg.lambdas.clear();
  EXPECT_THROW(validate(cfg), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}

TEST(LevelLine, ExactFunctionOfLambda) {
  std::vector<LevelLineCell> matched;
  for (double lam : {1e-2, 1e-1, 1.0})
    for (double b : {0.0, 0.5, 0.9}) matched.push_back({lam * (1 - b) * (1 - b), b, 1.0 + lam});
  const LevelLineReport r = level_line_diagnostic(matched);
  EXPECT_NEAR(r.ratio, 0.0, 1e-20);
  EXPECT_EQ(r.buckets, 3);
  EXPECT_EQ(r.cells, 9);
}

TEST(LevelLine, FunctionOfGammaOnly) {
  std::vector<LevelLineCell> cells;
  for (double lam : {1e-2, 1e-1, 1.0})
    for (double b : {0.0, 0.5, 0.9}) {
      const double g = lam * (1 - b) * (1 - b);
      cells.push_back({g, b, g});
    }
  const LevelLineReport r = level_line_diagnostic(cells);
  // within each bucket log loss = log lambda + 2 log(1 - b); compute the share directly
  const double lb[3] = {0.0, 2 * std::log(0.5), 2 * std::log(0.1)};
  const double mb = (lb[0] + lb[1] + lb[2]) / 3;
  double within = 0.0;
  for (double v : lb) within += 3 * (v - mb) * (v - mb);
  std::vector<double> all;
  for (const auto& c : cells) all.push_back(std::log(c.test_loss));
  double mean = 0.0;
  for (double v : all) mean += v / 9;
  double total = 0.0;
  for (double v : all) total += (v - mean) * (v - mean);
  EXPECT_GT(r.ratio, 0.0);
  EXPECT_NEAR(r.ratio, within / total, 1e-12);
}

TEST(LevelLine, DegenerateGridsThrow) {
  const std::vector<LevelLineCell> one_beta{{0.1, 0.5, 1.0}, {0.2, 0.5, 2.0}};
  EXPECT_THROW(level_line_diagnostic(one_beta), ContractError);
  const std::vector<LevelLineCell> flat{{0.1, 0.0, 1.0}, {0.2, 0.5, 1.0}};
  EXPECT_THROW(level_line_diagnostic(flat), ContractError);
  const std::vector<LevelLineCell> neg{{0.1, 0.0, -1.0}, {0.2, 0.5, 1.0}};
  EXPECT_THROW(level_line_diagnostic(neg), ContractError);
  EXPECT_THROW(level_line_diagnostic(std::span<const LevelLineCell>{}), ContractError);
}

TEST(Aggregate, MeanAndSampleStd) {
  std::vector<GridResult> cells(4);
  const double losses[4] = {1.0, 3.0, 5.0, std::nan("")};
  for (int i = 0; i < 4; ++i) {
    cells[i].cell = {i, 0.1, 0.5, 0.4, static_cast<std::uint64_t>(i), false};
    cells[i].test_loss = losses[i];
    cells[i].train_loss = 2.0 * i;
  }
  cells[2].ok = false;
  const auto rows = aggregate_over_seeds(cells);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].count, 2);
  EXPECT_DOUBLE_EQ(rows[0].test_loss_mean, 2.0);
  EXPECT_DOUBLE_EQ(rows[0].test_loss_std, std::sqrt(2.0));
  EXPECT_TRUE(std::isnan(rows[0].delta_inf_l2_mean));
}

TEST(Grid, FailuresAreRecorded) {
  std::vector<GridCell> cells(5);
  for (int i = 0; i < 5; ++i) cells[i].index = i;
  const auto out = run_grid(cells, 2, [](GridResult& g) {
    if (g.cell.index == 3) throw std::runtime_error("boom");
    g.test_loss = g.cell.index;
  });
  ASSERT_EQ(out.size(), 5u);
  for (int i = 0; i < 5; ++i) {
    EXPECT_EQ(out[i].cell.index, i);
    EXPECT_EQ(out[i].ok, i != 3);
  }
  EXPECT_EQ(out[3].error, "boom");
  EXPECT_EQ(out[4].test_loss, 4.0);
}

TEST(Scenario, GridRerunIsByteIdentical) {
  const fs::path a = scratch("grid_a"), b = scratch("grid_b");
  ExperimentConfig cfg = small_grid(a);
  const ScenarioResult ra = run_scenario(cfg);
  cfg.out_dir = b;
  cfg.workers = 3;
  const ScenarioResult rb = run_scenario(cfg);
  EXPECT_EQ(ra.failed(), 0);
  EXPECT_EQ(ra.cells.size(), 8u);
  EXPECT_EQ(ra.aggregate.size(), 4u);
  for (const char* f : {"cells.csv", "aggregate.csv", "bias.csv", "summary.json"}) {
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  ASSERT_TRUE(fs::exists(a / "manifest.json"));
  const auto manifest = nlohmann::json::parse(slurp(a / "manifest.json"));
  EXPECT_EQ(manifest.at("config").at("scenario"), "mgd_grid");
  EXPECT_EQ(manifest.at("cells").size(), 8u);
  EXPECT_TRUE(manifest.contains("version"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Scenario, QuadraticDemo) {
  const fs::path out = scratch("demo");
  ExperimentConfig cfg = default_config(Scenario::quadratic_demo);
  cfg.out_dir = out;
  const ScenarioResult r = run_scenario(cfg);
  EXPECT_EQ(r.failed(), 0);
  std::ifstream in(out / "demo_checks.csv");
  std::string line;
  std::getline(in, line);
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    EXPECT_NE(line.find(",pass,"), std::string::npos) << line;
  }
  EXPECT_GE(rows, 4);
  fs::remove_all(out);
}

TEST(Scenario, SweepAtZeroIsGradientFlow) {
  const fs::path out = scratch("sweep0");
  ExperimentConfig cfg = default_config(Scenario::mgf_lambda_sweep);
  cfg.lambdas = {0.0};
  cfg.seeds = {0};
  cfg.integrator.stop_loss = 1e-8;
  cfg.out_dir = out;
  const ScenarioResult r = run_scenario(cfg);
  ASSERT_EQ(r.cells.size(), 1u);
  ASSERT_TRUE(r.cells[0].ok) << r.cells[0].error;
  ASSERT_TRUE(r.cells[0].bias);
  EXPECT_EQ(r.cells[0].bias->s_source, "conserved");
  EXPECT_EQ(r.cells[0].crossings, 0);
  EXPECT_TRUE(fs::exists(out / "thresholds.csv"));
  fs::remove_all(out);
}

TEST(Scenario, BadCellDoesNotAbort) {
  const fs::path out = scratch("diverge");
  ExperimentConfig cfg = small_grid(out);
  cfg.gammas = {0.02, 50.0};
  cfg.betas = {0.0, 0.5};
  cfg.seeds = {0};
  const ScenarioResult r = run_scenario(cfg);
  ASSERT_EQ(r.cells.size(), 4u);
  for (const auto& c : r.cells)
    if (c.cell.gamma == 50.0) {
      EXPECT_EQ(c.stop_reason, "diverged");
      EXPECT_TRUE(std::isnan(c.test_loss));
    } else {
      EXPECT_TRUE(c.ok);
    }
  fs::remove_all(out);
}
