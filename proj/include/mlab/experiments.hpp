#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlab/bias.hpp"
#include "mlab/data.hpp"
#include "mlab/optim_continuous.hpp"
#include "mlab/optim_discrete.hpp"

namespace mlab {

enum class Scenario {
  quadratic_demo,
  mgf_lambda_sweep,
  mgd_grid,
  smgd_grid,
  teacher_student_grid,
  deep_linear_grid,
  bias_verify,
};

std::string to_string(Scenario s);
/// Accepts both snake_case and kebab-case names.
Scenario parse_scenario(const std::string& name);
const std::vector<Scenario>& all_scenarios();

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
  Scenario scenario = Scenario::mgd_grid;
  SparseRegressionSpec data;
  TeacherStudentSpec teacher;
  double alpha = 0.01;

  // Grids: either a lambda list (mgf_lambda_sweep; also MGF rows of
  // bias_verify) or a gamma x beta lattice.
  std::vector<double> lambdas;
  std::vector<double> gammas;
  std::vector<double> betas;
  std::vector<std::uint64_t> seeds;
  /// Root of the per-cell sampling streams (SMGD batches).
  std::uint64_t master_seed = 0;

  std::filesystem::path out_dir = "runs";
  int workers = 1;
  IntegratorConfig integrator;
  DiscreteHyper discrete;

  std::vector<int> deep_widths{30, 60, 120, 60, 1};
  double deep_init_std = 0.1;
};

/// Scenario defaults; see the README for the values.
ExperimentConfig default_config(Scenario s);

/// Overlays the keys present in `j` on default_config(scenario). The scenario
/// comes from `j["scenario"]` unless given explicitly. Unknown keys are errors.
ExperimentConfig config_from_json(const nlohmann::json& j, std::optional<Scenario> scenario = std::nullopt);
ExperimentConfig load_config(const std::filesystem::path& path, std::optional<Scenario> scenario = std::nullopt);
nlohmann::json to_json(const ExperimentConfig& cfg);

/// Throws ConfigError.
void validate(const ExperimentConfig& cfg);

struct GridCell {
  int index = 0;
  double gamma = 0.0;  // 0 for lambda-indexed cells
  double beta = 0.0;
  double lambda = 0.0;
  std::uint64_t seed = 0;
  bool continuous = false;
};

struct GridResult {
  GridCell cell;
  bool ok = true;
  std::string error;
  std::optional<BiasReport> bias;
  std::string stop_reason;
  long steps = 0;
  double train_loss = 0.0;
  double test_loss = 0.0;
  long crossings = 0;
  /// bias_verify only.
  double normalized_distance = 0.0;
  double gf_test_loss = 0.0;
  double wall_seconds = 0.0;
};

struct AggregateRow {
  double gamma = 0.0;
  double beta = 0.0;
  double lambda = 0.0;
  int count = 0;  // successful seeds
  double test_loss_mean = 0.0, test_loss_std = 0.0;
  double train_loss_mean = 0.0, train_loss_std = 0.0;
  double delta_inf_l2_mean = 0.0, delta_inf_l2_std = 0.0;  // NaN without bias reports
  double l1_norm_mean = 0.0, l1_norm_std = 0.0;
};

/// Runs body(result) for every cell on up to `workers` threads. Exceptions
/// mark the cell as failed; the other cells still run.
std::vector<GridResult> run_grid(const std::vector<GridCell>& cells, int workers,
                                 const std::function<void(GridResult&)>& body);

/// Groups successful cells by (gamma, beta, lambda) in order of first
/// appearance; mean and sample standard deviation over seeds.
std::vector<AggregateRow> aggregate_over_seeds(const std::vector<GridResult>& cells);

struct LevelLineCell {
  double gamma;
  double beta;
  double test_loss;
};

struct LevelLineReport {
  double ratio = 0.0;
  double within = 0.0;
  double total = 0.0;
  int buckets = 0;
  int cells = 0;
};

/// Buckets cells by lambda = gamma / (1 - beta)^2 on a log grid and returns
/// the within-bucket share of the variance of log test loss. Throws
/// ContractError on a degenerate grid (fewer than two beta values, a
/// nonpositive loss, or zero total variance).
LevelLineReport level_line_diagnostic(std::span<const LevelLineCell> cells, int buckets_per_decade = 8);

/// Level-line report on the seed-averaged test losses of a lattice grid;
/// diverged and failed cells are left out.
LevelLineReport level_line_of(const std::vector<AggregateRow>& rows);

struct ScenarioResult {
  ExperimentConfig config;
  std::vector<GridResult> cells;
  std::vector<AggregateRow> aggregate;
  /// Scenario-specific results (deviations, thresholds, level-line ratio).
  nlohmann::json summary;
  std::vector<std::filesystem::path> files;
  int failed() const;
};

/// Runs every cell and writes the scenario's CSVs plus manifest.json into
/// cfg.out_dir (skipped when out_dir is empty).
ScenarioResult run_scenario(const ExperimentConfig& cfg);

/// Columns: index, gamma, beta, lambda, seed, status, stop_reason, steps,
/// train_loss, test_loss, crossings, error.
void write_cells_csv(const std::vector<GridResult>& cells, const std::filesystem::path& path);
void write_aggregate_csv(const std::vector<AggregateRow>& rows, const std::filesystem::path& path);

}  // namespace mlab
