#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "mlab/bias.hpp"
#include "mlab/model.hpp"
#include "mlab/optim_continuous.hpp"
#include "mlab/optim_discrete.hpp"

namespace mlab {

/// Tolerances used by the checks below. Change them here and nowhere else.
///
///   name                       value   bound
///   correspondence             5e-2    deviation <=
///   euler_flow                 1e-3    deviation <=   (beta = 0, tiny gamma)
///   halving_ratio              1.5     ratio >=
///   acceleration               5e-2    deviation <=
///   gd_contrast                5e-2    matched <=, unmatched >=
///   time_rescaling             1e-6    deviation <=
///   gf_drift                   1e-8    relative drift <=
///   energy_slack               10      multiples of abs_tol
///   identity                   1e-7    relative violation <=
///   identity_gd                1e-9    relative violation <=   (beta = 0)
///   normalized_distance        1e-2    <
///   kkt                        1e-3    <=
///   dual_feasibility           1e-10   <=
///   dual_kkt                   1e-8    <=
///   dual_endpoint              1e-3    <=
///   level_line_diagonal        0.2     ratio <=
///   level_line_teacher         0.3     ratio <=
///   gradient                   1e-5    relative error <
namespace thresholds {
inline constexpr double correspondence = 5e-2;
inline constexpr double euler_flow = 1e-3;
inline constexpr double halving_ratio = 1.5;
inline constexpr double acceleration = 5e-2;
inline constexpr double gd_contrast = 5e-2;
inline constexpr double time_rescaling = 1e-6;
inline constexpr double gf_drift = 1e-8;
inline constexpr double energy_slack = 10.0;
inline constexpr double identity = 1e-7;
inline constexpr double identity_gd = 1e-9;
inline constexpr double normalized_distance = 1e-2;
inline constexpr double kkt = 1e-3;
inline constexpr double dual_feasibility = 1e-10;
inline constexpr double dual_kkt = 1e-8;
inline constexpr double dual_endpoint = 1e-3;
inline constexpr double level_line_diagonal = 0.2;
inline constexpr double level_line_teacher = 0.3;
inline constexpr double gradient = 1e-5;
}  // namespace thresholds

enum class Bound { at_most, below, at_least };

struct CheckReport {
  std::string name;
  bool pass = false;
  double measured = 0.0;
  double threshold = 0.0;
  Bound bound = Bound::at_most;
  /// FNV-1a hash of the check parameters.
  std::string context;
  std::string detail;
};

/// Builds a report whose status follows from measured vs threshold. NaN fails.
CheckReport make_report(std::string name, double measured, double threshold, Bound bound, std::string context,
                        std::string detail = {});

std::string fnv1a_hex(const std::string& text);
std::string to_string(Bound b);

// The two-dimensional quadratic used for the trajectory-level checks:
// A = R diag(1, 0.1) R^T with R a rotation by 0.5 rad, b = 0, w_0 = (1, 1).
ModelSpec quadratic_demo_spec();
Vec quadratic_demo_init();
inline constexpr double quadratic_demo_horizon = 60.0;

/// Iterates w_0 .. w_K of full-batch MGD, stored densely.
std::vector<Vec> mgd_iterates(const ModelSpec& spec, const Vec& init, double gamma, double beta, long steps);

/// sup_k |w_k - w(k eps)| / (1 + |w(k eps)|) between MGD(gamma, beta) and MGF
/// at the matching lambda (primary or central map), for k eps <= horizon.
CheckReport check_discretization_correspondence(double gamma, double beta, const ModelSpec& spec, const Vec& init,
                                                double horizon, LambdaMap map = LambdaMap::primary,
                                                double threshold = thresholds::correspondence);

/// Deviation at (gamma, beta) divided by the deviation at the pair with half
/// the time step and the same lambda.
CheckReport check_epsilon_halving(double gamma, double beta, const ModelSpec& spec, const Vec& init, double horizon);

/// Compares w_{rho k}(gamma, beta) with w_k(rho^2 gamma, 1 - rho (1 - beta)).
CheckReport check_acceleration_rule(double gamma, double beta, int rho, const ModelSpec& spec, const Vec& init,
                                    double horizon);

/// GD(rho^2 gamma) at step k against GD(gamma) at step rho^2 k (must match)
/// and at step rho k (must not).
std::vector<CheckReport> check_gd_contrast(double gamma, int rho, const ModelSpec& spec, const Vec& init,
                                           double horizon);

CheckReport check_time_rescaling(double a, double b, const ModelSpec& spec, const SecondOrderState& init,
                                 const IntegratorConfig& cfg);

struct ConservationConfig {
  double alpha = 0.01;
  IntegratorConfig gf;
  std::vector<double> mgf_lambdas{0.1, 1.0};
  IntegratorConfig mgf;
  std::vector<DiscreteHyper> mgd_runs;
  int workers = 1;
};

/// Diagonal-net initialisation u = alpha 1, v = 0 as a [u; v] vector.
Vec diagonal_init(Eigen::Index d, double alpha);

/// GF balancedness drift, MGF energy decay, finite-N identity on the MGD
/// runs, and the no-crossing contraction of every crossing-free run.
std::vector<CheckReport> check_conservation_suite(std::shared_ptr<const Dataset> instance,
                                                  const ConservationConfig& cfg);

struct SmallLambdaResult {
  CheckReport report;
  double threshold_lambda = 0.0;
  /// Largest grid lambda whose run had no crossing, scanning upwards.
  double largest_crossing_free = 0.0;
  std::vector<long> crossings;  // per grid entry
};

/// Runs MGF at every lambda of the grid and counts crossings for the ones at
/// or below n min(Delta_0) / |y|^2 (measured: total crossings, threshold 0).
SmallLambdaResult check_small_lambda_regime(std::shared_ptr<const Dataset> instance,
                                            const std::vector<double>& lambda_grid, double alpha,
                                            const IntegratorConfig& cfg, int workers = 1);

/// |theta_rec - theta_gf| / |theta_gf| with theta_gf the minimum-entropy
/// interpolator at (delta_inf, theta_tilde0).
double normalized_distance(const BiasReport& r, const Dataset& ds);

/// Normalized distance and KKT residual of a converged bias report.
std::vector<CheckReport> check_implicit_bias(const BiasReport& r, const Dataset& ds);

struct DualSuiteResult {
  std::vector<CheckReport> reports;
  double max_feasibility = 0.0;
  double max_kkt = 0.0;
  double l2_endpoint_error = 0.0;
  double l1_endpoint_error = 0.0;     // relative gap in l1 norm
  double l1_endpoint_distance = 0.0;  // relative l2 distance, reported only
};

/// Random feasible instances with n < d <= 30, plus the two endpoint limits:
/// Delta = 1e6 against the minimum-norm solution, and Delta = 1e-10 against
/// the optimal value of basis pursuit on sparse-regression instances.
DualSuiteResult check_dual_solver(int instances, std::uint64_t seed);

/// Minimum l1-norm interpolator by a dense simplex method (small problems).
Vec basis_pursuit(const Mat& X, const Vec& y);

/// Central finite differences along random unit directions; the error is
/// normalised by |grad F|. ReLU probes stay clear of kinks.
CheckReport check_gradients(const ModelSpec& spec, int probes, std::uint64_t seed, std::string name);

struct SuiteConfig {
  std::uint64_t seed = 0;
  double alpha = 0.01;
  int workers = 1;
  /// Shortens the MGF runs of the suite (loss level at which they stop).
  double mgf_stop_loss = 1e-10;
};

/// Every probe above on the default instances.
std::vector<CheckReport> run_verify_suite(const SuiteConfig& cfg);

/// Columns: check, status, measured, threshold, bound, context, detail.
void write_check_csv(const std::vector<CheckReport>& reports, const std::filesystem::path& path);

}  // namespace mlab
