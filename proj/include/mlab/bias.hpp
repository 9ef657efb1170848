#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "mlab/model.hpp"
#include "mlab/optim_continuous.hpp"
#include "mlab/optim_discrete.hpp"
#include "mlab/residues.hpp"

namespace mlab {

/// Per-coordinate scale Delta > 0 of the hyperbolic entropy.
struct EntropyScale {
  Vec delta;

  explicit EntropyScale(Vec d);
  static EntropyScale uniform(Eigen::Index dim, double value);
};

/// sign(x) ln(|x| + sqrt(x^2 + 1)), accurate for tiny and huge |x|.
double stable_asinh(double x);

/// 1/4 sum [2 theta asinh(2 theta / Delta) - sqrt(4 theta^2 + Delta^2) + Delta]
double hyperbolic_entropy(const Vec& theta, const EntropyScale& scale);
/// 1/2 asinh(2 theta / Delta)
Vec grad_hyperbolic_entropy(const Vec& theta, const EntropyScale& scale);
/// 1 / sqrt(4 theta^2 + Delta^2)
Vec hess_diag(const Vec& theta, const EntropyScale& scale);
double bregman_divergence(const Vec& theta1, const Vec& theta2, const EntropyScale& scale);

/// psi(theta) / (1/2 sum ln(1/Delta_i) |theta_i|) - 1
double entropy_l1_asymptotic_gap(const Vec& theta, const EntropyScale& scale);

/// n * min(Delta_0) / |y|^2
double small_lambda_threshold(const Dataset& ds, const Vec& delta0);

/// Orthonormal basis of ker X from a column-pivoted QR of X^T.
class NullSpace {
 public:
  explicit NullSpace(const Mat& X);
  const Mat& basis() const { return Z_; }
  Eigen::Index rank() const { return rank_; }
  /// |Z^T g| / max(|g|, 1e-30)
  double relative_projection(const Vec& g) const;

 private:
  Mat Z_;
  Eigen::Index rank_ = 0;
};

double kkt_residual(const Dataset& ds, const Vec& theta, const EntropyScale& scale, const Vec& theta_tilde0);
double kkt_residual(const NullSpace& ns, const Vec& theta, const EntropyScale& scale, const Vec& theta_tilde0);

class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double best_residual)
      : std::runtime_error(what), best_(best_residual) {}
  double best_residual() const { return best_; }

 private:
  double best_;
};

struct DualCertificate {
  Vec nu;
  Vec theta;
  double feasibility = 0.0;  // |X theta - y| / |y|
  double stationarity = 0.0;
  int iterations = 0;
  bool warm_started = false;
};

struct DualSolverOptions {
  double tol = 1e-12;
  int max_iter = 200;
  double max_growth = 30.0;
  int warmup_steps = 20;
};

/// argmin over {X theta = y} of D_psi(theta, theta_tilde0) at the given scale,
/// through damped Newton on the dual variable nu with
///   theta(nu) = Delta/2 sinh(2 (X^T nu + 1/2 asinh(2 theta_tilde0 / Delta))).
DualCertificate solve_min_entropy_interpolator(const Dataset& ds, const EntropyScale& scale,
                                               const Vec& theta_tilde0, const DualSolverOptions& opt = {});

struct BiasReport {
  // Run coordinates.
  double lambda = 0.0;
  double gamma = 0.0;
  double beta = 0.0;
  std::uint64_t seed = 0;
  double alpha = 0.0;
  bool continuous = false;

  Vec delta0;
  Vec delta_inf;
  Vec s_plus;
  Vec s_minus;
  Vec theta_tilde0;
  Vec theta_recovered;
  long crossings_plus = 0;
  long crossings_minus = 0;
  /// Where S came from: residues, quadrature, gradient_integral or conserved.
  std::string s_source;

  double kkt_residual = 0.0;
  double test_loss = 0.0;
  double l1_norm = 0.0;
  double train_loss_final = 0.0;
  /// Relative gap between delta_inf and |w+ w-| at the last iterate.
  double delta_terminal_gap = 0.0;
  /// Residue identity violation carried over from the run.
  double identity_violation = 0.0;
  StopReason stop_reason = StopReason::converged;

  bool crossing_free() const { return crossings_plus + crossings_minus == 0; }
};

/// Discrete run on a diagonal network (requires residue bookkeeping).
BiasReport bias_report(const TrajectoryLog& log, const Dataset& ds, double alpha, const DiscreteHyper& h,
                       bool require_converged = true);
/// Continuous run; GF runs report S = 0.
BiasReport bias_report(const ContinuousTrajectory& traj, const Dataset& ds, double alpha,
                       bool require_converged = true);

/// theta_tilde0 = 1/4 (w+0^2 exp(-2 S+) - w-0^2 exp(-2 S-))
Vec perturbed_initialisation(const PMState& w0, const Vec& s_plus, const Vec& s_minus);

void write_bias_csv(const std::vector<BiasReport>& reports, const std::filesystem::path& path);
void write_bias_json(const std::vector<BiasReport>& reports, const std::filesystem::path& path);
std::string bias_csv_header();
std::string bias_csv_row(const BiasReport& r);

}  // namespace mlab
