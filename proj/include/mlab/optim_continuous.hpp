#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "mlab/dopri5.hpp"
#include "mlab/model.hpp"
#include "mlab/optim_discrete.hpp"

namespace mlab {

struct SecondOrderState {
  Vec position;
  Vec velocity;
  double t = 0.0;
};

struct IntegratorConfig {
  double rel_tol = 1e-10;
  double abs_tol = 1e-12;
  double max_time = 1e7;
  double stop_loss = 1e-14;
  double initial_step = 0.0;
  /// Evenly spaced samples on [0, max_time] (used when sample_times is empty).
  int dense_sample_count = 0;
  /// Explicit sample times (sorted); each is evaluated on the dense output.
  std::vector<double> sample_times;
  /// Additionally sample every this many accepted steps (0 disables).
  long sample_every_steps = 0;
  long max_steps = 100'000'000;
  /// Quadrature is suspended for a coordinate while |w| drops below this.
  double guard = 1e-12;
};

void validate(const IntegratorConfig& cfg);

struct CrossingEvent {
  double t;
  int coordinate;
  int branch;     // +1 for w+, -1 for w-
  int direction;  // +1 when the coordinate becomes positive
};

struct ContinuousTrajectory {
  double lambda = 0.0;
  bool diagonal = false;

  std::vector<double> times;
  std::vector<Vec> states;  // positions; [u; v] for diagonal nets
  std::vector<double> losses;
  std::vector<double> energies;
  std::vector<Vec> balancedness_samples;
  std::vector<long> crossings_plus_total;
  std::vector<long> crossings_minus_total;

  std::vector<CrossingEvent> crossings;
  Eigen::VectorXi crossings_plus;
  Eigen::VectorXi crossings_minus;

  // Diagonal nets: lambda * int (w'/w)^2 dt per branch, the discounted
  // variant used by the finite-time identity, and G = int grad L dt.
  Vec quad_plus, quad_minus;
  Vec quad_discounted;
  Vec grad_integral;
  Eigen::VectorXi suspended_steps;  // per coordinate, steps left out of the quadrature
  double identity_violation = 0.0;

  PMState initial_pm;
  PMState initial_pm_velocity;
  PMState terminal_pm;
  PMState terminal_pm_velocity;

  Vec terminal_position;
  Vec terminal_velocity;
  double terminal_time = 0.0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  StopReason stop_reason = StopReason::max_steps;
  std::optional<double> diverged_at;

  double energy_max_increase = 0.0;  // max over accepted steps of E(t_{k+1}) - E(t_k)
  long accepted_steps = 0;
  long rejected_steps = 0;

  long total_crossings() const;
  /// Quadrature residue sums including the boundary term lambda * (rho_T - rho_0).
  Vec s_plus_quadrature() const;
  Vec s_minus_quadrature() const;
  /// Exact sums -ln|w_{+,T} / w_{+,0}| - G and -ln|w_{-,T} / w_{-,0}| + G.
  Vec s_plus_exact() const;
  Vec s_minus_exact() const;
};

/// (w', -(w' + grad F(w)) / lambda)
std::pair<Vec, Vec> mgf_rhs(const ModelSpec& spec, double lambda, const SecondOrderState& state);

ContinuousTrajectory integrate_mgf(const ModelSpec& spec, double lambda, const SecondOrderState& init,
                                   const IntegratorConfig& cfg);
ContinuousTrajectory integrate_gf(const ModelSpec& spec, const Vec& init, const IntegratorConfig& cfg);

/// a w'' + b w' + grad F(w) = 0; a = 0 gives a first-order flow.
ContinuousTrajectory integrate_damped(const ModelSpec& spec, double a, double b, const SecondOrderState& init,
                                      const IntegratorConfig& cfg);

/// F(w) + lambda / 2 * |w'|^2
double energy(const ModelSpec& spec, double lambda, const SecondOrderState& state);

/// Initial MGF velocity matching MGD started from (w_0, w_1).
Vec mgf_initial_velocity(const Vec& w1, const Vec& w0, double gamma, double beta);

struct DeviationReport {
  double max_abs = 0.0;
  double max_rel = 0.0;
  long samples = 0;
};

/// Integrates a w'' + b w' + grad F = 0 and MGF(a / b^2) with initial
/// velocity scaled by b, and compares w(b t) against the MGF solution at the
/// configured sample times.
DeviationReport time_rescaled_equivalence(double a, double b, const ModelSpec& spec, const SecondOrderState& init,
                                          const IntegratorConfig& cfg);

/// Columns: t, loss, energy, delta_min, delta_l2, crossings_plus_total, crossings_minus_total.
void write_continuous_csv(const ContinuousTrajectory& traj, const std::filesystem::path& path);

}  // namespace mlab
