#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mlab/model.hpp"
#include "mlab/residues.hpp"

namespace mlab {

enum class Sampler { with_replacement, without_replacement_cyclic };
enum class StopReason { converged, max_steps, diverged };

std::string to_string(StopReason r);
std::string to_string(Sampler s);

struct DiscreteHyper {
  double gamma = 1e-3;
  double beta = 0.0;
  int batch_size = 0;  // 0 means full batch
  Sampler sampler = Sampler::without_replacement_cyclic;
  long max_steps = 1'000'000;
  double stop_loss = 1e-8;
  long sample_every = 100;
  bool record_theta = true;
};

void validate(const DiscreteHyper& h);

class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(long step)
      : std::runtime_error("MGD diverged at step " + std::to_string(step)), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

/// w_k - gamma * grad + beta * (w_k - w_prev). Throws DivergenceError(step)
/// if the result is not finite.
Vec mgd_step(const Vec& w_k, const Vec& w_prev, const Vec& grad, const DiscreteHyper& h, long step = 0);

struct TrajectoryLog {
  // Samples. `steps[j]` is the iterate index k of sample j (w_1 = w_0 is step 1).
  std::vector<long> steps;
  std::vector<Vec> states;  // D-vectors; [u; v] for diagonal nets
  std::vector<double> losses;
  std::vector<Vec> balancedness_samples;         // diagonal nets only
  std::vector<long> crossings_plus_total;        // cumulative, per sample
  std::vector<long> crossings_minus_total;

  // Diagonal-net bookkeeping.
  bool diagonal = false;
  Eigen::VectorXi crossings_plus;   // per coordinate
  Eigen::VectorXi crossings_minus;
  long zero_perturbations = 0;
  std::optional<ResidueAccumulator> residues;
  double identity_violation = 0.0;  // max relative violation over all steps
  PMState terminal_pm;

  Vec terminal_state;
  long terminal_step = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  StopReason stop_reason = StopReason::max_steps;
  std::optional<long> diverged_at;

  long total_crossings() const;
};

/// Full-batch MGD(gamma, beta) from w_0 = w_1 = init. Diagonal networks are
/// iterated in (w+, w-) coordinates, which is algebraically the same recursion
/// and keeps the residue bookkeeping exact.
TrajectoryLog run_mgd(const ModelSpec& spec, const Vec& init, const DiscreteHyper& h);

/// Stochastic MGD on a diagonal network. With a full batch it defers to
/// run_mgd and is bit-identical to it.
TrajectoryLog run_smgd(std::shared_ptr<const Dataset> data, const WeightState& init, const DiscreteHyper& h,
                       std::uint64_t seed);

/// Generates the batch index sequence used by run_smgd (exposed for tests).
class BatchSampler {
 public:
  BatchSampler(int n, int batch_size, Sampler kind, std::uint64_t seed);
  const std::vector<int>& next();

 private:
  void refill();
  int n_, b_;
  Sampler kind_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<int> perm_;
  std::size_t pos_ = 0;
  std::vector<int> batch_;
  std::uint64_t draws_ = 0;
};

enum class LambdaMap { primary, central };

/// gamma / (1 - beta)^2, or (1 + beta) gamma / (2 (1 - beta)^2) for the
/// central-difference discretisation.
double lambda_of(double gamma, double beta, LambdaMap map = LambdaMap::primary);
double lambda_of_central(double gamma, double beta);
/// gamma / (1 - beta)
double epsilon_of(double gamma, double beta);

struct HyperPair {
  double gamma;
  double beta;
};
/// (rho^2 gamma, 1 - rho (1 - beta)): same lambda, time scaled by rho.
HyperPair acceleration_pair(double gamma, double beta, double rho);

/// Writes the sampled trajectory: step, loss, theta_1..theta_d (when
/// available), delta_min, delta_l2, crossings_plus_total, crossings_minus_total.
void write_trajectory_csv(const TrajectoryLog& log, const std::filesystem::path& path, bool with_theta = true);

std::string format_double(double x);

}  // namespace mlab
