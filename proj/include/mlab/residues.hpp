#pragma once

#include "mlab/model.hpp"

namespace mlab {

/// r(z) = (z - 1) - ln|z|, evaluated without cancellation near z = 1.
double residue_r(double z);
/// r(b / a) for a != 0, using the increment (b - a) / a directly.
double residue_ratio(double b, double a);

/// Online residue sums for one MGD run on a diagonal network.
///
/// With iterates w_0 = w_1, w_2, ... per branch, step m (producing w_{m+1})
/// contributes R_m = r(w_{m+1}/w_m) + beta * r(w_{m-1}/w_m). The accumulator
/// keeps the plain sums of r(w_{m+1}/w_m) and r(w_m/w_{m+1}) and the
/// geometrically discounted sum of R_m, which together give
///
///   S = (sum_fwd + beta * sum_bwd) / (1 - beta)
///   ln Delta_{N+1} = ln Delta_0 - (1/(1-beta)) sum_branches (A_N - beta * B_N)
///
/// where A_N = sum R_m and B_N = beta * B_{N-1} + R_N. The second line is an
/// exact algebraic identity at every N (the gradient terms cancel between the
/// two branches), which makes it a rounding-level check of the recursion.
class ResidueAccumulator {
 public:
  ResidueAccumulator() = default;
  ResidueAccumulator(double beta, const PMState& w0);

  /// Consume w_{N+1}; the previous two iterates are held internally.
  void push(const PMState& next);

  double beta() const { return beta_; }
  long steps() const { return steps_; }

  Vec s_plus() const;
  Vec s_minus() const;
  /// ln Delta_{N+1} - ln Delta_0 as predicted by the residue sums.
  Vec log_delta_ratio() const;
  /// Delta_0 * exp(log_delta_ratio()).
  Vec predicted_delta() const;

  /// max_i |predicted - actual| / actual for the current iterate.
  double identity_violation() const;

  const Vec& delta0() const { return delta0_; }
  const PMState& initial() const { return w0_; }
  const PMState& current() const { return cur_; }

 private:
  struct Branch {
    Vec fwd;         // sum r(w_{m+1} / w_m)
    Vec bwd;         // sum r(w_m / w_{m+1})
    Vec full;        // A_N
    Vec discounted;  // B_N
  };
  static void update(Branch& b, const Vec& prev, const Vec& cur, const Vec& next, double beta);

  double beta_ = 0.0;
  long steps_ = 0;
  PMState w0_, prev_, cur_;
  Vec delta0_;
  Branch plus_, minus_;
};

/// Free-function form of ResidueAccumulator::push.
ResidueAccumulator accumulate_residues(ResidueAccumulator acc, const PMState& next);

}  // namespace mlab
