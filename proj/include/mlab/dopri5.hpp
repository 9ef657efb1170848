#pragma once

#include <functional>
#include <limits>
#include <stdexcept>
#include <string>

#include "mlab/model.hpp"

namespace mlab {

class IntegrationError : public std::runtime_error {
 public:
  IntegrationError(const std::string& what, double t) : std::runtime_error(what), t_(t) {}
  /// Time reached when the integrator gave up.
  double time() const { return t_; }

 private:
  double t_;
};

/// Dormand-Prince 5(4) with PI step-size control and the pair's native
/// fourth-order continuous extension.
class Dopri5 {
 public:
  using Rhs = std::function<void(double t, const Vec& y, Vec& dydt)>;

  struct Options {
    double rel_tol = 1e-10;
    double abs_tol = 1e-12;
    double initial_step = 0.0;  // 0 picks a starting step automatically
    double max_step = 0.0;      // 0 means unbounded
    /// Components with weight 0 are left out of the error norm.
    Eigen::ArrayXd error_weight;
  };

  Dopri5(Rhs f, double t0, const Vec& y0, Options opt);

  /// Advances by one accepted step; rejected attempts are retried internally.
  void step();
  /// Caps the next step so that it does not pass `t_stop`.
  void set_step_limit(double t_stop) { t_stop_ = t_stop; }

  double t() const { return t_; }
  const Vec& y() const { return y_; }
  const Vec& dydt() const { return k1_; }
  double t_prev() const { return t_old_; }
  const Vec& y_prev() const { return y_old_; }
  double last_step() const { return t_ - t_old_; }

  /// Dense output on [t_prev(), t()].
  Vec dense(double t) const;
  double dense(double t, Eigen::Index i) const;
  void dense_into(double t, Vec& out) const;

  long accepted() const { return accepted_; }
  long rejected() const { return rejected_; }
  long evaluations() const { return evals_; }

 private:
  double initial_step_guess();
  double error_norm(const Vec& err, const Vec& y_new) const;

  Rhs f_;
  Options opt_;
  double t_, t_old_;
  double h_;
  double t_stop_ = std::numeric_limits<double>::infinity();
  double facold_ = 1e-4;
  Vec y_, y_old_, k1_, k2_, k3_, k4_, k5_, k6_, k7_, tmp_, y_new_, err_;
  Vec r1_, r2_, r3_, r4_, r5_;
  long accepted_ = 0, rejected_ = 0, evals_ = 0;
  bool rejected_last_ = false;
};

}  // namespace mlab
