#include "mlab/optim_continuous.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace mlab {

namespace {

constexpr double kDivergenceFactor = 1e12;

// Gauss-Legendre nodes and weights on [0, 1].
constexpr double kG1 = 0.11270166537925831148;  // 1/2 - sqrt(15)/10
constexpr double kG3 = 0.88729833462074168852;
constexpr double kGauss[3] = {kG1, 0.5, kG3};
constexpr double kGaussW[3] = {5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0};

// State layout: positions (P) | velocities (P, second order only) | G (d, diagonal only).
// Diagonal nets use positions [w+; w-].
class System {
 public:
  System(const ModelSpec& spec, double a, double b) : spec_(spec), a_(a), b_(b) {
    require(a >= 0.0 && std::isfinite(a), "integrator: inertia coefficient must be >= 0");
    require(b > 0.0 && std::isfinite(b), "integrator: damping coefficient must be > 0");
    diag_ = spec.is_diagonal_net();
    d_ = diag_ ? spec.dataset().d() : 0;
    P_ = spec.parameter_dim();
    second_ = a > 0.0;
    if (diag_) {
      theta_.resize(d_);
      gbuf_.resize(d_);
      resid_.resize(spec.dataset().n());
    }
  }

  bool diagonal() const { return diag_; }
  bool second_order() const { return second_; }
  Eigen::Index P() const { return P_; }
  Eigen::Index d() const { return d_; }
  Eigen::Index size() const { return (second_ ? 2 * P_ : P_) + (diag_ ? d_ : 0); }
  Eigen::Index g_offset() const { return second_ ? 2 * P_ : P_; }

  // Force term and, for diagonal nets, grad L(theta).
  double force(const Vec& pos, Vec& out, Vec* g_out) const {
    if (diag_) {
      const Dataset& ds = spec_.dataset();
      const auto wp = pos.head(d_);
      const auto wm = pos.tail(d_);
      theta_.array() = 0.25 * (wp.array().square() - wm.array().square());
      const double value = loss_and_grad_into(ds, theta_, resid_, gbuf_);
      if (!std::isfinite(value)) throw NonFiniteError("diagonal net flow");
      out.resize(P_);
      out.head(d_).array() = gbuf_.array() * wp.array();
      out.tail(d_).array() = -gbuf_.array() * wm.array();
      if (g_out) *g_out = gbuf_;
      return value;
    }
    auto [value, g] = network_value_and_grad(spec_, pos);
    out = std::move(g);
    return value;
  }

  void rhs(const Vec& y, Vec& dy) {
    dy.resize(y.size());
    force(y.head(P_), f_, diag_ ? &g_ : nullptr);
    if (second_) {
      const auto vel = y.segment(P_, P_);
      dy.head(P_) = vel;
      dy.segment(P_, P_) = -(b_ * vel + f_) / a_;
    } else {
      dy.head(P_) = -f_ / b_;
    }
    if (diag_) dy.tail(d_) = g_;
  }

  double loss(const Vec& y) const {
    if (diag_) {
      const Vec theta = 0.25 * (y.head(d_).array().square() - y.segment(d_, d_).array().square()).matrix();
      return mlab::loss(spec_.dataset(), theta);
    }
    return network_value(spec_, y.head(P_));
  }

  // Velocities of the native coordinates (evaluated from the state, or from
  // the force for first-order flows).
  Vec velocity(const Vec& y) const {
    if (second_) return y.segment(P_, P_);
    Vec f;
    force(y.head(P_), f, nullptr);
    return -f / b_;
  }

  // F + a/2 |w'|^2 in the model's own parameters.
  double energy(const Vec& y) const { return energy(y, loss(y)); }
  double energy(const Vec& y, double F) const {
    if (!second_) return F;
    const auto vel = y.segment(P_, P_);
    // For diagonal nets |u'|^2 + |v'|^2 = (|w+'|^2 + |w-'|^2) / 2.
    const double kinetic = diag_ ? 0.5 * vel.squaredNorm() : vel.squaredNorm();
    return F + 0.5 * a_ * kinetic;
  }

  // Position in the model's own parameters.
  Vec user_position(const Vec& y) const {
    if (!diag_) return y.head(P_);
    Vec out(P_);
    const auto wp = y.head(d_);
    const auto wm = y.segment(d_, d_);
    out.head(d_) = 0.5 * (wp + wm);
    out.tail(d_) = 0.5 * (wp - wm);
    return out;
  }

  Vec user_velocity(const Vec& y) const {
    const Vec v = velocity(y);
    if (!diag_) return v;
    Vec out(P_);
    out.head(d_) = 0.5 * (v.head(d_) + v.tail(d_));
    out.tail(d_) = 0.5 * (v.head(d_) - v.tail(d_));
    return out;
  }

 private:
  const ModelSpec& spec_;
  double a_, b_;
  bool diag_ = false, second_ = false;
  Eigen::Index d_ = 0, P_ = 0;
  Vec f_, g_;
  mutable Vec theta_, gbuf_, resid_;
};

int sign_of(double x) { return x > 0.0 ? 1 : -1; }



// Locates a sign change of component i of the dense output on [ta, tb].
double bisect_crossing(const Dopri5& s, Eigen::Index i, double ta, double tb) {
  double fa = s.dense(ta, i);
  const double tol = 1e-10 * std::max(std::abs(tb), std::numeric_limits<double>::min());
  for (int it = 0; it < 200 && tb - ta > tol; ++it) {
    const double tm = 0.5 * (ta + tb);
    const double fm = s.dense(tm, i);
    if (sign_of(fm) == sign_of(fa)) {
      ta = tm;
      fa = fm;
    } else {
      tb = tm;
    }
  }
  return 0.5 * (ta + tb);
}

void push_sample(ContinuousTrajectory& tr, const System& sys, double t, const Vec& y) {
  tr.times.push_back(t);
  tr.states.push_back(sys.user_position(y));
  tr.losses.push_back(sys.loss(y));
  tr.energies.push_back(sys.energy(y));
  if (sys.diagonal()) {
    const auto d = sys.d();
    tr.balancedness_samples.push_back((y.head(d).array() * y.segment(d, d).array()).abs().matrix());
    tr.crossings_plus_total.push_back(tr.crossings_plus.sum());
    tr.crossings_minus_total.push_back(tr.crossings_minus.sum());
  }
}

ContinuousTrajectory integrate(const ModelSpec& spec, double a, double b, const SecondOrderState& init,
                               const IntegratorConfig& cfg) {
  validate(cfg);
  const auto D = spec.parameter_dim();
  require(init.position.size() == D, "integrate: position dimension mismatch");
  require(init.position.allFinite(), "integrate: initial position must be finite");
  System sys(spec, a, b);
  if (sys.second_order()) {
    require(init.velocity.size() == D, "integrate: velocity dimension mismatch");
    require(init.velocity.allFinite(), "integrate: initial velocity must be finite");
  }

  const Eigen::Index d = sys.d();
  Vec y0 = Vec::Zero(sys.size());
  if (sys.diagonal()) {
    const WeightState ws{init.position.head(d), init.position.tail(d)};
    check_nondegenerate(ws);
    const PMState pm = pm_of(ws);
    y0.head(d) = pm.w_plus;
    y0.segment(d, d) = pm.w_minus;
    if (sys.second_order()) {
      y0.segment(2 * d, d) = init.velocity.head(d) + init.velocity.tail(d);
      y0.segment(3 * d, d) = init.velocity.head(d) - init.velocity.tail(d);
    }
  } else {
    y0.head(D) = init.position;
    if (sys.second_order()) y0.segment(D, D) = init.velocity;
  }

  ContinuousTrajectory tr;
  tr.lambda = sys.second_order() ? a / (b * b) : 0.0;
  tr.diagonal = sys.diagonal();
  if (tr.diagonal) {
    tr.crossings_plus = Eigen::VectorXi::Zero(d);
    tr.crossings_minus = Eigen::VectorXi::Zero(d);
    tr.quad_plus = Vec::Zero(d);
    tr.quad_minus = Vec::Zero(d);
    tr.quad_discounted = Vec::Zero(d);
    tr.grad_integral = Vec::Zero(d);
    tr.suspended_steps = Eigen::VectorXi::Zero(d);
    const Vec v0 = sys.velocity(y0);
    tr.initial_pm = {y0.head(d), y0.segment(d, d)};
    tr.initial_pm_velocity = {v0.head(d), v0.tail(d)};
  }

  Dopri5::Options opt;
  opt.rel_tol = cfg.rel_tol;
  opt.abs_tol = cfg.abs_tol;
  opt.initial_step = cfg.initial_step;
  Dopri5 solver([&sys](double, const Vec& y, Vec& dy) { sys.rhs(y, dy); }, init.t, y0, opt);

  std::vector<double> sample_times = cfg.sample_times;
  if (sample_times.empty() && cfg.dense_sample_count > 0)
    for (int j = 1; j <= cfg.dense_sample_count; ++j)
      sample_times.push_back(init.t + cfg.max_time * j / cfg.dense_sample_count);
  std::sort(sample_times.begin(), sample_times.end());
  std::size_t next_sample = 0;
  while (next_sample < sample_times.size() && sample_times[next_sample] <= init.t) ++next_sample;

  const double t_end = init.t + cfg.max_time;
  push_sample(tr, sys, init.t, y0);
  tr.initial_loss = tr.losses.front();
  double E_prev = tr.energies.front();
  double loss = tr.initial_loss;

  // Finite-time identity bookkeeping (diagonal second-order flows).
  const double lambda = tr.lambda;
  Vec log_delta0, rho_sum0;
  std::vector<bool> identity_valid;
  if (tr.diagonal) {
    log_delta0 = (y0.head(d).array() * y0.segment(d, d).array()).abs().log().matrix();
    const Vec v0 = sys.velocity(y0);
    rho_sum0 = (v0.head(d).array() / y0.head(d).array() + v0.tail(d).array() / y0.segment(d, d).array()).matrix();
    identity_valid.assign(static_cast<std::size_t>(d), true);
  }

  Vec nodes[3];
  if (loss <= cfg.stop_loss) tr.stop_reason = StopReason::converged;
  while (tr.stop_reason != StopReason::converged) {
    if (solver.t() >= t_end) {
      tr.stop_reason = StopReason::max_steps;
      break;
    }
    if (solver.accepted() >= cfg.max_steps) {
      tr.stop_reason = StopReason::max_steps;
      break;
    }
    solver.set_step_limit(t_end);
    try {
      solver.step();
    } catch (const NonFiniteError&) {
      tr.stop_reason = StopReason::diverged;
      tr.diverged_at = solver.t();
      break;
    }
    const double t0 = solver.t_prev();
    const double t1 = solver.t();
    const double h = t1 - t0;
    const Vec& y = solver.y();
    loss = sys.loss(y);

    if (tr.diagonal) {
      // Per-step values at both ends and the Gauss nodes.
      for (int q = 0; q < 3; ++q) solver.dense_into(t0 + kGauss[q] * h, nodes[q]);
      const Vec& ya = solver.y_prev();
      const double disc_step = sys.second_order() ? std::exp(-h / lambda) : 0.0;
      double disc_node[3];
      for (int q = 0; q < 3; ++q) disc_node[q] = sys.second_order() ? std::exp(-(1.0 - kGauss[q]) * h / lambda) : 0.0;
      for (Eigen::Index i = 0; i < d; ++i) {
        bool suspend = false;
        for (int br = 0; br < 2; ++br) {
          const Eigen::Index idx = br == 0 ? i : d + i;
          const double vals[5] = {ya(idx), nodes[0](idx), nodes[1](idx), nodes[2](idx), y(idx)};
          const double ts[5] = {t0, t0 + kG1 * h, t0 + 0.5 * h, t0 + kG3 * h, t1};
          for (int k = 0; k < 5; ++k)
            if (std::abs(vals[k]) < cfg.guard) suspend = true;
          for (int k = 0; k < 4; ++k) {
            if (sign_of(vals[k]) != sign_of(vals[k + 1])) {
              const double tc = bisect_crossing(solver, idx, ts[k], ts[k + 1]);
              tr.crossings.push_back({tc, static_cast<int>(i), br == 0 ? 1 : -1, sign_of(vals[k + 1])});
              ++(br == 0 ? tr.crossings_plus : tr.crossings_minus)(i);
              suspend = true;
            }
          }
        }
        if (!sys.second_order()) continue;
        if (suspend) {
          ++tr.suspended_steps(i);
          identity_valid[static_cast<std::size_t>(i)] = false;
          tr.quad_discounted(i) *= disc_step;
          continue;
        }
        double qp = 0.0, qm = 0.0, qdisc = 0.0;
        for (int q = 0; q < 3; ++q) {
          const Vec& yn = nodes[q];
          const double rp = yn(2 * d + i) / yn(i);
          const double rm = yn(3 * d + i) / yn(d + i);
          qp += kGaussW[q] * rp * rp;
          qm += kGaussW[q] * rm * rm;
          qdisc += kGaussW[q] * disc_node[q] * (rp * rp + rm * rm);
        }
        tr.quad_plus(i) += lambda * h * qp;
        tr.quad_minus(i) += lambda * h * qm;
        tr.quad_discounted(i) = disc_step * tr.quad_discounted(i) + lambda * h * qdisc;
      }

      if (sys.second_order() && (solver.accepted() % 8 == 0 || loss <= cfg.stop_loss)) {
        const double decay = 1.0 - std::exp(-(t1 - init.t) / lambda);
        for (Eigen::Index i = 0; i < d; ++i) {
          if (!identity_valid[static_cast<std::size_t>(i)]) continue;
          const double predicted = log_delta0(i) + lambda * rho_sum0(i) * decay -
                                   (tr.quad_plus(i) + tr.quad_minus(i) - tr.quad_discounted(i));
          const double actual = std::abs(y(i) * y(d + i));
          const double viol = std::abs(std::exp(predicted) - actual) / actual;
          if (std::isfinite(viol)) tr.identity_violation = std::max(tr.identity_violation, viol);
        }
      }
    }

    // Requested dense samples inside (t0, t1].
    while (next_sample < sample_times.size() && sample_times[next_sample] <= t1) {
      const double ts = sample_times[next_sample++];
      if (ts <= tr.times.back()) continue;
      push_sample(tr, sys, ts, solver.dense(ts));
    }

    const double E = sys.energy(y, loss);
    tr.energy_max_increase = std::max(tr.energy_max_increase, E - E_prev);
    E_prev = E;

    if (!std::isfinite(loss) || loss > kDivergenceFactor * tr.initial_loss) {
      tr.stop_reason = StopReason::diverged;
      tr.diverged_at = t1;
      break;
    }
    if (loss <= cfg.stop_loss) tr.stop_reason = StopReason::converged;
    if (cfg.sample_every_steps > 0 && solver.accepted() % cfg.sample_every_steps == 0 && t1 > tr.times.back())
      push_sample(tr, sys, t1, y);
  }

  const Vec& yT = solver.y();
  if (solver.t() > tr.times.back()) push_sample(tr, sys, solver.t(), yT);
  tr.terminal_time = solver.t();
  tr.terminal_position = sys.user_position(yT);
  tr.terminal_velocity = sys.user_velocity(yT);
  tr.final_loss = sys.loss(yT);
  tr.accepted_steps = solver.accepted();
  tr.rejected_steps = solver.rejected();
  if (tr.diagonal) {
    const Vec vT = sys.velocity(yT);
    tr.terminal_pm = {yT.head(d), yT.segment(d, d)};
    tr.terminal_pm_velocity = {vT.head(d), vT.tail(d)};
    tr.grad_integral = yT.segment(sys.g_offset(), d);
  }
  return tr;
}

}  // namespace

void validate(const IntegratorConfig& cfg) {
  require(cfg.rel_tol > 0.0 && cfg.abs_tol > 0.0, "IntegratorConfig: tolerances must be positive");
  require(cfg.max_time > 0.0, "IntegratorConfig: max_time must be positive");
  require(cfg.stop_loss >= 0.0, "IntegratorConfig: stop_loss must be nonnegative");
  require(cfg.dense_sample_count >= 0, "IntegratorConfig: dense_sample_count must be nonnegative");
  require(cfg.max_steps > 0, "IntegratorConfig: max_steps must be positive");
}

long ContinuousTrajectory::total_crossings() const {
  if (!diagonal) return 0;
  return crossings_plus.sum() + crossings_minus.sum();
}

Vec ContinuousTrajectory::s_plus_quadrature() const {
  const Vec rho_T = terminal_pm_velocity.w_plus.cwiseQuotient(terminal_pm.w_plus);
  const Vec rho_0 = initial_pm_velocity.w_plus.cwiseQuotient(initial_pm.w_plus);
  return quad_plus + lambda * (rho_T - rho_0);
}

Vec ContinuousTrajectory::s_minus_quadrature() const {
  const Vec rho_T = terminal_pm_velocity.w_minus.cwiseQuotient(terminal_pm.w_minus);
  const Vec rho_0 = initial_pm_velocity.w_minus.cwiseQuotient(initial_pm.w_minus);
  return quad_minus + lambda * (rho_T - rho_0);
}

Vec ContinuousTrajectory::s_plus_exact() const {
  return -(terminal_pm.w_plus.cwiseQuotient(initial_pm.w_plus)).array().abs().log().matrix() - grad_integral;
}

Vec ContinuousTrajectory::s_minus_exact() const {
  return -(terminal_pm.w_minus.cwiseQuotient(initial_pm.w_minus)).array().abs().log().matrix() + grad_integral;
}

std::pair<Vec, Vec> mgf_rhs(const ModelSpec& spec, double lambda, const SecondOrderState& state) {
  require(lambda > 0.0, "mgf_rhs: lambda must be positive (use integrate_gf for lambda = 0)");
  require(state.position.size() == spec.parameter_dim() && state.velocity.size() == spec.parameter_dim(),
          "mgf_rhs: dimension mismatch");
  const Vec grad = network_value_and_grad(spec, state.position).second;
  return {state.velocity, -(state.velocity + grad) / lambda};
}

ContinuousTrajectory integrate_mgf(const ModelSpec& spec, double lambda, const SecondOrderState& init,
                                   const IntegratorConfig& cfg) {
  require(lambda > 0.0, "integrate_mgf: lambda must be positive (use integrate_gf for lambda = 0)");
  return integrate(spec, lambda, 1.0, init, cfg);
}

ContinuousTrajectory integrate_gf(const ModelSpec& spec, const Vec& init, const IntegratorConfig& cfg) {
  return integrate(spec, 0.0, 1.0, SecondOrderState{init, Vec::Zero(init.size()), 0.0}, cfg);
}

ContinuousTrajectory integrate_damped(const ModelSpec& spec, double a, double b, const SecondOrderState& init,
                                      const IntegratorConfig& cfg) {
  return integrate(spec, a, b, init, cfg);
}

double energy(const ModelSpec& spec, double lambda, const SecondOrderState& state) {
  require(lambda >= 0.0, "energy: lambda must be nonnegative");
  const double F = network_value(spec, state.position);
  if (lambda == 0.0) return F;
  require(state.velocity.size() == spec.parameter_dim(), "energy: velocity dimension mismatch");
  return F + 0.5 * lambda * state.velocity.squaredNorm();
}

Vec mgf_initial_velocity(const Vec& w1, const Vec& w0, double gamma, double beta) {
  require(w1.size() == w0.size(), "mgf_initial_velocity: dimension mismatch");
  return (w1 - w0) / epsilon_of(gamma, beta);
}

DeviationReport time_rescaled_equivalence(double a, double b, const ModelSpec& spec, const SecondOrderState& init,
                                          const IntegratorConfig& cfg) {
  require(a >= 0.0 && b > 0.0, "time_rescaled_equivalence: need a >= 0 and b > 0");
  require(!cfg.sample_times.empty(), "time_rescaled_equivalence: sample_times must be set");

  IntegratorConfig slow = cfg;
  slow.stop_loss = 0.0;
  slow.max_time = b * cfg.sample_times.back();
  slow.sample_times.clear();
  for (double t : cfg.sample_times) slow.sample_times.push_back(b * t);
  const ContinuousTrajectory original = integrate_damped(spec, a, b, init, slow);

  IntegratorConfig fast = cfg;
  fast.stop_loss = 0.0;
  fast.max_time = cfg.sample_times.back();
  SecondOrderState scaled = init;
  scaled.velocity = b * init.velocity;
  const ContinuousTrajectory rescaled = a > 0.0 ? integrate_mgf(spec, a / (b * b), scaled, fast)
                                                : integrate_gf(spec, init.position, fast);

  // Both runs sample t = 0 first, then the requested times in order.
  DeviationReport rep;
  const std::size_t m = std::min(original.states.size(), rescaled.states.size());
  for (std::size_t j = 0; j < m; ++j) {
    const double diff = (original.states[j] - rescaled.states[j]).norm();
    rep.max_abs = std::max(rep.max_abs, diff);
    rep.max_rel = std::max(rep.max_rel, diff / (1.0 + rescaled.states[j].norm()));
  }
  rep.samples = static_cast<long>(m);
  return rep;
}

void write_continuous_csv(const ContinuousTrajectory& traj, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "t,loss,energy,delta_min,delta_l2,crossings_plus_total,crossings_minus_total\n";
  for (std::size_t j = 0; j < traj.times.size(); ++j) {
    out << format_double(traj.times[j]) << ',' << format_double(traj.losses[j]) << ','
        << format_double(traj.energies[j]);
    if (traj.diagonal) {
      const Vec& dl = traj.balancedness_samples[j];
      out << ',' << format_double(dl.minCoeff()) << ',' << format_double(dl.norm()) << ','
          << traj.crossings_plus_total[j] << ',' << traj.crossings_minus_total[j] << '\n';
    } else {
      out << ",,,0,0\n";
    }
  }
}

}  // namespace mlab
