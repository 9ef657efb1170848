#include "mlab/bias.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "mlab/data.hpp"

namespace mlab {

namespace {

constexpr double kSinhClamp = 700.0;

double clamp_arg(double x) { return std::max(-kSinhClamp, std::min(kSinhClamp, x)); }

}  // namespace

EntropyScale::EntropyScale(Vec d) : delta(std::move(d)) {
  require(delta.size() >= 1, "EntropyScale: empty scale");
  require(delta.allFinite() && (delta.array() > 0.0).all(), "EntropyScale: scale must be positive");
}

EntropyScale EntropyScale::uniform(Eigen::Index dim, double value) {
  return EntropyScale(Vec::Constant(dim, value));
}

double stable_asinh(double x) {
  const double ax = std::abs(x);
  double r;
  if (ax < 1.0) {
    r = std::asinh(ax);
  } else if (ax > 1e8) {
    r = std::log(2.0 * ax) + 0.25 / (ax * ax);
  } else {
    r = std::log(ax + std::sqrt(ax * ax + 1.0));
  }
  return std::copysign(r, x);
}

double hyperbolic_entropy(const Vec& theta, const EntropyScale& scale) {
  require(theta.size() == scale.delta.size(), "hyperbolic_entropy: dimension mismatch");
  double sum = 0.0;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    const double D = scale.delta(i);
    const double x = 2.0 * theta(i) / D;
    // x asinh x - (sqrt(1 + x^2) - 1), the second term without cancellation.
    const double s = std::sqrt(1.0 + x * x);
    const double f = std::isfinite(s) ? x * stable_asinh(x) - x * x / (s + 1.0)
                                      : std::abs(x) * (stable_asinh(std::abs(x)) - 1.0);
    sum += 0.25 * D * f;
  }
  return sum;
}

Vec grad_hyperbolic_entropy(const Vec& theta, const EntropyScale& scale) {
  require(theta.size() == scale.delta.size(), "grad_hyperbolic_entropy: dimension mismatch");
  Vec g(theta.size());
  for (Eigen::Index i = 0; i < theta.size(); ++i) g(i) = 0.5 * stable_asinh(2.0 * theta(i) / scale.delta(i));
  return g;
}

Vec hess_diag(const Vec& theta, const EntropyScale& scale) {
  require(theta.size() == scale.delta.size(), "hess_diag: dimension mismatch");
  Vec h(theta.size());
  for (Eigen::Index i = 0; i < theta.size(); ++i) h(i) = 1.0 / std::hypot(2.0 * theta(i), scale.delta(i));
  return h;
}

double bregman_divergence(const Vec& theta1, const Vec& theta2, const EntropyScale& scale) {
  require(theta1.size() == theta2.size(), "bregman_divergence: dimension mismatch");
  // Coordinate-wise, so that each term is computed at its own magnitude.
  double sum = 0.0;
  for (Eigen::Index i = 0; i < theta1.size(); ++i) {
    const EntropyScale s1(Vec::Constant(1, scale.delta(i)));
    const Vec a = Vec::Constant(1, theta1(i));
    const Vec b = Vec::Constant(1, theta2(i));
    const double term = hyperbolic_entropy(a, s1) - hyperbolic_entropy(b, s1) -
                        grad_hyperbolic_entropy(b, s1)(0) * (theta1(i) - theta2(i));
    sum += std::max(term, 0.0);
  }
  return sum;
}

double entropy_l1_asymptotic_gap(const Vec& theta, const EntropyScale& scale) {
  require(theta.size() == scale.delta.size(), "entropy_l1_asymptotic_gap: dimension mismatch");
  require(theta.cwiseAbs().maxCoeff() > 0.0, "entropy_l1_asymptotic_gap: theta must be nonzero");
  const double weighted_l1 = 0.5 * (scale.delta.array().inverse().log() * theta.array().abs()).sum();
  return hyperbolic_entropy(theta, scale) / weighted_l1 - 1.0;
}

double small_lambda_threshold(const Dataset& ds, const Vec& delta0) {
  require(delta0.size() >= 1 && (delta0.array() > 0.0).all(), "small_lambda_threshold: Delta_0 must be positive");
  const double y2 = ds.targets.squaredNorm();
  require(y2 > 0.0, "small_lambda_threshold: targets are zero");
  return static_cast<double>(ds.n()) * delta0.minCoeff() / y2;
}

// ---------------------------------------------------------------------------

NullSpace::NullSpace(const Mat& X) {
  const Mat Xt = X.transpose();
  Eigen::ColPivHouseholderQR<Mat> qr(Xt);
  rank_ = qr.rank();
  const Mat Q = qr.householderQ() * Mat::Identity(Xt.rows(), Xt.rows());
  Z_ = Q.rightCols(Xt.rows() - rank_);
}

double NullSpace::relative_projection(const Vec& g) const {
  require(g.size() == Z_.rows(), "NullSpace: dimension mismatch");
  if (Z_.cols() == 0) return 0.0;
  return (Z_.transpose() * g).norm() / std::max(g.norm(), 1e-30);
}

double kkt_residual(const NullSpace& ns, const Vec& theta, const EntropyScale& scale, const Vec& theta_tilde0) {
  const Vec g = grad_hyperbolic_entropy(theta, scale) - grad_hyperbolic_entropy(theta_tilde0, scale);
  return ns.relative_projection(g);
}

double kkt_residual(const Dataset& ds, const Vec& theta, const EntropyScale& scale, const Vec& theta_tilde0) {
  return kkt_residual(NullSpace(ds.features), theta, scale, theta_tilde0);
}

// ---------------------------------------------------------------------------
// Dual Newton solver.

namespace {

struct DualEval {
  Vec z2;     // 2 (X^T nu + c), clamped
  Vec theta;  // Delta/2 sinh(z2)
  Vec grad;   // X theta - y
  double value = 0.0;
};

DualEval eval_dual(const Dataset& ds, const Vec& delta, const Vec& c, const Vec& nu) {
  DualEval e;
  e.z2 = (2.0 * (ds.features.transpose() * nu + c)).unaryExpr(&clamp_arg);
  e.theta = 0.5 * delta.array() * e.z2.array().sinh();
  e.grad = ds.features * e.theta - ds.targets;
  e.value = (0.25 * delta.array() * e.z2.array().cosh()).sum() - ds.targets.dot(nu);
  return e;
}

Vec newton_direction(const Dataset& ds, const Vec& delta, const DualEval& e) {
  const Vec w = (delta.array() * e.z2.array().cosh()).matrix();
  const Mat H = ds.features * w.asDiagonal() * ds.features.transpose();
  Eigen::LDLT<Mat> ldlt(H);
  Vec dir;
  if (ldlt.info() == Eigen::Success && ldlt.isPositive()) dir = -ldlt.solve(e.grad);
  if (dir.size() == 0 || !dir.allFinite() || (H * dir + e.grad).norm() > 1e-6 * e.grad.norm())
    dir = -H.completeOrthogonalDecomposition().solve(e.grad);
  return dir;
}

}  // namespace

DualCertificate solve_min_entropy_interpolator(const Dataset& ds, const EntropyScale& scale,
                                               const Vec& theta_tilde0, const DualSolverOptions& opt) {
  validate(ds);
  const auto d = ds.d();
  require(scale.delta.size() == d, "solve_min_entropy_interpolator: scale dimension mismatch");
  const Vec t0 = theta_tilde0.size() == 0 ? Vec::Zero(d) : theta_tilde0;
  require(t0.size() == d, "solve_min_entropy_interpolator: theta_tilde0 dimension mismatch");
  const double ynorm = ds.targets.norm();
  const double yscale = ynorm > 0.0 ? ynorm : 1.0;

  const Vec& delta = scale.delta;
  const Vec c = grad_hyperbolic_entropy(t0, scale);

  DualCertificate cert;
  cert.nu = Vec::Zero(ds.n());
  DualEval e = eval_dual(ds, delta, c, cert.nu);
  double best = e.grad.norm() / yscale;
  Vec best_nu = cert.nu;

  auto armijo = [&](const Vec& dir, DualEval& cur, Vec& nu) -> bool {
    const double slope = cur.grad.dot(dir);
    if (!(slope < 0.0)) return false;
    double step = 1.0;
    for (int k = 0; k < 60; ++k, step *= 0.5) {
      const Vec trial = nu + step * dir;
      DualEval te = eval_dual(ds, delta, c, trial);
      const bool armijo_ok = te.value <= cur.value + 1e-4 * step * slope;
      // Near the optimum the objective stops resolving the decrease; accept a
      // strict reduction of the residual instead.
      const bool residual_ok = te.grad.norm() < 0.5 * cur.grad.norm();
      if (std::isfinite(te.value) && (armijo_ok || residual_ok)) {
        nu = trial;
        cur = std::move(te);
        return true;
      }
    }
    return false;
  };

  int it = 0;
  for (; it < opt.max_iter; ++it) {
    const double res = e.grad.norm() / yscale;
    if (res < best) {
      best = res;
      best_nu = cert.nu;
    }
    if (res <= opt.tol) break;

    Vec dir = newton_direction(ds, delta, e);
    const double growth = (2.0 * ds.features.transpose() * dir).cwiseAbs().maxCoeff();
    if (growth > opt.max_growth) dir *= opt.max_growth / growth;

    if (!armijo(dir, e, cert.nu)) {
      if (it == 0 && !cert.warm_started) {
        cert.warm_started = true;
        for (int k = 0; k < opt.warmup_steps; ++k) {
          Vec g = -e.grad;
          const double gr = (2.0 * ds.features.transpose() * g).cwiseAbs().maxCoeff();
          if (gr > opt.max_growth) g *= opt.max_growth / gr;
          if (!armijo(g, e, cert.nu)) break;
        }
        continue;
      }
      break;
    }
  }
  const double final_res = e.grad.norm() / yscale;
  if (final_res < best) {
    best = final_res;
    best_nu = cert.nu;
  }
  if (best > std::max(opt.tol, 1e-10))
    throw ConvergenceError("dual Newton did not converge (residual " + std::to_string(best) + ")", best);

  cert.nu = best_nu;
  const DualEval fin = eval_dual(ds, delta, c, cert.nu);
  cert.theta = fin.theta;
  cert.feasibility = fin.grad.norm() / yscale;
  cert.stationarity = kkt_residual(ds, cert.theta, scale, t0);
  cert.iterations = it;
  return cert;
}

// ---------------------------------------------------------------------------

Vec perturbed_initialisation(const PMState& w0, const Vec& s_plus, const Vec& s_minus) {
  return 0.25 * (w0.w_plus.array().square() * (-2.0 * s_plus.array()).exp() -
                 w0.w_minus.array().square() * (-2.0 * s_minus.array()).exp())
                    .matrix();
}

namespace {

void fill_common(BiasReport& r, const Dataset& ds, const PMState& w0, const PMState& terminal) {
  r.delta0 = balancedness(w0);
  r.delta_inf = (r.delta0.array() * (-(r.s_plus + r.s_minus)).array().exp()).matrix();
  r.theta_tilde0 = perturbed_initialisation(w0, r.s_plus, r.s_minus);
  r.theta_recovered = predictor(terminal);
  const Vec direct = balancedness(terminal);
  r.delta_terminal_gap = ((r.delta_inf - direct).array().abs() / direct.array()).maxCoeff();
  r.l1_norm = r.theta_recovered.lpNorm<1>();
  r.train_loss_final = loss(ds, r.theta_recovered);
  if (ds.ground_truth) r.test_loss = population_test_loss(r.theta_recovered, *ds.ground_truth, ds.mean, ds.stddev);
  if ((r.delta_inf.array() > 0.0).all() && r.delta_inf.allFinite())
    r.kkt_residual = kkt_residual(ds, r.theta_recovered, EntropyScale(r.delta_inf), r.theta_tilde0);
  else
    r.kkt_residual = std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

BiasReport bias_report(const TrajectoryLog& log, const Dataset& ds, double alpha, const DiscreteHyper& h,
                       bool require_converged) {
  require(log.diagonal && log.residues.has_value(), "bias_report: trajectory is not a diagonal-network run");
  if (require_converged) require(log.stop_reason == StopReason::converged, "bias_report: run did not converge");
  BiasReport r;
  r.gamma = h.gamma;
  r.beta = h.beta;
  r.lambda = lambda_of(h.gamma, h.beta);
  r.alpha = alpha;
  r.s_plus = log.residues->s_plus();
  r.s_minus = log.residues->s_minus();
  r.s_source = "residues";
  r.crossings_plus = log.crossings_plus.sum();
  r.crossings_minus = log.crossings_minus.sum();
  r.identity_violation = log.identity_violation;
  r.stop_reason = log.stop_reason;
  fill_common(r, ds, log.residues->initial(), log.terminal_pm);
  return r;
}

BiasReport bias_report(const ContinuousTrajectory& traj, const Dataset& ds, double alpha, bool require_converged) {
  require(traj.diagonal, "bias_report: trajectory is not a diagonal-network run");
  if (require_converged) require(traj.stop_reason == StopReason::converged, "bias_report: run did not converge");
  BiasReport r;
  r.lambda = traj.lambda;
  r.alpha = alpha;
  r.continuous = true;
  r.crossings_plus = traj.crossings_plus.sum();
  r.crossings_minus = traj.crossings_minus.sum();
  r.identity_violation = traj.identity_violation;
  r.stop_reason = traj.stop_reason;
  const auto d = ds.d();
  if (traj.lambda == 0.0) {
    r.s_plus = Vec::Zero(d);
    r.s_minus = Vec::Zero(d);
    r.s_source = "conserved";
  } else if (r.crossing_free() && traj.suspended_steps.sum() == 0) {
    r.s_plus = traj.s_plus_quadrature();
    r.s_minus = traj.s_minus_quadrature();
    r.s_source = "quadrature";
  } else {
    r.s_plus = traj.s_plus_exact();
    r.s_minus = traj.s_minus_exact();
    r.s_source = "gradient_integral";
  }
  fill_common(r, ds, traj.initial_pm, traj.terminal_pm);
  return r;
}

// ---------------------------------------------------------------------------

std::string bias_csv_header() {
  return "lambda,gamma,beta,seed,crossings_plus,crossings_minus,delta_inf_l2,s_plus_l2,s_minus_l2,"
         "theta_tilde0_linf,kkt_residual,test_loss,l1_norm,train_loss_final";
}

std::string bias_csv_row(const BiasReport& r) {
  std::string s;
  auto add = [&s](const std::string& v) {
    if (!s.empty()) s += ',';
    s += v;
  };
  add(format_double(r.lambda));
  add(format_double(r.gamma));
  add(format_double(r.beta));
  add(std::to_string(r.seed));
  add(std::to_string(r.crossings_plus));
  add(std::to_string(r.crossings_minus));
  add(format_double(r.delta_inf.norm()));
  add(format_double(r.s_plus.norm()));
  add(format_double(r.s_minus.norm()));
  add(format_double(r.theta_tilde0.lpNorm<Eigen::Infinity>()));
  add(format_double(r.kkt_residual));
  add(format_double(r.test_loss));
  add(format_double(r.l1_norm));
  add(format_double(r.train_loss_final));
  return s;
}

void write_bias_csv(const std::vector<BiasReport>& reports, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << bias_csv_header() << '\n';
  for (const auto& r : reports) out << bias_csv_row(r) << '\n';
}

namespace {

std::vector<double> as_std(const Vec& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

void write_bias_json(const std::vector<BiasReport>& reports, const std::filesystem::path& path) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : reports) {
    nlohmann::json j;
    j["lambda"] = r.lambda;
    j["gamma"] = r.gamma;
    j["beta"] = r.beta;
    j["seed"] = r.seed;
    j["alpha"] = r.alpha;
    j["continuous"] = r.continuous;
    j["s_source"] = r.s_source;
    j["stop_reason"] = to_string(r.stop_reason);
    j["crossings_plus"] = r.crossings_plus;
    j["crossings_minus"] = r.crossings_minus;
    j["delta0"] = as_std(r.delta0);
    j["delta_inf"] = as_std(r.delta_inf);
    j["s_plus"] = as_std(r.s_plus);
    j["s_minus"] = as_std(r.s_minus);
    j["theta_tilde0"] = as_std(r.theta_tilde0);
    j["theta_recovered"] = as_std(r.theta_recovered);
    j["kkt_residual"] = r.kkt_residual;
    j["test_loss"] = r.test_loss;
    j["l1_norm"] = r.l1_norm;
    j["train_loss_final"] = r.train_loss_final;
    j["delta_terminal_gap"] = r.delta_terminal_gap;
    j["identity_violation"] = r.identity_violation;
    arr.push_back(std::move(j));
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << arr.dump(2) << '\n';
}

}  // namespace mlab
