#include "mlab/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>

#include "mlab/data.hpp"
#include "mlab/parallel.hpp"
#include "mlab/rng.hpp"

namespace mlab {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return buf;
}

double sup_relative(const std::vector<Vec>& a, const std::vector<Vec>& b, std::size_t stride_a = 1) {
  double worst = 0.0;
  for (std::size_t k = 0; k < b.size(); ++k) {
    const Vec& ref = b[k];
    worst = std::max(worst, (a[k * stride_a] - ref).norm() / (1.0 + ref.norm()));
  }
  return worst;
}

IntegratorConfig tight_config(double max_time) {
  IntegratorConfig cfg;
  cfg.max_time = max_time;
  cfg.stop_loss = 0.0;
  return cfg;
}

double correspondence_deviation(double gamma, double beta, const ModelSpec& spec, const Vec& init, double horizon,
                                LambdaMap map) {
  const double eps = epsilon_of(gamma, beta);
  const long K = static_cast<long>(std::floor(horizon / eps + 1e-9));
  require(K >= 1, "correspondence: horizon shorter than one step");
  const auto iterates = mgd_iterates(spec, init, gamma, beta, K);

  IntegratorConfig cfg = tight_config(K * eps);
  for (long k = 1; k <= K; ++k) cfg.sample_times.push_back(k * eps);
  const auto traj = integrate_mgf(spec, lambda_of(gamma, beta, map), {init, Vec::Zero(init.size()), 0.0}, cfg);
  if (traj.stop_reason == StopReason::diverged) throw IntegrationError("MGF diverged", traj.terminal_time);
  require(traj.states.size() == static_cast<std::size_t>(K + 1), "correspondence: missing MGF samples");
  return sup_relative(iterates, traj.states);
}

}  // namespace

std::string to_string(Bound b) {
  switch (b) {
    case Bound::at_most: return "at_most";
    case Bound::below: return "below";
    case Bound::at_least: return "at_least";
  }
  return "?";
}

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

CheckReport make_report(std::string name, double measured, double threshold, Bound bound, std::string context,
                        std::string detail) {
  CheckReport r;
  r.name = std::move(name);
  r.measured = measured;
  r.threshold = threshold;
  r.bound = bound;
  r.context = fnv1a_hex(context);
  r.detail = std::move(detail);
  switch (bound) {
    case Bound::at_most: r.pass = measured <= threshold; break;
    case Bound::below: r.pass = measured < threshold; break;
    case Bound::at_least: r.pass = measured >= threshold; break;
  }
  return r;
}

ModelSpec quadratic_demo_spec() {
  const double c = std::cos(0.5), s = std::sin(0.5);
  Mat R(2, 2);
  R << c, -s, s, c;
  const Mat A = R * Eigen::Vector2d(1.0, 0.1).asDiagonal() * R.transpose();
  return ModelSpec::quadratic(A, Vec::Zero(2));
}

Vec quadratic_demo_init() { return Eigen::Vector2d(1.0, 1.0); }

std::vector<Vec> mgd_iterates(const ModelSpec& spec, const Vec& init, double gamma, double beta, long steps) {
  require(steps >= 0, "mgd_iterates: steps must be nonnegative");
  DiscreteHyper h;
  h.gamma = gamma;
  h.beta = beta;
  validate(h);
  std::vector<Vec> out;
  out.reserve(steps + 1);
  out.push_back(init);
  Vec prev = init, cur = init;
  // w_1 = w_0, so iterate k >= 1 is produced by k - 1 momentum steps from w_1.
  if (steps >= 1) out.push_back(cur);
  for (long k = 2; k <= steps; ++k) {
    const Vec g = network_value_and_grad(spec, cur).second;
    Vec next = mgd_step(cur, prev, g, h, k);
    prev = std::move(cur);
    cur = std::move(next);
    out.push_back(cur);
  }
  return out;
}

CheckReport check_discretization_correspondence(double gamma, double beta, const ModelSpec& spec, const Vec& init,
                                                double horizon, LambdaMap map, double threshold) {
  const double dev = correspondence_deviation(gamma, beta, spec, init, horizon, map);
  const std::string ctx = "correspondence;gamma=" + fmt(gamma) + ";beta=" + fmt(beta) + ";horizon=" +
                          fmt(horizon) + (map == LambdaMap::central ? ";central" : ";primary");
  return make_report(map == LambdaMap::central ? "correspondence_central" : "correspondence", dev, threshold,
                     Bound::at_most, ctx, "lambda=" + fmt(lambda_of(gamma, beta, map)));
}

CheckReport check_epsilon_halving(double gamma, double beta, const ModelSpec& spec, const Vec& init, double horizon) {
  const HyperPair half = acceleration_pair(gamma, beta, 0.5);
  const double coarse = correspondence_deviation(gamma, beta, spec, init, horizon, LambdaMap::primary);
  const double fine = correspondence_deviation(half.gamma, half.beta, spec, init, horizon, LambdaMap::primary);
  const double ratio = fine > 0.0 ? coarse / fine : std::numeric_limits<double>::infinity();
  return make_report("epsilon_halving", ratio, thresholds::halving_ratio, Bound::at_least,
                     "halving;gamma=" + fmt(gamma) + ";beta=" + fmt(beta) + ";horizon=" + fmt(horizon),
                     "coarse=" + fmt(coarse) + " fine=" + fmt(fine));
}

CheckReport check_acceleration_rule(double gamma, double beta, int rho, const ModelSpec& spec, const Vec& init,
                                    double horizon) {
  require(rho >= 1, "check_acceleration_rule: rho must be a positive integer");
  const HyperPair fast = acceleration_pair(gamma, beta, rho);
  const long K = static_cast<long>(std::floor(horizon / epsilon_of(fast.gamma, fast.beta) + 1e-9));
  const auto slow_path = mgd_iterates(spec, init, gamma, beta, rho * K);
  const auto fast_path = mgd_iterates(spec, init, fast.gamma, fast.beta, K);
  const double dev = sup_relative(slow_path, fast_path, rho);
  return make_report("acceleration_rho" + std::to_string(rho), dev, thresholds::acceleration, Bound::at_most,
                     "acceleration;gamma=" + fmt(gamma) + ";beta=" + fmt(beta) + ";rho=" + std::to_string(rho),
                     "pair=(" + fmt(fast.gamma) + "," + fmt(fast.beta) + ")");
}

std::vector<CheckReport> check_gd_contrast(double gamma, int rho, const ModelSpec& spec, const Vec& init,
                                           double horizon) {
  require(rho >= 2, "check_gd_contrast: rho must be at least 2");
  const double big = rho * rho * gamma;
  const long K = static_cast<long>(std::floor(horizon / big + 1e-9));
  const auto fast_path = mgd_iterates(spec, init, big, 0.0, K);
  const auto slow_path = mgd_iterates(spec, init, gamma, 0.0, rho * rho * K);
  const double matched = sup_relative(slow_path, fast_path, rho * rho);
  const double unmatched = sup_relative(slow_path, fast_path, rho);
  const std::string ctx = "gd_contrast;gamma=" + fmt(gamma) + ";rho=" + std::to_string(rho);
  return {make_report("gd_contrast_matched", matched, thresholds::gd_contrast, Bound::at_most, ctx,
                      "GD(rho^2 gamma) vs GD(gamma) at rho^2 k"),
          make_report("gd_contrast_unmatched", unmatched, thresholds::gd_contrast, Bound::at_least, ctx,
                      "GD(rho^2 gamma) vs GD(gamma) at rho k")};
}

CheckReport check_time_rescaling(double a, double b, const ModelSpec& spec, const SecondOrderState& init,
                                 const IntegratorConfig& cfg) {
  const DeviationReport dev = time_rescaled_equivalence(a, b, spec, init, cfg);
  return make_report("time_rescaling", dev.max_abs, thresholds::time_rescaling, Bound::at_most,
                     "time_rescaling;a=" + fmt(a) + ";b=" + fmt(b), "samples=" + std::to_string(dev.samples));
}

Vec diagonal_init(Eigen::Index d, double alpha) {
  Vec w = Vec::Zero(2 * d);
  w.head(d).setConstant(alpha);
  return w;
}

std::vector<CheckReport> check_conservation_suite(std::shared_ptr<const Dataset> instance,
                                                  const ConservationConfig& cfg) {
  const ModelSpec spec = ModelSpec::diagonal_net(instance);
  const Eigen::Index d = instance->d();
  const Vec init = diagonal_init(d, cfg.alpha);

  // Job 0 is GF, then one job per MGF lambda, then one per MGD run.
  const std::size_t n_mgf = cfg.mgf_lambdas.size(), n_mgd = cfg.mgd_runs.size();
  ContinuousTrajectory gf;
  std::vector<ContinuousTrajectory> mgf(n_mgf);
  std::vector<TrajectoryLog> mgd(n_mgd);
  parallel_for(1 + n_mgf + n_mgd, cfg.workers, [&](std::size_t j) {
    if (j == 0) {
      gf = integrate_gf(spec, init, cfg.gf);
    } else if (j <= n_mgf) {
      mgf[j - 1] = integrate_mgf(spec, cfg.mgf_lambdas[j - 1], {init, Vec::Zero(init.size()), 0.0}, cfg.mgf);
    } else {
      mgd[j - 1 - n_mgf] = run_mgd(spec, init, cfg.mgd_runs[j - 1 - n_mgf]);
    }
  });

  std::vector<CheckReport> out;
  const std::string base = "alpha=" + fmt(cfg.alpha) + ";d=" + std::to_string(d);

  {
    const Vec delta0 = balancedness(gf.initial_pm);
    double drift = 0.0;
    auto consider = [&](const Vec& delta) {
      drift = std::max(drift, (delta - delta0).lpNorm<Eigen::Infinity>() / delta0.lpNorm<Eigen::Infinity>());
    };
    for (const Vec& s : gf.balancedness_samples) consider(s);
    consider(balancedness(gf.terminal_pm));
    out.push_back(make_report("gf_balancedness_drift", drift, thresholds::gf_drift, Bound::at_most,
                              "gf;" + base, "samples=" + std::to_string(gf.balancedness_samples.size())));
  }

  {
    double worst = n_mgf ? -std::numeric_limits<double>::infinity() : kNaN;
    for (const auto& t : mgf) worst = std::max(worst, t.energy_max_increase);
    out.push_back(make_report("energy_monotone", worst, thresholds::energy_slack * cfg.mgf.abs_tol, Bound::at_most,
                              "energy;" + base, "runs=" + std::to_string(n_mgf)));
  }

  {
    double all = n_mgd ? 0.0 : kNaN, gd = kNaN;
    long crossing_runs = 0;
    for (std::size_t j = 0; j < n_mgd; ++j) {
      all = std::max(all, mgd[j].identity_violation);
      if (cfg.mgd_runs[j].beta == 0.0) gd = std::isnan(gd) ? mgd[j].identity_violation : std::max(gd, mgd[j].identity_violation);
      if (mgd[j].total_crossings() > 0) ++crossing_runs;
    }
    out.push_back(make_report("finite_n_identity", all, thresholds::identity, Bound::at_most, "identity;" + base,
                              "runs=" + std::to_string(n_mgd) + " with_crossings=" + std::to_string(crossing_runs)));
    if (!std::isnan(gd))
      out.push_back(make_report("finite_n_identity_gd", gd, thresholds::identity_gd, Bound::at_most,
                                "identity_gd;" + base));
  }

  {
    // max over crossing-free runs of max(Delta_inf / Delta_0, |theta_tilde0|_inf / alpha^2); < 1 passes.
    double worst = -std::numeric_limits<double>::infinity();
    int runs = 0;
    auto consider = [&](const BiasReport& r) {
      if (!r.crossing_free() || r.lambda == 0.0) return;
      ++runs;
      worst = std::max(worst, (r.delta_inf.array() / r.delta0.array()).maxCoeff());
      worst = std::max(worst, r.theta_tilde0.lpNorm<Eigen::Infinity>() / (cfg.alpha * cfg.alpha));
    };
    for (const auto& t : mgf) consider(bias_report(t, *instance, cfg.alpha, false));
    for (std::size_t j = 0; j < n_mgd; ++j) consider(bias_report(mgd[j], *instance, cfg.alpha, cfg.mgd_runs[j], false));
    out.push_back(make_report("no_crossing_contraction", runs ? worst : kNaN, 1.0, Bound::below, "monotone;" + base,
                              "crossing_free_runs=" + std::to_string(runs)));
  }
  return out;
}

SmallLambdaResult check_small_lambda_regime(std::shared_ptr<const Dataset> instance,
                                            const std::vector<double>& lambda_grid, double alpha,
                                            const IntegratorConfig& cfg, int workers) {
  require(!lambda_grid.empty(), "check_small_lambda_regime: empty grid");
  const ModelSpec spec = ModelSpec::diagonal_net(instance);
  const Vec init = diagonal_init(instance->d(), alpha);
  SmallLambdaResult res;
  res.threshold_lambda = small_lambda_threshold(*instance, Vec::Constant(instance->d(), alpha * alpha));

  std::vector<double> grid = lambda_grid;
  std::sort(grid.begin(), grid.end());
  res.crossings.assign(grid.size(), 0);
  parallel_for(grid.size(), workers, [&](std::size_t j) {
    if (grid[j] == 0.0) return;
    res.crossings[j] = integrate_mgf(spec, grid[j], {init, Vec::Zero(init.size()), 0.0}, cfg).total_crossings();
  });

  long below = 0;
  int tested = 0;
  for (std::size_t j = 0; j < grid.size(); ++j) {
    if (grid[j] <= res.threshold_lambda) {
      below += res.crossings[j];
      ++tested;
    }
  }
  for (std::size_t j = 0; j < grid.size() && res.crossings[j] == 0; ++j) res.largest_crossing_free = grid[j];

  std::string ctx = "small_lambda;alpha=" + fmt(alpha) + ";stop=" + fmt(cfg.stop_loss);
  for (double l : grid) ctx += ";" + fmt(l);
  res.report = make_report("small_lambda_no_crossing", tested ? static_cast<double>(below) : kNaN, 0.0,
                           Bound::at_most, ctx,
                           "threshold=" + fmt(res.threshold_lambda) + " tested=" + std::to_string(tested) +
                               " largest_crossing_free=" + fmt(res.largest_crossing_free));
  return res;
}

double normalized_distance(const BiasReport& r, const Dataset& ds) {
  const DualCertificate cert = solve_min_entropy_interpolator(ds, EntropyScale(r.delta_inf), r.theta_tilde0);
  return (r.theta_recovered - cert.theta).norm() / cert.theta.norm();
}

std::vector<CheckReport> check_implicit_bias(const BiasReport& r, const Dataset& ds) {
  const std::string ctx = "bias;gamma=" + fmt(r.gamma) + ";beta=" + fmt(r.beta) + ";lambda=" + fmt(r.lambda) +
                          ";seed=" + std::to_string(r.seed) + (r.continuous ? ";mgf" : ";mgd");
  const std::string detail = "source=" + r.s_source + " crossings=" + std::to_string(r.crossings_plus + r.crossings_minus);
  return {make_report("normalized_distance", normalized_distance(r, ds), thresholds::normalized_distance,
                      Bound::below, ctx, detail),
          make_report("kkt_residual", r.kkt_residual, thresholds::kkt, Bound::at_most, ctx, detail)};
}

Vec basis_pursuit(const Mat& X, const Vec& y) {
  // min 1^T (p + q) s.t. X (p - q) = y, p, q >= 0, by a two-phase revised
  // simplex with Bland's rule. The basis is refactored every iteration so
  // that rounding does not accumulate. Columns: p (d), q (d), artificials (n).
  const Eigen::Index n = X.rows(), d = X.cols();
  const Eigen::Index nv = 2 * d + n;
  Mat A = Mat::Zero(n, nv);
  A.leftCols(d) = X;
  A.middleCols(d, d) = -X;
  for (Eigen::Index i = 0; i < n; ++i) A(i, 2 * d + i) = y(i) < 0.0 ? -1.0 : 1.0;
  std::vector<Eigen::Index> basis(n);
  std::iota(basis.begin(), basis.end(), 2 * d);
  std::vector<char> in_basis(nv, 0);
  for (Eigen::Index c : basis) in_basis[c] = 1;
  constexpr double tol = 1e-11;

  Mat B(n, n);
  Eigen::PartialPivLU<Mat> lu;
  Vec xB;
  auto factor = [&] {
    for (Eigen::Index i = 0; i < n; ++i) B.col(i) = A.col(basis[i]);
    lu.compute(B);
    xB = lu.solve(y);
  };
  auto swap_in = [&](Eigen::Index row, Eigen::Index c) {
    in_basis[basis[row]] = 0;
    basis[row] = c;
    in_basis[c] = 1;
  };
  auto optimise = [&](const Vec& cost, Eigen::Index allowed) {
    for (int iter = 0; iter < 20000; ++iter) {
      factor();
      Vec cB(n);
      for (Eigen::Index i = 0; i < n; ++i) cB(i) = cost(basis[i]);
      const Vec pi = B.transpose().partialPivLu().solve(cB);
      Eigen::Index enter = -1;
      for (Eigen::Index c = 0; c < allowed; ++c)
        if (!in_basis[c] && cost(c) - pi.dot(A.col(c)) < -tol) {
          enter = c;
          break;
        }
      if (enter < 0) return;
      const Vec dir = lu.solve(A.col(enter));
      Eigen::Index leave = -1;
      double best = std::numeric_limits<double>::infinity();
      for (Eigen::Index i = 0; i < n; ++i) {
        if (dir(i) <= tol) continue;
        const double ratio = std::max(xB(i), 0.0) / dir(i);
        if (ratio < best - 1e-14 || (ratio <= best + 1e-14 && leave >= 0 && basis[i] < basis[leave])) {
          best = ratio;
          leave = i;
        }
      }
      if (leave < 0) throw ContractError("basis_pursuit: unbounded");
      swap_in(leave, enter);
    }
    throw ConvergenceError("basis_pursuit: iteration limit", kNaN);
  };

  Vec phase1 = Vec::Zero(nv);
  phase1.tail(n).setOnes();
  optimise(phase1, nv);
  factor();
  double infeasibility = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    if (basis[i] >= 2 * d) infeasibility += std::abs(xB(i));
  if (infeasibility > 1e-9 * std::max(1.0, y.norm())) throw ContractError("basis_pursuit: infeasible");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (basis[i] < 2 * d) continue;
    factor();
    const Vec row = lu.solve(Mat::Identity(n, n)).row(i);
    for (Eigen::Index c = 0; c < 2 * d; ++c)
      if (!in_basis[c] && std::abs(row.dot(A.col(c))) > 1e-9) {
        swap_in(i, c);
        break;
      }
  }
  Vec phase2 = Vec::Zero(nv);
  phase2.head(2 * d).setOnes();
  optimise(phase2, 2 * d);

  Vec x = Vec::Zero(nv);
  for (Eigen::Index i = 0; i < n; ++i) x(basis[i]) = xB(i);
  return x.head(d) - x.segment(d, d);
}

DualSuiteResult check_dual_solver(int instances, std::uint64_t seed) {
  require(instances >= 1, "check_dual_solver: need at least one instance");
  DualSuiteResult res;
  auto draw_instance = [&](std::uint64_t k, Dataset& ds) {
    CounterRng rng(derive_seed(seed, k), stream::features);
    const int d = 2 + static_cast<int>(rng.below(29));       // 2..30
    const int n = 1 + static_cast<int>(rng.below(d - 1));    // 1..d-1
    ds.features.resize(n, d);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) ds.features(i, j) = rng.normal();
    Vec truth = Vec::Zero(d);
    for (int j = 0; j < d; ++j)
      if (rng.uniform() < 0.3) truth(j) = rng.normal();
    if (truth.isZero()) truth(0) = 1.0;
    ds.targets = ds.features * truth;
    return rng;
  };

  for (int k = 0; k < instances; ++k) {
    Dataset ds;
    CounterRng rng = draw_instance(k, ds);
    const Eigen::Index d = ds.d();
    Vec delta(d), tilde(d);
    for (Eigen::Index j = 0; j < d; ++j) {
      delta(j) = std::pow(10.0, -4.0 + 4.0 * rng.uniform());
      tilde(j) = 1e-3 * rng.normal();
    }
    const EntropyScale scale(delta);
    const DualCertificate cert = solve_min_entropy_interpolator(ds, scale, tilde);
    res.max_feasibility = std::max(res.max_feasibility, cert.feasibility);
    res.max_kkt = std::max(res.max_kkt, kkt_residual(ds, cert.theta, scale, tilde));
  }

  // l2 endpoint on general instances, l1 endpoint (optimal value) on the
  // sparse-regression family.
  const int endpoints = std::min(instances, 10);
  for (int k = 0; k < endpoints; ++k) {
    Dataset ds;
    draw_instance(1000003 + k, ds);
    const Mat& X = ds.features;
    const Vec min_norm = X.transpose() * (X * X.transpose()).ldlt().solve(ds.targets);
    const Vec l2 = solve_min_entropy_interpolator(ds, EntropyScale::uniform(ds.d(), 1e6), Vec::Zero(ds.d())).theta;
    res.l2_endpoint_error = std::max(res.l2_endpoint_error, (l2 - min_norm).norm() / min_norm.norm());

    const Dataset sr = gen_sparse_regression({.seed = seed + static_cast<std::uint64_t>(k)});
    const Vec bp = basis_pursuit(sr.features, sr.targets);
    const Vec l1 = solve_min_entropy_interpolator(sr, EntropyScale::uniform(sr.d(), 1e-10), Vec::Zero(sr.d())).theta;
    res.l1_endpoint_error =
        std::max(res.l1_endpoint_error, std::abs(l1.lpNorm<1>() - bp.lpNorm<1>()) / bp.lpNorm<1>());
    res.l1_endpoint_distance = std::max(res.l1_endpoint_distance, (l1 - bp).norm() / bp.norm());
  }

  const std::string ctx = "dual;instances=" + std::to_string(instances) + ";seed=" + std::to_string(seed);
  res.reports.push_back(make_report("dual_feasibility", res.max_feasibility, thresholds::dual_feasibility,
                                    Bound::at_most, ctx));
  res.reports.push_back(make_report("dual_kkt", res.max_kkt, thresholds::dual_kkt, Bound::at_most, ctx));
  res.reports.push_back(make_report("dual_l2_endpoint", res.l2_endpoint_error, thresholds::dual_endpoint,
                                    Bound::at_most, ctx, "Delta=1e6 vs minimum-norm interpolator"));
  res.reports.push_back(make_report("dual_l1_endpoint", res.l1_endpoint_error, thresholds::dual_endpoint,
                                    Bound::at_most, ctx, "Delta=1e-10 l1 value vs basis pursuit; distance " + fmt(res.l1_endpoint_distance)));
  return res;
}

CheckReport check_gradients(const ModelSpec& spec, int probes, std::uint64_t seed, std::string name) {
  require(probes >= 1, "check_gradients: need at least one probe");
  const Eigen::Index D = spec.parameter_dim();
  const MlpModel* mlp = std::get_if<MlpModel>(&spec.kind());
  const bool kinked = mlp && mlp->activation == Activation::relu;
  constexpr double h = 1e-5;
  CounterRng rng(seed, stream::init);
  double worst = 0.0;
  for (int p = 0; p < probes; ++p) {
    Vec w(D);
    for (int attempt = 0;; ++attempt) {
      if (mlp)
        w = draw_mlp_weights(*mlp, rng);
      else
        for (Eigen::Index j = 0; j < D; ++j) w(j) = rng.normal();
      if (!kinked || mlp_min_abs_preactivation(*mlp, w) > 1e-3 || attempt >= 100) break;
    }
    Vec v(D);
    for (Eigen::Index j = 0; j < D; ++j) v(j) = rng.normal();
    v.normalize();
    const Vec g = network_value_and_grad(spec, w).second;
    const double fd = (network_value(spec, w + h * v) - network_value(spec, w - h * v)) / (2.0 * h);
    worst = std::max(worst, std::abs(fd - g.dot(v)) / std::max(g.norm(), 1e-12));
  }
  return make_report("gradient_" + name, worst, thresholds::gradient, Bound::below,
                     "gradient;" + name + ";probes=" + std::to_string(probes) + ";seed=" + std::to_string(seed));
}

std::vector<CheckReport> run_verify_suite(const SuiteConfig& cfg) {
  const ModelSpec demo = quadratic_demo_spec();
  const Vec demo_init = quadratic_demo_init();
  const double T = quadratic_demo_horizon;
  auto instance = std::make_shared<const Dataset>(gen_sparse_regression({.seed = cfg.seed}));
  const double thr = small_lambda_threshold(*instance, Vec::Constant(instance->d(), cfg.alpha * cfg.alpha));

  using Job = std::function<std::vector<CheckReport>()>;
  std::vector<Job> jobs;
  jobs.push_back([&] { return std::vector{check_discretization_correspondence(0.01, 0.9, demo, demo_init, T)}; });
  jobs.push_back([&] {
    return std::vector{check_discretization_correspondence(0.01, 0.9, demo, demo_init, T, LambdaMap::central)};
  });
  jobs.push_back([&] {
    CheckReport r = check_discretization_correspondence(1e-4, 0.0, demo, demo_init, 20.0, LambdaMap::primary,
                                                        thresholds::euler_flow);
    r.name = "euler_flow";
    return std::vector{r};
  });
  jobs.push_back([&] { return std::vector{check_epsilon_halving(0.01, 0.9, demo, demo_init, T)}; });
  jobs.push_back([&] {
    return std::vector{check_acceleration_rule(0.01, 0.9, 1, demo, demo_init, T),
                       check_acceleration_rule(0.01, 0.9, 2, demo, demo_init, T)};
  });
  jobs.push_back([&] { return check_gd_contrast(0.01, 2, demo, demo_init, T); });
  jobs.push_back([&] {
    IntegratorConfig ic;
    for (int k = 1; k <= 60; ++k) ic.sample_times.push_back(0.5 * k);
    ic.max_time = 30.0;
    return std::vector{check_time_rescaling(4.0, 2.0, demo, {demo_init, Eigen::Vector2d(0.3, -0.2), 0.0}, ic)};
  });
  jobs.push_back([&] {
    ConservationConfig cc;
    cc.alpha = cfg.alpha;
    cc.gf.stop_loss = cfg.mgf_stop_loss;
    cc.gf.sample_every_steps = 100;
    cc.mgf.stop_loss = cfg.mgf_stop_loss;
    for (auto [g, b] : {std::pair{0.1, 0.0}, std::pair{0.05, 0.5}, std::pair{0.01, 0.9}}) {
      DiscreteHyper h;
      h.gamma = g;
      h.beta = b;
      h.sample_every = 1000;
      h.record_theta = false;
      cc.mgd_runs.push_back(h);
    }
    return check_conservation_suite(instance, cc);
  });
  jobs.push_back([&] {
    IntegratorConfig ic;
    ic.stop_loss = 1e-4;
    return std::vector{check_small_lambda_regime(instance, {0.0, thr, 1e-3, 1e-2, 0.1, 0.2, 0.3}, cfg.alpha, ic).report};
  });
  jobs.push_back([&] {
    const ModelSpec spec = ModelSpec::diagonal_net(instance);
    const Vec init = diagonal_init(instance->d(), cfg.alpha);
    DiscreteHyper h;
    h.gamma = 0.1;
    h.record_theta = false;
    h.sample_every = 1000;
    BiasReport discrete = bias_report(run_mgd(spec, init, h), *instance, cfg.alpha, h);
    discrete.seed = cfg.seed;
    IntegratorConfig ic;
    ic.stop_loss = cfg.mgf_stop_loss;
    BiasReport flow = bias_report(integrate_mgf(spec, 0.1, {init, Vec::Zero(init.size()), 0.0}, ic), *instance,
                                  cfg.alpha);
    flow.seed = cfg.seed;
    auto out = check_implicit_bias(discrete, *instance);
    for (auto& r : check_implicit_bias(flow, *instance)) out.push_back(r);
    return out;
  });
  jobs.push_back([&] { return check_dual_solver(100, cfg.seed).reports; });
  jobs.push_back([&] {
    std::vector<CheckReport> out;
    CounterRng rng(cfg.seed, stream::init);
    Mat M(6, 6);
    for (Eigen::Index i = 0; i < M.size(); ++i) M(i) = rng.normal();
    Vec b(6);
    for (Eigen::Index i = 0; i < 6; ++i) b(i) = rng.normal();
    out.push_back(check_gradients(ModelSpec::quadratic(M.transpose() * M, b), 100, cfg.seed, "quadratic"));
    out.push_back(check_gradients(ModelSpec::diagonal_net(instance), 100, cfg.seed, "diagonal_net"));
    const TeacherStudentInstance ts = gen_teacher_student({.seed = cfg.seed});
    out.push_back(check_gradients(ts.student, 100, cfg.seed, "relu_mlp"));
    out.push_back(check_gradients(ModelSpec::deep_linear({30, 60, 120, 60, 1}, instance), 100, cfg.seed,
                                  "deep_linear"));
    return out;
  });

  std::vector<std::vector<CheckReport>> results(jobs.size());
  parallel_for(jobs.size(), cfg.workers, [&](std::size_t j) {
    try {
      results[j] = jobs[j]();
    } catch (const std::exception& e) {
      CheckReport r;
      r.name = "job_" + std::to_string(j);
      r.measured = kNaN;
      r.detail = std::string("error: ") + e.what();
      results[j] = {r};
    }
  });
  std::vector<CheckReport> all;
  for (auto& v : results)
    for (auto& r : v) all.push_back(std::move(r));
  return all;
}

void write_check_csv(const std::vector<CheckReport>& reports, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << "check,status,measured,threshold,bound,context,detail\n";
  for (const auto& r : reports) {
    std::string detail = r.detail;
    std::replace(detail.begin(), detail.end(), ',', ';');
    out << r.name << ',' << (r.pass ? "pass" : "fail") << ',' << format_double(r.measured) << ','
        << format_double(r.threshold) << ',' << to_string(r.bound) << ',' << r.context << ',' << detail << '\n';
  }
}

}  // namespace mlab
