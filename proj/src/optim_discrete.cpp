#include "mlab/optim_discrete.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>

#include "mlab/rng.hpp"

namespace mlab {

namespace {

constexpr double kDivergenceFactor = 1e12;
constexpr double kZeroNudge = 1e-300;

bool all_finite(const Vec& v) { return v.allFinite(); }

bool diverged(double loss, double initial) {
  return !std::isfinite(loss) || loss > kDivergenceFactor * initial;
}

}  // namespace

std::string to_string(StopReason r) {
  switch (r) {
    case StopReason::converged: return "converged";
    case StopReason::max_steps: return "max_steps";
    case StopReason::diverged: return "diverged";
  }
  return "unknown";
}

std::string to_string(Sampler s) {
  return s == Sampler::with_replacement ? "with_replacement" : "without_replacement_cyclic";
}

std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void validate(const DiscreteHyper& h) {
  require(h.gamma > 0.0 && std::isfinite(h.gamma), "DiscreteHyper: gamma must be positive");
  require(h.beta >= 0.0 && h.beta < 1.0, "DiscreteHyper: beta must lie in [0, 1)");
  require(h.stop_loss >= 0.0, "DiscreteHyper: stop_loss must be nonnegative");
  require(h.max_steps >= 0, "DiscreteHyper: max_steps must be nonnegative");
  require(h.sample_every >= 1, "DiscreteHyper: sample_every must be >= 1");
  require(h.batch_size >= 0, "DiscreteHyper: batch_size must be >= 0");
}

Vec mgd_step(const Vec& w_k, const Vec& w_prev, const Vec& grad, const DiscreteHyper& h, long step) {
  require(w_k.size() == w_prev.size() && w_k.size() == grad.size(), "mgd_step: dimension mismatch");
  Vec next = w_k - h.gamma * grad + h.beta * (w_k - w_prev);
  if (!all_finite(next)) throw DivergenceError(step);
  return next;
}

long TrajectoryLog::total_crossings() const {
  if (!diagonal) return 0;
  return crossings_plus.sum() + crossings_minus.sum();
}

double lambda_of(double gamma, double beta, LambdaMap map) {
  require(beta >= 0.0 && beta < 1.0, "lambda_of: beta must lie in [0, 1)");
  const double base = gamma / ((1.0 - beta) * (1.0 - beta));
  return map == LambdaMap::primary ? base : 0.5 * (1.0 + beta) * base;
}

double lambda_of_central(double gamma, double beta) { return lambda_of(gamma, beta, LambdaMap::central); }

double epsilon_of(double gamma, double beta) {
  require(beta >= 0.0 && beta < 1.0, "epsilon_of: beta must lie in [0, 1)");
  return gamma / (1.0 - beta);
}

HyperPair acceleration_pair(double gamma, double beta, double rho) {
  require(rho > 0.0, "acceleration_pair: rho must be positive");
  require(beta >= 0.0 && beta < 1.0, "acceleration_pair: beta must lie in [0, 1)");
  const double beta_hat = 1.0 - rho * (1.0 - beta);
  require(beta_hat >= 0.0 && beta_hat < 1.0, "acceleration_pair: rho * (1 - beta) must lie in (0, 1]");
  return {rho * rho * gamma, beta_hat};
}

// ---------------------------------------------------------------------------
// Generic full-batch driver.

namespace {

void sample_generic(TrajectoryLog& log, long step, const Vec& w, double loss) {
  log.steps.push_back(step);
  log.states.push_back(w);
  log.losses.push_back(loss);
}

TrajectoryLog run_generic(const ModelSpec& spec, const Vec& init, const DiscreteHyper& h) {
  TrajectoryLog log;
  Vec w = init;
  Vec w_prev = init;
  auto [value, grad] = network_value_and_grad(spec, w);
  log.initial_loss = value;
  double loss = value;
  long step = 1;
  sample_generic(log, step, w, loss);

  if (loss <= h.stop_loss) {
    log.stop_reason = StopReason::converged;
  } else {
    for (long k = 1; k <= h.max_steps; ++k) {
      Vec next;
      std::pair<double, Vec> vg;
      try {
        next = mgd_step(w, w_prev, grad, h, k);
        vg = network_value_and_grad(spec, next);
      } catch (const DivergenceError&) {
        log.stop_reason = StopReason::diverged;
        log.diverged_at = k + 1;
        break;
      } catch (const NonFiniteError&) {
        log.stop_reason = StopReason::diverged;
        log.diverged_at = k + 1;
        break;
      }
      if (!std::isfinite(vg.first)) {
        log.stop_reason = StopReason::diverged;
        log.diverged_at = k + 1;
        break;
      }
      w_prev = std::move(w);
      w = std::move(next);
      loss = vg.first;
      grad = std::move(vg.second);
      step = k + 1;
      if (diverged(loss, log.initial_loss)) {
        log.stop_reason = StopReason::diverged;
        log.diverged_at = step;
        break;
      }
      if (loss <= h.stop_loss) {
        log.stop_reason = StopReason::converged;
        break;
      }
      if (step % h.sample_every == 0) sample_generic(log, step, w, loss);
    }
  }
  if (log.steps.back() != step) sample_generic(log, step, w, loss);
  log.terminal_state = w;
  log.terminal_step = step;
  log.final_loss = loss;
  return log;
}

// ---------------------------------------------------------------------------
// Diagonal-network driver in (w+, w-) coordinates.

// Returns the gradient used for step k at the current predictor. A null
// function means full batch, where the gradient comes with the loss.
using BatchGradFn = std::function<void(const Vec& theta, Vec& grad)>;

void sample_diag(TrajectoryLog& log, long step, const PMState& pm, double loss, bool record) {
  log.steps.push_back(step);
  if (record) {
    const WeightState ws = ws_of(pm);
    Vec s(2 * ws.u.size());
    s << ws.u, ws.v;
    log.states.push_back(std::move(s));
  }
  log.losses.push_back(loss);
  log.balancedness_samples.push_back(balancedness(pm));
  log.crossings_plus_total.push_back(log.crossings_plus.sum());
  log.crossings_minus_total.push_back(log.crossings_minus.sum());
}

// Applies the exact-zero nudge and counts sign changes for one branch.
void advance_branch(Vec& next, const Vec& cur, Eigen::VectorXi& crossings, long& nudges) {
  for (Eigen::Index i = 0; i < next.size(); ++i) {
    if (next(i) == 0.0) {
      next(i) = std::copysign(kZeroNudge, cur(i));
      ++nudges;
    }
    if ((next(i) > 0.0) != (cur(i) > 0.0)) ++crossings(i);
  }
}

TrajectoryLog run_diag(const Dataset& ds, const PMState& init, const DiscreteHyper& h, const BatchGradFn& batch) {
  const auto d = ds.d();
  require(init.w_plus.size() == d && init.w_minus.size() == d, "run_mgd: init dimension mismatch");
  require((init.w_plus.array() != 0.0).all() && (init.w_minus.array() != 0.0).all(),
          "run_mgd: initial balancedness must be positive in every coordinate");

  TrajectoryLog log;
  log.diagonal = true;
  log.crossings_plus = Eigen::VectorXi::Zero(d);
  log.crossings_minus = Eigen::VectorXi::Zero(d);
  log.residues.emplace(h.beta, init);

  PMState cur = init;
  PMState prev = init;
  PMState next = init;
  Vec theta = predictor(cur);
  Vec resid(ds.n());
  Vec grad(d);
  Vec full_grad(d);
  double loss = loss_and_grad_into(ds, theta, resid, full_grad);
  if (!std::isfinite(loss)) throw NonFiniteError("run_mgd: initial loss");
  log.initial_loss = loss;
  long step = 1;
  sample_diag(log, step, cur, loss, h.record_theta);

  if (loss <= h.stop_loss) {
    log.stop_reason = StopReason::converged;
  } else {
    for (long k = 1; k <= h.max_steps; ++k) {
      const Vec* g = &full_grad;
      if (batch) {
        batch(theta, grad);
        g = &grad;
      }
      next.w_plus.array() = cur.w_plus.array() * (1.0 - h.gamma * g->array()) +
                            h.beta * (cur.w_plus.array() - prev.w_plus.array());
      next.w_minus.array() = cur.w_minus.array() * (1.0 + h.gamma * g->array()) +
                             h.beta * (cur.w_minus.array() - prev.w_minus.array());
      if (!all_finite(next.w_plus) || !all_finite(next.w_minus)) {
        log.stop_reason = StopReason::diverged;
        log.diverged_at = k + 1;
        break;
      }
      advance_branch(next.w_plus, cur.w_plus, log.crossings_plus, log.zero_perturbations);
      advance_branch(next.w_minus, cur.w_minus, log.crossings_minus, log.zero_perturbations);
      theta.array() = 0.25 * (next.w_plus.array().square() - next.w_minus.array().square());
      const double next_loss = loss_and_grad_into(ds, theta, resid, full_grad);
      if (!std::isfinite(next_loss)) {
        log.stop_reason = StopReason::diverged;
        log.diverged_at = k + 1;
        break;
      }
      log.residues->push(next);
      log.identity_violation = std::max(log.identity_violation, log.residues->identity_violation());

      std::swap(prev, cur);
      std::swap(cur, next);
      loss = next_loss;
      step = k + 1;
      if (diverged(loss, log.initial_loss)) {
        log.stop_reason = StopReason::diverged;
        log.diverged_at = step;
        break;
      }
      if (loss <= h.stop_loss) {
        log.stop_reason = StopReason::converged;
        break;
      }
      if (step % h.sample_every == 0) sample_diag(log, step, cur, loss, h.record_theta);
    }
  }
  if (log.steps.back() != step) sample_diag(log, step, cur, loss, h.record_theta);
  const WeightState ws = ws_of(cur);
  log.terminal_state.resize(2 * d);
  log.terminal_state << ws.u, ws.v;
  log.terminal_pm = cur;
  log.terminal_step = step;
  log.final_loss = loss;
  return log;
}

}  // namespace

TrajectoryLog run_mgd(const ModelSpec& spec, const Vec& init, const DiscreteHyper& h) {
  validate(h);
  require(init.size() == spec.parameter_dim(), "run_mgd: init dimension mismatch");
  require(init.allFinite(), "run_mgd: init must be finite");
  if (!spec.is_diagonal_net()) return run_generic(spec, init, h);

  const Dataset& ds = spec.dataset();
  const auto d = ds.d();
  const WeightState ws{init.head(d), init.tail(d)};
  check_nondegenerate(ws);
  return run_diag(ds, pm_of(ws), h, nullptr);
}

// ---------------------------------------------------------------------------

BatchSampler::BatchSampler(int n, int batch_size, Sampler kind, std::uint64_t seed)
    : n_(n), b_(batch_size), kind_(kind), seed_(seed) {
  require(n >= 1, "BatchSampler: n must be >= 1");
  require(batch_size >= 1 && batch_size <= n, "BatchSampler: batch size must lie in [1, n]");
  batch_.resize(static_cast<std::size_t>(b_));
}

void BatchSampler::refill() {
  CounterRng rng(derive_seed(seed_, epoch_++), stream::batches);
  perm_ = random_permutation(n_, rng);
  pos_ = 0;
}

const std::vector<int>& BatchSampler::next() {
  if (kind_ == Sampler::with_replacement) {
    // One generator per batch keeps the sequence a pure function of the batch index.
    CounterRng rng(derive_seed(seed_, draws_++), stream::batches);
    for (auto& i : batch_) i = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_)));
    return batch_;
  }
  for (auto& i : batch_) {
    if (pos_ >= perm_.size()) refill();
    i = perm_[pos_++];
  }
  return batch_;
}

TrajectoryLog run_smgd(std::shared_ptr<const Dataset> data, const WeightState& init, const DiscreteHyper& h,
                       std::uint64_t seed) {
  validate(h);
  require(data != nullptr, "run_smgd: null dataset");
  const auto n = static_cast<int>(data->n());
  const int B = h.batch_size == 0 ? n : h.batch_size;
  require(B <= n, "run_smgd: batch size exceeds n");
  check_nondegenerate(init);

  if (B == n) {
    const ModelSpec spec = ModelSpec::diagonal_net(data);
    Vec w(2 * data->d());
    w << init.u, init.v;
    return run_mgd(spec, w, h);
  }
  const Dataset& ds = *data;
  BatchSampler sampler(n, B, h.sampler, seed);
  return run_diag(ds, pm_of(init), h, [&](const Vec& theta, Vec& grad) {
    grad = batch_grad(ds, sampler.next(), theta);
  });
}

// ---------------------------------------------------------------------------

void write_trajectory_csv(const TrajectoryLog& log, const std::filesystem::path& path, bool with_theta) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const bool have_states = with_theta && !log.states.empty();
  Eigen::Index dim = 0;
  if (have_states) dim = log.diagonal ? log.states.front().size() / 2 : log.states.front().size();

  out << "step,loss";
  for (Eigen::Index j = 0; j < dim; ++j) out << ",theta_" << (j + 1);
  out << ",delta_min,delta_l2,crossings_plus_total,crossings_minus_total\n";
  for (std::size_t s = 0; s < log.steps.size(); ++s) {
    out << log.steps[s] << ',' << format_double(log.losses[s]);
    if (have_states) {
      const Vec& w = log.states[s];
      for (Eigen::Index j = 0; j < dim; ++j) {
        const double th = log.diagonal ? w(j) * w(dim + j) : w(j);
        out << ',' << format_double(th);
      }
    }
    if (log.diagonal) {
      const Vec& dl = log.balancedness_samples[s];
      out << ',' << format_double(dl.minCoeff()) << ',' << format_double(dl.norm()) << ','
          << log.crossings_plus_total[s] << ',' << log.crossings_minus_total[s] << '\n';
    } else {
      out << ",,,0,0\n";
    }
  }
}

}  // namespace mlab
