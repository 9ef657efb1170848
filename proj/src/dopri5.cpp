#include "mlab/dopri5.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mlab {

namespace {

constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                 a65 = -5103.0 / 18656;
constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113, a74 = 125.0 / 192, a75 = -2187.0 / 6784,
                 a76 = 11.0 / 84;
constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                 e6 = 22.0 / 525, e7 = -1.0 / 40;
constexpr double d1 = -12715105075.0 / 11282082432.0, d3 = 87487479700.0 / 32700410799.0,
                 d4 = -10690763975.0 / 1880347072.0, d5 = 701980252875.0 / 199316789632.0,
                 d6 = -1453857185.0 / 822651844.0, d7 = 69997945.0 / 29380423.0;

constexpr double kSafe = 0.9, kFacMin = 0.2, kFacMax = 10.0, kBeta = 0.04;
constexpr double kExpo = 0.2 - kBeta * 0.75;

}  // namespace

Dopri5::Dopri5(Rhs f, double t0, const Vec& y0, Options opt)
    : f_(std::move(f)), opt_(std::move(opt)), t_(t0), t_old_(t0), y_(y0), y_old_(y0) {
  require(opt_.rel_tol > 0.0 && opt_.abs_tol > 0.0, "Dopri5: tolerances must be positive");
  require(y0.allFinite(), "Dopri5: initial state must be finite");
  if (opt_.error_weight.size() == 0) opt_.error_weight = Eigen::ArrayXd::Ones(y0.size());
  require(opt_.error_weight.size() == y0.size(), "Dopri5: error weight size mismatch");
  const auto n = y0.size();
  for (Vec* v : {&k1_, &k2_, &k3_, &k4_, &k5_, &k6_, &k7_, &tmp_, &y_new_, &err_, &r1_, &r2_, &r3_, &r4_, &r5_})
    v->resize(n);
  f_(t_, y_, k1_);
  ++evals_;
  r1_ = y_;
  r2_.setZero();
  r3_.setZero();
  r4_.setZero();
  r5_.setZero();
  h_ = opt_.initial_step > 0.0 ? opt_.initial_step : initial_step_guess();
}

double Dopri5::error_norm(const Vec& err, const Vec& y_new) const {
  double sum = 0.0;
  double count = 0.0;
  for (Eigen::Index i = 0; i < err.size(); ++i) {
    if (opt_.error_weight(i) == 0.0) continue;
    const double sk = opt_.abs_tol + opt_.rel_tol * std::max(std::abs(y_(i)), std::abs(y_new(i)));
    const double q = err(i) / sk;
    sum += opt_.error_weight(i) * q * q;
    count += opt_.error_weight(i);
  }
  return count > 0.0 ? std::sqrt(sum / count) : 0.0;
}

double Dopri5::initial_step_guess() {
  // Hairer-Norsett-Wanner starting step heuristic.
  auto scaled_norm = [&](const Vec& v) {
    double sum = 0.0, count = 0.0;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      if (opt_.error_weight(i) == 0.0) continue;
      const double sk = opt_.abs_tol + opt_.rel_tol * std::abs(y_(i));
      sum += (v(i) / sk) * (v(i) / sk);
      count += 1.0;
    }
    return count > 0.0 ? std::sqrt(sum / count) : 0.0;
  };
  const double dnf = scaled_norm(k1_);
  const double dny = scaled_norm(y_);
  double h = (dnf <= 1e-10 || dny <= 1e-10) ? 1e-6 : 0.01 * dny / dnf;
  if (opt_.max_step > 0.0) h = std::min(h, opt_.max_step);
  tmp_ = y_ + h * k1_;
  f_(t_ + h, tmp_, k2_);
  ++evals_;
  const double der2 = scaled_norm(k2_ - k1_) / h;
  const double der12 = std::max(std::abs(der2), std::sqrt(dnf));
  const double h1 = der12 <= 1e-15 ? std::max(1e-6, std::abs(h) * 1e-3) : std::pow(0.01 / der12, 0.2);
  h = std::min(100.0 * h, h1);
  if (opt_.max_step > 0.0) h = std::min(h, opt_.max_step);
  return h;
}

void Dopri5::step() {
  for (;;) {
    double h = h_;
    bool capped = false;
    // Stretch by up to 1% rather than leave a sliver before t_stop.
    if (t_ + 1.01 * h >= t_stop_) {
      h = t_stop_ - t_;
      capped = true;
    }
    if (!(h > 0.0) || h < 8.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(t_)))
      throw IntegrationError("step size underflow at t = " + std::to_string(t_), t_);

    tmp_ = y_ + h * a21 * k1_;
    f_(t_ + c2 * h, tmp_, k2_);
    tmp_ = y_ + h * (a31 * k1_ + a32 * k2_);
    f_(t_ + c3 * h, tmp_, k3_);
    tmp_ = y_ + h * (a41 * k1_ + a42 * k2_ + a43 * k3_);
    f_(t_ + c4 * h, tmp_, k4_);
    tmp_ = y_ + h * (a51 * k1_ + a52 * k2_ + a53 * k3_ + a54 * k4_);
    f_(t_ + c5 * h, tmp_, k5_);
    tmp_ = y_ + h * (a61 * k1_ + a62 * k2_ + a63 * k3_ + a64 * k4_ + a65 * k5_);
    f_(t_ + h, tmp_, k6_);
    y_new_ = y_ + h * (a71 * k1_ + a73 * k3_ + a74 * k4_ + a75 * k5_ + a76 * k6_);
    f_(t_ + h, y_new_, k7_);
    evals_ += 6;

    err_ = h * (e1 * k1_ + e3 * k3_ + e4 * k4_ + e5 * k5_ + e6 * k6_ + e7 * k7_);
    double err = error_norm(err_, y_new_);
    if (!std::isfinite(err) || !y_new_.allFinite()) err = 1e10;

    const double fac11 = std::pow(err, kExpo);
    double fac = fac11 / std::pow(facold_, kBeta);
    fac = std::max(1.0 / kFacMax, std::min(1.0 / kFacMin, fac / kSafe));
    double h_new = h / fac;

    if (err <= 1.0) {
      facold_ = std::max(err, 1e-4);
      // Continuous extension coefficients.
      r1_ = y_;
      r2_ = y_new_ - y_;
      r3_ = h * k1_ - r2_;
      r4_ = r2_ - h * k7_ - r3_;
      r5_ = h * (d1 * k1_ + d3 * k3_ + d4 * k4_ + d5 * k5_ + d6 * k6_ + d7 * k7_);

      y_old_ = y_;
      t_old_ = t_;
      y_ = y_new_;
      k1_ = k7_;
      t_ = capped ? t_stop_ : t_ + h;
      if (opt_.max_step > 0.0) h_new = std::min(h_new, opt_.max_step);
      if (rejected_last_) h_new = std::min(h_new, h);
      rejected_last_ = false;
      // Keep the natural step when only the stop cap shortened this one.
      h_ = capped ? std::max(h_new, h_) : h_new;
      ++accepted_;
      return;
    }
    h_new = h / std::min(1.0 / kFacMin, fac11 / kSafe);
    h_ = h_new;
    rejected_last_ = true;
    ++rejected_;
  }
}

Vec Dopri5::dense(double t) const {
  const double h = t_ - t_old_;
  const double s = h > 0.0 ? (t - t_old_) / h : 0.0;
  const double s1 = 1.0 - s;
  return r1_ + s * (r2_ + s1 * (r3_ + s * (r4_ + s1 * r5_)));
}

void Dopri5::dense_into(double t, Vec& out) const {
  const double h = t_ - t_old_;
  const double s = h > 0.0 ? (t - t_old_) / h : 0.0;
  const double s1 = 1.0 - s;
  out = r1_ + s * (r2_ + s1 * (r3_ + s * (r4_ + s1 * r5_)));
}

double Dopri5::dense(double t, Eigen::Index i) const {
  const double h = t_ - t_old_;
  const double s = h > 0.0 ? (t - t_old_) / h : 0.0;
  const double s1 = 1.0 - s;
  return r1_(i) + s * (r2_(i) + s1 * (r3_(i) + s * (r4_(i) + s1 * r5_(i))));
}

}  // namespace mlab
