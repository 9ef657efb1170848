#include "mlab/residues.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace mlab {

namespace {

// h - ln(1 + h) for |h| small, summed from the alternating series.
double r_series(double h) {
  double term = h * h;
  double sum = 0.0;
  for (int j = 2; j < 60; ++j) {
    const double add = ((j % 2 == 0) ? 1.0 : -1.0) * term / j;
    sum += add;
    if (std::abs(add) <= 1e-18 * std::abs(sum)) break;
    term *= h;
  }
  return sum;
}

// r(z) given both h = z - 1 and z; the increment is used near z = 1, the
// ratio itself far from it where 1 + h has lost the low digits of z.
double r_of(double h, double z) {
  if (std::abs(h) < 1e-2) return r_series(h);
  if (std::abs(h) < 0.5) return h - std::log1p(h);
  return h - std::log(std::abs(z));
}

}  // namespace

double residue_r(double z) { return r_of(z - 1.0, z); }

double residue_ratio(double b, double a) {
  require(a != 0.0, "residue: zero denominator");
  require(b != 0.0, "residue: zero numerator");
  return r_of((b - a) / a, b / a);
}

ResidueAccumulator::ResidueAccumulator(double beta, const PMState& w0)
    : beta_(beta), w0_(w0), prev_(w0), cur_(w0) {
  require(beta >= 0.0 && beta < 1.0, "ResidueAccumulator: beta must lie in [0, 1)");
  require(w0.w_plus.size() == w0.w_minus.size(), "ResidueAccumulator: branch size mismatch");
  delta0_ = balancedness(w0);
  const auto d = w0.w_plus.size();
  for (Branch* b : {&plus_, &minus_}) {
    b->fwd = Vec::Zero(d);
    b->bwd = Vec::Zero(d);
    b->full = Vec::Zero(d);
    b->discounted = Vec::Zero(d);
  }
}

void ResidueAccumulator::update(Branch& b, const Vec& prev, const Vec& cur, const Vec& next, double beta) {
  for (Eigen::Index i = 0; i < cur.size(); ++i) {
    const double fwd = residue_ratio(next(i), cur(i));
    const double bwd = residue_ratio(cur(i), next(i));
    const double back = residue_ratio(prev(i), cur(i));
    const double R = fwd + beta * back;
    b.fwd(i) += fwd;
    b.bwd(i) += bwd;
    b.full(i) += R;
    b.discounted(i) = beta * b.discounted(i) + R;
  }
}

void ResidueAccumulator::push(const PMState& next) {
  require(next.w_plus.size() == cur_.w_plus.size() && next.w_minus.size() == cur_.w_minus.size(),
          "ResidueAccumulator: dimension mismatch");
  update(plus_, prev_.w_plus, cur_.w_plus, next.w_plus, beta_);
  update(minus_, prev_.w_minus, cur_.w_minus, next.w_minus, beta_);
  std::swap(prev_, cur_);
  cur_.w_plus = next.w_plus;
  cur_.w_minus = next.w_minus;
  ++steps_;
}

Vec ResidueAccumulator::s_plus() const { return (plus_.fwd + beta_ * plus_.bwd) / (1.0 - beta_); }
Vec ResidueAccumulator::s_minus() const { return (minus_.fwd + beta_ * minus_.bwd) / (1.0 - beta_); }

Vec ResidueAccumulator::log_delta_ratio() const {
  const Vec total = (plus_.full - beta_ * plus_.discounted) + (minus_.full - beta_ * minus_.discounted);
  return -total / (1.0 - beta_);
}

Vec ResidueAccumulator::predicted_delta() const {
  return delta0_.array() * log_delta_ratio().array().exp();
}

double ResidueAccumulator::identity_violation() const {
  double worst = 0.0;
  const double inv = 1.0 / (1.0 - beta_);
  for (Eigen::Index i = 0; i < delta0_.size(); ++i) {
    const double total = (plus_.full(i) - beta_ * plus_.discounted(i)) + (minus_.full(i) - beta_ * minus_.discounted(i));
    const double predicted = delta0_(i) * std::exp(-total * inv);
    const double actual = std::abs(cur_.w_plus(i) * cur_.w_minus(i));
    const double v = std::abs(predicted - actual) / actual;
    if (std::isfinite(v)) worst = std::max(worst, v);
  }
  return worst;
}

ResidueAccumulator accumulate_residues(ResidueAccumulator acc, const PMState& next) {
  acc.push(next);
  return acc;
}

}  // namespace mlab
