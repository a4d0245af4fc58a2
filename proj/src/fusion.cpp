#include "racemop/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

#include <boost/math/special_functions/erf.hpp>

namespace racemop {

namespace truncnorm {

namespace {

constexpr double kMassFloor = 1e-300;
const double kInvSqrt2Pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
const double kLogSqrt2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

// Upper tail Q(z) = P(Z > z).
double upper(double z) {
  if (z == std::numeric_limits<double>::infinity()) return 0.0;
  if (z == -std::numeric_limits<double>::infinity()) return 1.0;
  return 0.5 * boost::math::erfc(z / std::numbers::sqrt2);
}

double lower(double z) { return upper(-z); }

double pdf(double z) { return std::isinf(z) ? 0.0 : kInvSqrt2Pi * std::exp(-0.5 * z * z); }

double z_pdf(double z) { return std::isinf(z) ? 0.0 : z * pdf(z); }

double upper_inverse(double p) { return std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * p); }

double standard_mass(double a, double b) {
  double m;
  if (a >= 0.0) {
    m = upper(a) - upper(b);
  } else if (b <= 0.0) {
    m = lower(b) - lower(a);
  } else {
    m = 1.0 - upper(b) - lower(a);
  }
  return std::max(m, kMassFloor);
}

void check(double mu, double sigma, double lo, double hi) {
  if (!std::isfinite(mu) || !(sigma > 0.0) || !std::isfinite(sigma) || !(lo < hi)) {
    throw std::invalid_argument("truncated normal: need finite mu, sigma > 0 and lo < hi");
  }
}

// Draw in standardized coordinates on [a, b].
double standard_quantile(double u, double a, double b) {
  if (b <= 0.0) return -standard_quantile(1.0 - u, -b, -a);
  double z;
  if (a >= 0.0) {
    const double qa = upper(a);
    const double qb = upper(b);
    const double p = qa - u * (qa - qb);
    if (qa > 0.0 && p > 0.0) {
      z = upper_inverse(p);
    } else {
      // Deep tail: the normal is locally exponential with rate a.
      const double span = std::isinf(b) ? 1.0 : -std::expm1(-a * (b - a));
      z = a - std::log1p(-u * span) / a;
    }
  } else {
    const double mass = 1.0 - upper(b) - lower(a);
    const double p_low = lower(a) + u * mass;
    const double p_high = upper(b) + (1.0 - u) * mass;
    z = p_low < p_high ? -upper_inverse(p_low) : upper_inverse(p_high);
  }
  return std::clamp(z, a, b);
}

}  // namespace

double mass(double mu, double sigma, double lo, double hi) {
  check(mu, sigma, lo, hi);
  return standard_mass((lo - mu) / sigma, (hi - mu) / sigma);
}

double log_prob(double x, double mu, double sigma, double lo, double hi) {
  check(mu, sigma, lo, hi);
  if (!(x >= lo && x <= hi)) {
    throw std::domain_error("truncated normal log_prob: x = " + std::to_string(x) +
                            " outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
  const double z = (x - mu) / sigma;
  return -0.5 * z * z - std::log(sigma) - kLogSqrt2Pi -
         std::log(standard_mass((lo - mu) / sigma, (hi - mu) / sigma));
}

double cdf(double x, double mu, double sigma, double lo, double hi) {
  check(mu, sigma, lo, hi);
  if (x <= lo) return 0.0;
  if (x >= hi) return 1.0;
  const double a = (lo - mu) / sigma;
  const double b = (hi - mu) / sigma;
  return std::clamp(standard_mass(a, (x - mu) / sigma) / standard_mass(a, b), 0.0, 1.0);
}

LogProbGrad log_prob_grad(double x, double mu, double sigma, double lo, double hi) {
  check(mu, sigma, lo, hi);
  const double z = (x - mu) / sigma;
  const double a = (lo - mu) / sigma;
  const double b = (hi - mu) / sigma;
  const double m = standard_mass(a, b);
  LogProbGrad g;
  g.d_mu = z / sigma;
  g.d_sigma = (z * z - 1.0) / sigma;
  if (m > kMassFloor) {
    g.d_mu += (pdf(b) - pdf(a)) / (sigma * m);
    g.d_sigma += (z_pdf(b) - z_pdf(a)) / (sigma * m);
  }
  return g;
}

double quantile(double u, double mu, double sigma, double lo, double hi) {
  check(mu, sigma, lo, hi);
  if (!(u > 0.0 && u < 1.0)) throw std::invalid_argument("truncated normal quantile: u outside (0, 1)");
  const double z = standard_quantile(u, (lo - mu) / sigma, (hi - mu) / sigma);
  return std::clamp(mu + sigma * z, lo, hi);
}

double mean(double mu, double sigma, double lo, double hi) {
  check(mu, sigma, lo, hi);
  const double a = (lo - mu) / sigma;
  const double b = (hi - mu) / sigma;
  return mu + sigma * (pdf(a) - pdf(b)) / standard_mass(a, b);
}

double variance(double mu, double sigma, double lo, double hi) {
  check(mu, sigma, lo, hi);
  const double a = (lo - mu) / sigma;
  const double b = (hi - mu) / sigma;
  const double m = standard_mass(a, b);
  const double shift = (pdf(a) - pdf(b)) / m;
  return sigma * sigma * (1.0 + (z_pdf(a) - z_pdf(b)) / m - shift * shift);
}

double entropy(double mu, double sigma, double lo, double hi) {
  check(mu, sigma, lo, hi);
  const double a = (lo - mu) / sigma;
  const double b = (hi - mu) / sigma;
  const double m = standard_mass(a, b);
  return kLogSqrt2Pi + 0.5 + std::log(sigma * m) + (z_pdf(a) - z_pdf(b)) / (2.0 * m);
}

}  // namespace truncnorm

namespace gaussian {

double log_prob(double x, double mu, double sigma) {
  const double z = (x - mu) / sigma;
  return -0.5 * z * z - std::log(sigma) - 0.5 * std::log(2.0 * std::numbers::pi);
}

truncnorm::LogProbGrad log_prob_grad(double x, double mu, double sigma) {
  const double z = (x - mu) / sigma;
  return {z / sigma, (z * z - 1.0) / sigma};
}

double entropy(double sigma) { return 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e) + std::log(sigma); }

}  // namespace gaussian

FusedDistribution::FusedDistribution(const Action& mu, const Action& sigma, double lo, double hi)
    : mu_(mu), sigma_(sigma), lo_(lo), hi_(hi) {
  for (int i = 0; i < 2; ++i) {
    if (!(sigma_[i] > 0.0) || !std::isfinite(sigma_[i])) {
      throw std::invalid_argument("FusedDistribution: sigma must be positive and finite");
    }
    if (!std::isfinite(mu_[i])) throw std::invalid_argument("FusedDistribution: non-finite mu");
  }
  if (!(lo_ < hi_)) throw std::invalid_argument("FusedDistribution: need lo < hi");
}

Action FusedDistribution::sample(Rng& rng) const {
  Action a;
  for (int i = 0; i < 2; ++i) a[i] = truncnorm::quantile(uniform_open01(rng), mu_[i], sigma_[i], lo_, hi_);
  return a;
}

double FusedDistribution::log_prob(const Action& a) const {
  return truncnorm::log_prob(a[0], mu_[0], sigma_[0], lo_, hi_) +
         truncnorm::log_prob(a[1], mu_[1], sigma_[1], lo_, hi_);
}

Action FusedDistribution::mode() const {
  return {std::clamp(mu_[0], lo_, hi_), std::clamp(mu_[1], lo_, hi_)};
}

Action FusedDistribution::mean() const {
  return {truncnorm::mean(mu_[0], sigma_[0], lo_, hi_), truncnorm::mean(mu_[1], sigma_[1], lo_, hi_)};
}

Action FusedDistribution::variance() const {
  return {truncnorm::variance(mu_[0], sigma_[0], lo_, hi_),
          truncnorm::variance(mu_[1], sigma_[1], lo_, hi_)};
}

double FusedDistribution::entropy() const {
  return truncnorm::entropy(mu_[0], sigma_[0], lo_, hi_) +
         truncnorm::entropy(mu_[1], sigma_[1], lo_, hi_);
}

FusedDistribution fuse(const Action& a_base, const Action& mu_residual, const Action& sigma,
                       const Action& alpha) {
  return FusedDistribution({a_base[0] + alpha[0] * mu_residual[0], a_base[1] + alpha[1] * mu_residual[1]},
                           sigma);
}

ClippedSample clipped_sum_policy(const Action& a_base, const Action& mu_residual,
                                 const Action& sigma, Rng& rng, const Action& alpha) {
  ClippedSample out;
  for (int i = 0; i < 2; ++i) {
    if (!(sigma[i] > 0.0)) throw std::invalid_argument("clipped_sum_policy: sigma must be positive");
    out.unclipped[i] = a_base[i] + alpha[i] * mu_residual[i] + sigma[i] * standard_normal(rng);
    out.action[i] = std::clamp(out.unclipped[i], -1.0, 1.0);
  }
  return out;
}

}  // namespace racemop
