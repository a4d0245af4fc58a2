#pragma once

#include <array>

#include "racemop/action.hpp"
#include "racemop/rng.hpp"

namespace racemop {

/// One-dimensional normal N(mu, sigma) truncated to [lo, hi]. Bounds may be
/// infinite. All functions are pure.
namespace truncnorm {

/// Probability mass of the untruncated normal inside [lo, hi], computed in
/// whichever tail keeps full relative precision.
double mass(double mu, double sigma, double lo, double hi);
double log_prob(double x, double mu, double sigma, double lo, double hi);
double cdf(double x, double mu, double sigma, double lo, double hi);

struct LogProbGrad {
  double d_mu = 0.0;
  double d_sigma = 0.0;
};
LogProbGrad log_prob_grad(double x, double mu, double sigma, double lo, double hi);

/// Inverse-CDF draw from a uniform u in (0, 1).
double quantile(double u, double mu, double sigma, double lo, double hi);
double mean(double mu, double sigma, double lo, double hi);
double variance(double mu, double sigma, double lo, double hi);
double entropy(double mu, double sigma, double lo, double hi);

}  // namespace truncnorm

/// Untruncated normal helpers used by the clipped-sum comparator.
namespace gaussian {
double log_prob(double x, double mu, double sigma);
truncnorm::LogProbGrad log_prob_grad(double x, double mu, double sigma);
double entropy(double sigma);
}  // namespace gaussian

/// Product of two truncated normals over the normalized action box.
class FusedDistribution {
 public:
  FusedDistribution(const Action& mu, const Action& sigma, double lo = -1.0, double hi = 1.0);

  const Action& mu() const { return mu_; }
  const Action& sigma() const { return sigma_; }
  double lo() const { return lo_; }
  double hi() const { return hi_; }

  Action sample(Rng& rng) const;
  /// Throws std::domain_error for actions outside the bounds.
  double log_prob(const Action& a) const;
  Action mode() const;
  Action mean() const;
  Action variance() const;
  double entropy() const;

 private:
  Action mu_;
  Action sigma_;
  double lo_;
  double hi_;
};

/// mu = a_B + alpha * mu_R, sigma = sigma_R. mu may leave the bounds.
/// Throws std::invalid_argument for non-positive sigma.
FusedDistribution fuse(const Action& a_base, const Action& mu_residual, const Action& sigma,
                       const Action& alpha = {0.5, 0.5});

struct ClippedSample {
  Action action;     // clipped to the bounds
  Action unclipped;  // the Gaussian draw, kept for likelihood evaluation
};

/// Ablation comparator: Gaussian draw at a_B + alpha * mu_R, then clipped.
ClippedSample clipped_sum_policy(const Action& a_base, const Action& mu_residual,
                                 const Action& sigma, Rng& rng,
                                 const Action& alpha = {0.5, 0.5});

}  // namespace racemop
