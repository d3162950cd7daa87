#ifndef RTSD_LIFETIMES_HPP
#define RTSD_LIFETIMES_HPP

#include <cmath>
#include <limits>

#include "rtsd/errors.hpp"

namespace rtsd {

// Fraction of carriers leaving a level with lifetime tau during one step:
// w = 1 - exp(-dt/tau).
inline double lifetime_to_weight(double tau, double dt) {
  if (!(dt > 0.0)) throw ValidationError("lifetime_to_weight: dt must be positive");
  if (std::isinf(tau) && tau > 0.0) return 0.0;
  if (!(tau > 0.0)) throw ValidationError("lifetime_to_weight: tau must be positive");
  return -std::expm1(-dt / tau);
}

// Inverse mapping, tau = -dt / ln(1 - w). Returns +inf as w -> 0.
inline double weight_to_lifetime(double w, double dt) {
  if (!(dt > 0.0)) throw ValidationError("weight_to_lifetime: dt must be positive");
  if (w == 0.0) return std::numeric_limits<double>::infinity();
  if (!(w > 0.0) || !(w < 1.0)) throw ValidationError("weight_to_lifetime: w must be in (0,1)");
  return -dt / std::log1p(-w);
}

// Material lifetimes [s] plus the per-step drift fractions. The drift
// scalars are already per-step leaving fractions, not physical mobilities.
struct LifetimeSet {
  double dt = 1e-8;
  double mu_e = 1.0, mu_h = 0.3;  // per-step drift fractions
  double tau_eT = 1e-6, tau_eD = 1e-6;
  double tau_hT1 = 1e-6, tau_hD1 = 1e-6;
  double tau_hT2 = 1e-6, tau_hD2 = 1e-6;
  double tau_e = 1e-5, tau_h = 1e-5;  // recombination lifetimes

  void validate() const {
    if (!(dt > 0.0)) throw ValidationError("LifetimeSet: dt must be positive");
    for (double tau : {tau_eT, tau_eD, tau_hT1, tau_hD1, tau_hT2, tau_hD2, tau_e, tau_h})
      if (!(tau > 0.0)) throw ValidationError("LifetimeSet: all lifetimes must be positive");
  }
};

}  // namespace rtsd

#endif
