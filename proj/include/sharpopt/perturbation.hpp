#pragma once

#include <stdexcept>

#include "sharpopt/param_vector.hpp"
#include "sharpopt/rng.hpp"

namespace sharpopt {

/// The ascent direction is too small to normalize. Callers skip the perturbation.
class ZeroGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PerturbConfig {
  double rho = 0.05;
  double zero_grad_threshold = 1e-12;

  /// Throws ParameterError unless both fields are positive.
  void validate() const;
};

/// rho * direction / ||direction||. Throws ZeroGradient when the norm is at or
/// below `zero_grad_threshold`.
ParamVector normalize_to_ball(const ParamVector& direction, double rho,
                              double zero_grad_threshold = 1e-12);

/// Weights moved to w + eps, remembering where they came from.
///
/// Floating-point (w + e) - e is not w in general, so revert hands back the
/// stored original instead of subtracting.
class PerturbedWeights {
 public:
  const ParamVector& weights() const { return perturbed_; }
  const ParamVector& perturbation() const { return eps_; }

 private:
  friend PerturbedWeights apply(const ParamVector& w, const ParamVector& eps);
  friend ParamVector revert(const PerturbedWeights& perturbed, const ParamVector& eps);

  ParamVector original_;
  ParamVector eps_;
  ParamVector perturbed_;
};

PerturbedWeights apply(const ParamVector& w, const ParamVector& eps);

/// The exact original weights. Throws DimensionError if `eps` is not bitwise
/// the perturbation that was applied.
ParamVector revert(const PerturbedWeights& perturbed, const ParamVector& eps);

/// Isotropic unit-variance Gaussian rescaled to L2 norm rho.
ParamVector random_direction(Rng& rng, const LayoutPtr& layout, double rho);

}  // namespace sharpopt
