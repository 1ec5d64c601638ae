#include "sharpopt/perturbation.hpp"

#include <cmath>
#include <string>

namespace sharpopt {

void PerturbConfig::validate() const {
  if (!(rho > 0.0)) throw ParameterError("rho must be positive, got " + std::to_string(rho));
  if (!(zero_grad_threshold > 0.0)) {
    throw ParameterError("zero_grad_threshold must be positive");
  }
}

ParamVector normalize_to_ball(const ParamVector& direction, double rho,
                              double zero_grad_threshold) {
  const double n = norm2(direction);
  if (!(n > zero_grad_threshold)) {
    throw ZeroGradient("direction norm " + std::to_string(n) + " is below threshold " +
                       std::to_string(zero_grad_threshold));
  }
  return direction * (rho / n);
}

PerturbedWeights apply(const ParamVector& w, const ParamVector& eps) {
  if (!w.compatible_with(eps)) {
    throw DimensionError("apply: perturbation layout does not match the weights");
  }
  PerturbedWeights out;
  out.original_ = w;
  out.eps_ = eps;
  out.perturbed_ = w + eps;
  return out;
}

ParamVector revert(const PerturbedWeights& perturbed, const ParamVector& eps) {
  if (!(perturbed.eps_ == eps)) {
    throw DimensionError("revert: perturbation differs from the one that was applied");
  }
  return perturbed.original_;
}

ParamVector random_direction(Rng& rng, const LayoutPtr& layout, double rho) {
  if (!(rho > 0.0)) throw ParameterError("random_direction: rho must be positive");
  ParamVector r = gaussian_vector(rng, layout, 1.0);
  return r * (rho / norm2(r));
}

}  // namespace sharpopt
