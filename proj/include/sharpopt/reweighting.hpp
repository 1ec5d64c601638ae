#pragma once

#include <cstddef>
#include <vector>

#include "sharpopt/models.hpp"
#include "sharpopt/param_vector.hpp"
#include "sharpopt/perturbation.hpp"
#include "sharpopt/rng.hpp"

namespace sharpopt {

/// Nonnegative per-instance weights g_i for the reweighted ascent step.
struct InstanceWeights {
  std::vector<double> g;
  double eta = 1e-4;

  std::size_t size() const { return g.size(); }
  bool all_zero() const;
  double min() const;
  double mean() const;
  double max() const;
};

/// Grad-free losses at w, w + r and w - r for the same batch.
struct ProbeLosses {
  LossVector l0;
  LossVector l_plus;
  LossVector l_minus;
  double r_norm = 0.0;
};

/// Three unrecorded forwards at w, w + r, w - r. `w` is left untouched.
ProbeLosses probe(const Model& model, const ParamVector& w, const Batch& batch,
                  const ParamVector& r, PassCounters* counters = nullptr);

/// g_i = |l+ + l- - 2 l0| / max(|l+ - l-|, eta). Throws ParameterError if eta <= 0.
InstanceWeights instance_weights(const ProbeLosses& p, double eta);

/// Monte-Carlo estimates of per-instance curvature a_i and squared gradient
/// norm under the rank-1 Hessian model, from r ~ N(0, sigma^2 I).
///
/// The first-difference estimator uses E[(l(w+r) - l(w-r))^2] = 4 sigma^2 ||grad l||^2,
/// which is what the second-order expansion gives.
struct CurvatureEstimate {
  std::vector<double> a_hat;
  std::vector<double> grad_norm_sq_hat;
  /// Set where grad_norm_sq_hat fell below the zero threshold (a_hat forced to 0).
  std::vector<bool> degenerate;
  std::size_t num_samples = 0;

  /// Raw sample means and their standard errors, per instance.
  std::vector<double> first_diff_sq_mean;
  std::vector<double> first_diff_sq_stderr;
  std::vector<double> second_diff_mean;
  std::vector<double> second_diff_stderr;

  bool any_degenerate() const;
};

CurvatureEstimate estimate_curvature(const Model& model, const ParamVector& w, const Batch& batch,
                                     double sigma, std::size_t num_samples, Rng& rng,
                                     double zero_threshold = 1e-12);

/// g_i = a_hat_i * sqrt(grad_norm_sq_hat_i), the weights that make the
/// reweighted batch gradient parallel to the per-instance sharpness gradient.
InstanceWeights weights_from_estimate(const CurvatureEstimate& est, double eta = 1e-4);

/// rho * grad l_B / ||grad l_B|| with grad l_B = sum_i g_i grad l_i.
/// One recorded forward and one backward. Throws ZeroGradient on a vanishing grad l_B.
ParamVector delta_sam_direction(const Model& model, const ParamVector& w, const Batch& batch,
                                const InstanceWeights& g, const PerturbConfig& cfg,
                                PassCounters* counters = nullptr);

}  // namespace sharpopt
