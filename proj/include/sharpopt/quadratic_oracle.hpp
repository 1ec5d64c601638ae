#pragma once

#include <cstddef>
#include <vector>

#include "sharpopt/models.hpp"
#include "sharpopt/param_vector.hpp"
#include "sharpopt/rng.hpp"

namespace sharpopt {

/// Synthetic batch with exactly known rank-1 Hessians H_i = a_i b_i b_i^T at
/// the anchor w0, where l_i(w0 + d) = c_i + b_i^T d + a_i (b_i^T d)^2 / 2.
class QuadraticProblem {
 public:
  /// `gradients[i]` is b_i. Throws ParameterError on a_i <= 0 unless
  /// `allow_zero_curvature` (then a_i >= 0 is required).
  QuadraticProblem(ParamVector anchor, std::vector<double> base_losses,
                   std::vector<std::vector<double>> gradients, std::vector<double> curvatures,
                   bool allow_zero_curvature = false);

  /// Anchor at the origin, c_i = 0.
  static QuadraticProblem from_gradients(std::vector<std::vector<double>> gradients,
                                         std::vector<double> curvatures,
                                         bool allow_zero_curvature = false);

  /// b_i ~ N(0, I_D), a_i ~ U(a_lo, a_hi] (a_lo >= 0), c_i ~ U[0, 1), anchor ~ N(0, I_D).
  static QuadraticProblem random(Rng& rng, std::size_t n, std::size_t d, double a_lo = 0.0,
                                 double a_hi = 3.0);

  std::size_t size() const { return loss_.num_instances(); }
  std::size_t dim() const { return loss_.anchor().dim(); }
  const QuadraticLoss& model() const { return loss_; }
  const ParamVector& anchor() const { return loss_.anchor(); }
  ParamVector b(std::size_t i) const { return loss_.gradient_row(i); }
  double a(std::size_t i) const { return loss_.curvatures()[i]; }
  double c(std::size_t i) const { return loss_.base_losses()[i]; }
  Batch batch() const { return loss_.full_batch(); }

  ParamVector mean_gradient() const;

 private:
  QuadraticProblem(QuadraticLoss loss) : loss_(std::move(loss)) {}
  QuadraticLoss loss_;
};

/// max over ||eps|| <= rho of the batch-mean loss increase at the anchor, solved
/// exactly. With a zero mean gradient this is the pure quadratic maximum.
double sharpness_batch(const QuadraticProblem& p, double rho);

/// (1/N) sum_i (rho ||b_i|| + a_i rho^2 ||b_i||^2 / 2).
double sharpness_inst(const QuadraticProblem& p, double rho);

/// Per-instance sharpness evaluated at an arbitrary w (exact maxima), for
/// differentiating numerically around the anchor.
double sharpness_inst_at(const QuadraticProblem& p, const ParamVector& w, double rho);

/// (1/N) sum_i rho a_i ||b_i|| b_i.
ParamVector grad_r_inst(const QuadraticProblem& p, double rho);

struct SharpnessReport {
  double r_batch = 0.0;
  double r_inst = 0.0;
  ParamVector grad_r_inst;
  /// (mean H_i) eps' with eps' = rho grad_r_inst / ||grad_r_inst||.
  ParamVector grad_r_shared;
  double dot = 0.0;
  bool degenerate = false;
};

/// Closed-form check that descending the shared-perturbation sharpness also
/// descends the per-instance sharpness.
SharpnessReport positivity_check(const QuadraticProblem& p, double rho);

/// The same dot product with grad_r_shared obtained by autodiff:
/// mean grad at (w0 + eps') minus mean grad at w0.
double positivity_dot_numeric(const QuadraticProblem& p, double rho);

/// cosine(sum_i g_i grad l_i, grad_r_inst) with g_i = a_i ||b_i||, where the
/// weighted gradient comes from the model's reweighted backward pass.
double exact_weight_equivalence(const QuadraticProblem& p, double rho);

}  // namespace sharpopt
