#include "sharpopt/reweighting.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace sharpopt {

bool InstanceWeights::all_zero() const {
  return std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; });
}

double InstanceWeights::min() const {
  return g.empty() ? 0.0 : *std::min_element(g.begin(), g.end());
}

double InstanceWeights::mean() const {
  return g.empty() ? 0.0 : std::accumulate(g.begin(), g.end(), 0.0) / static_cast<double>(g.size());
}

double InstanceWeights::max() const {
  return g.empty() ? 0.0 : *std::max_element(g.begin(), g.end());
}

bool CurvatureEstimate::any_degenerate() const {
  return std::any_of(degenerate.begin(), degenerate.end(), [](bool b) { return b; });
}

ProbeLosses probe(const Model& model, const ParamVector& w, const Batch& batch,
                  const ParamVector& r, PassCounters* counters) {
  ProbeLosses out;
  out.r_norm = norm2(r);
  out.l0 = per_instance_losses(model, w, batch, false, counters);
  const PerturbedWeights plus = apply(w, r);
  out.l_plus = per_instance_losses(model, plus.weights(), batch, false, counters);
  const ParamVector neg_r = -1.0 * r;
  const PerturbedWeights minus = apply(w, neg_r);
  out.l_minus = per_instance_losses(model, minus.weights(), batch, false, counters);
  return out;
}

InstanceWeights instance_weights(const ProbeLosses& p, double eta) {
  if (!(eta > 0.0)) throw ParameterError("eta must be positive, got " + std::to_string(eta));
  const std::size_t n = p.l0.size();
  if (p.l_plus.size() != n || p.l_minus.size() != n) {
    throw DimensionError("probe loss vectors differ in length");
  }
  InstanceWeights out;
  out.eta = eta;
  out.g.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double second = std::abs(p.l_plus[i] + p.l_minus[i] - 2.0 * p.l0[i]);
    const double first = std::abs(p.l_plus[i] - p.l_minus[i]);
    out.g[i] = second / std::max(first, eta);
  }
  return out;
}

CurvatureEstimate estimate_curvature(const Model& model, const ParamVector& w, const Batch& batch,
                                     double sigma, std::size_t num_samples, Rng& rng,
                                     double zero_threshold) {
  if (num_samples == 0) throw ParameterError("estimate_curvature needs at least one sample");
  if (!(sigma > 0.0)) throw ParameterError("estimate_curvature: sigma must be positive");
  const std::size_t n = batch.size();
  // Welford accumulators for the two probe statistics.
  std::vector<double> m1(n, 0.0), s1(n, 0.0), m2(n, 0.0), s2(n, 0.0);

  const LossVector l0 = per_instance_losses(model, w, batch, false);
  for (std::size_t k = 0; k < num_samples; ++k) {
    const ParamVector r = gaussian_vector(rng, w.layout_ptr(), sigma);
    const LossVector lp = per_instance_losses(model, w + r, batch, false);
    const LossVector lm = per_instance_losses(model, w - r, batch, false);
    const double count = static_cast<double>(k + 1);
    for (std::size_t i = 0; i < n; ++i) {
      const double d1 = lp[i] - lm[i];
      const double x1 = d1 * d1;
      const double x2 = lp[i] + lm[i] - 2.0 * l0[i];
      const double e1 = x1 - m1[i];
      m1[i] += e1 / count;
      s1[i] += e1 * (x1 - m1[i]);
      const double e2 = x2 - m2[i];
      m2[i] += e2 / count;
      s2[i] += e2 * (x2 - m2[i]);
    }
  }

  CurvatureEstimate est;
  est.num_samples = num_samples;
  est.a_hat.resize(n);
  est.grad_norm_sq_hat.resize(n);
  est.degenerate.resize(n);
  est.first_diff_sq_mean = m1;
  est.second_diff_mean = m2;
  est.first_diff_sq_stderr.resize(n);
  est.second_diff_stderr.resize(n);
  const double sigma_sq = sigma * sigma;
  const double ns = static_cast<double>(num_samples);
  for (std::size_t i = 0; i < n; ++i) {
    const double var1 = num_samples > 1 ? s1[i] / (ns - 1.0) : 0.0;
    const double var2 = num_samples > 1 ? s2[i] / (ns - 1.0) : 0.0;
    est.first_diff_sq_stderr[i] = std::sqrt(var1 / ns);
    est.second_diff_stderr[i] = std::sqrt(var2 / ns);
    est.grad_norm_sq_hat[i] = m1[i] / (4.0 * sigma_sq);
    if (est.grad_norm_sq_hat[i] < zero_threshold) {
      est.degenerate[i] = true;
      est.a_hat[i] = 0.0;
    } else {
      est.a_hat[i] = m2[i] / (sigma_sq * est.grad_norm_sq_hat[i]);
    }
  }
  return est;
}

InstanceWeights weights_from_estimate(const CurvatureEstimate& est, double eta) {
  InstanceWeights out;
  out.eta = eta;
  out.g.resize(est.a_hat.size());
  for (std::size_t i = 0; i < out.g.size(); ++i) {
    out.g[i] = std::abs(est.a_hat[i]) * std::sqrt(est.grad_norm_sq_hat[i]);
  }
  return out;
}

ParamVector delta_sam_direction(const Model& model, const ParamVector& w, const Batch& batch,
                                const InstanceWeights& g, const PerturbConfig& cfg,
                                PassCounters* counters) {
  const ParamVector grad = weighted_loss_gradient(model, w, batch, g.g, counters);
  return normalize_to_ball(grad, cfg.rho, cfg.zero_grad_threshold);
}

}  // namespace sharpopt
