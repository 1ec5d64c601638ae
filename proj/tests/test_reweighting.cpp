#include "doctest.h"

#include <cmath>

#include "sharpopt/autodiff.hpp"
#include "sharpopt/quadratic_oracle.hpp"
#include "sharpopt/reweighting.hpp"

using namespace sharpopt;

namespace {

ProbeLosses single_probe(double l0, double lp, double lm) {
  return {LossVector{{l0}}, LossVector{{lp}}, LossVector{{lm}}, 1.0};
}

}  // namespace

TEST_CASE("instance_weights evaluates the clamped ratio") {
  CHECK(instance_weights(single_probe(1.0, 1.3, 0.9), 1e-4).g[0] ==
        doctest::Approx(0.5).epsilon(1e-12));
  CHECK(instance_weights(single_probe(1.0, 1.0, 1.0), 1e-4).g[0] == 0.0);
  CHECK(instance_weights(single_probe(1.0, 1.2, 1.2), 1e-3).g[0] ==
        doctest::Approx(400.0).epsilon(1e-12));
  CHECK_THROWS_AS(instance_weights(single_probe(1, 1, 1), 0.0), ParameterError);
}

TEST_CASE("instance weights are finite and nonnegative for arbitrary probes") {
  Rng rng(12);
  for (int trial = 0; trial < 1000; ++trial) {
    const ProbeLosses p = single_probe(rng.uniform(0, 5), rng.uniform(0, 5), rng.uniform(0, 5));
    const double g = instance_weights(p, 1e-4).g[0];
    CHECK(std::isfinite(g));
    CHECK(g >= 0.0);
  }
}

TEST_CASE("probe with r = 0 returns three identical loss vectors") {
  Rng rng(2);
  const QuadraticProblem p = QuadraticProblem::random(rng, 4, 6);
  const ParamVector zero(p.anchor().layout_ptr(), 0.0);
  const ProbeLosses pr = probe(p.model(), p.anchor(), p.batch(), zero);
  CHECK(pr.l_plus.values == pr.l0.values);
  CHECK(pr.l_minus.values == pr.l0.values);
}

TEST_CASE("probe differences on quadratics are exact") {
  Rng rng(3);
  const QuadraticProblem p = QuadraticProblem::random(rng, 5, 8);
  const Batch batch = p.batch();
  for (int trial = 0; trial < 20; ++trial) {
    // Away from the anchor too: the Hessian a_i b_i b_i^T does not depend on w.
    const ParamVector w =
        trial % 2 == 0 ? p.anchor() : p.anchor() + gaussian_vector(rng, p.anchor().layout_ptr(), 0.3);
    const ParamVector r = gaussian_vector(rng, w.layout_ptr(), 0.2);
    const ProbeLosses pr = probe(p.model(), w, batch, r);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double s = dot(p.b(i), r);
      const double t = dot(p.b(i), w - p.anchor());
      const double second = pr.l_plus[i] + pr.l_minus[i] - 2.0 * pr.l0[i];
      const double first = pr.l_plus[i] - pr.l_minus[i];
      CHECK(std::abs(second - p.a(i) * s * s) <= 1e-9 * std::max(1.0, p.a(i) * s * s));
      CHECK(std::abs(first - 2.0 * s * (1.0 + p.a(i) * t)) <= 1e-10 * std::max(1.0, std::abs(first)));
    }
  }
}

TEST_CASE("probe costs three grad-free batch forwards and leaves w untouched") {
  Rng rng(4);
  const QuadraticProblem p = QuadraticProblem::random(rng, 7, 5);
  const ParamVector w = p.anchor();
  const ParamVector w_copy = w;
  const ParamVector r = gaussian_vector(rng, w.layout_ptr(), 0.1);
  PassCounters c;
  const std::size_t nodes_before = autodiff::nodes_allocated();
  probe(p.model(), w, p.batch(), r, &c);
  CHECK(autodiff::nodes_allocated() == nodes_before);
  CHECK(c.fwd_unrecorded == 3);
  CHECK(c.fwd_recorded == 0);
  CHECK(c.bwd == 0);
  CHECK(c.instance_evals == 21);
  CHECK(w == w_copy);
}

TEST_CASE("curvature estimate on a=2, b=(1,0), sigma=0.1") {
  const QuadraticProblem p = QuadraticProblem::from_gradients({{1.0, 0.0}}, {2.0});
  Rng rng(2024);
  const CurvatureEstimate est = estimate_curvature(p.model(), p.anchor(), p.batch(), 0.1, 10000, rng);
  CHECK(est.grad_norm_sq_hat[0] == doctest::Approx(1.0).epsilon(0.02));
  CHECK(est.a_hat[0] == doctest::Approx(2.0).epsilon(0.02));
  CHECK_FALSE(est.any_degenerate());
}

TEST_CASE("curvature estimate of a linear loss is zero") {
  const QuadraticProblem p = QuadraticProblem::from_gradients({{0.6, -0.8, 0.0}}, {0.0}, true);
  Rng rng(5);
  const CurvatureEstimate est = estimate_curvature(p.model(), p.anchor(), p.batch(), 0.1, 10000, rng);
  CHECK(std::abs(est.a_hat[0]) < 0.02);
  CHECK(est.grad_norm_sq_hat[0] == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("curvature estimate flags a zero gradient") {
  // l(w) = t + a t^2 / 2 is stationary at t = -1/a: a pure quadratic there.
  const double a = 1.5;
  const QuadraticProblem p = QuadraticProblem::from_gradients({{1.0, 2.0}}, {a});
  const ParamVector b = p.b(0);
  const ParamVector w = p.anchor() - (1.0 / (a * dot(b, b))) * b;
  Rng rng(6);
  const CurvatureEstimate est = estimate_curvature(p.model(), w, p.batch(), 0.1, 1000, rng);
  CHECK(est.degenerate[0]);
  CHECK(est.a_hat[0] == 0.0);
}

TEST_CASE("Monte-Carlo probe statistics match 4 sigma^2 |g|^2 and a sigma^2 |g|^2") {
  Rng rng(77);
  const QuadraticProblem p = QuadraticProblem::random(rng, 6, 10);
  const double sigma = 0.05;
  const CurvatureEstimate est =
      estimate_curvature(p.model(), p.anchor(), p.batch(), sigma, 10000, rng);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double g2 = dot(p.b(i), p.b(i));
    const double first_expected = 4.0 * sigma * sigma * g2;
    const double second_expected = p.a(i) * sigma * sigma * g2;
    CHECK(std::abs(est.first_diff_sq_mean[i] - first_expected) <= 3.0 * est.first_diff_sq_stderr[i]);
    CHECK(std::abs(est.second_diff_mean[i] - second_expected) <= 3.0 * est.second_diff_stderr[i]);
    // The ratio estimator recovers a_i exactly on rank-1 quadratics.
    CHECK(est.a_hat[i] == doctest::Approx(p.a(i)).epsilon(1e-9));
  }
}

TEST_CASE("delta_sam_direction reductions") {
  Rng rng(9);
  const QuadraticProblem p = QuadraticProblem::random(rng, 5, 7);
  const PerturbConfig cfg{0.05, 1e-12};
  const Batch batch = p.batch();

  SUBCASE("uniform weights reproduce the SAM perturbation") {
    InstanceWeights g{std::vector<double>(5, 0.37), 1e-4};
    const ParamVector sam =
        normalize_to_ball(mean_loss_gradient(p.model(), p.anchor(), batch).gradient, cfg.rho);
    CHECK(max_abs_diff(delta_sam_direction(p.model(), p.anchor(), batch, g, cfg), sam) < 1e-12);
  }
  SUBCASE("rescaling the weights leaves eps* unchanged") {
    InstanceWeights g{{0.1, 2.0, 0.5, 3.0, 1.0}, 1e-4};
    InstanceWeights g7 = g;
    for (double& v : g7.g) v *= 7.0;
    CHECK(max_abs_diff(delta_sam_direction(p.model(), p.anchor(), batch, g, cfg),
                       delta_sam_direction(p.model(), p.anchor(), batch, g7, cfg)) < 1e-12);
  }
  SUBCASE("all-zero weights have no direction") {
    InstanceWeights g{std::vector<double>(5, 0.0), 1e-4};
    CHECK_THROWS_AS(delta_sam_direction(p.model(), p.anchor(), batch, g, cfg), ZeroGradient);
  }
}

TEST_CASE("delta_sam_direction with exact weights on the orthogonal two-instance problem") {
  const QuadraticProblem p = QuadraticProblem::from_gradients({{1.0, 0.0}, {0.0, 1.0}}, {1.0, 2.0});
  // g_i = a_i ||b_i|| = (1, 2)
  const InstanceWeights g{{1.0, 2.0}, 1e-4};
  const ParamVector eps = delta_sam_direction(p.model(), p.anchor(), p.batch(), g, {1.0, 1e-12});
  CHECK(eps[0] == doctest::Approx(1.0 / std::sqrt(5.0)).epsilon(1e-14));
  CHECK(eps[1] == doctest::Approx(2.0 / std::sqrt(5.0)).epsilon(1e-14));
  CHECK(cosine(eps, grad_r_inst(p, 1.0)) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("weights_from_estimate approaches a_i ||b_i||") {
  Rng rng(10);
  const QuadraticProblem p = QuadraticProblem::random(rng, 4, 6);
  const CurvatureEstimate est = estimate_curvature(p.model(), p.anchor(), p.batch(), 0.05, 20000, rng);
  const InstanceWeights g = weights_from_estimate(est);
  for (std::size_t i = 0; i < p.size(); ++i) {
    CHECK(g.g[i] == doctest::Approx(p.a(i) * norm2(p.b(i))).epsilon(0.03));
  }
}
