#include "sharpopt/quadratic_oracle.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>

namespace sharpopt {
namespace {

QuadraticLoss build_loss(ParamVector anchor, std::vector<double> base_losses,
                         const std::vector<std::vector<double>>& gradients,
                         std::vector<double> curvatures, bool allow_zero_curvature) {
  const std::size_t n = gradients.size();
  const std::size_t d = anchor.dim();
  if (n == 0) throw ParameterError("a quadratic problem needs at least one instance");
  std::vector<double> rows;
  rows.reserve(n * d);
  for (const auto& b : gradients) {
    if (b.size() != d) throw DimensionError("instance gradient dimension differs from the anchor");
    rows.insert(rows.end(), b.begin(), b.end());
  }
  for (std::size_t i = 0; i < curvatures.size(); ++i) {
    const double a = curvatures[i];
    const bool ok = allow_zero_curvature ? a >= 0.0 : a > 0.0;
    if (!ok || !std::isfinite(a)) {
      throw ParameterError("curvature a_" + std::to_string(i) + " = " + std::to_string(a) +
                           " must be " + (allow_zero_curvature ? "nonnegative" : "positive"));
    }
  }
  for (double c : base_losses) {
    if (!(c >= 0.0)) throw ParameterError("base losses must be nonnegative");
  }
  return QuadraticLoss(std::move(anchor), std::move(base_losses), Tensor(Shape{n, d}, std::move(rows)),
                       std::move(curvatures));
}

Eigen::VectorXd to_eigen(const ParamVector& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data().data(), static_cast<Eigen::Index>(v.dim()));
}

}  // namespace

QuadraticProblem::QuadraticProblem(ParamVector anchor, std::vector<double> base_losses,
                                   std::vector<std::vector<double>> gradients,
                                   std::vector<double> curvatures, bool allow_zero_curvature)
    : loss_(build_loss(std::move(anchor), std::move(base_losses), gradients, std::move(curvatures),
                       allow_zero_curvature)) {}

QuadraticProblem QuadraticProblem::from_gradients(std::vector<std::vector<double>> gradients,
                                                  std::vector<double> curvatures,
                                                  bool allow_zero_curvature) {
  if (gradients.empty()) throw ParameterError("a quadratic problem needs at least one instance");
  const std::size_t d = gradients.front().size();
  std::vector<double> c(gradients.size(), 0.0);
  return QuadraticProblem(ParamVector(ParamLayout::flat(d), 0.0), std::move(c), std::move(gradients),
                          std::move(curvatures), allow_zero_curvature);
}

QuadraticProblem QuadraticProblem::random(Rng& rng, std::size_t n, std::size_t d, double a_lo,
                                          double a_hi) {
  if (!(a_lo >= 0.0) || !(a_hi > a_lo)) throw ParameterError("need 0 <= a_lo < a_hi");
  auto layout = ParamLayout::flat(d);
  ParamVector anchor = gaussian_vector(rng, layout, 1.0);
  std::vector<std::vector<double>> b(n, std::vector<double>(d));
  std::vector<double> a(n), c(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (double& v : b[i]) v = rng.normal();
    a[i] = a_hi - (a_hi - a_lo) * rng.uniform();  // (a_lo, a_hi]
    c[i] = rng.uniform();
  }
  return QuadraticProblem(std::move(anchor), std::move(c), std::move(b), std::move(a));
}

ParamVector QuadraticProblem::mean_gradient() const {
  ParamVector m(anchor().layout_ptr(), 0.0);
  for (std::size_t i = 0; i < size(); ++i) m += b(i);
  return m * (1.0 / static_cast<double>(size()));
}

double sharpness_batch(const QuadraticProblem& p, double rho) {
  if (!(rho > 0.0)) throw ParameterError("rho must be positive");
  const std::size_t n = p.size();
  const auto d = static_cast<Eigen::Index>(p.dim());
  const double inv_n = 1.0 / static_cast<double>(n);

  // The maximizer lies in span{b_i}; work in an orthonormal basis of it.
  Eigen::MatrixXd basis(d, 0);
  double scale = 0.0;
  for (std::size_t i = 0; i < n; ++i) scale = std::max(scale, to_eigen(p.b(i)).norm());
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::VectorXd v = to_eigen(p.b(i));
    for (int pass = 0; pass < 2; ++pass) v -= basis * (basis.transpose() * v);
    const double nv = v.norm();
    if (nv > 1e-12 * scale && nv > 0.0) {
      basis.conservativeResize(Eigen::NoChange, basis.cols() + 1);
      basis.col(basis.cols() - 1) = v / nv;
    }
  }
  const Eigen::Index k = basis.cols();
  if (k == 0) return 0.0;

  Eigen::VectorXd m = Eigen::VectorXd::Zero(k);
  Eigen::MatrixXd curv = Eigen::MatrixXd::Zero(k, k);
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::VectorXd bi = basis.transpose() * to_eigen(p.b(i));
    m += inv_n * bi;
    curv += (inv_n * p.a(i)) * bi * bi.transpose();
  }

  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(curv);
  const Eigen::VectorXd lambda = eig.eigenvalues();  // ascending
  const Eigen::VectorXd mt = eig.eigenvectors().transpose() * m;
  const double lmax = lambda(k - 1);
  const double mnorm = mt.norm();
  const double lam_tol = 1e-12 * std::max(1.0, std::abs(lmax));

  auto objective = [&](const Eigen::VectorXd& y) {
    return mt.dot(y) + 0.5 * (lambda.array() * y.array().square()).sum();
  };
  auto y_of = [&](double mu) {
    Eigen::VectorXd y(k);
    for (Eigen::Index j = 0; j < k; ++j) y(j) = mt(j) / (mu - lambda(j));
    return y;
  };

  bool top_aligned = false;
  for (Eigen::Index j = 0; j < k; ++j) {
    if (lmax - lambda(j) <= lam_tol && std::abs(mt(j)) > 1e-14 * std::max(mnorm, 1e-300)) {
      top_aligned = true;
    }
  }

  if (!top_aligned) {
    // Hard case: the multiplier sits at lambda_max and the top eigenspace
    // absorbs whatever norm the remaining components leave over.
    Eigen::VectorXd y = Eigen::VectorXd::Zero(k);
    Eigen::Index top = k - 1;
    for (Eigen::Index j = 0; j < k; ++j) {
      if (lmax - lambda(j) > lam_tol) y(j) = mt(j) / (lmax - lambda(j));
    }
    if (y.norm() <= rho) {
      y(top) = std::sqrt(std::max(0.0, rho * rho - y.squaredNorm()));
      return objective(y);
    }
    // Enough norm without the top direction: fall through to the secular solve.
  }

  // ||y(mu)|| decreases on (lambda_max, inf); bracket and bisect for ||y|| = rho.
  double lo = lmax;
  double hi = lmax + mnorm / rho + 1e-300;
  while (y_of(hi).norm() > rho) hi = lmax + 2.0 * (hi - lmax);
  for (int it = 0; it < 2000; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (y_of(mid).norm() > rho) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  Eigen::VectorXd y = y_of(hi);
  y *= rho / y.norm();
  return objective(y);
}

double sharpness_inst(const QuadraticProblem& p, double rho) {
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double nb = norm2(p.b(i));
    acc += rho * nb + 0.5 * p.a(i) * rho * rho * nb * nb;
  }
  return acc / static_cast<double>(p.size());
}

double sharpness_inst_at(const QuadraticProblem& p, const ParamVector& w, double rho) {
  const ParamVector delta = w - p.anchor();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const ParamVector bi = p.b(i);
    const double nb = norm2(bi);
    const double slope = 1.0 + p.a(i) * dot(bi, delta);
    acc += rho * nb * std::abs(slope) + 0.5 * p.a(i) * rho * rho * nb * nb;
  }
  return acc / static_cast<double>(p.size());
}

ParamVector grad_r_inst(const QuadraticProblem& p, double rho) {
  ParamVector out(p.anchor().layout_ptr(), 0.0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const ParamVector bi = p.b(i);
    out.axpy(rho * p.a(i) * norm2(bi), bi);
  }
  return out * (1.0 / static_cast<double>(p.size()));
}

SharpnessReport positivity_check(const QuadraticProblem& p, double rho) {
  SharpnessReport report;
  report.r_batch = sharpness_batch(p, rho);
  report.r_inst = sharpness_inst(p, rho);
  report.grad_r_inst = grad_r_inst(p, rho);
  report.grad_r_shared = ParamVector(p.anchor().layout_ptr(), 0.0);
  const double gnorm = norm2(report.grad_r_inst);
  if (gnorm == 0.0) {
    report.degenerate = true;
    return report;
  }
  const ParamVector eps = report.grad_r_inst * (rho / gnorm);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const ParamVector bi = p.b(i);
    report.grad_r_shared.axpy(p.a(i) * dot(bi, eps), bi);
  }
  report.grad_r_shared *= 1.0 / static_cast<double>(p.size());
  report.dot = dot(report.grad_r_shared, report.grad_r_inst);
  return report;
}

double positivity_dot_numeric(const QuadraticProblem& p, double rho) {
  const ParamVector gri = grad_r_inst(p, rho);
  const double gnorm = norm2(gri);
  if (gnorm == 0.0) return 0.0;
  const ParamVector eps = gri * (rho / gnorm);
  const Batch batch = p.batch();
  const ParamVector at_perturbed = mean_loss_gradient(p.model(), p.anchor() + eps, batch).gradient;
  const ParamVector at_anchor = mean_loss_gradient(p.model(), p.anchor(), batch).gradient;
  return dot(at_perturbed - at_anchor, gri);
}

double exact_weight_equivalence(const QuadraticProblem& p, double rho) {
  std::vector<double> g(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) g[i] = p.a(i) * norm2(p.b(i));
  const ParamVector weighted = weighted_loss_gradient(p.model(), p.anchor(), p.batch(), g);
  return cosine(weighted, grad_r_inst(p, rho));
}

}  // namespace sharpopt
