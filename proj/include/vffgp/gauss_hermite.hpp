#pragma once

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <numbers>

#include "vffgp/errors.hpp"

namespace vffgp {

// Gauss-Hermite quadrature in the physicists' convention:
//   integral f(t) exp(-t^2) dt  ~=  sum_h w_h f(t_h).
// Nodes and weights come from the eigendecomposition of the Jacobi matrix
// (Golub-Welsch); the recurrence for Hermite polynomials gives off-diagonal
// entries sqrt(i/2).

struct GaussHermiteRule {
  Eigen::VectorXd nodes;
  Eigen::VectorXd weights;
};

[[nodiscard]] inline GaussHermiteRule gauss_hermite(int n) {
  if (n < 1) throw std::invalid_argument("gauss_hermite: need at least one node");
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i < n; ++i) {
    const double off = std::sqrt(0.5 * i);
    jacobi(i, i - 1) = off;
    jacobi(i - 1, i) = off;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
  if (eig.info() != Eigen::Success)
    throw numerical_error("gauss_hermite: eigendecomposition failed");
  GaussHermiteRule rule;
  rule.nodes = eig.eigenvalues();
  rule.weights.resize(n);
  const double total = std::sqrt(std::numbers::pi);
  for (int i = 0; i < n; ++i) {
    const double v0 = eig.eigenvectors()(0, i);
    rule.weights[i] = total * v0 * v0;
  }
  return rule;
}

// E[f(Z)] for Z ~ N(mean, var), evaluated by substituting z = mean + sqrt(2 var) t.
template <typename F>
[[nodiscard]] double gauss_expectation(const GaussHermiteRule& rule, double mean, double var,
                                       F&& f) {
  if (var < 0.0) throw std::invalid_argument("gauss_expectation: negative variance");
  const double scale = std::sqrt(2.0 * var);
  double acc = 0.0;
  for (Eigen::Index h = 0; h < rule.nodes.size(); ++h)
    acc += rule.weights[h] * f(mean + scale * rule.nodes[h]);
  return acc / std::sqrt(std::numbers::pi);
}

}  // namespace vffgp
