#pragma once

// Slow reference implementations the fast library code is checked against.
// Everything here favors obviousness over speed.

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <functional>
#include <random>
#include <vector>

#include "vffgp/fourier_basis.hpp"
#include "vffgp/kuu.hpp"
#include "vffgp/matern.hpp"
#include "vffgp/rkhs_quadrature.hpp"

namespace oracles {

// Gram matrix of the feature projections by direct quadrature of the RKHS
// inner products, one pair at a time.
inline Eigen::MatrixXd dense_kuu_quadrature(const vffgp::FourierBasis& basis,
                                            const vffgp::MaternKernel& kernel,
                                            double tol = 1e-11) {
  const int K = basis.feature_count();
  const int M = basis.num_frequencies;
  Eigen::MatrixXd out(K, K);
  for (int i = 0; i < K; ++i) {
    const auto gi = vffgp::basis_curve(basis.a, basis.b, M, i);
    for (int j = i; j < K; ++j) {
      const auto gj = vffgp::basis_curve(basis.a, basis.b, M, j);
      const double v = vffgp::rkhs_inner_product(kernel, gi, gj, basis.a, basis.b, {}, tol);
      out(i, j) = v;
      out(j, i) = v;
    }
  }
  return out;
}

// The kernel slice t -> k(x, t) as a curve with derivatives in t, for use in
// RKHS inner products.  Valid on either side of x; if x lies inside the
// integration interval the caller must pass {x} as a breakpoint since the odd
// derivatives flip sign there.
inline vffgp::CurveFn kernel_slice_curve(const vffgp::MaternKernel& kernel, double x) {
  const double lam = kernel.lambda();
  const double s2 = kernel.variance;
  const auto order = kernel.order;
  return [lam, s2, order, x](double t) -> std::array<double, 4> {
    const double d = std::abs(t - x);
    const double sgn = (t >= x) ? 1.0 : -1.0;  // chain-rule sign for odd t-derivatives
    const double e = std::exp(-lam * d);
    double g0 = 0, g1 = 0, g2 = 0, g3 = 0;  // derivatives with respect to d
    switch (order) {
      case vffgp::MaternOrder::half:
        g0 = e;
        g1 = -lam * e;
        g2 = lam * lam * e;
        g3 = -lam * lam * lam * e;
        break;
      case vffgp::MaternOrder::three_halves:
        g0 = (1 + lam * d) * e;
        g1 = -lam * lam * d * e;
        g2 = -lam * lam * (1 - lam * d) * e;
        g3 = lam * lam * lam * (2 - lam * d) * e;
        break;
      case vffgp::MaternOrder::five_halves:
        g0 = (1 + lam * d + lam * lam * d * d / 3.0) * e;
        g1 = -(lam * lam * d / 3.0) * (1 + lam * d) * e;
        g2 = -(lam * lam / 3.0) * (1 + lam * d - lam * lam * d * d) * e;
        g3 = (lam * lam * lam * lam * d / 3.0) * (3 - lam * d) * e;
        break;
    }
    return {s2 * g0, s2 * sgn * g1, s2 * g2, s2 * sgn * g3};
  };
}

// Dense kernel Gram matrix.
inline Eigen::MatrixXd kernel_gram(const vffgp::MaternKernel& kernel, const Eigen::VectorXd& X) {
  const Eigen::Index n = X.size();
  Eigen::MatrixXd K(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) K(i, j) = vffgp::kernel_eval(kernel, std::abs(X[i] - X[j]));
  return K;
}

// Central finite difference of a scalar function.
inline double central_diff(const std::function<double(double)>& f, double x, double h = 1e-6) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

// Relative error with an absolute floor so near-zero references don't explode.
inline double rel_err(double got, double want, double floor = 1e-12) {
  return std::abs(got - want) / std::max(std::abs(want), floor);
}

inline double max_rel_err(const Eigen::MatrixXd& got, const Eigen::MatrixXd& want) {
  const double scale = std::max(1.0, want.cwiseAbs().maxCoeff());
  return ((got - want).cwiseAbs() / scale).maxCoeff();
}

}  // namespace oracles
