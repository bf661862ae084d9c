#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "vffgp/errors.hpp"
#include "vffgp/matern.hpp"

namespace vffgp {

// A scalar curve together with its first three derivatives, the inputs the
// Matern RKHS inner products need (1st derivative for order 1/2, 2nd for 3/2,
// 3rd for 5/2).
using CurveFn = std::function<std::array<double, 4>(double)>;

[[nodiscard]] inline CurveFn cosine_curve(double omega, double a) {
  return [omega, a](double t) -> std::array<double, 4> {
    const double c = std::cos(omega * (t - a));
    const double s = std::sin(omega * (t - a));
    return {c, -omega * s, -omega * omega * c, omega * omega * omega * s};
  };
}

[[nodiscard]] inline CurveFn sine_curve(double omega, double a) {
  return [omega, a](double t) -> std::array<double, 4> {
    const double c = std::cos(omega * (t - a));
    const double s = std::sin(omega * (t - a));
    return {s, omega * c, -omega * omega * s, -omega * omega * omega * c};
  };
}

// <g, h>_H for the Matern RKHS on [a, b]: adaptive Gauss-Kronrod quadrature of
// the differential-operator integrand plus the exact boundary terms.  This is
// the master oracle build_kuu is tested against.  Integrands with interior
// derivative kinks (e.g. kernel slices k(x, .)) pass the kink locations as
// breakpoints so each smooth piece is integrated separately.
[[nodiscard]] inline double rkhs_inner_product(const MaternKernel& kernel, const CurveFn& g,
                                               const CurveFn& h, double a, double b,
                                               const std::vector<double>& breakpoints = {},
                                               double tol = 1e-12) {
  const double lam = kernel.lambda();
  const double s2 = kernel.variance;

  std::function<double(double)> integrand;
  switch (kernel.order) {
    case MaternOrder::half:
      integrand = [&](double t) {
        const auto gv = g(t), hv = h(t);
        return (lam * gv[0] + gv[1]) * (lam * hv[0] + hv[1]);
      };
      break;
    case MaternOrder::three_halves:
      integrand = [&](double t) {
        const auto gv = g(t), hv = h(t);
        return (lam * lam * gv[0] + 2.0 * lam * gv[1] + gv[2]) *
               (lam * lam * hv[0] + 2.0 * lam * hv[1] + hv[2]);
      };
      break;
    case MaternOrder::five_halves:
      integrand = [&](double t) {
        const auto gv = g(t), hv = h(t);
        const double lam2 = lam * lam;
        return (lam2 * lam * gv[0] + 3.0 * lam2 * gv[1] + 3.0 * lam * gv[2] + gv[3]) *
               (lam2 * lam * hv[0] + 3.0 * lam2 * hv[1] + 3.0 * lam * hv[2] + hv[3]);
      };
      break;
  }

  std::vector<double> edges{a};
  for (double t : breakpoints)
    if (t > a && t < b) edges.push_back(t);
  edges.push_back(b);

  double integral = 0.0, total_err = 0.0;
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) {
    double err = 0.0;
    integral += boost::math::quadrature::gauss_kronrod<double, 61>::integrate(
        integrand, edges[i], edges[i + 1], 15, tol, &err);
    total_err += err;
  }

  const auto ga = g(a), ha = h(a);
  double prefactor = 0.0, result = 0.0;
  switch (kernel.order) {
    case MaternOrder::half:
      prefactor = 1.0 / (2.0 * lam * s2);
      result = prefactor * integral + ga[0] * ha[0] / s2;
      break;
    case MaternOrder::three_halves:
      prefactor = 1.0 / (4.0 * lam * lam * lam * s2);
      result = prefactor * integral + ga[0] * ha[0] / s2 + ga[1] * ha[1] / (lam * lam * s2);
      break;
    case MaternOrder::five_halves: {
      const double lam2 = lam * lam;
      prefactor = 3.0 / (16.0 * lam2 * lam2 * lam * s2);
      result = prefactor * integral + (9.0 / (8.0 * s2)) * ga[0] * ha[0] +
               (9.0 / (8.0 * lam2 * lam2 * s2)) * ga[2] * ha[2] +
               (3.0 / (lam2 * s2)) * (ga[1] * ha[1] + 0.125 * ga[2] * ha[0] +
                                      0.125 * ga[0] * ha[2]);
      break;
    }
  }
  // Convergence is judged on the contribution to the returned value: when one
  // factor is annihilated by the differential operator the raw integral is
  // pure roundoff noise with a stalled error estimate, yet harmless.
  if (prefactor * total_err > 1e-7 * std::max(1.0, std::abs(result)))
    throw numerical_error("rkhs_inner_product: quadrature did not converge");
  return result;
}

// Feature curve m = 0 is the constant, 1..M cosines, M+1..2M sines, matching
// the frozen feature ordering.
[[nodiscard]] inline CurveFn basis_curve(double a, double b, int M, int index) {
  const double base = 2.0 * M_PI / (b - a);
  if (index == 0) return cosine_curve(0.0, a);
  if (index <= M) return cosine_curve(base * index, a);
  return sine_curve(base * (index - M), a);
}

}  // namespace vffgp
