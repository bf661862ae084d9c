#pragma once

#include <Eigen/Core>
#include <cmath>

#include "vffgp/fourier_basis.hpp"
#include "vffgp/lowrank.hpp"
#include "vffgp/matern.hpp"

namespace vffgp {

// Gram matrix Kuu of the RKHS feature projections, in closed structured form.
//
// For every order the diagonal part is
//   alpha = [(b-a) / s(0), (b-a)/2 / s(omega_m) ... twice ...]
// (constant, cosines, sines).  The remaining off-diagonal mass factors into
// at most three rank-one terms:
//   order 1/2:  beta_1 = 1/sigma on constant+cosines
//   order 3/2:  beta_1 as above; beta_2 = omega_m / (lambda sigma) on sines
//   order 5/2:  beta_1 as above;
//               beta_2 = (3 omega_m^2/lambda^2 - 1) / (2 sqrt(2) sigma) on
//               constant+cosines (omega = 0 for the constant entry);
//               beta_3 = sqrt(3) omega_m / (lambda sigma) on sines
// The factorization reproduces the closed-form inner products exactly; tests
// assert it against the adaptive quadrature oracle rather than trusting the
// derivation.
[[nodiscard]] inline LowRankPlusDiag build_kuu(const FourierBasis& basis,
                                               const MaternKernel& kernel) {
  const int M = basis.num_frequencies;
  const int K = basis.feature_count();
  const double halfspan = 0.5 * (basis.b - basis.a);
  const double sigma = std::sqrt(kernel.variance);
  const double lam = kernel.lambda();

  Eigen::VectorXd alpha(K);
  alpha[0] = 2.0 * halfspan / spectral_density(kernel, 0.0);
  for (int m = 0; m < M; ++m) {
    const double am = halfspan / spectral_density(kernel, basis.frequencies[m]);
    alpha[1 + m] = am;
    alpha[1 + M + m] = am;
  }

  int R = 0;
  switch (kernel.order) {
    case MaternOrder::half: R = 1; break;
    case MaternOrder::three_halves: R = 2; break;
    case MaternOrder::five_halves: R = 3; break;
  }
  Eigen::MatrixXd B = Eigen::MatrixXd::Zero(K, R);
  B.col(0).head(M + 1).setConstant(1.0 / sigma);
  if (kernel.order == MaternOrder::three_halves) {
    for (int m = 0; m < M; ++m) B(1 + M + m, 1) = basis.frequencies[m] / (lam * sigma);
  } else if (kernel.order == MaternOrder::five_halves) {
    const double c = 1.0 / (2.0 * std::sqrt(2.0) * sigma);
    B(0, 1) = -c;
    for (int m = 0; m < M; ++m) {
      const double w = basis.frequencies[m];
      B(1 + m, 1) = c * (3.0 * w * w / (lam * lam) - 1.0);
      B(1 + M + m, 2) = std::sqrt(3.0) * w / (lam * sigma);
    }
  }
  return LowRankPlusDiag(std::move(alpha), std::move(B));
}

// Partial derivatives of the Kuu structure with respect to log lengthscale.
// With respect to log sigma^2 no separate structure is needed: every entry of
// Kuu scales as 1/sigma^2, so dKuu/dlog(sigma^2) = -Kuu.
struct KuuLogLengthscaleDeriv {
  Eigen::VectorXd dalpha;  // d alpha / d log(ell)
  Eigen::MatrixXd dB;      // d B / d log(ell)
};

[[nodiscard]] inline KuuLogLengthscaleDeriv kuu_dloglengthscale(const FourierBasis& basis,
                                                                const MaternKernel& kernel) {
  const int M = basis.num_frequencies;
  const int K = basis.feature_count();
  const double halfspan = 0.5 * (basis.b - basis.a);
  const double sigma = std::sqrt(kernel.variance);
  const double s2 = kernel.variance;
  const double lam = kernel.lambda();
  const double dlam = -lam;  // d lambda / d log(ell)

  // alpha entries are halfspan * (lam^2+w^2)^p / (c_p sigma^2 lam^{2p-1});
  // differentiate in lambda and chain through dlam.
  KuuLogLengthscaleDeriv out;
  out.dalpha.resize(K);
  auto dalpha_dlam = [&](double w) {
    const double q = lam * lam + w * w;
    switch (kernel.order) {
      case MaternOrder::half:
        // alpha = halfspan q / (2 s2 lam)
        return halfspan * (2.0 * lam * lam - q) / (2.0 * s2 * lam * lam);
      case MaternOrder::three_halves: {
        // alpha = halfspan q^2 / (4 s2 lam^3)
        const double lam4 = lam * lam * lam * lam;
        return halfspan * q * (4.0 * lam * lam - 3.0 * q) / (4.0 * s2 * lam4);
      }
      case MaternOrder::five_halves: {
        // alpha = 3 halfspan q^3 / (16 s2 lam^5)
        const double lam6 = std::pow(lam, 6);
        return 3.0 * halfspan * q * q * (6.0 * lam * lam - 5.0 * q) / (16.0 * s2 * lam6);
      }
    }
    return 0.0;  // unreachable
  };
  out.dalpha[0] = 2.0 * dalpha_dlam(0.0) * dlam;
  for (int m = 0; m < M; ++m) {
    const double d = dalpha_dlam(basis.frequencies[m]) * dlam;
    out.dalpha[1 + m] = d;
    out.dalpha[1 + M + m] = d;
  }

  int R = 0;
  switch (kernel.order) {
    case MaternOrder::half: R = 1; break;
    case MaternOrder::three_halves: R = 2; break;
    case MaternOrder::five_halves: R = 3; break;
  }
  out.dB = Eigen::MatrixXd::Zero(K, R);
  if (kernel.order == MaternOrder::three_halves) {
    // beta_2 = w / (lam sigma): d/dlam = -w / (lam^2 sigma)
    for (int m = 0; m < M; ++m)
      out.dB(1 + M + m, 1) = -basis.frequencies[m] / (lam * lam * sigma) * dlam;
  } else if (kernel.order == MaternOrder::five_halves) {
    const double c = 1.0 / (2.0 * std::sqrt(2.0) * sigma);
    for (int m = 0; m < M; ++m) {
      const double w = basis.frequencies[m];
      // beta_2 entry: c (3 w^2 lam^{-2} - 1): d/dlam = -6 c w^2 lam^{-3}
      out.dB(1 + m, 1) = -6.0 * c * w * w / (lam * lam * lam) * dlam;
      // beta_3 entry: sqrt(3) w / (lam sigma)
      out.dB(1 + M + m, 2) = -std::sqrt(3.0) * w / (lam * lam * sigma) * dlam;
    }
  }
  return out;
}

// <G, dKuu/dlog(ell)> for symmetric G, without densifying the derivative:
// the diagonal part contracts directly and d(B B^T) contracts as 2 tr(B^T G dB).
[[nodiscard]] inline double contract_dkuu_dloglen(const Eigen::MatrixXd& G,
                                                  const LowRankPlusDiag& kuu,
                                                  const KuuLogLengthscaleDeriv& d) {
  double out = G.diagonal().dot(d.dalpha);
  if (kuu.B.cols() > 0) out += 2.0 * (kuu.B.transpose() * G * d.dB).trace();
  return out;
}

// Residual (orthogonal-complement) variance h(x) = k(x,x) - k_u(x)^T Kuu^{-1} k_u(x).
[[nodiscard]] inline double residual_variance(const FourierBasis& basis,
                                              const MaternKernel& kernel,
                                              const LowRankSolver& kuu_solver, double x) {
  const Eigen::VectorXd phi = feature_vector(basis, kernel, x);
  return kernel.variance - kuu_solver.quad_form(phi);
}

[[nodiscard]] inline double residual_variance(const FourierBasis& basis,
                                              const MaternKernel& kernel, double x) {
  return residual_variance(basis, kernel, LowRankSolver(build_kuu(basis, kernel)), x);
}

}  // namespace vffgp
