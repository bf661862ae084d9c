#pragma once

#include <Eigen/Core>
#include <cmath>
#include <stdexcept>

#include "vffgp/matern.hpp"

namespace vffgp {

// Harmonic sinusoid basis on [a, b]: one constant feature plus M cosine/sine
// pairs at frequencies omega_m = 2*pi*m/(b-a).  Feature ordering is a frozen
// contract relied on everywhere downstream:
//   [constant, cos_1 .. cos_M, sin_1 .. sin_M]
struct FourierBasis {
  double a = 0.0;
  double b = 1.0;
  int num_frequencies = 0;
  Eigen::VectorXd frequencies;

  FourierBasis() = default;
  FourierBasis(double a_, double b_, int num_frequencies_)
      : a(a_), b(b_), num_frequencies(num_frequencies_) {
    if (!(b > a)) throw std::invalid_argument("FourierBasis: requires b > a");
    if (num_frequencies < 0) throw std::invalid_argument("FourierBasis: M must be >= 0");
    frequencies.resize(num_frequencies);
    const double base = 2.0 * M_PI / (b - a);
    for (int m = 1; m <= num_frequencies; ++m) frequencies[m - 1] = base * m;
  }

  [[nodiscard]] int feature_count() const { return 2 * num_frequencies + 1; }

  // Distance from x to the interval, zero inside.
  [[nodiscard]] double edge_distance(double x) const {
    return std::max({a - x, x - b, 0.0});
  }
};

// Default margin used when configuring bounds from data: extend each side by
// 0.75 * (data range).
inline constexpr double kDefaultBoundaryMargin = 0.75;

[[nodiscard]] inline FourierBasis basis_from_data_range(double lo, double hi, int M,
                                                        double margin = kDefaultBoundaryMargin) {
  double range = hi - lo;
  if (range <= 0.0) range = 1.0;  // degenerate data, fall back to unit span
  return FourierBasis(lo - margin * range, hi + margin * range, M);
}

// cov(u_m, f(x)).  Inside [a, b] the features are the bare sinusoids; outside
// they decay per the closed forms below, with r the distance to the nearest
// edge.  The sine rows carry sign s = -1 below a and +1 above b, which is
// what the RKHS projection quadrature gives and the only choice that keeps
// the first derivative continuous across the edges.
inline void feature_vector_into(const FourierBasis& basis, const MaternKernel& kernel, double x,
                                Eigen::Ref<Eigen::VectorXd> out) {
  const int M = basis.num_frequencies;
  if (x >= basis.a && x <= basis.b) {
    out[0] = 1.0;
    const double t = x - basis.a;
    for (int m = 0; m < M; ++m) {
      const double wt = basis.frequencies[m] * t;
      out[1 + m] = std::cos(wt);
      out[1 + M + m] = std::sin(wt);
    }
    return;
  }
  const bool below = x < basis.a;
  const double r = below ? basis.a - x : x - basis.b;
  const double s = below ? -1.0 : 1.0;
  const double lam = kernel.lambda();
  const double e = std::exp(-lam * r);
  switch (kernel.order) {
    case MaternOrder::half:
      out.head(M + 1).setConstant(e);
      out.tail(M).setZero();
      break;
    case MaternOrder::three_halves: {
      const double c = (1.0 + lam * r) * e;
      out.head(M + 1).setConstant(c);
      for (int m = 0; m < M; ++m) out[1 + M + m] = s * r * basis.frequencies[m] * e;
      break;
    }
    case MaternOrder::five_halves: {
      const double lam2 = lam * lam;
      for (int m = 0; m <= M; ++m) {
        const double w = (m == 0) ? 0.0 : basis.frequencies[m - 1];
        out[m] = (1.0 + lam * r + 0.5 * (lam2 - w * w) * r * r) * e;
      }
      for (int m = 0; m < M; ++m) {
        const double w = basis.frequencies[m];
        out[1 + M + m] = s * r * w * (1.0 + lam * r) * e;
      }
      break;
    }
  }
}

[[nodiscard]] inline Eigen::VectorXd feature_vector(const FourierBasis& basis,
                                                    const MaternKernel& kernel, double x) {
  Eigen::VectorXd out(basis.feature_count());
  feature_vector_into(basis, kernel, x, out);
  return out;
}

// Kuf: column n is the feature vector at X[n].
[[nodiscard]] inline Eigen::MatrixXd cross_covariance(const FourierBasis& basis,
                                                      const MaternKernel& kernel,
                                                      const Eigen::VectorXd& X) {
  Eigen::MatrixXd out(basis.feature_count(), X.size());
  for (Eigen::Index n = 0; n < X.size(); ++n) feature_vector_into(basis, kernel, X[n], out.col(n));
  return out;
}

// d feature_vector / d lambda, nonzero only outside [a, b].  Needed for exact
// lengthscale gradients when training points fall outside the interval.
inline void feature_vector_dlambda_into(const FourierBasis& basis, const MaternKernel& kernel,
                                        double x, Eigen::Ref<Eigen::VectorXd> out) {
  const int M = basis.num_frequencies;
  if (x >= basis.a && x <= basis.b) {
    out.setZero();
    return;
  }
  const bool below = x < basis.a;
  const double r = below ? basis.a - x : x - basis.b;
  const double s = below ? -1.0 : 1.0;
  const double lam = kernel.lambda();
  const double e = std::exp(-lam * r);
  switch (kernel.order) {
    case MaternOrder::half:
      out.head(M + 1).setConstant(-r * e);
      out.tail(M).setZero();
      break;
    case MaternOrder::three_halves: {
      out.head(M + 1).setConstant(-lam * r * r * e);
      for (int m = 0; m < M; ++m) out[1 + M + m] = -s * r * r * basis.frequencies[m] * e;
      break;
    }
    case MaternOrder::five_halves: {
      const double lam2 = lam * lam;
      const double r3 = r * r * r;
      for (int m = 0; m <= M; ++m) {
        const double w = (m == 0) ? 0.0 : basis.frequencies[m - 1];
        out[m] = -0.5 * (lam2 - w * w) * r3 * e;
      }
      for (int m = 0; m < M; ++m) out[1 + M + m] = -s * lam * r3 * basis.frequencies[m] * e;
      break;
    }
  }
}

}  // namespace vffgp
