#pragma once

#include <cmath>
#include <stdexcept>

namespace vffgp {

enum class MaternOrder { half, three_halves, five_halves };

// Half-integer Matern covariance function. Owns the variance sigma^2 and
// lengthscale ell; the decay rate lambda is derived on demand so that
// hyperparameter updates cannot leave a stale copy behind.
struct MaternKernel {
  MaternOrder order = MaternOrder::three_halves;
  double variance = 1.0;
  double lengthscale = 1.0;

  MaternKernel() = default;
  MaternKernel(MaternOrder order_, double variance_, double lengthscale_)
      : order(order_), variance(variance_), lengthscale(lengthscale_) {
    if (!(variance > 0.0)) throw std::invalid_argument("MaternKernel: variance must be > 0");
    if (!(lengthscale > 0.0)) throw std::invalid_argument("MaternKernel: lengthscale must be > 0");
  }

  [[nodiscard]] double lambda() const {
    switch (order) {
      case MaternOrder::half: return 1.0 / lengthscale;
      case MaternOrder::three_halves: return std::sqrt(3.0) / lengthscale;
      case MaternOrder::five_halves: return std::sqrt(5.0) / lengthscale;
    }
    return 0.0;  // unreachable
  }
};

// k_nu(r) for nu = 1/2, 3/2, 5/2.  r = 0 short-circuits to sigma^2 exactly,
// keeping Gram diagonals free of 1-ulp exp noise.
[[nodiscard]] inline double kernel_eval(const MaternKernel& k, double r) {
  if (r < 0.0) throw std::domain_error("kernel_eval: r must be >= 0");
  if (r == 0.0) return k.variance;
  const double lr = k.lambda() * r;
  const double e = std::exp(-lr);
  switch (k.order) {
    case MaternOrder::half: return k.variance * e;
    case MaternOrder::three_halves: return k.variance * (1.0 + lr) * e;
    case MaternOrder::five_halves: return k.variance * (1.0 + lr + lr * lr / 3.0) * e;
  }
  return 0.0;  // unreachable
}

// Spectral density s_nu(omega), the Fourier dual of kernel_eval.  Even in
// omega and strictly positive.
[[nodiscard]] inline double spectral_density(const MaternKernel& k, double omega) {
  const double lam = k.lambda();
  const double d = lam * lam + omega * omega;
  switch (k.order) {
    case MaternOrder::half: return 2.0 * k.variance * lam / d;
    case MaternOrder::three_halves: return 4.0 * k.variance * lam * lam * lam / (d * d);
    case MaternOrder::five_halves: {
      const double lam5 = lam * lam * lam * lam * lam;
      return (16.0 / 3.0) * k.variance * lam5 / (d * d * d);
    }
  }
  return 0.0;  // unreachable
}

}  // namespace vffgp
