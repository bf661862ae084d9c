#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <utility>

#include "vffgp/errors.hpp"
#include "vffgp/fourier_basis.hpp"
#include "vffgp/likelihoods.hpp"
#include "vffgp/matern.hpp"
#include "vffgp/rng.hpp"

namespace vffgp {

// Dense reference GP.  This is the oracle the approximate models are judged
// against, so it stays deliberately simple: build the full Gram matrix,
// factorize once, read everything off the factorization.

struct FullGpResult {
  double log_marginal = 0.0;
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;  // latent f variance, without observation noise
};

[[nodiscard]] inline FullGpResult full_gp_fit_predict(const MaternKernel& kernel,
                                                      const GaussianLikelihood& lik,
                                                      const Eigen::VectorXd& x,
                                                      const Eigen::VectorXd& y,
                                                      const Eigen::VectorXd& xstar) {
  const Eigen::Index n = x.size();
  if (y.size() != n) throw std::invalid_argument("full_gp: x and y length mismatch");
  if (n > 5000) throw data_error("full_gp: dense path is guarded at N <= 5000");
  if (!x.allFinite() || !y.allFinite()) throw data_error("full_gp: non-finite inputs");

  FullGpResult result;
  const Eigen::Index p = xstar.size();
  if (n == 0) {
    result.mean = Eigen::VectorXd::Zero(p);
    result.variance = Eigen::VectorXd::Constant(p, kernel.variance);
    return result;
  }

  Eigen::MatrixXd gram(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j <= i; ++j)
      gram(i, j) = gram(j, i) = kernel_eval(kernel, std::abs(x[i] - x[j]));
  gram.diagonal().array() += lik.noise_variance;

  Eigen::LLT<Eigen::MatrixXd> llt(gram);
  if (llt.info() != Eigen::Success)
    throw numerical_error("full_gp: Gram matrix not positive definite after noise addition");

  const Eigen::VectorXd alpha = llt.solve(y);
  result.log_marginal = -0.5 * y.dot(alpha) -
                        llt.matrixLLT().diagonal().array().log().sum() -
                        0.5 * double(n) * std::log(2.0 * std::numbers::pi);

  result.mean.resize(p);
  result.variance.resize(p);
  Eigen::VectorXd ks(n);
  for (Eigen::Index j = 0; j < p; ++j) {
    for (Eigen::Index i = 0; i < n; ++i) ks[i] = kernel_eval(kernel, std::abs(x[i] - xstar[j]));
    result.mean[j] = ks.dot(alpha);
    const Eigen::VectorXd v = llt.matrixL().solve(ks);
    result.variance[j] = kernel.variance - v.squaredNorm();
  }
  return result;
}

// Finite spectral expansion: a bank of frequencies where each frequency m
// carries an independent cos/sin weight pair with common prior variance c_m.
// The implied stationary kernel is sum_m c_m cos(w_m r), so both the Monte
// Carlo and the regular-grid spectral approximations fit this shape; they
// differ only in how frequencies and variances are chosen.
struct WeightSpaceModel {
  Eigen::VectorXd frequencies;     // M entries
  Eigen::VectorXd prior_variance;  // c_m, shared by the cos and sin weight of pair m

  [[nodiscard]] Eigen::Index num_frequencies() const { return frequencies.size(); }
  [[nodiscard]] Eigen::Index feature_count() const { return 2 * frequencies.size(); }

  // [cos(w_1 x) .. cos(w_M x), sin(w_1 x) .. sin(w_M x)]
  [[nodiscard]] Eigen::VectorXd feature_vector(double x) const {
    const Eigen::Index m = frequencies.size();
    Eigen::VectorXd phi(2 * m);
    for (Eigen::Index i = 0; i < m; ++i) {
      phi[i] = std::cos(frequencies[i] * x);
      phi[m + i] = std::sin(frequencies[i] * x);
    }
    return phi;
  }

  [[nodiscard]] double kernel_value(double r) const {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < frequencies.size(); ++i)
      acc += prior_variance[i] * std::cos(frequencies[i] * r);
    return acc;
  }

  // Prior weight variances expanded to one entry per feature.
  [[nodiscard]] Eigen::VectorXd weight_prior() const {
    const Eigen::Index m = frequencies.size();
    Eigen::VectorXd c(2 * m);
    c.head(m) = prior_variance;
    c.tail(m) = prior_variance;
    return c;
  }
};

// Monte Carlo spectral approximation: frequencies drawn from the spectral
// density normalized to a probability (divide by 2*pi*variance), each carrying
// weight variance sigma^2/M.  For the exponential kernel that density is
// Cauchy with scale lambda, sampled by inverse CDF.  The smoother kernels give
// Student-t shaped densities; those are drawn by accept-reject with the same
// Cauchy as proposal, since the density ratio (lambda^2/(lambda^2+w^2))^(k-1)
// is bounded by one (k = 2 and 3, mean acceptance 1/2 and 3/8).
[[nodiscard]] inline WeightSpaceModel rff_model(const MaternKernel& kernel, int num_freqs,
                                                std::uint64_t seed) {
  if (num_freqs < 0) throw std::invalid_argument("rff_model: num_freqs must be >= 0");
  WeightSpaceModel model;
  model.frequencies.resize(num_freqs);
  model.prior_variance.resize(num_freqs);
  if (num_freqs == 0) return model;

  const double lam = kernel.lambda();
  auto rng = make_rng(seed, "rff-frequencies");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto cauchy_draw = [&] {
    return lam * std::tan(std::numbers::pi * (unit(rng) - 0.5));
  };

  for (int m = 0; m < num_freqs; ++m) {
    double w = cauchy_draw();
    if (kernel.order != MaternOrder::half) {
      const double power = (kernel.order == MaternOrder::three_halves) ? 1.0 : 2.0;
      while (true) {
        const double ratio = lam * lam / (lam * lam + w * w);
        if (unit(rng) < std::pow(ratio, power)) break;
        w = cauchy_draw();
      }
    }
    model.frequencies[m] = w;
    model.prior_variance[m] = kernel.variance / double(num_freqs);
  }
  return model;
}

// Deterministic counterpart on the grid w_m = m*spacing.  The kernel is the
// cosine transform of the spectral density, k(r) = (1/pi) * integral of
// s(w)cos(wr) over w >= 0, so each rectangle contributes s(m*spacing) times
// spacing/pi.
[[nodiscard]] inline WeightSpaceModel regular_ff_model(const MaternKernel& kernel, double spacing,
                                                       int num_freqs) {
  if (!(spacing > 0.0)) throw std::invalid_argument("regular_ff_model: spacing must be positive");
  if (num_freqs < 0) throw std::invalid_argument("regular_ff_model: num_freqs must be >= 0");
  WeightSpaceModel model;
  model.frequencies.resize(num_freqs);
  model.prior_variance.resize(num_freqs);
  for (int m = 0; m < num_freqs; ++m) {
    const double w = double(m + 1) * spacing;
    model.frequencies[m] = w;
    model.prior_variance[m] = spectral_density(kernel, w) * spacing / std::numbers::pi;
  }
  return model;
}

// Exact Bayesian linear regression in the weight space.  With Phi holding one
// feature column per datum and C the diagonal weight prior, the N x N system
// (noise*I + Phi' C Phi) is folded into the 2M x 2M posterior precision
// A = C^-1 + Phi Phi' / noise via Woodbury; the log marginal uses the matching
// determinant identity det(noise*I + Phi' C Phi) = noise^N det(A) det(C).
[[nodiscard]] inline FullGpResult weight_space_fit_predict(const WeightSpaceModel& model,
                                                           const GaussianLikelihood& lik,
                                                           const Eigen::VectorXd& x,
                                                           const Eigen::VectorXd& y,
                                                           const Eigen::VectorXd& xstar) {
  const Eigen::Index n = x.size();
  if (y.size() != n) throw std::invalid_argument("weight_space: x and y length mismatch");
  if (!x.allFinite() || !y.allFinite()) throw data_error("weight_space: non-finite inputs");

  const Eigen::Index k = model.feature_count();
  const Eigen::Index p = xstar.size();
  FullGpResult result;
  result.mean = Eigen::VectorXd::Zero(p);
  result.variance.resize(p);

  if (k == 0) {
    // Zero kernel: the prior is a point mass at f = 0.
    result.variance.setZero();
    result.log_marginal = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      result.log_marginal += -0.5 * y[i] * y[i] / lik.noise_variance -
                             0.5 * std::log(2.0 * std::numbers::pi * lik.noise_variance);
    return result;
  }

  const Eigen::VectorXd c = model.weight_prior();
  if (n == 0) {
    for (Eigen::Index j = 0; j < p; ++j) {
      const Eigen::VectorXd phi = model.feature_vector(xstar[j]);
      result.variance[j] = phi.cwiseAbs2().dot(c);
    }
    return result;
  }

  Eigen::MatrixXd features(k, n);
  for (Eigen::Index i = 0; i < n; ++i) features.col(i) = model.feature_vector(x[i]);

  Eigen::MatrixXd precision = features * features.transpose() / lik.noise_variance;
  precision.diagonal() += c.cwiseInverse();
  Eigen::LLT<Eigen::MatrixXd> llt(precision);
  if (llt.info() != Eigen::Success)
    throw numerical_error("weight_space: posterior precision not positive definite");

  const Eigen::VectorXd phi_y = features * y / lik.noise_variance;
  const Eigen::VectorXd mean_w = llt.solve(phi_y);

  result.log_marginal = -0.5 * (y.squaredNorm() / lik.noise_variance - phi_y.dot(mean_w)) -
                        llt.matrixLLT().diagonal().array().log().sum() -
                        0.5 * c.array().log().sum() -
                        0.5 * double(n) * std::log(2.0 * std::numbers::pi * lik.noise_variance);

  for (Eigen::Index j = 0; j < p; ++j) {
    const Eigen::VectorXd phi = model.feature_vector(xstar[j]);
    result.mean[j] = phi.dot(mean_w);
    const Eigen::VectorXd v = llt.matrixL().solve(phi);
    result.variance[j] = v.squaredNorm();
  }
  return result;
}

// Plain L2 projections of the process onto the boundary-anchored sinusoids,
// for the exponential kernel where the integrals close.  Unlike the harmonic
// feature construction used everywhere else, these covariances pick up decay
// corrections at the interval edges, which is exactly the effect the
// comparison tests probe.  Feature order matches the rest of the library:
// [constant, cos_1..cos_M, sin_1..sin_M].
struct L2Features {
  FourierBasis basis;
  MaternKernel kernel;

  L2Features(FourierBasis basis_, MaternKernel kernel_)
      : basis(std::move(basis_)), kernel(kernel_) {}

  // cov(u_i, f(x)) for every feature i; valid on either side of the interval.
  [[nodiscard]] Eigen::VectorXd feature_vector(double x) const {
    const int m_count = basis.num_frequencies;
    const double lam = kernel.lambda();
    const double a = basis.a;
    const double b = basis.b;
    Eigen::VectorXd out(basis.feature_count());

    for (int m = 0; m <= m_count; ++m) {
      const double w = (m == 0) ? 0.0 : basis.frequencies[m - 1];
      const double s = spectral_density(kernel, w);
      double re = 0.0, im = 0.0;
      if (x < a) {
        const double lo = std::exp(-lam * (a - x));
        const double hi = std::exp(-lam * (b - x));
        re = 0.5 * s * (lo - hi);
        im = (0.5 * s * w / lam) * (lo - hi);
      } else if (x > b) {
        const double lo = std::exp(-lam * (x - a));
        const double hi = std::exp(-lam * (x - b));
        re = 0.5 * s * (hi - lo);
        im = -(0.5 * s * w / lam) * (hi - lo);
      } else {
        const double ea = std::exp(-lam * (x - a));
        const double eb = std::exp(-lam * (b - x));
        re = s * (std::cos(w * (x - a)) - 0.5 * (ea + eb));
        im = s * (std::sin(w * (x - a)) + 0.5 * (w / lam) * (ea - eb));
      }
      if (m == 0) {
        out[0] = re;
      } else {
        out[m] = re;
        out[m_count + m] = im;
      }
    }
    return out;
  }

  // Dense Gram matrix of the projections.  The cosine and sine halves never
  // mix: their coupling integrals cancel over whole periods, so the matrix is
  // two diagonal-plus-rank-one blocks.
  [[nodiscard]] Eigen::MatrixXd kuu() const {
    const int m_count = basis.num_frequencies;
    const int total = basis.feature_count();
    const double lam = kernel.lambda();
    const double s2 = kernel.variance;
    const double len = basis.b - basis.a;
    const double decay = 1.0 - std::exp(-lam * len);

    const auto omega = [&](int m) { return (m == 0) ? 0.0 : basis.frequencies[m - 1]; };
    Eigen::VectorXd inv_denom(m_count + 1);
    for (int m = 0; m <= m_count; ++m) {
      const double w = omega(m);
      inv_denom[m] = 1.0 / (lam * lam + w * w);
    }

    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(total, total);
    for (int i = 0; i <= m_count; ++i) {
      for (int j = 0; j <= m_count; ++j)
        out(i, j) = -2.0 * s2 * lam * lam * decay * inv_denom[i] * inv_denom[j];
      out(i, i) += s2 * len * lam * inv_denom[i] * (i == 0 ? 2.0 : 1.0);
    }
    for (int i = 1; i <= m_count; ++i) {
      const double wi = omega(i);
      for (int j = 1; j <= m_count; ++j)
        out(m_count + i, m_count + j) =
            2.0 * s2 * wi * omega(j) * decay * inv_denom[i] * inv_denom[j];
      out(m_count + i, m_count + i) += s2 * len * lam * inv_denom[i];
    }
    return out;
  }
};

[[nodiscard]] inline L2Features l2_features_matern12(const FourierBasis& basis,
                                                     const MaternKernel& kernel) {
  if (kernel.order != MaternOrder::half)
    throw std::invalid_argument("l2_features_matern12: closed forms exist for order 1/2 only");
  return L2Features(basis, kernel);
}

}  // namespace vffgp
