#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "vffgp/errors.hpp"
#include "vffgp/fourier_basis.hpp"
#include "vffgp/kuu.hpp"
#include "vffgp/lbfgs.hpp"
#include "vffgp/likelihoods.hpp"
#include "vffgp/lowrank.hpp"
#include "vffgp/parallel.hpp"

namespace vffgp {

struct GaussianState {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov_factor;  // lower triangular, covariance = cov_factor * cov_factor^T
};

// One-pass data products for the conjugate path.  Everything the ELBO needs
// from the data lives here, so hyperparameter optimization never touches the
// rows again -- with one exception: rows beyond [a,b] have lengthscale-
// dependent features, so those rows are kept verbatim for rebuilds.
struct SufficientStats {
  Eigen::MatrixXd kuf_kfu;  // sum_n phi_n phi_n^T
  Eigen::VectorXd kuf_y;    // sum_n y_n phi_n
  double yy = 0.0;
  double trace_kff = 0.0;  // N * sigma^2 at accumulation time; rescale on sigma^2 change
  Eigen::Index n = 0;
  Eigen::VectorXd outside_x;
  Eigen::VectorXd outside_y;
};

[[nodiscard]] inline SufficientStats accumulate_stats(const FourierBasis& basis,
                                                      const MaternKernel& kernel,
                                                      const Eigen::VectorXd& x,
                                                      const Eigen::VectorXd& y,
                                                      bool permit_outside = false) {
  if (x.size() != y.size())
    throw std::invalid_argument("accumulate_stats: x and y length mismatch");
  if (!x.allFinite() || !y.allFinite())
    throw data_error("accumulate_stats: non-finite input values");

  const Eigen::Index n = x.size();
  const Eigen::Index feat = basis.feature_count();
  SufficientStats stats;
  stats.kuf_kfu = Eigen::MatrixXd::Zero(feat, feat);
  stats.kuf_y = Eigen::VectorXd::Zero(feat);
  stats.n = n;
  stats.trace_kff = double(n) * kernel.variance;
  stats.outside_x.resize(0);
  stats.outside_y.resize(0);
  if (n == 0) return stats;

  std::vector<Eigen::Index> outside;
  for (Eigen::Index i = 0; i < n; ++i)
    if (basis.edge_distance(x[i]) > 0.0) outside.push_back(i);
  if (!outside.empty()) {
    if (!permit_outside)
      throw data_error("accumulate_stats: input " + std::to_string(x[outside.front()]) +
                       " lies outside [" + std::to_string(basis.a) + ", " +
                       std::to_string(basis.b) + "]; widen the interval or allow outside data");
    stats.outside_x.resize(Eigen::Index(outside.size()));
    stats.outside_y.resize(Eigen::Index(outside.size()));
    for (std::size_t k = 0; k < outside.size(); ++k) {
      stats.outside_x[Eigen::Index(k)] = x[outside[k]];
      stats.outside_y[Eigen::Index(k)] = y[outside[k]];
    }
  }

  // chunk-local products folded in chunk order, so totals do not depend on
  // how many workers ran
  const std::size_t chunks = chunk_count(std::size_t(n));
  std::vector<Eigen::MatrixXd> part_pp(chunks);
  std::vector<Eigen::VectorXd> part_py(chunks);
  std::vector<double> part_yy(chunks, 0.0);
  parallel_chunks(std::size_t(n), [&](std::size_t c, std::size_t lo, std::size_t hi) {
    const Eigen::Index len = Eigen::Index(hi - lo);
    Eigen::MatrixXd phi(feat, len);
    for (Eigen::Index j = 0; j < len; ++j)
      feature_vector_into(basis, kernel, x[Eigen::Index(lo) + j], phi.col(j));
    const auto yb = y.segment(Eigen::Index(lo), len);
    part_pp[c].resize(feat, feat);
    part_pp[c].noalias() = phi * phi.transpose();
    part_py[c].resize(feat);
    part_py[c].noalias() = phi * yb;
    part_yy[c] = yb.squaredNorm();
  });
  for (std::size_t c = 0; c < chunks; ++c) {
    stats.kuf_kfu += part_pp[c];
    stats.kuf_y += part_py[c];
    stats.yy += part_yy[c];
  }
  return stats;
}

namespace detail {

// Cholesky of Kuu + KufKfu/noise, shared by the posterior and the ELBO
[[nodiscard]] inline Eigen::LLT<Eigen::MatrixXd> factor_information(
    const Eigen::MatrixXd& kuu_dense, const SufficientStats& stats, double noise,
    const char* who) {
  Eigen::MatrixXd gram = kuu_dense + stats.kuf_kfu / noise;
  Eigen::LLT<Eigen::MatrixXd> llt(gram);
  if (llt.info() != Eigen::Success)
    throw numerical_error(std::string(who) +
                          ": information matrix not positive definite; a jitter of order "
                          "1e-8 * mean(diag(Kuu)) on Kuu may help");
  return llt;
}

}  // namespace detail

[[nodiscard]] inline GaussianState optimal_posterior(const SufficientStats& stats,
                                                     const LowRankPlusDiag& kuu,
                                                     const GaussianLikelihood& lik) {
  if (stats.kuf_kfu.rows() != kuu.size())
    throw std::invalid_argument("optimal_posterior: stats dimension mismatch");
  const Eigen::MatrixXd kuu_dense = kuu.to_dense();
  const auto llt = detail::factor_information(kuu_dense, stats, lik.noise_variance,
                                              "optimal_posterior");

  GaussianState state;
  state.mean = kuu_dense * llt.solve(stats.kuf_y / lik.noise_variance);
  // covariance = Kuu (Kuu + KufKfu/noise)^{-1} Kuu, assembled as a symmetric
  // product so positive definiteness survives roundoff
  const Eigen::MatrixXd half = llt.matrixL().solve(kuu_dense);
  const Eigen::MatrixXd sigma = half.transpose() * half;
  Eigen::LLT<Eigen::MatrixXd> sig_llt(sigma);
  if (sig_llt.info() != Eigen::Success)
    throw numerical_error(
        "optimal_posterior: posterior covariance factorization failed; a jitter of order "
        "1e-8 * mean(diag(Kuu)) on Kuu may help");
  state.cov_factor = sig_llt.matrixL();
  return state;
}

[[nodiscard]] inline double collapsed_elbo(const SufficientStats& stats,
                                           const LowRankPlusDiag& kuu,
                                           const GaussianLikelihood& lik) {
  if (stats.n == 0) return 0.0;
  const double noise = lik.noise_variance;
  const LowRankSolver solver(kuu);
  const auto llt = detail::factor_information(kuu.to_dense(), stats, noise, "collapsed_elbo");

  const double n = double(stats.n);
  const double logdet_g = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  const Eigen::VectorXd ginv_r = llt.solve(stats.kuf_y);
  const double quad = stats.yy / noise - stats.kuf_y.dot(ginv_r) / (noise * noise);
  const double trace_q = solver.solve(stats.kuf_kfu).trace();
  return -0.5 * n * std::log(2.0 * std::numbers::pi) -
         0.5 * (n * std::log(noise) + logdet_g - solver.logdet()) - 0.5 * quad -
         0.5 * (stats.trace_kff - trace_q) / noise;
}

struct Prediction {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;
};

[[nodiscard]] inline Prediction predict(const GaussianState& state,
                                        const LowRankSolver& kuu_solver,
                                        const FourierBasis& basis, const MaternKernel& kernel,
                                        const Eigen::VectorXd& xstar) {
  const Eigen::Index p = xstar.size();
  Prediction out;
  out.mean.resize(p);
  out.variance.resize(p);
  Eigen::VectorXd phi(basis.feature_count());
  for (Eigen::Index j = 0; j < p; ++j) {
    feature_vector_into(basis, kernel, xstar[j], phi);
    const Eigen::VectorXd psi = kuu_solver.solve_vec(phi);
    out.mean[j] = psi.dot(state.mean);
    const double residual = std::max(kernel.variance - phi.dot(psi), 0.0);
    out.variance[j] = residual + (state.cov_factor.transpose() * psi).squaredNorm();
  }
  return out;
}

[[nodiscard]] inline Prediction predict(const GaussianState& state, const LowRankPlusDiag& kuu,
                                        const FourierBasis& basis, const MaternKernel& kernel,
                                        const Eigen::VectorXd& xstar) {
  return predict(state, LowRankSolver(kuu), basis, kernel, xstar);
}

// Negative collapsed ELBO and its gradient in (log sigma^2, log ell, log
// noise) space.  Instances own the data; sufficient stats are cached and only
// rebuilt when the lengthscale moves while some input sits beyond [a,b].
class RegressionObjective {
 public:
  RegressionObjective(MaternOrder order, FourierBasis basis, Eigen::VectorXd x,
                      Eigen::VectorXd y, bool permit_outside = false)
      : order_(order),
        basis_(std::move(basis)),
        x_(std::move(x)),
        y_(std::move(y)),
        permit_outside_(permit_outside) {
    if (x_.size() != y_.size())
      throw std::invalid_argument("RegressionObjective: x and y length mismatch");
  }

  struct Eval {
    double value;              // negative ELBO
    Eigen::Vector3d gradient;  // d/d(log sigma^2, log ell, log noise)
  };

  [[nodiscard]] Eval operator()(const Eigen::Vector3d& log_params) const {
    if (!log_params.allFinite())
      throw std::invalid_argument("RegressionObjective: parameters must be finite");
    const MaternKernel kernel(order_, std::exp(log_params[0]), std::exp(log_params[1]));
    const double noise = std::exp(log_params[2]);

    Eval eval;
    if (x_.size() == 0) {
      eval.value = 0.0;
      eval.gradient.setZero();
      return eval;
    }

    const SufficientStats& stats = stats_for(kernel);
    const double n = double(stats.n);
    const double trace_kff = n * kernel.variance;

    const LowRankPlusDiag kuu = build_kuu(basis_, kernel);
    const LowRankSolver solver(kuu);
    const Eigen::Index feat = kuu.size();
    const auto llt =
        detail::factor_information(kuu.to_dense(), stats, noise, "hyperparameter objective");

    const double logdet_g = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    const Eigen::VectorXd ginv_r = llt.solve(stats.kuf_y);
    const double r_ginv_r = stats.kuf_y.dot(ginv_r);
    const Eigen::MatrixXd kuuinv_p = solver.solve(stats.kuf_kfu);
    const double trace_q = kuuinv_p.trace();

    const double elbo = -0.5 * n * std::log(2.0 * std::numbers::pi) -
                        0.5 * (n * std::log(noise) + logdet_g - solver.logdet()) -
                        0.5 * (stats.yy / noise - r_ginv_r / (noise * noise)) -
                        0.5 * (trace_kff - trace_q) / noise;
    eval.value = -elbo;

    const Eigen::MatrixXd identity = Eigen::MatrixXd::Identity(feat, feat);
    const Eigen::MatrixXd g_inv = llt.solve(identity);
    const Eigen::MatrixXd kuu_inv = solver.solve(identity);
    const Eigen::VectorXd u = ginv_r / noise;
    // d ELBO / d Kuu with the stats held fixed
    const Eigen::MatrixXd kuuinv_p_kuuinv = solver.solve(kuuinv_p.transpose());
    const Eigen::MatrixXd gamma = -0.5 * g_inv + 0.5 * kuu_inv - 0.5 * (u * u.transpose()) -
                                  kuuinv_p_kuuinv / (2.0 * noise);

    // log sigma^2: every Kuu entry scales as 1/sigma^2, so dKuu = -Kuu; the
    // trace of Kff scales directly
    double d_sig = -contract_with_kuu(gamma, kuu) - 0.5 * trace_kff / noise;

    // log lengthscale: structured dKuu, plus feature motion for outside rows
    const KuuLogLengthscaleDeriv dk = kuu_dloglengthscale(basis_, kernel);
    double d_len = contract_dkuu_dloglen(gamma, kuu, dk);
    if (stats.outside_x.size() > 0) {
      const Eigen::MatrixXd lambda_p =
          (-0.5 * g_inv - 0.5 * (u * u.transpose()) + 0.5 * kuu_inv) / noise;
      Eigen::VectorXd phi(feat), dphi(feat);
      for (Eigen::Index i = 0; i < stats.outside_x.size(); ++i) {
        const double xi = stats.outside_x[i];
        feature_vector_into(basis_, kernel, xi, phi);
        feature_vector_dlambda_into(basis_, kernel, xi, dphi);
        dphi *= -kernel.lambda();  // d lambda / d log ell = -lambda
        d_len += 2.0 * dphi.dot(lambda_p * phi) + stats.outside_y[i] * u.dot(dphi) / noise;
      }
    }

    // log noise
    const double u_p_u = u.dot(stats.kuf_kfu * u);
    const double d_noise = 0.5 * g_inv.cwiseProduct(stats.kuf_kfu).sum() / noise - 0.5 * n +
                           0.5 * stats.yy / noise - r_ginv_r / (noise * noise) +
                           0.5 * u_p_u / noise + 0.5 * (trace_kff - trace_q) / noise;

    eval.gradient << -d_sig, -d_len, -d_noise;
    return eval;
  }

  [[nodiscard]] const SufficientStats& stats_for(const MaternKernel& kernel) const {
    if (!have_stats_) {
      stats_ = accumulate_stats(basis_, kernel, x_, y_, permit_outside_);
      stats_lengthscale_ = kernel.lengthscale;
      have_stats_ = true;
    } else if (stats_.outside_x.size() > 0 && stats_lengthscale_ != kernel.lengthscale) {
      stats_ = accumulate_stats(basis_, kernel, x_, y_, permit_outside_);
      stats_lengthscale_ = kernel.lengthscale;
    }
    return stats_;
  }

  [[nodiscard]] const FourierBasis& basis() const { return basis_; }
  [[nodiscard]] MaternOrder order() const { return order_; }

 private:
  static double contract_with_kuu(const Eigen::MatrixXd& g, const LowRankPlusDiag& kuu) {
    double out = g.diagonal().dot(kuu.alpha);
    if (kuu.B.cols() > 0) out += (kuu.B.transpose() * g * kuu.B).trace();
    return out;
  }

  MaternOrder order_;
  FourierBasis basis_;
  Eigen::VectorXd x_, y_;
  bool permit_outside_;
  mutable SufficientStats stats_;
  mutable double stats_lengthscale_ = 0.0;
  mutable bool have_stats_ = false;
};

struct ConjugateFit {
  Eigen::Vector3d log_params;  // log sigma^2, log ell, log noise
  double elbo = 0.0;
  GaussianState state;
  FourierBasis basis;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
};

[[nodiscard]] inline ConjugateFit fit_regression(MaternOrder order, const FourierBasis& basis,
                                                 const Eigen::VectorXd& x,
                                                 const Eigen::VectorXd& y,
                                                 Eigen::Vector3d init_log_params,
                                                 bool permit_outside = false,
                                                 const OptimizeSettings& settings = {}) {
  RegressionObjective objective(order, basis, x, y, permit_outside);
  auto wrapped = [&objective](const Eigen::VectorXd& p, Eigen::VectorXd& grad) {
    const auto eval = objective(Eigen::Vector3d(p));
    grad = eval.gradient;
    return eval.value;
  };
  const OptimizeResult opt = minimize_lbfgs(wrapped, std::move(init_log_params), settings);

  ConjugateFit fit{.log_params = opt.x,
                   .elbo = -opt.value,
                   .state = {},
                   .basis = basis,
                   .iterations = opt.iterations,
                   .evaluations = opt.evaluations,
                   .converged = opt.converged};

  const MaternKernel kernel(order, std::exp(opt.x[0]), std::exp(opt.x[1]));
  const GaussianLikelihood lik(std::exp(opt.x[2]));
  const SufficientStats stats = accumulate_stats(basis, kernel, x, y, permit_outside);
  fit.state = optimal_posterior(stats, build_kuu(basis, kernel), lik);
  return fit;
}

}  // namespace vffgp
