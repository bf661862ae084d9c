#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vffgp/errors.hpp"
#include "vffgp/fourier_basis.hpp"
#include "vffgp/gp_regression.hpp"
#include "vffgp/kron.hpp"
#include "vffgp/kuu.hpp"
#include "vffgp/lbfgs.hpp"
#include "vffgp/lowrank.hpp"
#include "vffgp/matern.hpp"
#include "vffgp/parallel.hpp"

namespace vffgp {

// One input dimension of a multi-input model: its kernel and its interval.
struct ModelDimension {
  MaternKernel kernel;
  FourierBasis basis;
};

namespace detail {

inline void check_dims(const std::vector<ModelDimension>& dims, const char* who) {
  if (dims.empty()) throw std::invalid_argument(std::string(who) + ": needs at least one dimension");
}

inline void check_row(const std::vector<ModelDimension>& dims, const Eigen::VectorXd& x,
                      const char* who) {
  if (x.size() != Eigen::Index(dims.size()))
    throw std::invalid_argument(std::string(who) + ": input has " + std::to_string(x.size()) +
                                " coordinates, model has " + std::to_string(dims.size()) +
                                " dimensions");
}

}  // namespace detail

// Sum of independent one-dimensional GPs, one per input coordinate.  Features
// from different dimensions are uncorrelated, so Kuu is block-diagonal and the
// feature vector is the concatenation of the per-dimension ones.
struct AdditiveModel {
  std::vector<ModelDimension> dims;

  explicit AdditiveModel(std::vector<ModelDimension> dims_) : dims(std::move(dims_)) {
    detail::check_dims(dims, "AdditiveModel");
  }

  [[nodiscard]] Eigen::Index dimension_count() const { return Eigen::Index(dims.size()); }

  [[nodiscard]] Eigen::Index feature_count() const {
    Eigen::Index total = 0;
    for (const auto& d : dims) total += d.basis.feature_count();
    return total;
  }

  [[nodiscard]] Eigen::Index feature_offset(std::size_t d) const {
    Eigen::Index off = 0;
    for (std::size_t e = 0; e < d; ++e) off += dims[e].basis.feature_count();
    return off;
  }

  // k(x, x) of the sum kernel; position-free because every term is stationary.
  [[nodiscard]] double marginal_variance() const {
    double total = 0.0;
    for (const auto& d : dims) total += d.kernel.variance;
    return total;
  }
};

inline void feature_vector_into(const AdditiveModel& model, const Eigen::VectorXd& x,
                                Eigen::Ref<Eigen::VectorXd> out) {
  detail::check_row(model.dims, x, "feature_vector");
  Eigen::Index off = 0;
  for (std::size_t d = 0; d < model.dims.size(); ++d) {
    const auto& dim = model.dims[d];
    const Eigen::Index k = dim.basis.feature_count();
    feature_vector_into(dim.basis, dim.kernel, x[Eigen::Index(d)], out.segment(off, k));
    off += k;
  }
}

[[nodiscard]] inline Eigen::VectorXd feature_vector(const AdditiveModel& model,
                                                    const Eigen::VectorXd& x) {
  Eigen::VectorXd out(model.feature_count());
  feature_vector_into(model, x, out);
  return out;
}

// Block-diagonal Kuu assembled in the same diag + low-rank form the 1D blocks
// use; the combined correction rank is the sum over dimensions, not capped at
// the per-block 3.
[[nodiscard]] inline LowRankPlusDiag additive_kuu(const AdditiveModel& model) {
  const Eigen::Index K = model.feature_count();
  Eigen::Index rank = 0;
  std::vector<LowRankPlusDiag> blocks;
  blocks.reserve(model.dims.size());
  for (const auto& d : model.dims) {
    blocks.push_back(build_kuu(d.basis, d.kernel));
    rank += blocks.back().rank();
  }
  Eigen::VectorXd alpha(K);
  Eigen::MatrixXd B = Eigen::MatrixXd::Zero(K, rank);
  Eigen::Index off = 0, roff = 0;
  for (const auto& blk : blocks) {
    alpha.segment(off, blk.size()) = blk.alpha;
    B.block(off, roff, blk.size(), blk.rank()) = blk.B;
    off += blk.size();
    roff += blk.rank();
  }
  return LowRankPlusDiag(std::move(alpha), std::move(B));
}

// Separable product kernel: the feature tensor is the Kronecker product of the
// per-dimension features and Kuu is the matching Kronecker product.  Index
// ordering is dimension-0 slowest, the same convention kron_assemble uses.
struct ProductModel {
  std::vector<ModelDimension> dims;

  explicit ProductModel(std::vector<ModelDimension> dims_) : dims(std::move(dims_)) {
    detail::check_dims(dims, "ProductModel");
    if (dims.size() > 6)
      throw std::invalid_argument(
          "ProductModel: feature count grows as the product over dimensions; more than 6 "
          "dimensions is not supported");
  }

  [[nodiscard]] Eigen::Index dimension_count() const { return Eigen::Index(dims.size()); }

  [[nodiscard]] Eigen::Index feature_count() const {
    Eigen::Index total = 1;
    for (const auto& d : dims) total *= d.basis.feature_count();
    return total;
  }

  [[nodiscard]] double marginal_variance() const {
    double total = 1.0;
    for (const auto& d : dims) total *= d.kernel.variance;
    return total;
  }
};

inline void feature_vector_into(const ProductModel& model, const Eigen::VectorXd& x,
                                Eigen::Ref<Eigen::VectorXd> out) {
  detail::check_row(model.dims, x, "feature_vector");
  Eigen::Index filled = 1;
  out[0] = 1.0;
  Eigen::VectorXd block;
  for (std::size_t d = 0; d < model.dims.size(); ++d) {
    const auto& dim = model.dims[d];
    const Eigen::Index k = dim.basis.feature_count();
    block.resize(k);
    feature_vector_into(dim.basis, dim.kernel, x[Eigen::Index(d)], block);
    // expand in place from the back so earlier dimensions stay slowest-varying
    for (Eigen::Index i = filled - 1; i >= 0; --i)
      out.segment(i * k, k) = out[i] * block;
    filled *= k;
  }
}

[[nodiscard]] inline Eigen::VectorXd feature_vector(const ProductModel& model,
                                                    const Eigen::VectorXd& x) {
  Eigen::VectorXd out(model.feature_count());
  feature_vector_into(model, x, out);
  return out;
}

[[nodiscard]] inline KroneckerMatrix product_kuu(const ProductModel& model) {
  std::vector<LowRankPlusDiag> blocks;
  blocks.reserve(model.dims.size());
  for (const auto& d : model.dims) blocks.push_back(build_kuu(d.basis, d.kernel));
  return kron_assemble(std::move(blocks));
}

[[nodiscard]] inline Eigen::MatrixXd product_kuu_dense(const ProductModel& model) {
  std::vector<Eigen::MatrixXd> factors;
  factors.reserve(model.dims.size());
  for (const auto& d : model.dims) factors.push_back(build_kuu(d.basis, d.kernel).to_dense());
  return dense_kron(factors);
}

namespace detail {

template <class Model>
inline void check_design(const Model& model, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                         const char* who) {
  if (x.rows() != y.size()) throw std::invalid_argument(std::string(who) + ": row count mismatch");
  if (x.cols() != model.dimension_count())
    throw std::invalid_argument(std::string(who) + ": design has " + std::to_string(x.cols()) +
                                " columns, model has " + std::to_string(model.dimension_count()) +
                                " dimensions");
  if (!x.allFinite() || !y.allFinite())
    throw data_error(std::string(who) + ": non-finite input values");
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index d = 0; d < x.cols(); ++d)
      if (model.dims[std::size_t(d)].basis.edge_distance(x(i, d)) > 0.0)
        throw data_error(std::string(who) + ": input " + std::to_string(x(i, d)) + " in row " +
                         std::to_string(i) + " lies outside [" +
                         std::to_string(model.dims[std::size_t(d)].basis.a) + ", " +
                         std::to_string(model.dims[std::size_t(d)].basis.b) + "] of dimension " +
                         std::to_string(d));
}

// Shared chunked accumulation once per-row feature fill is fixed.
template <class FillPhi>
inline SufficientStats accumulate_rows(Eigen::Index feat, double trace_kff,
                                       const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                       FillPhi&& fill) {
  const Eigen::Index n = x.rows();
  SufficientStats stats;
  stats.kuf_kfu = Eigen::MatrixXd::Zero(feat, feat);
  stats.kuf_y = Eigen::VectorXd::Zero(feat);
  stats.n = n;
  stats.trace_kff = trace_kff;
  stats.outside_x.resize(0);
  stats.outside_y.resize(0);
  if (n == 0) return stats;

  const std::size_t chunks = chunk_count(std::size_t(n));
  std::vector<Eigen::MatrixXd> part_pp(chunks);
  std::vector<Eigen::VectorXd> part_py(chunks);
  std::vector<double> part_yy(chunks, 0.0);
  parallel_chunks(std::size_t(n), [&](std::size_t c, std::size_t lo, std::size_t hi) {
    const Eigen::Index len = Eigen::Index(hi - lo);
    Eigen::MatrixXd phi(feat, len);
    for (Eigen::Index j = 0; j < len; ++j) fill(Eigen::Index(lo) + j, phi.col(j));
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

}  // namespace detail

// Rows of x are D-dimensional inputs.  Inputs must lie inside every
// dimension's interval; the hyper-rectangle is chosen from the data up front,
// so there is no outside-row path here.
[[nodiscard]] inline SufficientStats accumulate_stats(const AdditiveModel& model,
                                                      const Eigen::MatrixXd& x,
                                                      const Eigen::VectorXd& y) {
  detail::check_design(model, x, y, "accumulate_stats");
  return detail::accumulate_rows(
      model.feature_count(), double(x.rows()) * model.marginal_variance(), x, y,
      [&](Eigen::Index i, Eigen::Ref<Eigen::VectorXd> col) {
        feature_vector_into(model, x.row(i).transpose(), col);
      });
}

[[nodiscard]] inline SufficientStats accumulate_stats(const ProductModel& model,
                                                      const Eigen::MatrixXd& x,
                                                      const Eigen::VectorXd& y) {
  detail::check_design(model, x, y, "accumulate_stats");
  return detail::accumulate_rows(
      model.feature_count(), double(x.rows()) * model.marginal_variance(), x, y,
      [&](Eigen::Index i, Eigen::Ref<Eigen::VectorXd> col) {
        feature_vector_into(model, x.row(i).transpose(), col);
      });
}

[[nodiscard]] inline Prediction predict(const GaussianState& state, const AdditiveModel& model,
                                        const Eigen::MatrixXd& xstar) {
  if (xstar.cols() != model.dimension_count() && xstar.rows() != 0)
    throw std::invalid_argument("predict: design column count mismatch");
  const LowRankSolver solver(additive_kuu(model));
  const Eigen::Index p = xstar.rows();
  Prediction out;
  out.mean.resize(p);
  out.variance.resize(p);
  Eigen::VectorXd phi(model.feature_count());
  for (Eigen::Index j = 0; j < p; ++j) {
    feature_vector_into(model, xstar.row(j).transpose(), phi);
    const Eigen::VectorXd psi = solver.solve_vec(phi);
    out.mean[j] = psi.dot(state.mean);
    const double residual = std::max(model.marginal_variance() - phi.dot(psi), 0.0);
    out.variance[j] = residual + (state.cov_factor.transpose() * psi).squaredNorm();
  }
  return out;
}

// Posterior mean of the dimension-d component alone, evaluated at scalar
// inputs.  Only the block of the posterior mean belonging to that dimension
// contributes; useful for reading off whether a dimension carries signal.
[[nodiscard]] inline Eigen::VectorXd component_mean(const GaussianState& state,
                                                    const AdditiveModel& model, std::size_t d,
                                                    const Eigen::VectorXd& xstar) {
  if (d >= model.dims.size()) throw std::invalid_argument("component_mean: dimension out of range");
  const auto& dim = model.dims[d];
  const LowRankSolver solver(build_kuu(dim.basis, dim.kernel));
  const Eigen::Index off = model.feature_offset(d);
  const Eigen::VectorXd m_d = state.mean.segment(off, dim.basis.feature_count());
  Eigen::VectorXd out(xstar.size());
  Eigen::VectorXd phi(dim.basis.feature_count());
  for (Eigen::Index j = 0; j < xstar.size(); ++j) {
    feature_vector_into(dim.basis, dim.kernel, xstar[j], phi);
    out[j] = solver.solve_vec(phi).dot(m_d);
  }
  return out;
}

// Negative collapsed ELBO over per-dimension hyperparameters for the additive
// model.  Parameter layout: log sigma^2 per dimension, then log ell per
// dimension, then log noise (2D + 1 entries).  All inputs sit inside the
// hyper-rectangle, so the data products never depend on the hyperparameters
// and are accumulated exactly once.
class AdditiveObjective {
 public:
  AdditiveObjective(AdditiveModel model, const Eigen::MatrixXd& x, const Eigen::VectorXd& y)
      : model_(std::move(model)), n_(x.rows()) {
    stats_ = accumulate_stats(model_, x, y);
  }

  [[nodiscard]] Eigen::Index parameter_count() const { return 2 * model_.dimension_count() + 1; }

  struct Eval {
    double value;
    Eigen::VectorXd gradient;
  };

  [[nodiscard]] Eval operator()(const Eigen::VectorXd& log_params) const {
    const Eigen::Index D = model_.dimension_count();
    if (log_params.size() != 2 * D + 1)
      throw std::invalid_argument("AdditiveObjective: wrong parameter count");
    if (!log_params.allFinite())
      throw std::invalid_argument("AdditiveObjective: parameters must be finite");

    AdditiveModel model = model_;
    for (Eigen::Index d = 0; d < D; ++d) {
      model.dims[std::size_t(d)].kernel.variance = std::exp(log_params[d]);
      model.dims[std::size_t(d)].kernel.lengthscale = std::exp(log_params[D + d]);
    }
    const double noise = std::exp(log_params[2 * D]);

    Eval eval;
    eval.gradient = Eigen::VectorXd::Zero(2 * D + 1);
    if (n_ == 0) {
      eval.value = 0.0;
      return eval;
    }

    const double n = double(n_);
    const double trace_kff = n * model.marginal_variance();
    const LowRankPlusDiag kuu = additive_kuu(model);
    const LowRankSolver solver(kuu);
    const Eigen::Index feat = kuu.size();
    const auto llt = detail::factor_information(kuu.to_dense(), stats_, noise, "additive objective");

    const double logdet_g = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    const Eigen::VectorXd ginv_r = llt.solve(stats_.kuf_y);
    const double r_ginv_r = stats_.kuf_y.dot(ginv_r);
    const Eigen::MatrixXd kuuinv_p = solver.solve(stats_.kuf_kfu);
    const double trace_q = kuuinv_p.trace();

    const double elbo = -0.5 * n * std::log(2.0 * std::numbers::pi) -
                        0.5 * (n * std::log(noise) + logdet_g - solver.logdet()) -
                        0.5 * (stats_.yy / noise - r_ginv_r / (noise * noise)) -
                        0.5 * (trace_kff - trace_q) / noise;
    eval.value = -elbo;

    const Eigen::MatrixXd identity = Eigen::MatrixXd::Identity(feat, feat);
    const Eigen::MatrixXd g_inv = llt.solve(identity);
    const Eigen::MatrixXd kuu_inv = solver.solve(identity);
    const Eigen::VectorXd u = ginv_r / noise;
    const Eigen::MatrixXd kuuinv_p_kuuinv = solver.solve(kuuinv_p.transpose());
    const Eigen::MatrixXd gamma = -0.5 * g_inv + 0.5 * kuu_inv - 0.5 * (u * u.transpose()) -
                                  kuuinv_p_kuuinv / (2.0 * noise);

    for (Eigen::Index d = 0; d < D; ++d) {
      const auto& dim = model.dims[std::size_t(d)];
      const Eigen::Index off = model.feature_offset(std::size_t(d));
      const Eigen::Index k = dim.basis.feature_count();
      const LowRankPlusDiag blk = build_kuu(dim.basis, dim.kernel);
      const Eigen::MatrixXd gblk = gamma.block(off, off, k, k);

      double contract = gblk.diagonal().dot(blk.alpha);
      if (blk.rank() > 0) contract += (blk.B.transpose() * gblk * blk.B).trace();
      const double d_sig = -contract - 0.5 * n * dim.kernel.variance / noise;

      const KuuLogLengthscaleDeriv dk = kuu_dloglengthscale(dim.basis, dim.kernel);
      const double d_len = contract_dkuu_dloglen(gblk, blk, dk);

      eval.gradient[d] = -d_sig;
      eval.gradient[D + d] = -d_len;
    }

    const double u_p_u = u.dot(stats_.kuf_kfu * u);
    const double d_noise = 0.5 * g_inv.cwiseProduct(stats_.kuf_kfu).sum() / noise - 0.5 * n +
                           0.5 * stats_.yy / noise - r_ginv_r / (noise * noise) +
                           0.5 * u_p_u / noise + 0.5 * (trace_kff - trace_q) / noise;
    eval.gradient[2 * D] = -d_noise;
    return eval;
  }

  [[nodiscard]] const SufficientStats& stats() const { return stats_; }
  [[nodiscard]] const AdditiveModel& model() const { return model_; }

 private:
  AdditiveModel model_;
  Eigen::Index n_;
  SufficientStats stats_;
};

struct AdditiveFit {
  Eigen::VectorXd log_params;  // per-dim log sigma^2, per-dim log ell, log noise
  double elbo = 0.0;
  GaussianState state;
  AdditiveModel model;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
};

[[nodiscard]] inline AdditiveFit fit_additive(const AdditiveModel& model, const Eigen::MatrixXd& x,
                                              const Eigen::VectorXd& y,
                                              Eigen::VectorXd init_log_params,
                                              const OptimizeSettings& settings = {}) {
  AdditiveObjective objective(model, x, y);
  if (init_log_params.size() != objective.parameter_count())
    throw std::invalid_argument("fit_additive: wrong parameter count");
  auto wrapped = [&objective](const Eigen::VectorXd& p, Eigen::VectorXd& grad) {
    const auto eval = objective(p);
    grad = eval.gradient;
    return eval.value;
  };
  const OptimizeResult opt = minimize_lbfgs(wrapped, std::move(init_log_params), settings);

  AdditiveFit fit{.log_params = opt.x,
                  .elbo = -opt.value,
                  .state = {},
                  .model = model,
                  .iterations = opt.iterations,
                  .evaluations = opt.evaluations,
                  .converged = opt.converged};
  const Eigen::Index D = model.dimension_count();
  for (Eigen::Index d = 0; d < D; ++d) {
    fit.model.dims[std::size_t(d)].kernel.variance = std::exp(opt.x[d]);
    fit.model.dims[std::size_t(d)].kernel.lengthscale = std::exp(opt.x[D + d]);
  }
  const GaussianLikelihood lik(std::exp(opt.x[2 * D]));
  // the stats never depend on the hyperparameters here, reuse the ones the
  // objective accumulated (trace_kff tracks sigma^2, recompute it)
  SufficientStats stats = objective.stats();
  stats.trace_kff = double(stats.n) * fit.model.marginal_variance();
  fit.state = optimal_posterior(stats, additive_kuu(fit.model), lik);
  return fit;
}

}  // namespace vffgp
