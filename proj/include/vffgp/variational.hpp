#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vffgp/errors.hpp"
#include "vffgp/fourier_basis.hpp"
#include "vffgp/gauss_hermite.hpp"
#include "vffgp/kron.hpp"
#include "vffgp/kuu.hpp"
#include "vffgp/lbfgs.hpp"
#include "vffgp/likelihoods.hpp"
#include "vffgp/lowrank.hpp"
#include "vffgp/matern.hpp"
#include "vffgp/multidim.hpp"
#include "vffgp/parallel.hpp"
#include "vffgp/rng.hpp"

namespace vffgp {

// How q(u)'s covariance is represented.  free_form keeps one dense lower
// factor over all features; kron keeps one factor per dimension with
// S = (L_1 L_1^T) x (L_2 L_2^T) x ...; kron_sum adds a second Kronecker term
// built from the J factors, which restores expressiveness the pure product
// lacks while staying cheap to parameterize.
enum class CovarianceKind { free_form, kron, kron_sum };

struct VariationalState {
  CovarianceKind kind = CovarianceKind::free_form;
  Eigen::VectorXd m;
  std::vector<Eigen::MatrixXd> L;  // free_form: one K x K factor; else one per dimension
  std::vector<Eigen::MatrixXd> J;  // kron_sum only, same shapes as L
};

namespace detail {

[[nodiscard]] inline double lower_triangular_logdet(const Eigen::MatrixXd& L) {
  return 2.0 * L.diagonal().array().log().sum();
}

[[nodiscard]] inline std::vector<Eigen::Index> factor_sizes(const VariationalState& state) {
  std::vector<Eigen::Index> dims;
  dims.reserve(state.L.size());
  for (const auto& f : state.L) dims.push_back(f.rows());
  return dims;
}

// digits[k] holds the per-dimension indices of flat index k, dimension 0
// slowest-varying
[[nodiscard]] inline std::vector<std::vector<Eigen::Index>> flat_digits(
    const std::vector<Eigen::Index>& dims) {
  Eigen::Index total = 1;
  for (auto d : dims) total *= d;
  std::vector<std::vector<Eigen::Index>> digits(std::size_t(total),
                                                std::vector<Eigen::Index>(dims.size()));
  for (Eigen::Index k = 0; k < total; ++k) {
    Eigen::Index rem = k;
    for (std::size_t d = dims.size(); d-- > 0;) {
      digits[std::size_t(k)][d] = rem % dims[d];
      rem /= dims[d];
    }
  }
  return digits;
}

// <G, X_1 x ... x dX_d x ... x X_D> as a matrix in the dimension-d slot:
// out(i, j) = sum over entries of G whose dimension-d digits are (i, j),
// weighted by the product of the other factors' entries.
[[nodiscard]] inline Eigen::MatrixXd partial_trace(
    const Eigen::MatrixXd& G, const std::vector<Eigen::MatrixXd>& factors, std::size_t d,
    const std::vector<std::vector<Eigen::Index>>& digits) {
  const Eigen::Index K = G.rows();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(factors[d].rows(), factors[d].rows());
  for (Eigen::Index p = 0; p < K; ++p) {
    const auto& pd = digits[std::size_t(p)];
    for (Eigen::Index q = 0; q < K; ++q) {
      const auto& qd = digits[std::size_t(q)];
      double weight = 1.0;
      for (std::size_t e = 0; e < factors.size(); ++e)
        if (e != d) weight *= factors[e](pd[e], qd[e]);
      out(pd[d], qd[d]) += G(p, q) * weight;
    }
  }
  return out;
}

}  // namespace detail

// log det of S for each covariance kind.  The Kronecker-sum case goes through
// S = (xL)(I + xC)(xL)^T with C_d = (L_d^{-1} J_d)(L_d^{-1} J_d)^T, so the
// correction determinant is a sum of log(1 + prod_d mu_{d, i_d}) over the
// eigenvalue grid: D small eigendecompositions instead of one K^3 factorization.
[[nodiscard]] inline double variational_logdet(const VariationalState& state) {
  double base = 0.0;
  const auto dims = detail::factor_sizes(state);
  Eigen::Index K = 1;
  for (auto d : dims) K *= d;
  for (std::size_t d = 0; d < state.L.size(); ++d)
    base += double(K / dims[d]) * detail::lower_triangular_logdet(state.L[d]);
  if (state.kind != CovarianceKind::kron_sum) return base;

  std::vector<Eigen::VectorXd> mu(state.L.size());
  for (std::size_t d = 0; d < state.L.size(); ++d) {
    const Eigen::MatrixXd W =
        state.L[d].triangularView<Eigen::Lower>().solve(state.J[d]);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(W * W.transpose());
    if (es.info() != Eigen::Success)
      throw numerical_error("variational_logdet: eigendecomposition failed");
    mu[d] = es.eigenvalues().cwiseMax(0.0);
  }
  const auto digits = detail::flat_digits(dims);
  double corr = 0.0;
  for (Eigen::Index k = 0; k < K; ++k) {
    double prod = 1.0;
    for (std::size_t d = 0; d < mu.size(); ++d) prod *= mu[d][digits[std::size_t(k)][d]];
    corr += std::log1p(prod);
  }
  return base + corr;
}

[[nodiscard]] inline Eigen::MatrixXd variational_covariance(const VariationalState& state) {
  std::vector<Eigen::MatrixXd> a(state.L.size());
  for (std::size_t d = 0; d < state.L.size(); ++d) a[d] = state.L[d] * state.L[d].transpose();
  Eigen::MatrixXd S = dense_kron(a);
  if (state.kind == CovarianceKind::kron_sum) {
    std::vector<Eigen::MatrixXd> b(state.J.size());
    for (std::size_t d = 0; d < state.J.size(); ++d) b[d] = state.J[d] * state.J[d].transpose();
    S += dense_kron(b);
  }
  return S;
}

namespace detail {

// KL(q || p) for q = N(m, S), p = N(0, Kuu), with the Kuu algebra supplied by
// the caller.
template <class SolveMat, class SolveVec>
[[nodiscard]] double kl_core(const VariationalState& state, SolveMat&& solve_mat,
                             SolveVec&& solve_vec, double kuu_logdet, Eigen::Index K) {
  const Eigen::MatrixXd S = variational_covariance(state);
  if (S.rows() != K || state.m.size() != K)
    throw std::invalid_argument("kl_q_p: state dimension mismatch");
  const double trace = solve_mat(S).trace();
  const double quad = state.m.dot(solve_vec(state.m));
  const double logdet_s = variational_logdet(state);
  return 0.5 * (trace + quad - double(K) + kuu_logdet - logdet_s);
}

}  // namespace detail

[[nodiscard]] inline double kl_q_p(const VariationalState& state, const LowRankSolver& kuu) {
  return detail::kl_core(
      state, [&](const Eigen::MatrixXd& s) { return kuu.solve(s); },
      [&](const Eigen::VectorXd& v) { return kuu.solve_vec(v); }, kuu.logdet(), kuu.matrix().size());
}

[[nodiscard]] inline double kl_q_p(const VariationalState& state, const LowRankPlusDiag& kuu) {
  return kl_q_p(state, LowRankSolver(kuu));
}

[[nodiscard]] inline double kl_q_p(const VariationalState& state, const KronSolver& kuu) {
  return detail::kl_core(
      state,
      [&](const Eigen::MatrixXd& s) {
        Eigen::MatrixXd out(s.rows(), s.cols());
        for (Eigen::Index j = 0; j < s.cols(); ++j) out.col(j) = kuu.solve(s.col(j));
        return out;
      },
      [&](const Eigen::VectorXd& v) { return kuu.solve(v); }, kuu.logdet(), kuu.size());
}

[[nodiscard]] inline double kl_q_p(const VariationalState& state, const KroneckerMatrix& kuu) {
  return kl_q_p(state, KronSolver(kuu));
}

struct Marginals {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;
};

struct VariationalGradients {
  double elbo = 0.0;
  bool finite = true;  // false when the covariance could not be factorized
  Eigen::VectorXd grad_m;
  std::vector<Eigen::MatrixXd> grad_l;  // raw matrix gradients, not yet log-diag chained
  std::vector<Eigen::MatrixXd> grad_j;
  Eigen::VectorXd grad_hyper;
};

// Non-conjugate inference problem: data, likelihood, and the feature algebra
// at the current hyperparameters.  Everything that depends only on the
// hyperparameters (features, Kuu factorizations, projections) is cached so
// optimizing the variational parameters costs dense products in K, not
// feature evaluations.
class VariationalProblem {
 public:
  VariationalProblem(const FourierBasis& basis, const MaternKernel& kernel, Likelihood lik,
                     const Eigen::VectorXd& x, const Eigen::VectorXd& y, int quad_nodes = 20)
      : structure_(Structure::single), lik_(std::move(lik)), rule_(gauss_hermite(quad_nodes)) {
    dims_.push_back(ModelDimension{kernel, basis});
    x_.resize(x.size(), 1);
    x_.col(0) = x;
    y_ = y;
    validate_data();
    rebuild();
  }

  VariationalProblem(const ProductModel& model, Likelihood lik, const Eigen::MatrixXd& x,
                     const Eigen::VectorXd& y, int quad_nodes = 20)
      : structure_(Structure::product),
        dims_(model.dims),
        lik_(std::move(lik)),
        x_(x),
        y_(y),
        rule_(gauss_hermite(quad_nodes)) {
    validate_data();
    rebuild();
  }

  VariationalProblem(const AdditiveModel& model, Likelihood lik, const Eigen::MatrixXd& x,
                     const Eigen::VectorXd& y, int quad_nodes = 20)
      : structure_(Structure::additive),
        dims_(model.dims),
        lik_(std::move(lik)),
        x_(x),
        y_(y),
        rule_(gauss_hermite(quad_nodes)) {
    validate_data();
    rebuild();
  }

  [[nodiscard]] Eigen::Index data_count() const { return y_.size(); }
  [[nodiscard]] Eigen::Index feature_count() const { return K_; }
  [[nodiscard]] const Likelihood& likelihood() const { return lik_; }
  [[nodiscard]] const Eigen::MatrixXd& kuu_dense() const { return kuu_dense_; }
  [[nodiscard]] double kuu_logdet() const { return kuu_logdet_; }
  [[nodiscard]] const GaussHermiteRule& quadrature() const { return rule_; }

  // Hyperparameters: per-dimension log variance, per-dimension log
  // lengthscale, then the likelihood parameter when it has one (log noise for
  // Gaussian, the rate offset for Poisson counts).
  [[nodiscard]] std::vector<std::string> hyperparameter_names() const {
    std::vector<std::string> names;
    for (std::size_t d = 0; d < dims_.size(); ++d)
      names.push_back("log_variance_" + std::to_string(d));
    for (std::size_t d = 0; d < dims_.size(); ++d)
      names.push_back("log_lengthscale_" + std::to_string(d));
    if (lik_.kind() == Likelihood::Kind::gaussian) names.push_back("log_noise");
    if (lik_.kind() == Likelihood::Kind::poisson) names.push_back("offset");
    return names;
  }

  [[nodiscard]] Eigen::Index hyperparameter_count() const {
    return 2 * Eigen::Index(dims_.size()) +
           (lik_.kind() == Likelihood::Kind::bernoulli ? 0 : 1);
  }

  [[nodiscard]] Eigen::VectorXd hyperparameters() const {
    Eigen::VectorXd h(hyperparameter_count());
    const Eigen::Index D = Eigen::Index(dims_.size());
    for (Eigen::Index d = 0; d < D; ++d) {
      h[d] = std::log(dims_[std::size_t(d)].kernel.variance);
      h[D + d] = std::log(dims_[std::size_t(d)].kernel.lengthscale);
    }
    if (lik_.kind() == Likelihood::Kind::gaussian) h[2 * D] = std::log(lik_.noise_variance());
    if (lik_.kind() == Likelihood::Kind::poisson) h[2 * D] = lik_.offset();
    return h;
  }

  void set_hyperparameters(const Eigen::VectorXd& h) {
    if (h.size() != hyperparameter_count())
      throw std::invalid_argument("set_hyperparameters: wrong parameter count");
    if (!h.allFinite())
      throw std::invalid_argument("set_hyperparameters: parameters must be finite");
    const auto saved_dims = dims_;
    const auto saved_lik = lik_;
    const Eigen::Index D = Eigen::Index(dims_.size());
    try {
      for (Eigen::Index d = 0; d < D; ++d) {
        dims_[std::size_t(d)].kernel.variance = std::exp(h[d]);
        dims_[std::size_t(d)].kernel.lengthscale = std::exp(h[D + d]);
      }
      if (lik_.kind() == Likelihood::Kind::gaussian) lik_.set_noise_variance(std::exp(h[2 * D]));
      if (lik_.kind() == Likelihood::Kind::poisson) lik_.set_offset(h[2 * D]);
      rebuild();
    } catch (...) {
      dims_ = saved_dims;
      lik_ = saved_lik;
      rebuild();
      throw;
    }
  }

  [[nodiscard]] VariationalState initial_state(CovarianceKind kind) const {
    VariationalState state;
    state.kind = kind;
    state.m = Eigen::VectorXd::Zero(K_);
    if (kind == CovarianceKind::free_form) {
      state.L.push_back(Eigen::MatrixXd(kuu_llt_.matrixL()));
      return state;
    }
    if (structure_ == Structure::additive && dims_.size() > 1)
      throw std::invalid_argument(
          "initial_state: Kronecker covariances require a product feature tensor");
    for (const auto& blk : block_dense_) {
      Eigen::LLT<Eigen::MatrixXd> llt(blk);
      if (llt.info() != Eigen::Success)
        throw numerical_error("initial_state: per-dimension Kuu factorization failed");
      state.L.push_back(Eigen::MatrixXd(llt.matrixL()));
      if (kind == CovarianceKind::kron_sum)
        state.J.push_back(1e-3 * Eigen::MatrixXd::Identity(blk.rows(), blk.cols()));
    }
    return state;
  }

  [[nodiscard]] Marginals marginal_q_f(const VariationalState& state) const {
    check_state(state);
    const Eigen::MatrixXd S = variational_covariance(state);
    Marginals out;
    out.mean = psi_.transpose() * state.m;
    const Eigen::MatrixXd t = S * psi_;
    out.variance.resize(N_);
    for (Eigen::Index n = 0; n < N_; ++n)
      out.variance[n] = std::max(knn_ - phi_kuuinv_phi_[n] + psi_.col(n).dot(t.col(n)), 0.0);
    return out;
  }

  [[nodiscard]] double kl(const VariationalState& state) const {
    check_state(state);
    const Eigen::MatrixXd S = variational_covariance(state);
    const double trace = kuu_inv_.cwiseProduct(S).sum();
    const Eigen::VectorXd w = kuu_llt_.solve(state.m);
    return 0.5 * (trace + state.m.dot(w) - double(K_) + kuu_logdet_ - variational_logdet(state));
  }

  [[nodiscard]] double elbo(const VariationalState& state) const {
    return elbo_and_gradients(state).elbo;
  }

  [[nodiscard]] VariationalGradients elbo_and_gradients(const VariationalState& state) const {
    std::vector<Eigen::Index> all(static_cast<std::size_t>(N_));
    for (Eigen::Index n = 0; n < N_; ++n) all[std::size_t(n)] = n;
    return elbo_and_gradients(state, all, 1.0);
  }

  // Minibatch form: the data-expectation sum runs over the given rows only and
  // is multiplied by scale (N over batch size for an unbiased estimate); the
  // KL term is always included in full.
  [[nodiscard]] VariationalGradients elbo_and_gradients(const VariationalState& state,
                                                        const std::vector<Eigen::Index>& rows,
                                                        double scale) const {
    check_state(state);
    VariationalGradients out;
    const Eigen::Index B = Eigen::Index(rows.size());
    for (auto r : rows)
      if (r < 0 || r >= N_) throw std::invalid_argument("elbo_and_gradients: row out of range");

    const Eigen::MatrixXd S = variational_covariance(state);
    if (!S.allFinite()) return non_finite(state);
    const double logdet_s = variational_logdet(state);
    if (!std::isfinite(logdet_s)) return non_finite(state);
    const std::optional<Eigen::MatrixXd> s_inv = covariance_inverse(state, S);
    if (!s_inv) return non_finite(state);

    // batch views
    Eigen::MatrixXd psi_b(K_, B);
    Eigen::VectorXd y_b(B), c_b(B);
    for (Eigen::Index i = 0; i < B; ++i) {
      psi_b.col(i) = psi_.col(rows[std::size_t(i)]);
      y_b[i] = y_[rows[std::size_t(i)]];
      c_b[i] = phi_kuuinv_phi_[rows[std::size_t(i)]];
    }

    const Eigen::VectorXd mu = psi_b.transpose() * state.m;
    const Eigen::MatrixXd t_mat = S * psi_b;
    Eigen::VectorXd v(B);
    for (Eigen::Index i = 0; i < B; ++i)
      v[i] = std::max(knn_ - c_b[i] + psi_b.col(i).dot(t_mat.col(i)), 0.0);

    // per-datum expectations, chunked with an ordered fold so worker count
    // never changes the sum
    Eigen::VectorXd a(B), bb(B);
    const std::size_t chunks = std::size_t(chunk_count(B));
    std::vector<double> part_value(chunks, 0.0);
    std::vector<double> part_lik(chunks, 0.0);
    const bool gaussian = lik_.kind() == Likelihood::Kind::gaussian;
    const bool poisson = lik_.kind() == Likelihood::Kind::poisson;
    parallel_chunks(B, [&](std::size_t c, std::int64_t lo, std::int64_t hi) {
      double value = 0.0, lik_sum = 0.0;
      for (Eigen::Index i = lo; i < hi; ++i) {
        const Expectation e = lik_.expected_log_density(y_b[i], mu[i], v[i], rule_);
        value += e.value;
        a[i] = e.dmean;
        bb[i] = e.dvar;
        if (gaussian) {
          const double r = y_b[i] - mu[i];
          lik_sum += -0.5 + 0.5 * (r * r + v[i]) / lik_.noise_variance();
        } else if (poisson) {
          lik_sum += e.dmean;  // offset shifts the latent mean one-for-one
        }
      }
      part_value[c] = value;
      part_lik[c] = lik_sum;
    });
    double data_value = 0.0, lik_param_grad = 0.0;
    for (std::size_t c = 0; c < chunks; ++c) {
      data_value += part_value[c];
      lik_param_grad += part_lik[c];
    }
    if (!std::isfinite(data_value)) return non_finite(state);

    const Eigen::VectorXd w = kuu_llt_.solve(state.m);
    const double kl_value =
        0.5 * (kuu_inv_.cwiseProduct(S).sum() + state.m.dot(w) - double(K_) + kuu_logdet_ -
               logdet_s);
    out.elbo = scale * data_value - kl_value;

    // gradients in the variational parameters
    const Eigen::VectorXd psi_a = psi_b * a;
    out.grad_m = scale * psi_a - w;
    Eigen::MatrixXd g_s = scale * (psi_b * bb.asDiagonal() * psi_b.transpose()) -
                          0.5 * kuu_inv_ + 0.5 * (*s_inv);
    g_s = 0.5 * (g_s + g_s.transpose()).eval();
    chain_to_factors(state, g_s, out);

    // gradients in the hyperparameters
    out.grad_hyper.resize(hyperparameter_count());
    const Eigen::MatrixXd u_mat = kuu_llt_.solve(t_mat);  // Kuu^{-1} S psi per column
    const Eigen::MatrixXd kinv_s_kinv = kuu_llt_.solve(kuu_llt_.solve(S).transpose());
    Eigen::MatrixXd omega = scale * (-w * psi_a.transpose() +
                                     psi_b * bb.asDiagonal() * (psi_b - 2.0 * u_mat).transpose());
    omega += -0.5 * kuu_inv_ + 0.5 * kinv_s_kinv + 0.5 * (w * w.transpose());

    const Eigen::Index D = Eigen::Index(dims_.size());
    for (Eigen::Index d = 0; d < D; ++d) {
      out.grad_hyper[d] = hyper_grad_variance(std::size_t(d), omega, bb, scale);
      out.grad_hyper[D + d] =
          hyper_grad_lengthscale(std::size_t(d), omega, rows, a, bb, w, psi_b, u_mat, scale);
    }
    if (lik_.kind() != Likelihood::Kind::bernoulli)
      out.grad_hyper[2 * D] = scale * lik_param_grad;
    return out;
  }

 private:
  enum class Structure { single, additive, product };

  void validate_data() {
    if (x_.rows() != y_.size())
      throw std::invalid_argument("VariationalProblem: row count mismatch");
    if (x_.cols() != Eigen::Index(dims_.size()))
      throw std::invalid_argument("VariationalProblem: design column count mismatch");
    if (x_.size() > 0 && (!x_.allFinite() || !y_.allFinite()))
      throw data_error("VariationalProblem: non-finite input values");
    N_ = y_.size();
  }

  void rebuild() {
    const Eigen::Index D = Eigen::Index(dims_.size());
    block_dense_.clear();
    block_.clear();
    for (const auto& dim : dims_) {
      block_.push_back(build_kuu(dim.basis, dim.kernel));
      block_dense_.push_back(block_.back().to_dense());
    }
    switch (structure_) {
      case Structure::single:
        kuu_dense_ = block_dense_[0];
        knn_ = dims_[0].kernel.variance;
        break;
      case Structure::additive: {
        K_ = 0;
        for (const auto& b : block_dense_) K_ += b.rows();
        kuu_dense_ = Eigen::MatrixXd::Zero(K_, K_);
        Eigen::Index off = 0;
        knn_ = 0.0;
        for (Eigen::Index d = 0; d < D; ++d) {
          const auto& b = block_dense_[std::size_t(d)];
          kuu_dense_.block(off, off, b.rows(), b.cols()) = b;
          off += b.rows();
          knn_ += dims_[std::size_t(d)].kernel.variance;
        }
        break;
      }
      case Structure::product:
        kuu_dense_ = dense_kron(block_dense_);
        knn_ = 1.0;
        for (const auto& dim : dims_) knn_ *= dim.kernel.variance;
        break;
    }
    K_ = kuu_dense_.rows();
    kuu_llt_.compute(kuu_dense_);
    if (kuu_llt_.info() != Eigen::Success)
      throw numerical_error("VariationalProblem: Kuu factorization failed at these hyperparameters");
    kuu_logdet_ = 2.0 * kuu_llt_.matrixLLT().diagonal().array().log().sum();
    kuu_inv_ = kuu_llt_.solve(Eigen::MatrixXd::Identity(K_, K_));

    phi_.resize(K_, N_);
    if (N_ > 0) {
      parallel_chunks(N_, [&](std::size_t, std::int64_t lo, std::int64_t hi) {
        for (Eigen::Index n = lo; n < hi; ++n) fill_feature(n, phi_.col(n));
      });
    }
    psi_ = kuu_llt_.solve(phi_);
    phi_kuuinv_phi_ = (phi_.cwiseProduct(psi_)).colwise().sum();
  }

  void fill_feature(Eigen::Index n, Eigen::Ref<Eigen::VectorXd> out) const {
    switch (structure_) {
      case Structure::single:
        feature_vector_into(dims_[0].basis, dims_[0].kernel, x_(n, 0), out);
        return;
      case Structure::additive: {
        Eigen::Index off = 0;
        for (std::size_t d = 0; d < dims_.size(); ++d) {
          const auto& dim = dims_[d];
          const Eigen::Index k = dim.basis.feature_count();
          feature_vector_into(dim.basis, dim.kernel, x_(n, Eigen::Index(d)), out.segment(off, k));
          off += k;
        }
        return;
      }
      case Structure::product: {
        Eigen::Index filled = 1;
        out[0] = 1.0;
        Eigen::VectorXd factor;
        for (std::size_t d = 0; d < dims_.size(); ++d) {
          const auto& dim = dims_[d];
          const Eigen::Index k = dim.basis.feature_count();
          factor.resize(k);
          feature_vector_into(dim.basis, dim.kernel, x_(n, Eigen::Index(d)), factor);
          for (Eigen::Index i = filled - 1; i >= 0; --i) out.segment(i * k, k) = out[i] * factor;
          filled *= k;
        }
        return;
      }
    }
  }

  void check_state(const VariationalState& state) const {
    if (state.m.size() != K_) throw std::invalid_argument("variational state: mean size mismatch");
    Eigen::Index prod = 1;
    for (const auto& f : state.L) {
      if (f.rows() != f.cols()) throw std::invalid_argument("variational state: factor not square");
      prod *= f.rows();
    }
    if (prod != K_) throw std::invalid_argument("variational state: factor sizes mismatch");
    if (state.kind == CovarianceKind::free_form && state.L.size() != 1)
      throw std::invalid_argument("variational state: free form needs exactly one factor");
    if (state.kind == CovarianceKind::kron_sum && state.J.size() != state.L.size())
      throw std::invalid_argument("variational state: kron_sum needs matching J factors");
  }

  [[nodiscard]] VariationalGradients non_finite(const VariationalState& state) const {
    VariationalGradients out;
    out.elbo = -std::numeric_limits<double>::infinity();
    out.finite = false;
    out.grad_m = Eigen::VectorXd::Zero(K_);
    for (const auto& f : state.L) out.grad_l.push_back(Eigen::MatrixXd::Zero(f.rows(), f.cols()));
    for (const auto& f : state.J) out.grad_j.push_back(Eigen::MatrixXd::Zero(f.rows(), f.cols()));
    out.grad_hyper = Eigen::VectorXd::Zero(hyperparameter_count());
    return out;
  }

  [[nodiscard]] std::optional<Eigen::MatrixXd> covariance_inverse(const VariationalState& state,
                                                                  const Eigen::MatrixXd& S) const {
    if (state.kind == CovarianceKind::free_form || state.kind == CovarianceKind::kron) {
      // invert through the factors; stays exact even when S is barely PD
      std::vector<Eigen::MatrixXd> inv(state.L.size());
      for (std::size_t d = 0; d < state.L.size(); ++d) {
        if ((state.L[d].diagonal().array() <= 0.0).any()) return std::nullopt;
        const Eigen::MatrixXd li = state.L[d].triangularView<Eigen::Lower>().solve(
            Eigen::MatrixXd::Identity(state.L[d].rows(), state.L[d].rows()));
        inv[d] = li.transpose() * li;
      }
      Eigen::MatrixXd out = dense_kron(inv);
      if (!out.allFinite()) return std::nullopt;
      return out;
    }
    Eigen::LLT<Eigen::MatrixXd> llt(S);
    if (llt.info() != Eigen::Success) return std::nullopt;
    Eigen::MatrixXd out = llt.solve(Eigen::MatrixXd::Identity(S.rows(), S.cols()));
    if (!out.allFinite()) return std::nullopt;
    return out;
  }

  void chain_to_factors(const VariationalState& state, const Eigen::MatrixXd& g_s,
                        VariationalGradients& out) const {
    if (state.kind == CovarianceKind::free_form) {
      out.grad_l.push_back(2.0 * g_s * state.L[0]);
      return;
    }
    const auto dims = detail::factor_sizes(state);
    const auto digits = detail::flat_digits(dims);
    std::vector<Eigen::MatrixXd> a(state.L.size());
    for (std::size_t d = 0; d < state.L.size(); ++d) a[d] = state.L[d] * state.L[d].transpose();
    for (std::size_t d = 0; d < state.L.size(); ++d) {
      const Eigen::MatrixXd pt = detail::partial_trace(g_s, a, d, digits);
      out.grad_l.push_back((pt + pt.transpose()) * state.L[d]);
    }
    if (state.kind == CovarianceKind::kron_sum) {
      std::vector<Eigen::MatrixXd> b(state.J.size());
      for (std::size_t d = 0; d < state.J.size(); ++d) b[d] = state.J[d] * state.J[d].transpose();
      for (std::size_t d = 0; d < state.J.size(); ++d) {
        const Eigen::MatrixXd pt = detail::partial_trace(g_s, b, d, digits);
        out.grad_j.push_back((pt + pt.transpose()) * state.J[d]);
      }
    }
  }

  // d ELBO / d log sigma^2_d: dKuu contracts against omega; k(x,x) moves too
  [[nodiscard]] double hyper_grad_variance(std::size_t d, const Eigen::MatrixXd& omega,
                                           const Eigen::VectorXd& bb, double scale) const {
    double dknn = 0.0;
    double contract = 0.0;
    switch (structure_) {
      case Structure::single:
        contract = -kuu_dense_.cwiseProduct(omega).sum();
        dknn = knn_;
        break;
      case Structure::additive: {
        Eigen::Index off = 0;
        for (std::size_t e = 0; e < d; ++e) off += block_dense_[e].rows();
        const Eigen::Index k = block_dense_[d].rows();
        contract = -block_dense_[d].cwiseProduct(omega.block(off, off, k, k)).sum();
        dknn = dims_[d].kernel.variance;
        break;
      }
      case Structure::product:
        // one Kronecker factor scales as sigma^2, so the whole product does
        contract = -kuu_dense_.cwiseProduct(omega).sum();
        dknn = knn_;
        break;
    }
    return contract + scale * bb.sum() * dknn;
  }

  [[nodiscard]] double hyper_grad_lengthscale(std::size_t d, const Eigen::MatrixXd& omega,
                                              const std::vector<Eigen::Index>& rows,
                                              const Eigen::VectorXd& a, const Eigen::VectorXd& bb,
                                              const Eigen::VectorXd& w,
                                              const Eigen::MatrixXd& psi_b,
                                              const Eigen::MatrixXd& u_mat, double scale) const {
    const auto& dim = dims_[d];
    const KuuLogLengthscaleDeriv dk = kuu_dloglengthscale(dim.basis, dim.kernel);
    Eigen::MatrixXd dblock =
        Eigen::MatrixXd(dk.dalpha.asDiagonal());
    if (block_[d].rank() > 0)
      dblock += block_[d].B * dk.dB.transpose() + dk.dB * block_[d].B.transpose();

    double grad = 0.0;
    switch (structure_) {
      case Structure::single:
        grad = dblock.cwiseProduct(omega).sum();
        break;
      case Structure::additive: {
        Eigen::Index off = 0;
        for (std::size_t e = 0; e < d; ++e) off += block_dense_[e].rows();
        const Eigen::Index k = dblock.rows();
        grad = dblock.cwiseProduct(omega.block(off, off, k, k)).sum();
        break;
      }
      case Structure::product: {
        std::vector<Eigen::MatrixXd> factors = block_dense_;
        factors[d] = dblock;
        grad = dense_kron(factors).cwiseProduct(omega).sum();
        break;
      }
    }

    // feature motion: only rows outside dimension d's interval have
    // lengthscale-dependent features
    const double lambda = dim.kernel.lambda();
    Eigen::VectorXd dphi_dim(dim.basis.feature_count());
    for (Eigen::Index i = 0; i < Eigen::Index(rows.size()); ++i) {
      const double xd = x_(rows[std::size_t(i)], Eigen::Index(d));
      if (dim.basis.edge_distance(xd) <= 0.0) continue;
      feature_vector_dlambda_into(dim.basis, dim.kernel, xd, dphi_dim);
      dphi_dim *= -lambda;
      const Eigen::VectorXd dphi = embed_feature_derivative(d, rows[std::size_t(i)], dphi_dim);
      grad += scale * (a[i] * w.dot(dphi) -
                       2.0 * bb[i] * (psi_b.col(i) - u_mat.col(i)).dot(dphi));
    }
    return grad;
  }

  // Places a per-dimension feature derivative into the full feature layout:
  // concatenation slot for additive, Kronecker expansion for product.
  [[nodiscard]] Eigen::VectorXd embed_feature_derivative(std::size_t d, Eigen::Index row,
                                                         const Eigen::VectorXd& dvec) const {
    switch (structure_) {
      case Structure::single:
        return dvec;
      case Structure::additive: {
        Eigen::VectorXd out = Eigen::VectorXd::Zero(K_);
        Eigen::Index off = 0;
        for (std::size_t e = 0; e < d; ++e) off += block_dense_[e].rows();
        out.segment(off, dvec.size()) = dvec;
        return out;
      }
      case Structure::product: {
        Eigen::VectorXd out(K_);
        Eigen::Index filled = 1;
        out[0] = 1.0;
        Eigen::VectorXd factor;
        for (std::size_t e = 0; e < dims_.size(); ++e) {
          const auto& dim = dims_[e];
          const Eigen::Index k = dim.basis.feature_count();
          if (e == d) {
            factor = dvec;
          } else {
            factor.resize(k);
            feature_vector_into(dim.basis, dim.kernel, x_(row, Eigen::Index(e)), factor);
          }
          for (Eigen::Index i = filled - 1; i >= 0; --i) out.segment(i * k, k) = out[i] * factor;
          filled *= k;
        }
        return out;
      }
    }
    return dvec;
  }

  Structure structure_;
  std::vector<ModelDimension> dims_;
  Likelihood lik_;
  Eigen::MatrixXd x_;
  Eigen::VectorXd y_;
  GaussHermiteRule rule_;

  Eigen::Index N_ = 0;
  Eigen::Index K_ = 0;
  double knn_ = 0.0;
  std::vector<LowRankPlusDiag> block_;
  std::vector<Eigen::MatrixXd> block_dense_;
  Eigen::MatrixXd kuu_dense_;
  Eigen::LLT<Eigen::MatrixXd> kuu_llt_;
  Eigen::MatrixXd kuu_inv_;
  double kuu_logdet_ = 0.0;
  Eigen::MatrixXd phi_, psi_;
  Eigen::VectorXd phi_kuuinv_phi_;
};

// Deterministic disjoint minibatches: a fixed-seed shuffle of 0..n-1 split
// into ceil(n / batch) consecutive slices.
[[nodiscard]] inline std::vector<std::vector<Eigen::Index>> minibatch_partition(
    Eigen::Index n, Eigen::Index batch_size, std::uint64_t seed, std::uint64_t epoch = 0) {
  if (batch_size <= 0) throw std::invalid_argument("minibatch_partition: batch size must be positive");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) order[std::size_t(i)] = i;
  auto rng = make_rng(seed, "shuffle", epoch);
  for (Eigen::Index i = n - 1; i > 0; --i) {
    const Eigen::Index j = Eigen::Index(rng() % std::uint64_t(i + 1));
    std::swap(order[std::size_t(i)], order[std::size_t(j)]);
  }
  std::vector<std::vector<Eigen::Index>> batches;
  for (Eigen::Index lo = 0; lo < n; lo += batch_size) {
    const Eigen::Index hi = std::min(lo + batch_size, n);
    batches.emplace_back(order.begin() + lo, order.begin() + hi);
  }
  return batches;
}

// Flat parameter layout for the optimizer: m, then each L factor's lower
// triangle column by column with the diagonal stored as its log, then the J
// factors the same way.
namespace detail {

[[nodiscard]] inline Eigen::Index packed_factor_size(const Eigen::MatrixXd& f) {
  return f.rows() * (f.rows() + 1) / 2;
}

inline void pack_factor(const Eigen::MatrixXd& f, Eigen::Ref<Eigen::VectorXd> out) {
  Eigen::Index at = 0;
  for (Eigen::Index j = 0; j < f.cols(); ++j)
    for (Eigen::Index i = j; i < f.rows(); ++i)
      out[at++] = i == j ? std::log(f(i, j)) : f(i, j);
}

inline void unpack_factor(const Eigen::Ref<const Eigen::VectorXd>& in, Eigen::MatrixXd& f) {
  Eigen::Index at = 0;
  f.setZero();
  for (Eigen::Index j = 0; j < f.cols(); ++j)
    for (Eigen::Index i = j; i < f.rows(); ++i)
      f(i, j) = i == j ? std::exp(in[at++]) : in[at++];
}

// gradient in the packed coordinates: diagonal entries pick up the factor
// value from the log parameterization
inline void pack_factor_gradient(const Eigen::MatrixXd& grad, const Eigen::MatrixXd& f,
                                 Eigen::Ref<Eigen::VectorXd> out) {
  Eigen::Index at = 0;
  for (Eigen::Index j = 0; j < f.cols(); ++j)
    for (Eigen::Index i = j; i < f.rows(); ++i)
      out[at++] = i == j ? grad(i, j) * f(i, j) : grad(i, j);
}

}  // namespace detail

[[nodiscard]] inline Eigen::Index packed_size(const VariationalState& state) {
  Eigen::Index total = state.m.size();
  for (const auto& f : state.L) total += detail::packed_factor_size(f);
  for (const auto& f : state.J) total += detail::packed_factor_size(f);
  return total;
}

[[nodiscard]] inline Eigen::VectorXd pack_state(const VariationalState& state) {
  Eigen::VectorXd out(packed_size(state));
  out.head(state.m.size()) = state.m;
  Eigen::Index at = state.m.size();
  for (const auto& f : state.L) {
    detail::pack_factor(f, out.segment(at, detail::packed_factor_size(f)));
    at += detail::packed_factor_size(f);
  }
  for (const auto& f : state.J) {
    detail::pack_factor(f, out.segment(at, detail::packed_factor_size(f)));
    at += detail::packed_factor_size(f);
  }
  return out;
}

// shape carries the kind and factor sizes; values come from packed
[[nodiscard]] inline VariationalState unpack_state(const VariationalState& shape,
                                                   const Eigen::VectorXd& packed) {
  VariationalState state = shape;
  if (packed.size() != packed_size(shape))
    throw std::invalid_argument("unpack_state: wrong packed length");
  state.m = packed.head(shape.m.size());
  Eigen::Index at = shape.m.size();
  for (auto& f : state.L) {
    detail::unpack_factor(packed.segment(at, detail::packed_factor_size(f)), f);
    at += detail::packed_factor_size(f);
  }
  for (auto& f : state.J) {
    detail::unpack_factor(packed.segment(at, detail::packed_factor_size(f)), f);
    at += detail::packed_factor_size(f);
  }
  return state;
}

[[nodiscard]] inline Eigen::VectorXd pack_gradient(const VariationalState& state,
                                                   const VariationalGradients& grads) {
  Eigen::VectorXd out(packed_size(state));
  out.head(state.m.size()) = grads.grad_m;
  Eigen::Index at = state.m.size();
  for (std::size_t d = 0; d < state.L.size(); ++d) {
    detail::pack_factor_gradient(grads.grad_l[d], state.L[d],
                                 out.segment(at, detail::packed_factor_size(state.L[d])));
    at += detail::packed_factor_size(state.L[d]);
  }
  for (std::size_t d = 0; d < state.J.size(); ++d) {
    detail::pack_factor_gradient(grads.grad_j[d], state.J[d],
                                 out.segment(at, detail::packed_factor_size(state.J[d])));
    at += detail::packed_factor_size(state.J[d]);
  }
  return out;
}

struct VariationalFit {
  VariationalState state;
  double elbo = 0.0;
  Eigen::VectorXd hyperparameters;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
};

struct VariationalFitSettings {
  OptimizeSettings optimizer;
  bool optimize_hyperparameters = false;
};

// Maximizes the ELBO over the variational parameters (and optionally the
// hyperparameters jointly) with the same optimizer contract the conjugate
// path uses.
[[nodiscard]] inline VariationalFit fit_variational(VariationalProblem& problem,
                                                    CovarianceKind kind,
                                                    const VariationalFitSettings& settings = {}) {
  const VariationalState shape = problem.initial_state(kind);
  const Eigen::Index state_len = packed_size(shape);
  const Eigen::Index hyper_len =
      settings.optimize_hyperparameters ? problem.hyperparameter_count() : 0;

  Eigen::VectorXd init(state_len + hyper_len);
  init.head(state_len) = pack_state(shape);
  if (hyper_len > 0) init.tail(hyper_len) = problem.hyperparameters();

  auto objective = [&](const Eigen::VectorXd& p, Eigen::VectorXd& grad) -> double {
    grad.resize(p.size());
    VariationalState state = unpack_state(shape, p.head(state_len));
    if (hyper_len > 0) {
      try {
        problem.set_hyperparameters(p.tail(hyper_len));
      } catch (const numerical_error&) {
        grad.setZero();
        return std::numeric_limits<double>::infinity();
      } catch (const std::invalid_argument&) {
        grad.setZero();
        return std::numeric_limits<double>::infinity();
      }
    }
    const VariationalGradients g = problem.elbo_and_gradients(state);
    if (!g.finite) {
      grad.setZero();
      return std::numeric_limits<double>::infinity();
    }
    grad.head(state_len) = -pack_gradient(state, g);
    if (hyper_len > 0) grad.tail(hyper_len) = -g.grad_hyper;
    return -g.elbo;
  };

  const OptimizeResult opt = minimize_lbfgs(objective, std::move(init), settings.optimizer);

  VariationalFit fit;
  fit.state = unpack_state(shape, opt.x.head(state_len));
  if (hyper_len > 0) problem.set_hyperparameters(opt.x.tail(hyper_len));
  fit.hyperparameters = problem.hyperparameters();
  fit.elbo = problem.elbo(fit.state);
  fit.iterations = opt.iterations;
  fit.evaluations = opt.evaluations;
  fit.converged = opt.converged;
  return fit;
}

}  // namespace vffgp
