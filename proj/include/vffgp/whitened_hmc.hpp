#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vffgp/errors.hpp"
#include "vffgp/fourier_basis.hpp"
#include "vffgp/gauss_hermite.hpp"
#include "vffgp/kron.hpp"
#include "vffgp/kuu.hpp"
#include "vffgp/likelihoods.hpp"
#include "vffgp/lowrank.hpp"
#include "vffgp/matern.hpp"
#include "vffgp/multidim.hpp"
#include "vffgp/parallel.hpp"
#include "vffgp/rng.hpp"

namespace vffgp {

// Position of the sampler: centred variables v with u = R v, plus the
// hyperparameters in the same log-space layout the variational path uses, and
// the trajectory settings that ride along with the chain.
struct WhitenedState {
  Eigen::VectorXd v;
  Eigen::VectorXd hyper;
  double step_size = 0.05;
  int num_leapfrog = 20;
};

struct WhitenedEval {
  double value = 0.0;
  double data_term = 0.0;
  double v_prior = 0.0;
  double hyper_prior = 0.0;
  bool finite = true;
  Eigen::VectorXd grad_v;
  Eigen::VectorXd grad_hyper;
};

struct ConditionalMoments {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;
};

namespace detail {

// (M_1 x M_2 x ...) v for rectangular factors, dimension 0 slowest-varying.
[[nodiscard]] inline Eigen::VectorXd kron_matvec(const std::vector<Eigen::MatrixXd>& mats,
                                                 Eigen::VectorXd v) {
  std::vector<Eigen::Index> dims;
  dims.reserve(mats.size());
  for (const auto& m : mats) dims.push_back(m.cols());
  for (std::size_t d = 0; d < mats.size(); ++d) {
    v = kron_apply_dim(v, dims, d, mats[d].rows(),
                       [&](const auto& slab) { return Eigen::MatrixXd(mats[d] * slab); });
    dims[d] = mats[d].rows();
  }
  return v;
}

constexpr double kHyperPriorVariance = 9.0;  // broad N(0, 3^2) on each log-space coordinate

}  // namespace detail

// Log density of the optimal posterior over inducing features in the whitened
// parameterization, jointly over the hyperparameters.  Everything that depends
// on the data alone (inside-interval features never move with the
// hyperparameters) is cached at construction, so one evaluation costs O(N K)
// plus N-independent factor work.
class WhitenedTarget {
 public:
  WhitenedTarget(const FourierBasis& basis, const MaternKernel& kernel, Likelihood lik,
                 const Eigen::VectorXd& x, const Eigen::VectorXd& y, int quad_nodes = 20)
      : lik_(std::move(lik)), rule_(gauss_hermite(quad_nodes)) {
    dims_.push_back(ModelDimension{kernel, basis});
    x_.resize(x.size(), 1);
    x_.col(0) = x;
    y_ = y;
    init();
  }

  WhitenedTarget(const ProductModel& model, Likelihood lik, const Eigen::MatrixXd& x,
                 const Eigen::VectorXd& y, int quad_nodes = 20)
      : dims_(model.dims), lik_(std::move(lik)), x_(x), y_(y), rule_(gauss_hermite(quad_nodes)) {
    init();
  }

  [[nodiscard]] Eigen::Index data_count() const { return y_.size(); }
  [[nodiscard]] Eigen::Index feature_count() const {
    Eigen::Index k = 1;
    for (const auto& d : dims_) k *= d.basis.feature_count();
    return k;
  }

  // length of v: the Kronecker product of per-dimension square roots is
  // K_d + R_d columns wide in each factor
  [[nodiscard]] Eigen::Index whitened_length() const {
    Eigen::Index len = 1;
    for (const auto& blk : template_blocks_) len *= blk.size() + blk.rank();
    return len;
  }

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

  [[nodiscard]] WhitenedState initial_state() const {
    WhitenedState state;
    state.v = Eigen::VectorXd::Zero(whitened_length());
    state.hyper = hyperparameters();
    return state;
  }

  // u = R v at the state's hyperparameters; cov(u) = Kuu under v ~ N(0, I)
  [[nodiscard]] Eigen::VectorXd reconstruct(const WhitenedState& state) const {
    const Workspace ws = prepare(state.hyper);
    return detail::kron_matvec(ws.sqrt_dense, state.v);
  }

  // conditional q(f_n | u) moments at every datum for this state
  [[nodiscard]] ConditionalMoments conditional_moments(const WhitenedState& state) const {
    const Workspace ws = prepare(state.hyper);
    ConditionalMoments out;
    out.mean.resize(N_);
    out.variance.resize(N_);
    const Eigen::Index inner = feature_count() / ws.blocks[0].size();
    const Eigen::VectorXd z = detail::kron_matvec(ws.t_mats, state.v);
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const Eigen::Map<const RowMat> big_z(z.data(), ws.blocks[0].size(), inner);
    Eigen::VectorXd r(inner);
    for (Eigen::Index n = 0; n < N_; ++n) {
      fill_rest(ws, n, r);
      double prod_g = ws.solvers[0].quad_form(ws.features[0].col(n));
      for (std::size_t d = 1; d < dims_.size(); ++d)
        prod_g *= ws.solvers[d].quad_form(ws.features[d].col(n));
      out.mean[n] = ws.features[0].col(n).dot(big_z * r);
      out.variance[n] = std::max(ws.knn - prod_g, 0.0);
    }
    return out;
  }

  [[nodiscard]] WhitenedEval log_target(const WhitenedState& state) const {
    const Eigen::Index D = Eigen::Index(dims_.size());
    const Eigen::Index H = hyperparameter_count();
    if (state.hyper.size() != H)
      throw std::invalid_argument("log_target: wrong hyperparameter count");
    if (state.v.size() != whitened_length())
      throw std::invalid_argument("log_target: wrong whitened vector length");
    if (!state.v.allFinite() || !state.hyper.allFinite()) return non_finite();

    Workspace ws;
    try {
      ws = prepare(state.hyper);
    } catch (const numerical_error&) {
      return non_finite();
    }

    WhitenedEval out;
    out.grad_v = Eigen::VectorXd::Zero(state.v.size());
    out.grad_hyper = Eigen::VectorXd::Zero(H);

    const Eigen::Index K0 = ws.blocks[0].size();
    const Eigen::Index inner = feature_count() / K0;
    const Eigen::VectorXd z = detail::kron_matvec(ws.t_mats, state.v);
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const Eigen::Map<const RowMat> big_z(z.data(), K0, inner);

    // per-lengthscale motion of T = Kuu^{-1} R, mapped through the product
    std::vector<Eigen::Map<const RowMat>> dz_maps;
    std::vector<Eigen::VectorXd> dz(dims_.size());
    for (std::size_t d = 0; d < dims_.size(); ++d) {
      std::vector<Eigen::MatrixXd> mats = ws.t_mats;
      mats[d] = dt_matrix(ws, d);
      dz[d] = detail::kron_matvec(mats, state.v);
      dz_maps.emplace_back(dz[d].data(), K0, inner);
    }

    const Likelihood& lik = ws.lik;
    RowMat s_mat = RowMat::Zero(K0, inner);
    double data_value = 0.0, lik_param_grad = 0.0;
    double half_amu_plus_bc = 0.0;  // shared by every log-variance coordinate
    Eigen::VectorXd grad_len = Eigen::VectorXd::Zero(D);
    Eigen::VectorXd r(inner), s0(K0);
    const bool gaussian = lik.kind() == Likelihood::Kind::gaussian;
    const bool poisson = lik.kind() == Likelihood::Kind::poisson;

    for (Eigen::Index n = 0; n < N_; ++n) {
      fill_rest(ws, n, r);
      s0.noalias() = big_z * r;
      const double mu = ws.features[0].col(n).dot(s0);

      double prod_g = 1.0;
      for (std::size_t d = 0; d < dims_.size(); ++d)
        prod_g *= ws.solvers[d].quad_form(ws.features[d].col(n));
      const double c_raw = ws.knn - prod_g;
      const double c = std::max(c_raw, 0.0);

      const Expectation e = lik.expected_log_density(y_[n], mu, c, rule_);
      data_value += e.value;
      half_amu_plus_bc += 0.5 * e.dmean * mu + e.dvar * c_raw;
      if (gaussian) {
        const double resid = y_[n] - mu;
        lik_param_grad += -0.5 + 0.5 * (resid * resid + c) / lik.noise_variance();
      } else if (poisson) {
        lik_param_grad += e.dmean;
      }

      s_mat.noalias() += e.dmean * (ws.features[0].col(n) * r.transpose());

      for (std::size_t d = 0; d < dims_.size(); ++d) {
        // mean motion through Kuu^{-1} R
        double dmu = ws.features[0].col(n).dot(dz_maps[d] * r);
        // conditional-variance motion through Kuu
        const Eigen::VectorXd phi_d = ws.features[d].col(n);
        const Eigen::VectorXd psi_d = ws.solvers[d].solve_vec(phi_d);
        double dg = -ws.dalpha_quad(d, psi_d);
        // feature motion for inputs outside this dimension's interval
        if (ws.outside[d].count(n)) {
          Eigen::VectorXd dphi(phi_d.size());
          feature_vector_dlambda_into(dims_[d].basis, ws.kernels[d], x_(n, Eigen::Index(d)),
                                      dphi);
          dphi *= -ws.kernels[d].lambda();
          dg += 2.0 * dphi.dot(psi_d);
          if (d == 0) {
            dmu += dphi.dot(s0);
          } else {
            fill_rest_with(ws, n, d, dphi, r);
            dmu += ws.features[0].col(n).dot(big_z * r);
            fill_rest(ws, n, r);  // restore for the remaining dimensions
          }
        }
        double others = 1.0;
        for (std::size_t e2 = 0; e2 < dims_.size(); ++e2)
          if (e2 != d) others *= ws.solvers[e2].quad_form(ws.features[e2].col(n));
        grad_len[Eigen::Index(d)] += e.dmean * dmu - e.dvar * dg * others;
      }
    }
    if (!std::isfinite(data_value)) return non_finite();

    out.data_term = data_value;
    out.v_prior = -0.5 * state.v.squaredNorm() -
                  0.5 * double(state.v.size()) * std::log(2.0 * std::numbers::pi);
    out.hyper_prior = -state.hyper.squaredNorm() / (2.0 * detail::kHyperPriorVariance) -
                      0.5 * double(H) *
                          std::log(2.0 * std::numbers::pi * detail::kHyperPriorVariance);
    out.value = data_value + out.v_prior + out.hyper_prior;
    if (!std::isfinite(out.value)) return non_finite();

    std::vector<Eigen::MatrixXd> t_trans(ws.t_mats.size());
    for (std::size_t d = 0; d < ws.t_mats.size(); ++d) t_trans[d] = ws.t_mats[d].transpose();
    Eigen::VectorXd s_flat(feature_count());
    Eigen::Map<RowMat>(s_flat.data(), K0, inner) = s_mat;
    out.grad_v = detail::kron_matvec(t_trans, s_flat) - state.v;

    for (Eigen::Index d = 0; d < D; ++d) {
      out.grad_hyper[d] = half_amu_plus_bc - state.hyper[d] / detail::kHyperPriorVariance;
      out.grad_hyper[D + d] =
          grad_len[d] - state.hyper[D + d] / detail::kHyperPriorVariance;
    }
    if (H > 2 * D)
      out.grad_hyper[2 * D] =
          lik_param_grad - state.hyper[2 * D] / detail::kHyperPriorVariance;
    if (!out.grad_v.allFinite() || !out.grad_hyper.allFinite()) return non_finite();
    return out;
  }

 private:
  struct Workspace {
    std::vector<MaternKernel> kernels;
    Likelihood lik{Likelihood::gaussian(1.0)};
    std::vector<LowRankPlusDiag> blocks;
    std::vector<LowRankSolver> solvers;
    std::vector<Eigen::MatrixXd> sqrt_dense;  // R_d, K_d x (K_d + R_d)
    std::vector<Eigen::MatrixXd> t_mats;      // Kuu_d^{-1} R_d
    std::vector<KuuLogLengthscaleDeriv> dlen;
    std::vector<Eigen::MatrixXd> features;
    std::vector<std::unordered_set<Eigen::Index>> outside;
    double knn = 1.0;

    [[nodiscard]] double dalpha_quad(std::size_t d, const Eigen::VectorXd& psi) const {
      const auto& dk = dlen[d];
      double out = dk.dalpha.cwiseProduct(psi.cwiseAbs2()).sum();
      if (blocks[d].rank() > 0)
        out += 2.0 * (blocks[d].B.transpose() * psi).dot(dk.dB.transpose() * psi);
      return out;
    }
  };

  void init() {
    if (dims_.empty()) throw std::invalid_argument("WhitenedTarget: needs at least one dimension");
    if (x_.rows() != y_.size()) throw std::invalid_argument("WhitenedTarget: row count mismatch");
    if (x_.cols() != Eigen::Index(dims_.size()))
      throw std::invalid_argument("WhitenedTarget: design column count mismatch");
    if (x_.size() > 0 && (!x_.allFinite() || !y_.allFinite()))
      throw data_error("WhitenedTarget: non-finite input values");
    N_ = y_.size();
    for (const auto& dim : dims_) template_blocks_.push_back(build_kuu(dim.basis, dim.kernel));

    feature_cache_.resize(dims_.size());
    outside_rows_.resize(dims_.size());
    for (std::size_t d = 0; d < dims_.size(); ++d) {
      const auto& dim = dims_[d];
      feature_cache_[d].resize(dim.basis.feature_count(), N_);
      for (Eigen::Index n = 0; n < N_; ++n) {
        feature_vector_into(dim.basis, dim.kernel, x_(n, Eigen::Index(d)),
                            feature_cache_[d].col(n));
        if (dim.basis.edge_distance(x_(n, Eigen::Index(d))) > 0.0)
          outside_rows_[d].insert(n);
      }
    }
  }

  [[nodiscard]] WhitenedEval non_finite() const {
    WhitenedEval out;
    out.value = -std::numeric_limits<double>::infinity();
    out.finite = false;
    out.grad_v = Eigen::VectorXd::Zero(whitened_length());
    out.grad_hyper = Eigen::VectorXd::Zero(hyperparameter_count());
    return out;
  }

  [[nodiscard]] Workspace prepare(const Eigen::VectorXd& hyper) const {
    const Eigen::Index D = Eigen::Index(dims_.size());
    Workspace ws;
    ws.lik = lik_;
    ws.knn = 1.0;
    for (Eigen::Index d = 0; d < D; ++d) {
      MaternKernel kernel = dims_[std::size_t(d)].kernel;
      kernel.variance = std::exp(hyper[d]);
      kernel.lengthscale = std::exp(hyper[D + d]);
      if (!std::isfinite(kernel.variance) || !std::isfinite(kernel.lengthscale) ||
          kernel.variance <= 0.0 || kernel.lengthscale <= 0.0)
        throw numerical_error("log_target: hyperparameters out of range");
      ws.kernels.push_back(kernel);
      ws.knn *= kernel.variance;
      const auto& basis = dims_[std::size_t(d)].basis;
      ws.blocks.push_back(build_kuu(basis, kernel));
      ws.solvers.emplace_back(ws.blocks.back());
      ws.sqrt_dense.push_back(structured_sqrt(ws.blocks.back()).to_dense());
      ws.t_mats.push_back(ws.solvers.back().solve(ws.sqrt_dense.back()));
      ws.dlen.push_back(kuu_dloglengthscale(basis, kernel));
    }
    if (lik_.kind() == Likelihood::Kind::gaussian) {
      const double noise = std::exp(hyper[2 * D]);
      if (!std::isfinite(noise) || noise <= 0.0)
        throw numerical_error("log_target: noise variance out of range");
      ws.lik.set_noise_variance(noise);
    }
    if (lik_.kind() == Likelihood::Kind::poisson) ws.lik.set_offset(hyper[2 * D]);

    // features: the cache is valid wherever the input sits inside the
    // interval; outside columns move with the lengthscale
    ws.features.resize(dims_.size());
    ws.outside = outside_rows_;
    for (std::size_t d = 0; d < dims_.size(); ++d) {
      ws.features[d] = feature_cache_[d];
      for (const auto n : outside_rows_[d])
        feature_vector_into(dims_[d].basis, ws.kernels[d], x_(n, Eigen::Index(d)),
                            ws.features[d].col(n));
    }
    return ws;
  }

  // d(Kuu^{-1} R)/d log ell for dimension d
  [[nodiscard]] Eigen::MatrixXd dt_matrix(const Workspace& ws, std::size_t d) const {
    const auto& blk = ws.blocks[d];
    const auto& dk = ws.dlen[d];
    const Eigen::MatrixXd& t = ws.t_mats[d];
    Eigen::MatrixXd dr = Eigen::MatrixXd::Zero(blk.size(), blk.size() + blk.rank());
    dr.leftCols(blk.size()) =
        Eigen::MatrixXd((dk.dalpha.array() / (2.0 * blk.alpha.array().sqrt())).matrix().asDiagonal());
    if (blk.rank() > 0) dr.rightCols(blk.rank()) = dk.dB;

    Eigen::MatrixXd dkuu_t = dk.dalpha.asDiagonal() * t;
    if (blk.rank() > 0) {
      dkuu_t.noalias() += blk.B * (dk.dB.transpose() * t);
      dkuu_t.noalias() += dk.dB * (blk.B.transpose() * t);
    }
    return ws.solvers[d].solve(dr - dkuu_t);
  }

  // Kronecker factor of the feature vector over dimensions 1.. for datum n
  void fill_rest(const Workspace& ws, Eigen::Index n, Eigen::VectorXd& r) const {
    r[0] = 1.0;
    Eigen::Index filled = 1;
    for (std::size_t d = 1; d < dims_.size(); ++d) {
      const auto& col = ws.features[d].col(n);
      const Eigen::Index k = col.size();
      for (Eigen::Index i = filled - 1; i >= 0; --i) r.segment(i * k, k) = r[i] * col;
      filled *= k;
    }
  }

  // same, with dimension d's block replaced by the given vector
  void fill_rest_with(const Workspace& ws, Eigen::Index n, std::size_t replace,
                      const Eigen::VectorXd& repl, Eigen::VectorXd& r) const {
    r[0] = 1.0;
    Eigen::Index filled = 1;
    for (std::size_t d = 1; d < dims_.size(); ++d) {
      const Eigen::VectorXd col = d == replace ? repl : Eigen::VectorXd(ws.features[d].col(n));
      const Eigen::Index k = col.size();
      for (Eigen::Index i = filled - 1; i >= 0; --i) r.segment(i * k, k) = r[i] * col;
      filled *= k;
    }
  }

  std::vector<ModelDimension> dims_;
  Likelihood lik_;
  Eigen::MatrixXd x_;
  Eigen::VectorXd y_;
  GaussHermiteRule rule_;
  Eigen::Index N_ = 0;
  std::vector<LowRankPlusDiag> template_blocks_;
  std::vector<Eigen::MatrixXd> feature_cache_;
  std::vector<std::unordered_set<Eigen::Index>> outside_rows_;
};

struct HmcSettings {
  bool sample_hyperparameters = true;
  bool adapt_step_size = true;
  double target_acceptance = 0.75;
  double warmup_fraction = 0.2;
};

struct HmcChain {
  std::vector<WhitenedState> states;
  double acceptance_rate = 0.0;
  int divergences = 0;
  double step_size = 0.0;
  int warmup = 0;
};

// Leapfrog HMC with Metropolis correction over (v, hyperparameters), with
// dual-averaging step-size adaptation over a discarded warm-up.  Works on any
// target exposing log_target(WhitenedState) -> WhitenedEval.  Deterministic
// given the seed; a non-finite trajectory rejects the step and is counted.
template <class Target>
[[nodiscard]] HmcChain hmc_sample(const WhitenedState& initial, const Target& target,
                                  int iterations, std::uint64_t seed,
                                  const HmcSettings& settings = {}) {
  if (iterations < 0) throw std::invalid_argument("hmc_sample: iterations must be nonnegative");
  if (initial.step_size <= 0.0) throw std::invalid_argument("hmc_sample: step size must be positive");
  if (initial.num_leapfrog <= 0)
    throw std::invalid_argument("hmc_sample: leapfrog count must be positive");

  HmcChain chain;
  chain.step_size = initial.step_size;
  if (iterations == 0) {
    chain.states.push_back(initial);
    return chain;
  }

  const Eigen::Index vlen = initial.v.size();
  const Eigen::Index hlen = settings.sample_hyperparameters ? initial.hyper.size() : 0;
  const Eigen::Index plen = vlen + hlen;

  WhitenedState current = initial;
  auto eval_at = [&](const Eigen::VectorXd& q, WhitenedState& scratch) {
    scratch.v = q.head(vlen);
    if (hlen > 0) scratch.hyper = q.tail(hlen);
    return target.log_target(scratch);
  };

  Eigen::VectorXd q(plen);
  q.head(vlen) = current.v;
  if (hlen > 0) q.tail(hlen) = current.hyper;
  WhitenedState scratch = current;
  WhitenedEval here = eval_at(q, scratch);
  if (!here.finite) throw numerical_error("hmc_sample: initial state has non-finite target");
  auto grad_of = [&](const WhitenedEval& e) {
    Eigen::VectorXd g(plen);
    g.head(vlen) = e.grad_v;
    if (hlen > 0) g.tail(hlen) = e.grad_hyper;
    return g;
  };

  auto rng = make_rng(seed, "hmc");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  chain.warmup = int(std::floor(settings.warmup_fraction * double(iterations)));
  const int kept = iterations - chain.warmup;
  chain.states.reserve(std::size_t(std::max(kept, 0)));

  double step = initial.step_size;
  // dual averaging state
  const double mu_da = std::log(10.0 * initial.step_size);
  double h_bar = 0.0, log_step_bar = std::log(initial.step_size);
  constexpr double gamma = 0.05, t0 = 10.0, kappa = 0.75;

  int accepted_post = 0, proposals_post = 0;
  for (int iter = 0; iter < iterations; ++iter) {
    Eigen::VectorXd p(plen);
    for (Eigen::Index i = 0; i < plen; ++i) p[i] = normal(rng);
    const double h0 = -here.value + 0.5 * p.squaredNorm();

    Eigen::VectorXd q_new = q;
    WhitenedEval e_new = here;
    Eigen::VectorXd p_new = p + 0.5 * step * grad_of(e_new);
    bool divergent = false;
    for (int l = 0; l < initial.num_leapfrog; ++l) {
      q_new += step * p_new;
      if (!q_new.allFinite()) {
        divergent = true;
        break;
      }
      e_new = eval_at(q_new, scratch);
      if (!e_new.finite) {
        divergent = true;
        break;
      }
      p_new += (l + 1 == initial.num_leapfrog ? 0.5 : 1.0) * step * grad_of(e_new);
    }

    double accept_prob = 0.0;
    bool accept = false;
    if (!divergent) {
      const double h1 = -e_new.value + 0.5 * p_new.squaredNorm();
      if (std::isfinite(h1)) {
        accept_prob = std::min(1.0, std::exp(h0 - h1));
        accept = std::log(std::max(unif(rng), 1e-300)) < h0 - h1;
      } else {
        divergent = true;
      }
    }
    if (divergent) chain.divergences += 1;
    if (accept) {
      q = q_new;
      here = e_new;
    }

    if (iter < chain.warmup) {
      if (settings.adapt_step_size) {
        const double m = double(iter + 1);
        h_bar = (1.0 - 1.0 / (m + t0)) * h_bar +
                (settings.target_acceptance - accept_prob) / (m + t0);
        const double log_step = mu_da - std::sqrt(m) / gamma * h_bar;
        const double w = std::pow(m, -kappa);
        log_step_bar = w * log_step + (1.0 - w) * log_step_bar;
        step = std::exp(log_step);
      }
      if (iter + 1 == chain.warmup && settings.adapt_step_size) step = std::exp(log_step_bar);
    } else {
      proposals_post += 1;
      accepted_post += accept ? 1 : 0;
      current.v = q.head(vlen);
      if (hlen > 0) current.hyper = q.tail(hlen);
      current.step_size = step;
      current.num_leapfrog = initial.num_leapfrog;
      chain.states.push_back(current);
    }
  }
  chain.acceptance_rate = proposals_post > 0 ? double(accepted_post) / proposals_post : 0.0;
  chain.step_size = step;
  return chain;
}

// One chain per worker thread; chains share the immutable target and draw
// their randomness from per-chain substreams of the seed.
template <class Target>
[[nodiscard]] std::vector<HmcChain> hmc_sample_chains(const WhitenedState& initial,
                                                      const Target& target, int iterations,
                                                      int num_chains, std::uint64_t seed,
                                                      const HmcSettings& settings = {}) {
  if (num_chains <= 0) throw std::invalid_argument("hmc_sample_chains: needs at least one chain");
  std::vector<HmcChain> out(static_cast<std::size_t>(num_chains));
  std::atomic<int> next{0};
  const int workers = std::min<int>(int(worker_count()), num_chains);
  std::vector<std::thread> pool;
  pool.reserve(std::size_t(workers));
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (int c = next.fetch_add(1); c < num_chains; c = next.fetch_add(1))
        out[std::size_t(c)] = hmc_sample(
            initial, target, iterations,
            substream_seed(seed, "chain-" + std::to_string(c)), settings);
    });
  for (auto& t : pool) t.join();
  return out;
}

}  // namespace vffgp
