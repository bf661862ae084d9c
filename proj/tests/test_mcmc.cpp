#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <algorithm>
#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "helpers.hpp"
#include "oracles.hpp"
#include "vffgp/errors.hpp"
#include "vffgp/gp_regression.hpp"
#include "vffgp/lgcp.hpp"
#include "vffgp/multidim.hpp"
#include "vffgp/rng.hpp"
#include "vffgp/whitened_hmc.hpp"

using vffgp::FourierBasis;
using vffgp::HmcSettings;
using vffgp::Likelihood;
using vffgp::MaternKernel;
using vffgp::MaternOrder;
using vffgp::ModelDimension;
using vffgp::ProductModel;
using vffgp::WhitenedState;
using vffgp::WhitenedTarget;

namespace {

ModelDimension dim_of(MaternOrder order, double variance, double lengthscale, double a, double b,
                      int m) {
  return ModelDimension{MaternKernel(order, variance, lengthscale), FourierBasis(a, b, m)};
}

Eigen::VectorXd normal_draw(std::uint64_t seed, const char* name, Eigen::Index n,
                            double scale = 1.0) {
  auto rng = vffgp::make_rng(seed, name);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd out(n);
  for (Eigen::Index i = 0; i < n; ++i) out[i] = scale * normal(rng);
  return out;
}

Eigen::VectorXd gp_draw(std::uint64_t seed, const MaternKernel& kernel, const Eigen::VectorXd& x) {
  const Eigen::MatrixXd gram =
      oracles::kernel_gram(kernel, x) + 1e-10 * Eigen::MatrixXd::Identity(x.size(), x.size());
  const Eigen::VectorXd z = normal_draw(seed, "draw", x.size());
  return Eigen::LLT<Eigen::MatrixXd>(gram).matrixL() * z;
}

// every coordinate of grad_v and grad_hyper against a central difference
void require_whitened_gradients(const WhitenedTarget& target, const WhitenedState& state,
                                double tol = 1e-4) {
  const auto e0 = target.log_target(state);
  REQUIRE(e0.finite);
  const Eigen::Index vl = state.v.size(), hl = state.hyper.size();
  REQUIRE(e0.grad_v.size() == vl);
  REQUIRE(e0.grad_hyper.size() == hl);
  for (Eigen::Index j = 0; j < vl + hl; ++j) {
    const double base = j < vl ? state.v[j] : state.hyper[j - vl];
    const double fd = oracles::central_diff(
        [&](double t) {
          WhitenedState s = state;
          (j < vl ? s.v[j] : s.hyper[j - vl]) = t;
          return target.log_target(s).value;
        },
        base, 1e-5);
    const double got = j < vl ? e0.grad_v[j] : e0.grad_hyper[j - vl];
    REQUIRE_THAT(got, Catch::Matchers::WithinAbs(fd, tol * std::max(1.0, std::abs(fd))));
  }
}

double gaussian_logpdf(const Eigen::VectorXd& u, const Eigen::VectorXd& mean,
                       const Eigen::MatrixXd& cov_factor) {
  const Eigen::VectorXd w = cov_factor.triangularView<Eigen::Lower>().solve(u - mean);
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < cov_factor.rows(); ++i) logdet += std::log(cov_factor(i, i));
  return -0.5 * w.squaredNorm() - logdet -
         0.5 * double(u.size()) * std::log(2.0 * std::numbers::pi);
}

// Kolmogorov-Smirnov distance against the standard normal
double ks_distance(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const double n = double(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double cdf = 0.5 * std::erfc(-xs[i] / std::numbers::sqrt2);
    d = std::max(d, std::max(cdf - double(i) / n, double(i + 1) / n - cdf));
  }
  return d;
}

// isotropic standard normal over v with no hyperparameters; exercises the
// sampler through the same interface as the real targets
struct StdNormalTarget {
  Eigen::Index dim = 2;

  [[nodiscard]] vffgp::WhitenedEval log_target(const WhitenedState& s) const {
    vffgp::WhitenedEval e;
    e.v_prior = -0.5 * s.v.squaredNorm() - 0.5 * double(dim) * std::log(2.0 * std::numbers::pi);
    e.value = e.v_prior;
    e.grad_v = -s.v;
    e.grad_hyper = Eigen::VectorXd::Zero(s.hyper.size());
    return e;
  }
};

}  // namespace

TEST_CASE("structured square root reproduces Kuu over many whitened draws") {
  const auto dim = dim_of(MaternOrder::three_halves, 1.3, 0.3, 0.0, 1.0, 2);
  const auto kuu = vffgp::build_kuu(dim.basis, dim.kernel);
  const auto sqrt = vffgp::structured_sqrt(kuu);
  const Eigen::Index k = kuu.size(), len = sqrt.cols();
  REQUIRE(len == k + kuu.rank());

  auto rng = vffgp::make_rng(5, "whiten");
  std::normal_distribution<double> normal(0.0, 1.0);
  const int draws = 1000000;
  Eigen::VectorXd v(len), mean = Eigen::VectorXd::Zero(k);
  Eigen::MatrixXd second = Eigen::MatrixXd::Zero(k, k);
  for (int i = 0; i < draws; ++i) {
    for (Eigen::Index j = 0; j < len; ++j) v[j] = normal(rng);
    const Eigen::VectorXd u = sqrt.apply(v);
    mean += u;
    second.noalias() += u * u.transpose();
  }
  mean /= double(draws);
  const Eigen::MatrixXd emp = second / double(draws) - mean * mean.transpose();
  const Eigen::MatrixXd want = kuu.to_dense();
  REQUIRE((emp - want).norm() / want.norm() < 0.05);
}

TEST_CASE("target reconstruction applies the square root of Kuu") {
  const auto dim = dim_of(MaternOrder::five_halves, 0.8, 0.25, -0.2, 1.2, 2);
  Eigen::VectorXd x(4), y(4);
  x << 0.1, 0.4, 0.7, 1.0;
  y << 0.3, -0.1, 0.4, 0.2;
  const WhitenedTarget target(dim.basis, dim.kernel, Likelihood::gaussian(0.1), x, y);

  WhitenedState state = target.initial_state();
  state.v = normal_draw(17, "v", target.whitened_length());
  const auto sqrt = vffgp::structured_sqrt(vffgp::build_kuu(dim.basis, dim.kernel));
  const Eigen::VectorXd want = sqrt.apply(state.v);
  const Eigen::VectorXd got = target.reconstruct(state);
  REQUIRE(got.size() == target.feature_count());
  REQUIRE((got - want).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("whitened prior term at v equal to zero") {
  const auto dim = dim_of(MaternOrder::three_halves, 1.0, 0.3, 0.0, 1.0, 3);
  Eigen::VectorXd x(3), y(3);
  x << 0.2, 0.5, 0.8;
  y << 1.0, -1.0, 0.5;
  const WhitenedTarget target(dim.basis, dim.kernel, Likelihood::gaussian(0.2), x, y);

  const WhitenedState state = target.initial_state();
  REQUIRE(state.v.size() == target.whitened_length());
  const auto eval = target.log_target(state);
  REQUIRE(eval.finite);

  const double want_prior =
      -0.5 * double(state.v.size()) * std::log(2.0 * std::numbers::pi);
  REQUIRE_THAT(eval.v_prior, Catch::Matchers::WithinRel(want_prior, 1e-14));

  const double want_hyper = -state.hyper.squaredNorm() / 18.0 -
                            0.5 * double(state.hyper.size()) *
                                std::log(2.0 * std::numbers::pi * 9.0);
  REQUIRE_THAT(eval.hyper_prior, Catch::Matchers::WithinRel(want_hyper, 1e-12));
  REQUIRE_THAT(eval.value, Catch::Matchers::WithinRel(
                               eval.data_term + eval.v_prior + eval.hyper_prior, 1e-12));
}

TEST_CASE("conditional moments match a dense reference") {
  const ProductModel model({dim_of(MaternOrder::three_halves, 1.1, 0.35, 0.1, 0.9, 2),
                            dim_of(MaternOrder::half, 0.7, 0.3, 0.0, 1.0, 1)});
  Eigen::MatrixXd x(5, 2);
  x << 0.2, 0.3, 0.5, 0.8, 0.04, 0.6, 0.9, 0.95, 0.4, 0.1;
  Eigen::VectorXd y(5);
  y << 1, 0, 2, 1, 0;
  const WhitenedTarget target(model, Likelihood::poisson_count(0.1), x, y);

  WhitenedState state = target.initial_state();
  state.v = normal_draw(23, "v", target.whitened_length(), 0.8);
  const auto mom = target.conditional_moments(state);

  const Eigen::MatrixXd kuu = vffgp::product_kuu_dense(model);
  const Eigen::VectorXd u = target.reconstruct(state);
  const Eigen::LLT<Eigen::MatrixXd> llt(kuu);
  const Eigen::VectorXd a = llt.solve(u);
  const double knn = model.marginal_variance();
  for (Eigen::Index n = 0; n < y.size(); ++n) {
    const Eigen::VectorXd phi = vffgp::feature_vector(model, x.row(n).transpose());
    REQUIRE_THAT(mom.mean[n], Catch::Matchers::WithinAbs(phi.dot(a), 1e-10));
    const double want_var = std::max(knn - phi.dot(llt.solve(phi)), 0.0);
    REQUIRE_THAT(mom.variance[n], Catch::Matchers::WithinAbs(want_var, 1e-10));
  }
}

TEST_CASE("log target gradients match finite differences") {
  SECTION("classification with inputs outside the interval") {
    const auto dim = dim_of(MaternOrder::half, 0.9, 0.3, 0.15, 0.85, 2);
    Eigen::VectorXd x(9), y(9);
    x << 0.02, 0.2, 0.35, 0.45, 0.55, 0.65, 0.8, 0.9, 0.97;
    y << 1, 1, -1, 1, -1, -1, 1, -1, 1;
    const WhitenedTarget target(dim.basis, dim.kernel,
                                Likelihood::bernoulli(vffgp::BernoulliLink::probit), x, y);
    REQUIRE(target.hyperparameter_count() == 2);
    WhitenedState state = target.initial_state();
    state.v = normal_draw(31, "v", target.whitened_length(), 0.7);
    state.hyper[0] += 0.12;
    state.hyper[1] -= 0.2;
    require_whitened_gradients(target, state);
  }

  SECTION("regression with a noise coordinate") {
    const auto dim = dim_of(MaternOrder::three_halves, 0.7, 0.2, 0.1, 0.9, 2);
    Eigen::VectorXd x(7), y(7);
    x << 0.03, 0.2, 0.4, 0.5, 0.7, 0.85, 0.98;
    y << 0.4, -0.2, 0.1, 0.6, -0.5, 0.2, 0.3;
    const WhitenedTarget target(dim.basis, dim.kernel, Likelihood::gaussian(0.09), x, y);
    REQUIRE(target.hyperparameter_count() == 3);
    WhitenedState state = target.initial_state();
    state.v = normal_draw(37, "v", target.whitened_length(), 0.6);
    state.hyper[0] -= 0.1;
    state.hyper[1] += 0.15;
    state.hyper[2] += 0.2;
    require_whitened_gradients(target, state);
  }

  SECTION("counts on a two-dimensional product model") {
    const ProductModel model({dim_of(MaternOrder::three_halves, 1.1, 0.35, 0.1, 0.9, 2),
                              dim_of(MaternOrder::five_halves, 0.8, 0.3, 0.05, 0.95, 1)});
    Eigen::MatrixXd x(8, 2);
    x << 0.2, 0.3, 0.5, 0.8, 0.02, 0.6, 0.9, 0.97, 0.4, 0.1, 0.7, 0.5, 0.98, 0.02, 0.15, 0.75;
    Eigen::VectorXd y(8);
    y << 1, 0, 2, 1, 0, 3, 1, 0;
    const WhitenedTarget target(model, Likelihood::poisson_count(0.05, -0.1), x, y);
    REQUIRE(target.hyperparameter_count() == 5);
    WhitenedState state = target.initial_state();
    state.v = normal_draw(41, "v", target.whitened_length(), 0.5);
    state.hyper += normal_draw(43, "h", 5, 0.1);
    require_whitened_gradients(target, state);
  }
}

TEST_CASE("Gaussian log target equals the closed-form posterior up to a constant") {
  const auto dim = dim_of(MaternOrder::three_halves, 0.7, 0.22, 0.1, 0.9, 2);
  const double noise = 0.05;
  Eigen::VectorXd x(14);
  x << 0.02, 0.1, 0.18, 0.25, 0.33, 0.4, 0.48, 0.55, 0.62, 0.7, 0.78, 0.85, 0.93, 0.99;
  const Eigen::VectorXd f = gp_draw(7, dim.kernel, x);
  const Eigen::VectorXd y = f + normal_draw(9, "noise", x.size(), std::sqrt(noise));

  const auto stats = vffgp::accumulate_stats(dim.basis, dim.kernel, x, y, true);
  const auto posterior = vffgp::optimal_posterior(stats, vffgp::build_kuu(dim.basis, dim.kernel),
                                                  vffgp::GaussianLikelihood(noise));

  const WhitenedTarget target(dim.basis, dim.kernel, Likelihood::gaussian(noise), x, y);
  const auto kuu = vffgp::build_kuu(dim.basis, dim.kernel);
  const Eigen::MatrixXd r = vffgp::structured_sqrt(kuu).to_dense();
  const Eigen::MatrixXd kuu_dense = kuu.to_dense();
  const Eigen::LLT<Eigen::MatrixXd> llt(kuu_dense);

  // the square root is wider than Kuu, so compare on the row space of R where
  // v determines u without a leftover null component
  WhitenedState state = target.initial_state();
  std::vector<double> diffs;
  for (int i = 0; i < 8; ++i) {
    const Eigen::VectorXd v = normal_draw(100 + std::uint64_t(i), "v", r.cols());
    state.v = r.transpose() * llt.solve(r * v);
    const auto eval = target.log_target(state);
    REQUIRE(eval.finite);
    const double closed = gaussian_logpdf(r * state.v, posterior.mean, posterior.cov_factor);
    diffs.push_back(eval.value - closed);
  }
  const auto [lo, hi] = std::minmax_element(diffs.begin(), diffs.end());
  REQUIRE(*hi - *lo < 1e-7);
}

TEST_CASE("zero iterations returns the initial state unchanged") {
  const auto dim = dim_of(MaternOrder::three_halves, 1.0, 0.3, 0.0, 1.0, 2);
  Eigen::VectorXd x(3), y(3);
  x << 0.2, 0.5, 0.8;
  y << 0.1, -0.4, 0.3;
  const WhitenedTarget target(dim.basis, dim.kernel, Likelihood::gaussian(0.1), x, y);
  WhitenedState initial = target.initial_state();
  initial.v = normal_draw(3, "v", target.whitened_length());

  const auto chain = vffgp::hmc_sample(initial, target, 0, 42);
  REQUIRE(chain.states.size() == 1);
  REQUIRE(chain.states[0].v == initial.v);
  REQUIRE(chain.states[0].hyper == initial.hyper);
  REQUIRE(chain.acceptance_rate == 0.0);
  REQUIRE(chain.divergences == 0);
  REQUIRE(chain.step_size == initial.step_size);
}

TEST_CASE("sampler input validation") {
  const auto dim = dim_of(MaternOrder::three_halves, 1.0, 0.3, 0.0, 1.0, 2);
  Eigen::VectorXd x(3), y(3);
  x << 0.2, 0.5, 0.8;
  y << 0.1, -0.4, 0.3;
  const WhitenedTarget target(dim.basis, dim.kernel, Likelihood::gaussian(0.1), x, y);
  const WhitenedState initial = target.initial_state();

  SECTION("wrong whitened length") {
    WhitenedState bad = initial;
    bad.v = Eigen::VectorXd::Zero(initial.v.size() + 1);
    REQUIRE_THROWS_AS(target.log_target(bad), std::invalid_argument);
  }
  SECTION("wrong hyperparameter count") {
    WhitenedState bad = initial;
    bad.hyper = Eigen::VectorXd::Zero(1);
    REQUIRE_THROWS_AS(target.log_target(bad), std::invalid_argument);
  }
  SECTION("non-finite state evaluates to minus infinity") {
    WhitenedState bad = initial;
    bad.v[0] = std::numeric_limits<double>::quiet_NaN();
    const auto eval = target.log_target(bad);
    REQUIRE_FALSE(eval.finite);
    REQUIRE(eval.value == -std::numeric_limits<double>::infinity());
    REQUIRE(eval.grad_v.size() == initial.v.size());
  }
  SECTION("sampler rejects bad settings") {
    REQUIRE_THROWS_AS(vffgp::hmc_sample(initial, target, -1, 1), std::invalid_argument);
    WhitenedState bad = initial;
    bad.step_size = 0.0;
    REQUIRE_THROWS_AS(vffgp::hmc_sample(bad, target, 10, 1), std::invalid_argument);
    bad = initial;
    bad.num_leapfrog = 0;
    REQUIRE_THROWS_AS(vffgp::hmc_sample(bad, target, 10, 1), std::invalid_argument);
    REQUIRE_THROWS_AS(vffgp::hmc_sample_chains(initial, target, 10, 0, 1),
                      std::invalid_argument);
  }
  SECTION("non-finite initial state refuses to sample") {
    WhitenedState bad = initial;
    bad.hyper[0] = 900.0;  // variance overflows to infinity
    REQUIRE_THROWS_AS(vffgp::hmc_sample(bad, target, 10, 1), vffgp::numerical_error);
  }
  SECTION("target validation") {
    REQUIRE_THROWS_AS(WhitenedTarget(dim.basis, dim.kernel, Likelihood::gaussian(0.1), x,
                                     Eigen::VectorXd::Zero(2)),
                      std::invalid_argument);
    Eigen::VectorXd bad_x = x;
    bad_x[1] = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_AS(WhitenedTarget(dim.basis, dim.kernel, Likelihood::gaussian(0.1), bad_x, y),
                      vffgp::data_error);
    const std::vector<std::string> names = target.hyperparameter_names();
    REQUIRE(names ==
            std::vector<std::string>{"log_variance_0", "log_lengthscale_0", "log_noise"});
  }
}

TEST_CASE("chain marginals on a standard normal pass a KS test") {
  StdNormalTarget target;
  WhitenedState initial;
  initial.v = Eigen::VectorXd::Zero(2);
  initial.hyper = Eigen::VectorXd(0);
  initial.step_size = 0.2;

  const int iterations = 100000;
  const auto chain = vffgp::hmc_sample(initial, target, iterations, 99);
  REQUIRE(chain.warmup == 20000);
  REQUIRE(Eigen::Index(chain.states.size()) == iterations - chain.warmup);
  REQUIRE(chain.acceptance_rate > 0.5);
  REQUIRE(chain.acceptance_rate < 0.95);
  REQUIRE(chain.divergences == 0);

  for (Eigen::Index coord = 0; coord < 2; ++coord) {
    std::vector<double> xs;
    for (std::size_t i = 0; i < chain.states.size(); i += 100)
      xs.push_back(chain.states[i].v[coord]);
    const double crit = 1.6276 / std::sqrt(double(xs.size()));
    REQUIRE(ks_distance(xs) < crit);
  }
}

TEST_CASE("fixed-hyperparameter chain matches the closed-form moments") {
  const auto dim = dim_of(MaternOrder::three_halves, 0.6, 0.25, 0.05, 0.95, 5);
  const double noise = 0.04;
  Eigen::VectorXd x(25);
  for (Eigen::Index i = 0; i < 25; ++i) x[i] = double(i) / 24.0;
  const Eigen::VectorXd f = gp_draw(19, dim.kernel, x);
  const Eigen::VectorXd y = f + normal_draw(21, "noise", x.size(), std::sqrt(noise));

  const auto stats = vffgp::accumulate_stats(dim.basis, dim.kernel, x, y, true);
  const auto kuu = vffgp::build_kuu(dim.basis, dim.kernel);
  const auto posterior =
      vffgp::optimal_posterior(stats, kuu, vffgp::GaussianLikelihood(noise));
  const Eigen::MatrixXd want_cov =
      posterior.cov_factor * posterior.cov_factor.transpose();

  const WhitenedTarget target(dim.basis, dim.kernel, Likelihood::gaussian(noise), x, y);
  HmcSettings settings;
  settings.sample_hyperparameters = false;
  const int iterations = 20000;
  const auto chain = vffgp::hmc_sample(target.initial_state(), target, iterations, 4, settings);
  REQUIRE(chain.acceptance_rate > 0.5);
  REQUIRE(chain.acceptance_rate < 0.95);

  // reconstruct u = R v per draw; hyperparameters are fixed so one square
  // root serves the whole chain
  const auto sqrt = vffgp::structured_sqrt(kuu);
  const Eigen::Index k = kuu.size();
  const Eigen::Index kept = Eigen::Index(chain.states.size());
  const Eigen::Index batches = 40, per_batch = kept / batches;
  std::vector<Eigen::VectorXd> batch_mean(std::size_t(batches), Eigen::VectorXd::Zero(k));
  std::vector<Eigen::MatrixXd> batch_cov(std::size_t(batches), Eigen::MatrixXd::Zero(k, k));
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(k);
  Eigen::MatrixXd second = Eigen::MatrixXd::Zero(k, k);
  for (Eigen::Index i = 0; i < batches * per_batch; ++i) {
    const Eigen::VectorXd u = sqrt.apply(chain.states[std::size_t(i)].v);
    const std::size_t b = std::size_t(i / per_batch);
    batch_mean[b] += u;
    batch_cov[b].noalias() += u * u.transpose();
    mean += u;
    second.noalias() += u * u.transpose();
  }
  const double total = double(batches * per_batch);
  mean /= total;
  const Eigen::MatrixXd got_cov = second / total - mean * mean.transpose();
  for (auto& m : batch_mean) m /= double(per_batch);
  for (std::size_t b = 0; b < batch_cov.size(); ++b)
    batch_cov[b] = batch_cov[b] / double(per_batch) -
                   batch_mean[b] * batch_mean[b].transpose();

  // batch means absorb the autocorrelation into the standard error estimate
  Eigen::VectorXd se_mean = Eigen::VectorXd::Zero(k);
  Eigen::MatrixXd se_cov = Eigen::MatrixXd::Zero(k, k);
  for (std::size_t b = 0; b < batch_mean.size(); ++b) {
    se_mean.array() += (batch_mean[b] - mean).array().square();
    se_cov.array() += (batch_cov[b] - got_cov).array().square();
  }
  se_mean = (se_mean / double(batches - 1)).cwiseSqrt() / std::sqrt(double(batches));
  se_cov = (se_cov / double(batches - 1)).cwiseSqrt() / std::sqrt(double(batches));

  for (Eigen::Index i = 0; i < k; ++i)
    REQUIRE(std::abs(mean[i] - posterior.mean[i]) < 3.0 * se_mean[i] + 1e-10);
  REQUIRE((got_cov - want_cov).norm() < 3.0 * se_cov.norm() + 1e-10);

  // hyperparameters never moved
  for (const auto& s : chain.states) REQUIRE(s.hyper == chain.states[0].hyper);
}

TEST_CASE("chains are deterministic in the seed") {
  const auto dim = dim_of(MaternOrder::three_halves, 0.8, 0.3, 0.1, 0.9, 2);
  Eigen::VectorXd x(6), y(6);
  x << 0.1, 0.25, 0.4, 0.6, 0.75, 0.9;
  y << 0.2, -0.1, 0.3, 0.5, -0.4, 0.1;
  const WhitenedTarget target(dim.basis, dim.kernel, Likelihood::gaussian(0.1), x, y);
  const WhitenedState initial = target.initial_state();

  const auto a = vffgp::hmc_sample(initial, target, 150, 7);
  const auto b = vffgp::hmc_sample(initial, target, 150, 7);
  REQUIRE(a.states.size() == b.states.size());
  REQUIRE(a.states.back().v == b.states.back().v);
  REQUIRE(a.states.back().hyper == b.states.back().hyper);
  REQUIRE(a.acceptance_rate == b.acceptance_rate);
  REQUIRE(a.step_size == b.step_size);

  const auto c = vffgp::hmc_sample(initial, target, 150, 8);
  REQUIRE(a.states.back().v != c.states.back().v);
}

TEST_CASE("divergent trajectories are counted and rejected") {
  const auto dim = dim_of(MaternOrder::three_halves, 0.8, 0.3, 0.1, 0.9, 2);
  Eigen::VectorXd x(4), y(4);
  x << 0.2, 0.4, 0.6, 0.8;
  y << 0.1, -0.2, 0.3, 0.0;
  const WhitenedTarget target(dim.basis, dim.kernel, Likelihood::gaussian(0.1), x, y);
  WhitenedState initial = target.initial_state();
  initial.step_size = 1000.0;  // the first leapfrog jump overflows the hyperparameters

  HmcSettings settings;
  settings.adapt_step_size = false;
  const auto chain = vffgp::hmc_sample(initial, target, 50, 12, settings);
  REQUIRE(chain.divergences > 0);
  REQUIRE(chain.warmup == 10);
  REQUIRE(chain.states.size() == 40);
  for (const auto& s : chain.states) REQUIRE(s.v.allFinite());
}

TEST_CASE("parallel chains reproduce serial runs chain by chain") {
  const auto dim = dim_of(MaternOrder::three_halves, 0.8, 0.3, 0.1, 0.9, 2);
  Eigen::VectorXd x(5), y(5);
  x << 0.1, 0.3, 0.5, 0.7, 0.9;
  y << 0.4, -0.1, 0.2, -0.3, 0.5;
  const WhitenedTarget target(dim.basis, dim.kernel, Likelihood::gaussian(0.08), x, y);
  const WhitenedState initial = target.initial_state();

  const auto chains = vffgp::hmc_sample_chains(initial, target, 120, 3, 77);
  REQUIRE(chains.size() == 3);
  for (int c = 0; c < 3; ++c) {
    const auto serial = vffgp::hmc_sample(initial, target, 120,
                                          vffgp::substream_seed(77, "chain-" + std::to_string(c)));
    REQUIRE(chains[std::size_t(c)].states.back().v == serial.states.back().v);
    REQUIRE(chains[std::size_t(c)].states.back().hyper == serial.states.back().hyper);
    REQUIRE(chains[std::size_t(c)].acceptance_rate == serial.acceptance_rate);
  }
  REQUIRE(chains[0].states.back().v != chains[1].states.back().v);
}

TEST_CASE("event binning conserves counts and respects edges") {
  SECTION("total count is conserved on a two-dimensional grid") {
    auto rng = vffgp::make_rng(3, "events");
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    Eigen::MatrixXd events(127, 2);
    for (Eigen::Index i = 0; i < events.rows(); ++i)
      for (Eigen::Index j = 0; j < 2; ++j) events(i, j) = unif(rng);
    const auto model = vffgp::lgcp_model(events, {32, 32}, Eigen::VectorXd::Zero(2),
                                         Eigen::VectorXd::Ones(2), vffgp::lgcp_dimensions(2, 4));
    REQUIRE(model.counts.size() == 1024);
    REQUIRE(model.counts.sum() == 127.0);
    REQUIRE(model.centers.rows() == 1024);
    REQUIRE_THAT(model.bin_area, Catch::Matchers::WithinRel(1.0 / 1024.0, 1e-15));
  }
  SECTION("an interior edge belongs to the lower bin") {
    Eigen::MatrixXd events(3, 1);
    events << 0.5, 0.0, 1.0;
    const auto model = vffgp::lgcp_model(events, {2}, Eigen::VectorXd::Zero(1),
                                         Eigen::VectorXd::Ones(1), vffgp::lgcp_dimensions(1, 3));
    REQUIRE(model.counts[0] == 2.0);  // 0.5 and 0.0
    REQUIRE(model.counts[1] == 1.0);  // 1.0
  }
  SECTION("the flat index varies fastest in the last dimension") {
    Eigen::MatrixXd events(2, 2);
    events << 0.1, 0.9, 0.9, 0.1;
    const auto model = vffgp::lgcp_model(events, {2, 2}, Eigen::VectorXd::Zero(2),
                                         Eigen::VectorXd::Ones(2), vffgp::lgcp_dimensions(2, 2));
    REQUIRE(model.counts[1] == 1.0);  // (0.1, 0.9)
    REQUIRE(model.counts[2] == 1.0);  // (0.9, 0.1)
    REQUIRE_THAT(model.centers(1, 0), Catch::Matchers::WithinRel(0.25, 1e-15));
    REQUIRE_THAT(model.centers(1, 1), Catch::Matchers::WithinRel(0.75, 1e-15));
  }
  SECTION("domains with general bounds are normalized") {
    Eigen::MatrixXd events(1, 1);
    events << 3.5;
    Eigen::VectorXd lo(1), hi(1);
    lo << 2.0;
    hi << 6.0;
    const auto model =
        vffgp::lgcp_model(events, {4}, lo, hi, vffgp::lgcp_dimensions(1, 2));
    REQUIRE(model.counts[1] == 1.0);  // (3.5 - 2) / 4 = 0.375 lands in bin 1
  }
  SECTION("bad input throws") {
    Eigen::MatrixXd events(1, 1);
    events << 1.2;
    REQUIRE_THROWS_AS(vffgp::lgcp_model(events, {4}, Eigen::VectorXd::Zero(1),
                                        Eigen::VectorXd::Ones(1), vffgp::lgcp_dimensions(1, 2)),
                      vffgp::data_error);
    events << 0.5;
    REQUIRE_THROWS_AS(vffgp::lgcp_model(events, {4, 4}, Eigen::VectorXd::Zero(1),
                                        Eigen::VectorXd::Ones(1), vffgp::lgcp_dimensions(1, 2)),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(vffgp::lgcp_model(events, {0}, Eigen::VectorXd::Zero(1),
                                        Eigen::VectorXd::Ones(1), vffgp::lgcp_dimensions(1, 2)),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(vffgp::lgcp_model(events, {4}, Eigen::VectorXd::Ones(1),
                                        Eigen::VectorXd::Ones(1), vffgp::lgcp_dimensions(1, 2)),
                      std::invalid_argument);
  }
}

TEST_CASE("zero-event grid with unit rate per bin") {
  const Eigen::MatrixXd events(0, 1);
  const auto model = vffgp::lgcp_model(events, {8}, Eigen::VectorXd::Zero(1),
                                       Eigen::VectorXd::Ones(1), vffgp::lgcp_dimensions(1, 3));
  REQUIRE(model.counts.size() == 8);
  REQUIRE(model.counts.sum() == 0.0);

  // exp(f + offset) * bin_area = 1 in every bin
  const double offset = 0.7;
  const auto lik = Likelihood::poisson_count(model.bin_area, offset);
  const double f = -std::log(model.bin_area) - offset;
  double total = 0.0;
  for (Eigen::Index i = 0; i < model.counts.size(); ++i)
    total += lik.log_density(model.counts[i], f);
  REQUIRE_THAT(total, Catch::Matchers::WithinRel(-8.0, 1e-12));
}

TEST_CASE("short and long chains agree on the intensity surface") {
  // events from a smooth intensity on [0, 1] via thinning
  auto rng = vffgp::make_rng(29, "events");
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> accepted;
  const double lam_max = std::exp(3.5);
  const int candidates = 40;
  for (int i = 0; i < candidates; ++i) {
    const double t = unif(rng);
    const double lam = std::exp(2.0 + 1.5 * std::sin(2.0 * std::numbers::pi * t));
    if (unif(rng) * lam_max < lam) accepted.push_back(t);
  }
  Eigen::MatrixXd events(Eigen::Index(accepted.size()), 1);
  for (Eigen::Index i = 0; i < events.rows(); ++i) events(i, 0) = accepted[std::size_t(i)];
  REQUIRE(events.rows() > 5);

  const auto model = vffgp::lgcp_model(events, {16}, Eigen::VectorXd::Zero(1),
                                       Eigen::VectorXd::Ones(1),
                                       vffgp::lgcp_dimensions(1, 6, 1.0, 0.25));
  const double offset = std::log(double(events.rows()) + 1.0);
  const auto target = vffgp::whitened_target(model, offset);
  const WhitenedState initial = target.initial_state();

  const auto short_chain = vffgp::hmc_sample(initial, target, 2000, 11);
  const auto long_chain = vffgp::hmc_sample(initial, target, 20000, 13);
  REQUIRE(short_chain.acceptance_rate > 0.4);
  REQUIRE(long_chain.acceptance_rate > 0.4);

  auto mean_log_intensity = [&](const std::vector<WhitenedState>& states, std::size_t stride,
                                std::vector<Eigen::VectorXd>* batches, std::size_t num_batches) {
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(model.counts.size());
    std::size_t used = 0;
    std::vector<Eigen::VectorXd> partial(
        num_batches, Eigen::VectorXd::Zero(model.counts.size()));
    std::vector<std::size_t> counts(num_batches, 0);
    for (std::size_t i = 0; i < states.size(); i += stride) {
      const Eigen::VectorXd lam = vffgp::intensity_draw(target, states[i]).array().log();
      acc += lam;
      const std::size_t b = std::min(i * num_batches / states.size(), num_batches - 1);
      partial[b] += lam;
      counts[b] += 1;
      used += 1;
    }
    acc /= double(used);
    if (batches) {
      batches->clear();
      for (std::size_t b = 0; b < num_batches; ++b)
        batches->push_back(partial[b] / double(std::max<std::size_t>(counts[b], 1)));
    }
    return acc;
  };

  std::vector<Eigen::VectorXd> short_batches;
  const Eigen::VectorXd short_mean =
      mean_log_intensity(short_chain.states, 8, &short_batches, 10);
  const Eigen::VectorXd long_mean = mean_log_intensity(long_chain.states, 8, nullptr, 1);

  Eigen::VectorXd se = Eigen::VectorXd::Zero(model.counts.size());
  for (const auto& b : short_batches) se.array() += (b - short_mean).array().square();
  se = (se / double(short_batches.size() - 1)).cwiseSqrt() /
       std::sqrt(double(short_batches.size()));

  double mean_abs = 0.0;
  for (Eigen::Index i = 0; i < short_mean.size(); ++i) {
    const double diff = std::abs(short_mean[i] - long_mean[i]);
    REQUIRE(diff < 6.0 * se[i] + 0.05);
    mean_abs += diff;
  }
  REQUIRE(mean_abs / double(short_mean.size()) < 0.1);

  // the joint chain explores the hyperparameters, not just v
  double len_var = 0.0, len_mean = 0.0;
  for (const auto& s : long_chain.states) len_mean += s.hyper[1];
  len_mean /= double(long_chain.states.size());
  for (const auto& s : long_chain.states) {
    const double d = s.hyper[1] - len_mean;
    len_var += d * d;
  }
  REQUIRE(len_var / double(long_chain.states.size()) > 1e-6);
}
