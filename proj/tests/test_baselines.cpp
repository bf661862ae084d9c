#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "oracles.hpp"
#include "vffgp/baselines.hpp"
#include "vffgp/errors.hpp"
#include "vffgp/fourier_basis.hpp"
#include "vffgp/matern.hpp"

using vffgp::FourierBasis;
using vffgp::GaussianLikelihood;
using vffgp::MaternKernel;
using vffgp::MaternOrder;

namespace {

// Kolmogorov-Smirnov distance of sorted samples against an arbitrary CDF.
double ks_stat(std::vector<double> samples, const std::function<double(double)>& cdf) {
  std::sort(samples.begin(), samples.end());
  const double n = double(samples.size());
  double d = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double f = cdf(samples[i]);
    d = std::max(d, std::abs(f - double(i) / n));
    d = std::max(d, std::abs(f - double(i + 1) / n));
  }
  return d;
}

// One-dimensional L2 projection integral: integral over [a,b] of k(s,x)*g(s).
// The kernel slice has a kink at s=x, so the range is split there when x lies
// inside.
double projection_integral(const MaternKernel& kernel, double x,
                           const std::function<double(double)>& g, double a, double b) {
  using gk = boost::math::quadrature::gauss_kronrod<double, 61>;
  const auto f = [&](double s) { return vffgp::kernel_eval(kernel, std::abs(s - x)) * g(s); };
  if (x <= a || x >= b) return gk::integrate(f, a, b, 12, 1e-11);
  return gk::integrate(f, a, x, 12, 1e-11) + gk::integrate(f, x, b, 12, 1e-11);
}

std::function<double(double)> trig_curve(const FourierBasis& basis, int index) {
  const int m = basis.num_frequencies;
  if (index == 0) return [](double) { return 1.0; };
  if (index <= m) {
    const double w = basis.frequencies[index - 1];
    const double a = basis.a;
    return [w, a](double s) { return std::cos(w * (s - a)); };
  }
  const double w = basis.frequencies[index - m - 1];
  const double a = basis.a;
  return [w, a](double s) { return std::sin(w * (s - a)); };
}

// Dense route over the kernel the weight-space model induces, as an
// independent check of the folded 2M x 2M computation.
vffgp::FullGpResult dense_route(const vffgp::WeightSpaceModel& model, const GaussianLikelihood& lik,
                                const Eigen::VectorXd& x, const Eigen::VectorXd& y,
                                const Eigen::VectorXd& xstar) {
  const Eigen::Index n = x.size();
  Eigen::MatrixXd gram(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) gram(i, j) = model.kernel_value(x[i] - x[j]);
  gram.diagonal().array() += lik.noise_variance;
  Eigen::LLT<Eigen::MatrixXd> llt(gram);
  REQUIRE(llt.info() == Eigen::Success);

  vffgp::FullGpResult out;
  const Eigen::VectorXd alpha = llt.solve(y);
  out.log_marginal = -0.5 * y.dot(alpha) - llt.matrixLLT().diagonal().array().log().sum() -
                     0.5 * double(n) * std::log(2.0 * std::numbers::pi);
  out.mean.resize(xstar.size());
  out.variance.resize(xstar.size());
  Eigen::VectorXd ks(n);
  for (Eigen::Index j = 0; j < xstar.size(); ++j) {
    for (Eigen::Index i = 0; i < n; ++i) ks[i] = model.kernel_value(x[i] - xstar[j]);
    out.mean[j] = ks.dot(alpha);
    const Eigen::VectorXd v = llt.matrixL().solve(ks);
    out.variance[j] = model.kernel_value(0.0) - v.squaredNorm();
  }
  return out;
}

}  // namespace

TEST_CASE("random features with all frequencies at zero give a constant kernel") {
  const MaternKernel kernel(MaternOrder::three_halves, 1.7, 0.4);
  auto model = vffgp::rff_model(kernel, 25, 99);
  model.frequencies.setZero();
  for (double r : {0.0, 0.3, 2.5, -4.0})
    CHECK(model.kernel_value(r) == Catch::Approx(1.7).epsilon(1e-12));
}

TEST_CASE("random feature kernels are unbiased at a fixed lag") {
  const double r = 0.5;
  const int num_seeds = 200;
  const int num_freqs = 40;
  for (const auto order : {MaternOrder::half, MaternOrder::three_halves, MaternOrder::five_halves}) {
    const MaternKernel kernel(order, 1.3, 0.7);
    double sum = 0.0, sum_sq = 0.0;
    for (int s = 0; s < num_seeds; ++s) {
      const auto model = vffgp::rff_model(kernel, num_freqs, 1000 + std::uint64_t(s));
      const double value = model.kernel_value(r);
      sum += value;
      sum_sq += value * value;
    }
    const double mean = sum / num_seeds;
    const double var = (sum_sq - num_seeds * mean * mean) / (num_seeds - 1);
    const double se = std::sqrt(var / num_seeds);
    const double exact = vffgp::kernel_eval(kernel, r);
    INFO("order " << int(order) << " mean " << mean << " exact " << exact << " se " << se);
    CHECK(std::abs(mean - exact) < 3.0 * se);
  }
}

TEST_CASE("sampled frequencies follow the spectral distribution") {
  const int n = 20000;
  const double crit = 1.6276 / std::sqrt(double(n));  // 1% level

  SECTION("exponential kernel frequencies are Cauchy") {
    const MaternKernel kernel(MaternOrder::half, 1.0, 0.6);
    const double lam = kernel.lambda();
    const auto model = vffgp::rff_model(kernel, n, 7);
    std::vector<double> w(model.frequencies.data(), model.frequencies.data() + n);
    const double d = ks_stat(std::move(w), [lam](double v) {
      return 0.5 + std::atan(v / lam) / std::numbers::pi;
    });
    CHECK(d < crit);
  }

  SECTION("once-differentiable kernel frequencies are scaled Student-t with three degrees") {
    const MaternKernel kernel(MaternOrder::three_halves, 1.0, 0.6);
    const double scale = kernel.lambda() / std::sqrt(3.0);
    const auto model = vffgp::rff_model(kernel, n, 8);
    std::vector<double> w(model.frequencies.data(), model.frequencies.data() + n);
    const double d = ks_stat(std::move(w), [scale](double v) {
      const double z = v / scale;
      const double u = z / std::sqrt(3.0);
      return 0.5 + (std::atan(u) + u / (1.0 + z * z / 3.0)) / std::numbers::pi;
    });
    CHECK(d < crit);
  }
}

TEST_CASE("frequency draws are deterministic in the seed") {
  const MaternKernel kernel(MaternOrder::five_halves, 1.0, 1.0);
  const auto a = vffgp::rff_model(kernel, 30, 42);
  const auto b = vffgp::rff_model(kernel, 30, 42);
  const auto c = vffgp::rff_model(kernel, 30, 43);
  CHECK(a.frequencies == b.frequencies);
  CHECK(a.frequencies != c.frequencies);
  CHECK_THROWS_AS(vffgp::rff_model(kernel, -1, 0), std::invalid_argument);
}

TEST_CASE("regular frequency grid with no terms is the zero kernel") {
  const MaternKernel kernel(MaternOrder::three_halves, 2.0, 0.5);
  const auto model = vffgp::regular_ff_model(kernel, 0.1, 0);
  CHECK(model.feature_count() == 0);
  CHECK(model.kernel_value(0.7) == 0.0);

  // Fitting degenerates to pure noise: zero predictions, noise-only evidence.
  const GaussianLikelihood lik{0.25};
  Eigen::VectorXd x(3), y(3), xstar(2);
  x << 0.0, 0.4, 1.0;
  y << 1.0, -2.0, 0.5;
  xstar << 0.2, 0.9;
  const auto fit = vffgp::weight_space_fit_predict(model, lik, x, y, xstar);
  CHECK(fit.mean.isZero());
  CHECK(fit.variance.isZero());
  double want = 0.0;
  for (int i = 0; i < 3; ++i)
    want += -0.5 * y[i] * y[i] / 0.25 - 0.5 * std::log(2.0 * std::numbers::pi * 0.25);
  CHECK(fit.log_marginal == Catch::Approx(want).epsilon(1e-12));
}

TEST_CASE("regular frequency grid converges to the kernel it discretizes") {
  const MaternKernel kernel(MaternOrder::three_halves, 1.0, 1.0);
  const auto model = vffgp::regular_ff_model(kernel, 0.01, 3000);
  const double got = model.kernel_value(0.3);
  const double want = vffgp::kernel_eval(kernel, 0.3);
  CHECK(std::abs(got - want) < 0.01 * want);

  CHECK_THROWS_AS(vffgp::regular_ff_model(kernel, 0.0, 5), std::invalid_argument);
  CHECK_THROWS_AS(vffgp::regular_ff_model(kernel, -0.1, 5), std::invalid_argument);
}

TEST_CASE("weight prior is diagonal with one variance per cos and sin pair") {
  const MaternKernel kernel(MaternOrder::half, 1.5, 0.8);
  const auto model = vffgp::regular_ff_model(kernel, 0.2, 4);
  const auto c = model.weight_prior();
  REQUIRE(c.size() == 8);
  for (int m = 0; m < 4; ++m) {
    const double want = vffgp::spectral_density(kernel, model.frequencies[m]) * 0.2 / std::numbers::pi;
    CHECK(c[m] == Catch::Approx(want));
    CHECK(c[4 + m] == Catch::Approx(want));
  }
}

TEST_CASE("weight-space regression agrees with a dense solve of its own kernel") {
  const MaternKernel kernel(MaternOrder::five_halves, 1.2, 0.6);
  const auto model = vffgp::regular_ff_model(kernel, 0.35, 24);
  const GaussianLikelihood lik{0.09};

  auto rng = vffgp::make_rng(21, "ws-data");
  std::normal_distribution<double> normal;
  Eigen::VectorXd x(30), y(30), xstar(7);
  for (int i = 0; i < 30; ++i) {
    x[i] = 2.0 * normal(rng);
    y[i] = std::sin(2.0 * x[i]) + 0.3 * normal(rng);
  }
  for (int j = 0; j < 7; ++j) xstar[j] = -3.0 + j;

  const auto fast = vffgp::weight_space_fit_predict(model, lik, x, y, xstar);
  const auto dense = dense_route(model, lik, x, y, xstar);
  CHECK(fast.log_marginal == Catch::Approx(dense.log_marginal).epsilon(1e-10));
  for (int j = 0; j < 7; ++j) {
    CHECK(fast.mean[j] == Catch::Approx(dense.mean[j]).margin(1e-8));
    CHECK(fast.variance[j] == Catch::Approx(dense.variance[j]).margin(1e-8));
  }
}

TEST_CASE("weight-space model with no data returns the prior") {
  const MaternKernel kernel(MaternOrder::half, 1.0, 1.0);
  const auto model = vffgp::rff_model(kernel, 50, 3);
  const GaussianLikelihood lik{0.1};
  Eigen::VectorXd empty(0), xstar(3);
  xstar << -1.0, 0.0, 2.0;
  const auto fit = vffgp::weight_space_fit_predict(model, lik, empty, empty, xstar);
  CHECK(fit.log_marginal == 0.0);
  CHECK(fit.mean.isZero());
  for (int j = 0; j < 3; ++j)
    CHECK(fit.variance[j] == Catch::Approx(model.kernel_value(0.0)).epsilon(1e-12));

  Eigen::VectorXd bad(2), good(3);
  bad << 1.0, 2.0;
  good << 1.0, 2.0, 3.0;
  CHECK_THROWS_AS(vffgp::weight_space_fit_predict(model, lik, good, bad, xstar),
                  std::invalid_argument);
  good[1] = std::nan("");
  CHECK_THROWS_AS(vffgp::weight_space_fit_predict(model, lik, good, good, xstar),
                  vffgp::data_error);
}

TEST_CASE("projection Gram matrix matches its printed off-diagonal form") {
  const FourierBasis basis(0.0, 1.0, 3);
  const MaternKernel kernel(MaternOrder::half, 1.0, 0.5);
  const double lam = kernel.lambda();
  const auto features = vffgp::l2_features_matern12(basis, kernel);
  const Eigen::MatrixXd kuu = features.kuu();

  // Cosine block, m != m', written out directly from the closed form.
  const auto denom = [&](double w) { return lam * lam + w * w; };
  const double decay = 1.0 - std::exp(lam * (basis.a - basis.b));
  for (int i = 0; i <= 3; ++i) {
    const double wi = (i == 0) ? 0.0 : basis.frequencies[i - 1];
    for (int j = 0; j <= 3; ++j) {
      if (i == j) continue;
      const double wj = (j == 0) ? 0.0 : basis.frequencies[j - 1];
      const double want = -2.0 * lam * lam / (denom(wi) * denom(wj)) * decay;
      CHECK(kuu(i, j) == Catch::Approx(want).epsilon(1e-12));
    }
  }

  // The whole matrix scales linearly in the kernel variance.
  const MaternKernel scaled(MaternOrder::half, 2.7, 0.5);
  const Eigen::MatrixXd kuu2 = vffgp::l2_features_matern12(basis, scaled).kuu();
  CHECK((kuu2 - 2.7 * kuu).cwiseAbs().maxCoeff() < 1e-12);

  CHECK_THROWS_AS(
      vffgp::l2_features_matern12(basis, MaternKernel(MaternOrder::three_halves, 1.0, 0.5)),
      std::invalid_argument);
}

TEST_CASE("projection covariances lose their edge terms mid-interval") {
  const FourierBasis basis(0.0, 1.0, 4);
  const MaternKernel kernel(MaternOrder::half, 1.0, 0.025);  // interval is 40 lengthscales
  const auto features = vffgp::l2_features_matern12(basis, kernel);
  const double x = 0.5;
  const auto phi = features.feature_vector(x);
  for (int m = 1; m <= 4; ++m) {
    const double w = basis.frequencies[m - 1];
    const double s = vffgp::spectral_density(kernel, w);
    CHECK(std::abs(phi[m] - s * std::cos(w * x)) < 1e-6);
    CHECK(std::abs(phi[4 + m] - s * std::sin(w * x)) < 1e-6);
  }
  CHECK(std::abs(phi[0] - vffgp::spectral_density(kernel, 0.0)) < 1e-6);
}

TEST_CASE("projection closed forms match brute-force integration") {
  const FourierBasis basis(-0.3, 1.1, 4);
  const MaternKernel kernel(MaternOrder::half, 1.7, 0.4);
  const auto features = vffgp::l2_features_matern12(basis, kernel);
  const int total = basis.feature_count();

  SECTION("covariance function, inside and outside the interval") {
    for (double x : {-0.9, -0.3, 0.1, 0.4, 0.83, 1.1, 1.6}) {
      const auto phi = features.feature_vector(x);
      for (int i = 0; i < total; ++i) {
        const double want = projection_integral(kernel, x, trig_curve(basis, i), basis.a, basis.b);
        INFO("x " << x << " feature " << i);
        CHECK(std::abs(phi[i] - want) < 1e-8);
      }
    }
  }

  SECTION("Gram matrix by double quadrature") {
    using gk = boost::math::quadrature::gauss_kronrod<double, 61>;
    const Eigen::MatrixXd kuu = features.kuu();
    for (int i = 0; i < total; ++i) {
      const auto gi = trig_curve(basis, i);
      for (int j = i; j < total; ++j) {
        const auto gj = trig_curve(basis, j);
        const double want = gk::integrate(
            [&](double t) { return gj(t) * projection_integral(kernel, t, gi, basis.a, basis.b); },
            basis.a, basis.b, 12, 1e-9);
        INFO("entry (" << i << ", " << j << ")");
        CHECK(std::abs(kuu(i, j) - want) < 1e-5);
      }
    }

    // Cross couplings between the cosine and sine halves cancel exactly.
    CHECK(kuu.block(0, 5, 5, 4).isZero());
  }
}

TEST_CASE("harmonic features stay sinusoidal where projections pick up edge effects") {
  const FourierBasis basis(0.0, 1.0, 8);
  const MaternKernel kernel(MaternOrder::half, 1.0, 0.1);  // lengthscale (b-a)/10
  const int m = 8;                                         // omega = 16*pi/(b-a)
  const double w = basis.frequencies[m - 1];
  const auto l2 = vffgp::l2_features_matern12(basis, kernel);
  const double s = vffgp::spectral_density(kernel, w);

  double worst_harmonic = 0.0;
  double worst_l2 = 0.0;
  for (int g = 0; g <= 400; ++g) {
    const double x = g / 400.0;
    const double bare = std::cos(w * x);
    const auto harmonic = vffgp::feature_vector(basis, kernel, x);
    worst_harmonic = std::max(worst_harmonic, std::abs(harmonic[m] - bare));
    const auto proj = l2.feature_vector(x);
    worst_l2 = std::max(worst_l2, std::abs(proj[m] / s - bare));
  }
  CHECK(worst_harmonic < 1e-12);
  CHECK(worst_l2 > 0.01);
}
