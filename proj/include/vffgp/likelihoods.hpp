#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "vffgp/gauss_hermite.hpp"

namespace vffgp {

struct GaussianLikelihood {
  double noise_variance;

  explicit GaussianLikelihood(double noise_variance_) : noise_variance(noise_variance_) {
    if (!(noise_variance > 0.0))
      throw std::invalid_argument("GaussianLikelihood: noise variance must be positive");
  }
};

// log Phi(z) without cancellation in the lower tail.
[[nodiscard]] inline double log_ndtr(double z) {
  if (z > -1.0) return std::log1p(-0.5 * std::erfc(z / std::numbers::sqrt2));
  const double tail = 0.5 * std::erfc(-z / std::numbers::sqrt2);
  if (tail > 0.0) return std::log(tail);
  // erfc underflowed (z < ~-37.5); continue with the asymptotic series
  const double z2 = z * z;
  const double series = -1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2) +
                        105.0 / (z2 * z2 * z2 * z2);
  return -0.5 * z2 - 0.5 * std::log(2.0 * std::numbers::pi) - std::log(-z) +
         std::log1p(series);
}

// phi(z)/Phi(z), the slope of log Phi
[[nodiscard]] inline double inverse_mills(double z) {
  const double log_pdf = -0.5 * z * z - 0.5 * std::log(2.0 * std::numbers::pi);
  return std::exp(log_pdf - log_ndtr(z));
}

[[nodiscard]] inline double log_sigmoid(double t) {
  // -softplus(-t)
  return t < 0.0 ? t - std::log1p(std::exp(t)) : -std::log1p(std::exp(-t));
}

enum class BernoulliLink { probit, logit };

struct Expectation {
  double value;
  double dmean;
  double dvar;
};

// Observation models for the non-conjugate path.  Each evaluates the
// pointwise log density and the Gaussian expectation E_{N(f;mean,var)}
// [log p(y|f)] with its derivatives in mean and variance.  Binary labels may
// be coded {0,1} or {-1,+1}; anything above one half counts as the positive
// class.
class Likelihood {
 public:
  enum class Kind { gaussian, bernoulli, poisson };

  static Likelihood gaussian(double noise_variance) {
    Likelihood lik(Kind::gaussian);
    if (!(noise_variance > 0.0))
      throw std::invalid_argument("Likelihood: noise variance must be positive");
    lik.noise_variance_ = noise_variance;
    return lik;
  }

  static Likelihood bernoulli(BernoulliLink link) {
    Likelihood lik(Kind::bernoulli);
    lik.link_ = link;
    return lik;
  }

  // counts with rate exp(f + offset) * bin_area
  static Likelihood poisson_count(double bin_area, double offset = 0.0) {
    Likelihood lik(Kind::poisson);
    if (!(bin_area > 0.0)) throw std::invalid_argument("Likelihood: bin area must be positive");
    lik.bin_area_ = bin_area;
    lik.offset_ = offset;
    return lik;
  }

  [[nodiscard]] Kind kind() const { return kind_; }
  [[nodiscard]] BernoulliLink link() const { return link_; }
  [[nodiscard]] double noise_variance() const { return noise_variance_; }
  [[nodiscard]] double bin_area() const { return bin_area_; }
  [[nodiscard]] double offset() const { return offset_; }
  void set_offset(double c) { offset_ = c; }
  void set_noise_variance(double noise_variance) {
    if (!(noise_variance > 0.0))
      throw std::invalid_argument("Likelihood: noise variance must be positive");
    noise_variance_ = noise_variance;
  }

  [[nodiscard]] double log_density(double y, double f) const {
    switch (kind_) {
      case Kind::gaussian: {
        const double r = y - f;
        return -0.5 * std::log(2.0 * std::numbers::pi * noise_variance_) -
               0.5 * r * r / noise_variance_;
      }
      case Kind::bernoulli: {
        const double s = y > 0.5 ? 1.0 : -1.0;
        return link_ == BernoulliLink::probit ? log_ndtr(s * f) : log_sigmoid(s * f);
      }
      case Kind::poisson: {
        const double log_rate = f + offset_ + std::log(bin_area_);
        return y * log_rate - std::exp(log_rate) - std::lgamma(y + 1.0);
      }
    }
    return 0.0;  // unreachable
  }

  [[nodiscard]] Expectation expected_log_density(double y, double mean, double var,
                                                 const GaussHermiteRule& rule) const {
    if (var < 0.0) throw std::invalid_argument("expected_log_density: negative variance");
    switch (kind_) {
      case Kind::gaussian: {
        const double r = y - mean;
        Expectation e;
        e.value = -0.5 * std::log(2.0 * std::numbers::pi * noise_variance_) -
                  0.5 * (r * r + var) / noise_variance_;
        e.dmean = r / noise_variance_;
        e.dvar = -0.5 / noise_variance_;
        return e;
      }
      case Kind::poisson: {
        // log link makes the expectation exact: E[e^f] = e^{mean + var/2}
        const double log_rate = mean + offset_ + std::log(bin_area_);
        const double expected_rate = std::exp(log_rate + 0.5 * var);
        Expectation e;
        e.value = y * log_rate - expected_rate - std::lgamma(y + 1.0);
        e.dmean = y - expected_rate;
        e.dvar = -0.5 * expected_rate;
        return e;
      }
      case Kind::bernoulli:
        break;
    }
    // quadrature, with derivatives moved inside the expectation:
    // d/dmean E[g] = E[g'], d/dvar E[g] = E[g'']/2
    const double s = y > 0.5 ? 1.0 : -1.0;
    const double scale = std::sqrt(2.0 * var);
    Expectation e{0.0, 0.0, 0.0};
    for (Eigen::Index h = 0; h < rule.nodes.size(); ++h) {
      const double f = mean + scale * rule.nodes[h];
      const double w = rule.weights[h];
      if (link_ == BernoulliLink::probit) {
        const double z = s * f;
        const double mills = inverse_mills(z);
        e.value += w * log_ndtr(z);
        e.dmean += w * s * mills;
        e.dvar += w * -0.5 * mills * (z + mills);
      } else {
        const double p = 1.0 / (1.0 + std::exp(-s * f));
        e.value += w * log_sigmoid(s * f);
        e.dmean += w * s * (1.0 - p);
        e.dvar += w * -0.5 * p * (1.0 - p);
      }
    }
    const double norm = 1.0 / std::sqrt(std::numbers::pi);
    e.value *= norm;
    e.dmean *= norm;
    e.dvar *= norm;
    return e;
  }

 private:
  explicit Likelihood(Kind kind) : kind_(kind) {}

  Kind kind_;
  BernoulliLink link_ = BernoulliLink::probit;
  double noise_variance_ = 1.0;
  double bin_area_ = 1.0;
  double offset_ = 0.0;
};

}  // namespace vffgp
