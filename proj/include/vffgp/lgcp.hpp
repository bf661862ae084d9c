#pragma once

#include <Eigen/Core>
#include <cmath>
#include <string>
#include <vector>

#include "vffgp/errors.hpp"
#include "vffgp/fourier_basis.hpp"
#include "vffgp/likelihoods.hpp"
#include "vffgp/matern.hpp"
#include "vffgp/multidim.hpp"
#include "vffgp/whitened_hmc.hpp"

namespace vffgp {

// Log-Gaussian Cox process discretized on a regular grid.  The domain is
// rescaled to the unit cube so one prior works for any bounds; bin counts
// follow Poisson(exp(f + offset) * bin_area) with a product-kernel GP on f.
struct LgcpModel {
  std::vector<ModelDimension> dims;
  Eigen::VectorXd counts;   // one entry per bin, dimension 0 slowest-varying
  Eigen::MatrixXd centers;  // bin centres in normalized coordinates, bins x D
  double bin_area = 0.0;    // normalized volume of one bin
  Eigen::VectorXd lo, hi;   // original domain bounds
  std::vector<int> grid;
};

// Default prior for unit-cube data: the interval stretches a full domain
// width past each edge, which keeps the periodic images of the basis well
// away from the data.
[[nodiscard]] inline std::vector<ModelDimension> lgcp_dimensions(int dimension_count,
                                                                 int num_frequencies,
                                                                 double variance = 1.0,
                                                                 double lengthscale = 0.2) {
  if (dimension_count < 1)
    throw std::invalid_argument("lgcp_dimensions: needs at least one dimension");
  std::vector<ModelDimension> dims;
  dims.reserve(std::size_t(dimension_count));
  for (int d = 0; d < dimension_count; ++d)
    dims.push_back(ModelDimension{
        MaternKernel(MaternOrder::three_halves, variance, lengthscale),
        FourierBasis(-1.0, 2.0, num_frequencies)});
  return dims;
}

// Bin the events.  An event exactly on an interior bin edge goes to the lower
// bin; the lower domain edge goes to bin zero.
[[nodiscard]] inline LgcpModel lgcp_model(const Eigen::MatrixXd& events,
                                          const std::vector<int>& grid,
                                          const Eigen::VectorXd& lo, const Eigen::VectorXd& hi,
                                          std::vector<ModelDimension> dims) {
  const Eigen::Index D = Eigen::Index(dims.size());
  if (D < 1) throw std::invalid_argument("lgcp_model: needs at least one dimension");
  if (Eigen::Index(grid.size()) != D)
    throw std::invalid_argument("lgcp_model: grid size must match dimension count");
  if (lo.size() != D || hi.size() != D)
    throw std::invalid_argument("lgcp_model: bounds must match dimension count");
  for (Eigen::Index d = 0; d < D; ++d) {
    if (grid[std::size_t(d)] < 1)
      throw std::invalid_argument("lgcp_model: grid must have at least one bin per dimension");
    if (!(hi[d] > lo[d]))
      throw std::invalid_argument("lgcp_model: upper bound must exceed lower bound");
  }
  if (events.rows() > 0 && events.cols() != D)
    throw std::invalid_argument("lgcp_model: event column count must match dimension count");
  if (events.size() > 0 && !events.allFinite())
    throw data_error("lgcp_model: non-finite event coordinates");

  LgcpModel model;
  model.dims = std::move(dims);
  model.lo = lo;
  model.hi = hi;
  model.grid = grid;

  Eigen::Index total = 1;
  model.bin_area = 1.0;
  for (Eigen::Index d = 0; d < D; ++d) {
    total *= grid[std::size_t(d)];
    model.bin_area /= double(grid[std::size_t(d)]);
  }

  model.counts = Eigen::VectorXd::Zero(total);
  for (Eigen::Index n = 0; n < events.rows(); ++n) {
    Eigen::Index flat = 0;
    for (Eigen::Index d = 0; d < D; ++d) {
      const double value = events(n, d);
      if (value < lo[d] || value > hi[d])
        throw data_error("lgcp_model: event " + std::to_string(n) + " outside the domain in dimension " +
                         std::to_string(d));
      const double t = (value - lo[d]) / (hi[d] - lo[d]);
      const Eigen::Index g = grid[std::size_t(d)];
      Eigen::Index idx = Eigen::Index(std::ceil(t * double(g))) - 1;
      idx = std::min(std::max(idx, Eigen::Index(0)), g - 1);
      flat = flat * g + idx;
    }
    model.counts[flat] += 1.0;
  }

  model.centers.resize(total, D);
  for (Eigen::Index i = 0; i < total; ++i) {
    Eigen::Index rest = i;
    for (Eigen::Index d = D - 1; d >= 0; --d) {
      const Eigen::Index g = grid[std::size_t(d)];
      const Eigen::Index idx = rest % g;
      rest /= g;
      model.centers(i, d) = (double(idx) + 0.5) / double(g);
    }
  }
  return model;
}

[[nodiscard]] inline WhitenedTarget whitened_target(const LgcpModel& model, double offset = 0.0,
                                                    int quad_nodes = 20) {
  return WhitenedTarget(ProductModel(model.dims),
                        Likelihood::poisson_count(model.bin_area, offset), model.centers,
                        model.counts, quad_nodes);
}

// Posterior intensity surface implied by one chain state: the conditional
// expectation of exp(f + offset) per bin, per unit of normalized volume.  The
// offset rides in the final hyperparameter slot of a Poisson target.
[[nodiscard]] inline Eigen::VectorXd intensity_draw(const WhitenedTarget& target,
                                                    const WhitenedState& state) {
  const ConditionalMoments mom = target.conditional_moments(state);
  const double offset = state.hyper[state.hyper.size() - 1];
  return (mom.mean.array() + offset + 0.5 * mom.variance.array()).exp();
}

}  // namespace vffgp
