#pragma once

#include <Eigen/Core>
#include <numeric>
#include <vector>

#include "vffgp/lowrank.hpp"

namespace vffgp {

// Lazy Kronecker product of structured blocks, dimension 0 slowest-varying:
// index n = (((i_0) * K_1 + i_1) * K_2 + ...).  The dense product is never
// materialized here; test oracles build it themselves.
struct KroneckerMatrix {
  std::vector<LowRankPlusDiag> blocks;

  [[nodiscard]] Eigen::Index size() const {
    Eigen::Index n = 1;
    for (const auto& b : blocks) n *= b.size();
    return n;
  }
};

[[nodiscard]] inline KroneckerMatrix kron_assemble(std::vector<LowRankPlusDiag> blocks) {
  if (blocks.empty()) throw std::invalid_argument("kron_assemble: needs at least one block");
  return KroneckerMatrix{std::move(blocks)};
}

// Dense Kronecker product, factor 0 slowest-varying.  Only for the moderate
// sizes the variational and test paths touch.
[[nodiscard]] inline Eigen::MatrixXd dense_kron(const std::vector<Eigen::MatrixXd>& factors) {
  if (factors.empty()) throw std::invalid_argument("dense_kron: needs at least one factor");
  Eigen::MatrixXd out = Eigen::MatrixXd::Ones(1, 1);
  for (const auto& f : factors) {
    Eigen::MatrixXd next(out.rows() * f.rows(), out.cols() * f.cols());
    for (Eigen::Index i = 0; i < out.rows(); ++i)
      for (Eigen::Index j = 0; j < out.cols(); ++j)
        next.block(i * f.rows(), j * f.cols(), f.rows(), f.cols()) = out(i, j) * f;
    out = std::move(next);
  }
  return out;
}

namespace detail {

// Applies op to the flattened tensor v along axis d.  op receives a
// K_d x inner column-block and must return a matrix with new_rows rows.
template <class Op>
inline Eigen::VectorXd kron_apply_dim(const Eigen::VectorXd& v,
                                      const std::vector<Eigen::Index>& dims, std::size_t d,
                                      Eigen::Index new_rows, Op&& op) {
  Eigen::Index outer = 1, inner = 1;
  for (std::size_t e = 0; e < d; ++e) outer *= dims[e];
  for (std::size_t e = d + 1; e < dims.size(); ++e) inner *= dims[e];
  const Eigen::Index kd = dims[d];

  Eigen::VectorXd out(outer * new_rows * inner);
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  for (Eigen::Index o = 0; o < outer; ++o) {
    Eigen::Map<const RowMat> slab(v.data() + o * kd * inner, kd, inner);
    Eigen::Map<RowMat> dst(out.data() + o * new_rows * inner, new_rows, inner);
    dst = op(slab);
  }
  return out;
}

}  // namespace detail

// Solver caching the per-block factorizations; matvec and solve cost
// O(K * sum_d K_d ... ) via sequential per-axis application.
class KronSolver {
 public:
  explicit KronSolver(const KroneckerMatrix& A) {
    for (const auto& b : A.blocks) {
      solvers_.emplace_back(b);
      dims_.push_back(b.size());
    }
  }

  [[nodiscard]] Eigen::Index size() const {
    return std::accumulate(dims_.begin(), dims_.end(), Eigen::Index(1),
                           std::multiplies<Eigen::Index>());
  }
  [[nodiscard]] const std::vector<Eigen::Index>& dims() const { return dims_; }
  [[nodiscard]] const LowRankSolver& block_solver(std::size_t d) const { return solvers_[d]; }

  [[nodiscard]] Eigen::VectorXd matvec(const Eigen::VectorXd& v) const {
    Eigen::VectorXd out = v;
    for (std::size_t d = 0; d < solvers_.size(); ++d) {
      const auto& A = solvers_[d].matrix();
      out = detail::kron_apply_dim(out, dims_, d, dims_[d], [&](const auto& slab) {
        Eigen::MatrixXd r = A.alpha.asDiagonal() * slab.eval();
        if (A.rank() > 0) r.noalias() += A.B * (A.B.transpose() * slab);
        return r;
      });
    }
    return out;
  }

  [[nodiscard]] Eigen::VectorXd solve(const Eigen::VectorXd& v) const {
    Eigen::VectorXd out = v;
    for (std::size_t d = 0; d < solvers_.size(); ++d) {
      const auto& s = solvers_[d];
      out = detail::kron_apply_dim(out, dims_, d, dims_[d],
                                   [&](const auto& slab) { return s.solve(slab.eval()); });
    }
    return out;
  }

  [[nodiscard]] double logdet() const {
    const Eigen::Index K = size();
    double out = 0.0;
    for (std::size_t d = 0; d < solvers_.size(); ++d)
      out += double(K / dims_[d]) * solvers_[d].logdet();
    return out;
  }

 private:
  std::vector<LowRankSolver> solvers_;
  std::vector<Eigen::Index> dims_;
};

}  // namespace vffgp
