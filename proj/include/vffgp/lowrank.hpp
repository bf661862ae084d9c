#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <cmath>

#include "vffgp/errors.hpp"

namespace vffgp {

// Symmetric positive definite matrix in the form diag(alpha) + B * B^T with
// B holding up to three rank-one columns.  Never materialized densely outside
// test oracles; all algebra goes through the Woodbury identity and the matrix
// determinant lemma.
struct LowRankPlusDiag {
  Eigen::VectorXd alpha;  // length K, all entries > 0
  Eigen::MatrixXd B;      // K x R, R in {0,1,2,3}

  LowRankPlusDiag() = default;
  LowRankPlusDiag(Eigen::VectorXd alpha_, Eigen::MatrixXd B_)
      : alpha(std::move(alpha_)), B(std::move(B_)) {
    if (B.size() == 0) B.resize(alpha.size(), 0);
    if (B.rows() != alpha.size())
      throw std::invalid_argument("LowRankPlusDiag: B rows must match alpha length");
  }

  [[nodiscard]] Eigen::Index size() const { return alpha.size(); }
  [[nodiscard]] Eigen::Index rank() const { return B.cols(); }

  [[nodiscard]] Eigen::MatrixXd to_dense() const {
    Eigen::MatrixXd out = Eigen::MatrixXd(alpha.asDiagonal());
    if (B.cols() > 0) out.noalias() += B * B.transpose();
    return out;
  }

  [[nodiscard]] Eigen::VectorXd matvec(const Eigen::VectorXd& x) const {
    Eigen::VectorXd out = alpha.cwiseProduct(x);
    if (B.cols() > 0) out.noalias() += B * (B.transpose() * x);
    return out;
  }
};

// Square root R = [diag(alpha)^{1/2}, B], a K x (K+R) matrix with
// R * R^T = diag(alpha) + B B^T.  The extra R columns are the price of the
// convenient form; whitened vectors gain that many entries.
struct StructuredSqrt {
  Eigen::VectorXd sqrt_alpha;
  Eigen::MatrixXd B;

  [[nodiscard]] Eigen::Index rows() const { return sqrt_alpha.size(); }
  [[nodiscard]] Eigen::Index cols() const { return sqrt_alpha.size() + B.cols(); }

  // R * v for v of length K+R.
  [[nodiscard]] Eigen::VectorXd apply(const Eigen::VectorXd& v) const {
    Eigen::VectorXd out = sqrt_alpha.cwiseProduct(v.head(rows()));
    if (B.cols() > 0) out.noalias() += B * v.tail(B.cols());
    return out;
  }

  // R^T * x, length K+R.
  [[nodiscard]] Eigen::VectorXd apply_transpose(const Eigen::VectorXd& x) const {
    Eigen::VectorXd out(cols());
    out.head(rows()) = sqrt_alpha.cwiseProduct(x);
    if (B.cols() > 0) out.tail(B.cols()).noalias() = B.transpose() * x;
    return out;
  }

  [[nodiscard]] Eigen::MatrixXd to_dense() const {
    Eigen::MatrixXd out(rows(), cols());
    out.leftCols(rows()) = Eigen::MatrixXd(sqrt_alpha.asDiagonal());
    out.rightCols(B.cols()) = B;
    return out;
  }
};

[[nodiscard]] inline StructuredSqrt structured_sqrt(const LowRankPlusDiag& A) {
  return StructuredSqrt{A.alpha.cwiseSqrt(), A.B};
}

// Prefactored Woodbury solver: caches D^{-1}B and the Cholesky of the R x R
// capacitance C = I + B^T D^{-1} B so repeated solves and quadratic forms run
// in O(K R) each.
class LowRankSolver {
 public:
  explicit LowRankSolver(const LowRankPlusDiag& A) : A_(A) {
    if ((A.alpha.array() <= 0.0).any())
      throw numerical_error("LowRankSolver: alpha must be strictly positive");
    if (!A.alpha.allFinite() || !A.B.allFinite())
      throw numerical_error("LowRankSolver: non-finite entries");
    inv_alpha_ = A.alpha.cwiseInverse();
    const Eigen::Index R = A.rank();
    if (R > 0) {
      DiB_ = inv_alpha_.asDiagonal() * A.B;
      Eigen::MatrixXd C = Eigen::MatrixXd::Identity(R, R);
      C.noalias() += A.B.transpose() * DiB_;
      llt_.compute(C);
      if (llt_.info() != Eigen::Success || !C.allFinite())
        throw numerical_error("LowRankSolver: capacitance matrix not positive definite");
      capacitance_logdet_ = 2.0 * llt_.matrixLLT().diagonal().array().log().sum();
    }
  }

  [[nodiscard]] const LowRankPlusDiag& matrix() const { return A_; }

  // A^{-1} Y
  [[nodiscard]] Eigen::MatrixXd solve(const Eigen::MatrixXd& Y) const {
    Eigen::MatrixXd out = inv_alpha_.asDiagonal() * Y;
    if (A_.rank() > 0) {
      const Eigen::MatrixXd t = llt_.solve(A_.B.transpose() * out);
      out.noalias() -= DiB_ * t;
    }
    return out;
  }

  [[nodiscard]] Eigen::VectorXd solve_vec(const Eigen::VectorXd& y) const {
    Eigen::VectorXd out = inv_alpha_.cwiseProduct(y);
    if (A_.rank() > 0) {
      const Eigen::VectorXd t = llt_.solve(A_.B.transpose() * out);
      out.noalias() -= DiB_ * t;
    }
    return out;
  }

  // x^T A^{-1} x
  [[nodiscard]] double quad_form(const Eigen::VectorXd& x) const {
    const Eigen::VectorXd dx = inv_alpha_.cwiseProduct(x);
    double out = x.dot(dx);
    if (A_.rank() > 0) {
      const Eigen::VectorXd t = A_.B.transpose() * dx;
      out -= t.dot(llt_.solve(t));
    }
    return out;
  }

  [[nodiscard]] double logdet() const {
    return A_.alpha.array().log().sum() + capacitance_logdet_;
  }

 private:
  LowRankPlusDiag A_;
  Eigen::VectorXd inv_alpha_;
  Eigen::MatrixXd DiB_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  double capacitance_logdet_ = 0.0;
};

// One-shot solve: streams alpha, B, Y exactly twice with block-local
// workspace instead of materializing K-sized intermediates the way the
// prefactored solver does.  Build a LowRankSolver instead when the same
// matrix is solved against repeatedly.
[[nodiscard]] inline Eigen::MatrixXd solve(const LowRankPlusDiag& A, const Eigen::MatrixXd& Y) {
  const Eigen::Index K = A.size(), R = A.rank(), C = Y.cols();
  if (Y.rows() != K) throw std::invalid_argument("solve: dimension mismatch");
  if ((A.alpha.array() <= 0.0).any() || !A.alpha.allFinite())
    throw numerical_error("solve: alpha must be strictly positive");
  if (R == 0) return Y.array().colwise() / A.alpha.array();

  constexpr Eigen::Index kBlock = 4096;
  Eigen::MatrixXd cap = Eigen::MatrixXd::Identity(R, R);
  Eigen::MatrixXd T = Eigen::MatrixXd::Zero(R, C);
  Eigen::MatrixXd w(std::min(kBlock, K), R);
  for (Eigen::Index i0 = 0; i0 < K; i0 += kBlock) {
    const Eigen::Index n = std::min(kBlock, K - i0);
    auto Bb = A.B.middleRows(i0, n);
    auto ab = A.alpha.segment(i0, n);
    w.topRows(n) = Bb.array().colwise() / ab.array();
    cap.noalias() += w.topRows(n).transpose() * Bb;
    T.noalias() += w.topRows(n).transpose() * Y.middleRows(i0, n);
  }
  if (!cap.allFinite() || !T.allFinite()) throw numerical_error("solve: non-finite entries");
  Eigen::LLT<Eigen::MatrixXd> llt(cap);
  if (llt.info() != Eigen::Success)
    throw numerical_error("solve: capacitance matrix not positive definite");
  const Eigen::MatrixXd Z = llt.solve(T);

  Eigen::MatrixXd out(K, C);
  for (Eigen::Index i0 = 0; i0 < K; i0 += kBlock) {
    const Eigen::Index n = std::min(kBlock, K - i0);
    out.middleRows(i0, n) =
        (Y.middleRows(i0, n) - A.B.middleRows(i0, n) * Z).array().colwise() /
        A.alpha.segment(i0, n).array();
  }
  return out;
}

[[nodiscard]] inline double logdet(const LowRankPlusDiag& A) { return LowRankSolver(A).logdet(); }

}  // namespace vffgp
