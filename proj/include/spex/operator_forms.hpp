#pragma once

// Population (exact-expectation) forms of the objectives for a finite
// symmetric operator M acting on R^n, with the functions f_i stored as the
// columns of F. Used to check identifiability without sampling noise.

#include <functional>

#include "spex/nesting.hpp"

namespace spex {

struct MatrixLoss {
  double value = 0.0;
  Matrix grad;
};

/// -2 tr(F^T M F) + ||F^T F||_F^2, i.e. ||M - F F^T||_F^2 - ||M||_F^2.
inline MatrixLoss lora_matrix_loss(const Matrix& M, const Matrix& F) {
  require(M.rows() == M.cols() && M.rows() == F.rows(), "lora_matrix_loss: shape mismatch");
  const Matrix mf = M * F;
  const Matrix g = F.transpose() * F;
  return {-2.0 * F.cwiseProduct(mf).sum() + g.squaredNorm(), -4.0 * mf + 4.0 * F * g};
}

/// Prefix-weighted LoRA loss over the leading columns of F.
inline MatrixLoss joint_lora_matrix_loss(const Matrix& M, const Matrix& F, const NestingPlan& plan) {
  plan.validate(static_cast<int>(F.cols()));
  MatrixLoss out{0.0, Matrix::Zero(F.rows(), F.cols())};
  for (std::size_t i = 0; i < plan.dims.size(); ++i) {
    const Eigen::Index k = plan.dims[i];
    const MatrixLoss part = lora_matrix_loss(M, F.leftCols(k));
    out.value += plan.weights[i] * part.value;
    out.grad.leftCols(k) += plan.weights[i] * part.grad;
  }
  return out;
}

/// -sum_i f_i^T M f_i + mu/d sum_i (||f_i||^2 - 1)^2 + nu/(d(d-1)) sum_{i != j} (f_i^T M f_j)^2
inline MatrixLoss rq_direct_matrix_loss(const Matrix& M, const Matrix& F, double mu, double nu) {
  require(M.rows() == M.cols() && M.rows() == F.rows(), "rq_direct_matrix_loss: shape mismatch");
  const Eigen::Index d = F.cols();
  const double dd = static_cast<double>(d);
  const Matrix mf = M * F;
  const Matrix c = F.transpose() * mf;
  const double cov_w = d > 1 ? nu / (dd * (dd - 1.0)) : 0.0;
  MatrixLoss out{-c.trace(), -2.0 * mf};
  for (Eigen::Index i = 0; i < d; ++i) {
    const double n2 = F.col(i).squaredNorm() - 1.0;
    out.value += mu / dd * n2 * n2;
    out.grad.col(i) += 4.0 * mu / dd * n2 * F.col(i);
    for (Eigen::Index j = 0; j < d; ++j) {
      if (i == j) continue;
      out.value += cov_w * c(i, j) * c(i, j);
      out.grad.col(i) += 4.0 * cov_w * c(i, j) * mf.col(j);
    }
  }
  return out;
}

/// Plain full-batch gradient descent; stops when the gradient norm drops below tol.
inline Matrix gradient_descent(const std::function<MatrixLoss(const Matrix&)>& loss, Matrix F, double step,
                               int max_iter, double tol = 1e-12) {
  for (int it = 0; it < max_iter; ++it) {
    const MatrixLoss l = loss(F);
    if (l.grad.norm() < tol) break;
    F -= step * l.grad;
  }
  return F;
}

}  // namespace spex
