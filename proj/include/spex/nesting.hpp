#pragma once

// Nested objectives that pin down individual eigenfunctions instead of the
// eigenspace: a weighted sum of prefix losses (joint), or the stop-gradient
// sum where column i only feels the i-th prefix loss (sequential).

#include <string>
#include <vector>

#include "spex/objectives.hpp"

namespace spex {

enum class NestingMode { none, joint, sequential };

inline std::string to_string(NestingMode n) {
  switch (n) {
    case NestingMode::none: return "none";
    case NestingMode::joint: return "joint";
    case NestingMode::sequential: return "sequential";
  }
  return "?";
}

inline NestingMode nesting_mode_from_string(const std::string& s) {
  if (s == "none") return NestingMode::none;
  if (s == "joint") return NestingMode::joint;
  if (s == "sequential") return NestingMode::sequential;
  throw ConfigError("unknown nesting mode '" + s + "'");
}

struct NestingPlan {
  std::vector<int> dims;        // strictly increasing prefix sizes, last == d
  std::vector<double> weights;  // one positive weight per prefix

  /// Prefixes 1..d, each weighted 1/d (the average of all prefix losses).
  static NestingPlan uniform(int d) {
    NestingPlan plan;
    for (int k = 1; k <= d; ++k) {
      plan.dims.push_back(k);
      plan.weights.push_back(1.0 / d);
    }
    return plan;
  }

  static NestingPlan single(int d) { return {{d}, {1.0}}; }

  void validate(int d) const {
    require(!dims.empty(), "nesting plan: no prefixes");
    require(dims.size() == weights.size(), "nesting plan: one weight per prefix required");
    for (std::size_t i = 0; i < dims.size(); ++i) {
      require(dims[i] >= 1 && dims[i] <= d, "nesting plan: prefix outside [1, d]");
      require(i == 0 || dims[i] > dims[i - 1], "nesting plan: prefixes must increase strictly");
      require(weights[i] > 0.0, "nesting plan: weights must be positive");
    }
    require(dims.back() == d, "nesting plan: last prefix must equal the output width");
  }
};

/// sum_k w_k L(Z[:, :k], ZPlus[:, :k]); prefix gradients are zero-padded.
/// With scl normalization each prefix is normalized on its own.
inline LossOutput joint_nested_loss(const ObjectiveConfig& cfg, const Matrix& Z, const Matrix& ZPlus,
                                    const NestingPlan& plan, const SplitScheme& split) {
  plan.validate(static_cast<int>(Z.cols()));
  LossOutput out{0.0, Matrix::Zero(Z.rows(), Z.cols()), Matrix::Zero(ZPlus.rows(), ZPlus.cols())};
  for (std::size_t i = 0; i < plan.dims.size(); ++i) {
    const Eigen::Index k = plan.dims[i];
    const double w = plan.weights[i];
    const LossOutput part = evaluate_objective(cfg, Z.leftCols(k), ZPlus.leftCols(k), split);
    out.value += w * part.value;
    out.grad_Z.leftCols(k) += w * part.grad_Z;
    out.grad_ZPlus.leftCols(k) += w * part.grad_ZPlus;
  }
  return out;
}

/// sum_i L_i(sg(z_1), .., sg(z_{i-1}), z_i). The value is the plain sum; the
/// gradient of column i-1 comes from L_i alone, which is what backpropagating
/// every L_i with earlier columns stop-gradient marked produces.
inline LossOutput sequential_nested_loss(const ObjectiveConfig& cfg, const Matrix& Z, const Matrix& ZPlus,
                                         const SplitScheme& split) {
  const Eigen::Index d = Z.cols();
  LossOutput out{0.0, Matrix::Zero(Z.rows(), d), Matrix::Zero(ZPlus.rows(), d)};
  for (Eigen::Index i = 1; i <= d; ++i) {
    const LossOutput part = evaluate_objective(cfg, Z.leftCols(i), ZPlus.leftCols(i), split);
    out.value += part.value;
    out.grad_Z.col(i - 1) = part.grad_Z.col(i - 1);
    out.grad_ZPlus.col(i - 1) = part.grad_ZPlus.col(i - 1);
  }
  return out;
}

/// Loss dispatch by nesting mode.
inline LossOutput nested_loss(const ObjectiveConfig& cfg, NestingMode mode, const NestingPlan& plan, const Matrix& Z,
                              const Matrix& ZPlus, const SplitScheme& split) {
  switch (mode) {
    case NestingMode::none: return evaluate_objective(cfg, Z, ZPlus, split);
    case NestingMode::joint: return joint_nested_loss(cfg, Z, ZPlus, plan, split);
    case NestingMode::sequential: return sequential_nested_loss(cfg, Z, ZPlus, split);
  }
  throw ConfigError("unknown nesting mode");
}

}  // namespace spex
