#pragma once

// Mini-batch estimators of the training objectives together with their exact
// gradients w.r.t. the encoder outputs. Z holds outputs on the anchors a,
// ZPlus on the positive partners a+; rows are pairs.
//
// `center` removes the constant eigenpair (lambda_1 = 1, psi_1 = 1) from the
// target operator, so the encoder learns the non-trivial spectrum:
//   scl / lora_svd  decompose K - 1 instead of K; the extra term is the
//                   unbiased cross-pair estimate of ||E psi||^2,
//   rq / rq_direct  add the orthogonality-to-constants penalty (E psi_i)^2,
//                   estimated with the same sample split as the others.
// VICReg centers by construction.

#include <algorithm>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "spex/numerics.hpp"

namespace spex {

enum class Objective { scl, lora_svd, rq, vicreg, rq_direct };

inline std::string to_string(Objective o) {
  switch (o) {
    case Objective::scl: return "scl";
    case Objective::lora_svd: return "lora_svd";
    case Objective::rq: return "rq";
    case Objective::vicreg: return "vicreg";
    case Objective::rq_direct: return "rq_direct";
  }
  return "?";
}

inline Objective objective_from_string(const std::string& s) {
  if (s == "scl") return Objective::scl;
  if (s == "lora_svd") return Objective::lora_svd;
  if (s == "rq") return Objective::rq;
  if (s == "vicreg") return Objective::vicreg;
  if (s == "rq_direct") return Objective::rq_direct;
  throw ConfigError("unknown objective '" + s + "'");
}

inline bool uses_split(Objective o) { return o == Objective::rq || o == Objective::rq_direct; }

struct PenaltyConfig {
  double mu = 10.0;
  double nu = 30.0;
  double vicreg_lambda = 1.0;
  double vicreg_eps = 1e-4;
};

struct ObjectiveConfig {
  Objective kind = Objective::scl;
  PenaltyConfig penalty;
  bool normalize = false;  // scl only: l2-normalize each row first
  bool center = false;
};

/// Value and gradients. For lora_svd grad_Z is w.r.t. ZX and grad_ZPlus w.r.t. ZA.
struct LossOutput {
  double value = 0.0;
  Matrix grad_Z;
  Matrix grad_ZPlus;
};

/// Two disjoint halves of the batch rows, used for product-of-independent-
/// estimates penalties.
struct SplitScheme {
  std::vector<Eigen::Index> first, second;

  static SplitScheme even_odd(Eigen::Index m) {
    SplitScheme s;
    for (Eigen::Index i = 0; i < m; ++i) (i % 2 == 0 ? s.first : s.second).push_back(i);
    return s;
  }

  /// Seeded shuffle, then even/odd positions.
  static SplitScheme shuffled(Eigen::Index m, Rng& rng) {
    std::vector<Eigen::Index> perm(static_cast<std::size_t>(m));
    std::iota(perm.begin(), perm.end(), Eigen::Index{0});
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    SplitScheme s;
    for (std::size_t i = 0; i < perm.size(); ++i) (i % 2 == 0 ? s.first : s.second).push_back(perm[i]);
    return s;
  }
};

namespace detail {

inline void check_pair_shapes(const Matrix& a, const Matrix& b, Eigen::Index min_rows, const char* who) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), std::string(who) + ": Z and ZPlus shapes differ");
  require(a.rows() >= min_rows, std::string(who) + ": batch too small");
  require(a.cols() >= 1, std::string(who) + ": zero output width");
}

/// Shared body of scl and lora_svd:
///   pos_w * (-1/m) sum_i <x_i, y_i>
/// + neg_w / (m(m-1)) sum_{i != j} <x_i, y_j>^2
/// + mean_w / (m(m-1)) sum_{i != j} <x_i, y_j>
inline LossOutput cross_pair_loss(const Matrix& x, const Matrix& y, double pos_w, double neg_w, double mean_w) {
  // O(m d^2): sum_{i != j} <x_i, y_j>^2 = tr(X^T X Y^T Y) - sum_i <x_i, y_i>^2
  const Eigen::Index m = x.rows();
  const double pairs = static_cast<double>(m) * static_cast<double>(m - 1);
  const Vector s = x.cwiseProduct(y).rowwise().sum();
  const Matrix gx = x.transpose() * x;
  const Matrix gy = y.transpose() * y;
  const RowVector sx = x.colwise().sum();
  const RowVector sy = y.colwise().sum();
  const double trace = s.sum();
  const double sq_off = gx.cwiseProduct(gy).sum() - s.squaredNorm();
  const double sum_off = sx.dot(sy) - trace;
  LossOutput out;
  out.value = -pos_w * trace / static_cast<double>(m) + neg_w * sq_off / pairs + mean_w * sum_off / pairs;
  const double a = 2.0 * neg_w / pairs;
  const double b = mean_w / pairs;
  const double c = pos_w / static_cast<double>(m);
  out.grad_Z = a * (x * gy - s.asDiagonal() * y) - (b + c) * y;
  out.grad_Z.rowwise() += b * sy;
  out.grad_ZPlus = a * (y * gx - s.asDiagonal() * x) - (b + c) * x;
  out.grad_ZPlus.rowwise() += b * sx;
  return out;
}

/// Rows divided by their l2 norm; returns the norms for the backward pass.
inline Matrix normalize_rows(const Matrix& z, Vector& norms) {
  norms = z.rowwise().norm();
  Matrix u = z;
  for (Eigen::Index i = 0; i < z.rows(); ++i) u.row(i) /= std::max(norms[i], 1e-12);
  return u;
}

inline Matrix normalize_rows_backward(const Matrix& u, const Vector& norms, const Matrix& g) {
  Matrix out(g.rows(), g.cols());
  for (Eigen::Index i = 0; i < g.rows(); ++i) {
    const double dot = g.row(i).dot(u.row(i));
    out.row(i) = (g.row(i) - dot * u.row(i)) / std::max(norms[i], 1e-12);
  }
  return out;
}

/// Pooled second moments, pooled means and symmetrized cross moments on one half.
struct HalfMoments {
  Matrix second;  // (1/2n) sum (z z^T + z+ z+^T)
  Matrix cross;   // (1/2n) sum (z z+^T + z+ z^T)
  RowVector mean; // (1/2n) sum (z + z+)
  double n = 0;
};

inline HalfMoments half_moments(const Matrix& z, const Matrix& zp, const std::vector<Eigen::Index>& rows) {
  const Eigen::Index d = z.cols();
  Matrix a(static_cast<Eigen::Index>(rows.size()), d), b(static_cast<Eigen::Index>(rows.size()), d);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    a.row(static_cast<Eigen::Index>(k)) = z.row(rows[k]);
    b.row(static_cast<Eigen::Index>(k)) = zp.row(rows[k]);
  }
  HalfMoments h;
  h.n = static_cast<double>(rows.size());
  h.second = (a.transpose() * a + b.transpose() * b) / (2.0 * h.n);
  const Matrix c = a.transpose() * b;
  h.cross = (c + c.transpose()) / (2.0 * h.n);
  h.mean = (a.colwise().sum() + b.colwise().sum()) / (2.0 * h.n);
  return h;
}

inline void check_split(const SplitScheme& split, Eigen::Index m) {
  require(!split.first.empty() && !split.second.empty(), "split: both halves must be non-empty");
  std::vector<int> seen(static_cast<std::size_t>(m), 0);
  for (auto i : split.first) {
    require(i >= 0 && i < m, "split: row index out of range");
    ++seen[static_cast<std::size_t>(i)];
  }
  for (auto i : split.second) {
    require(i >= 0 && i < m, "split: row index out of range");
    ++seen[static_cast<std::size_t>(i)];
  }
  for (int s : seen) require(s <= 1, "split: halves overlap");
}

/// Adds the split-product penalty
///   (mu/d) sum_i (V1_ii - 1)(V2_ii - 1) + nu/(d(d-1)) sum_{i != j} O1_ij O2_ij
///   [+ (mu/d) sum_i e1_i e2_i when centering]
/// where V are pooled second moments and O is `second` (rq) or `cross` (rq_direct).
inline double split_penalty(const Matrix& z, const Matrix& zp, const SplitScheme& split, const PenaltyConfig& cfg,
                            bool off_diag_uses_cross, bool center, Matrix& gz, Matrix& gzp) {
  const Eigen::Index d = z.cols();
  const double dd = static_cast<double>(d);
  const HalfMoments h[2] = {half_moments(z, zp, split.first), half_moments(z, zp, split.second)};
  const double var_w = cfg.mu / dd;
  const double cov_w = d > 1 ? cfg.nu / (dd * (dd - 1.0)) : 0.0;

  double value = 0.0;
  for (Eigen::Index i = 0; i < d; ++i) value += var_w * (h[0].second(i, i) - 1.0) * (h[1].second(i, i) - 1.0);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j)
      if (i != j) {
        value += off_diag_uses_cross ? cov_w * h[0].cross(i, j) * h[1].cross(i, j)
                                     : cov_w * h[0].second(i, j) * h[1].second(i, j);
      }
  if (center) value += var_w * h[0].mean.dot(h[1].mean);

  for (int side = 0; side < 2; ++side) {
    const HalfMoments& other = h[1 - side];
    const auto& rows = side == 0 ? split.first : split.second;
    const double n = h[side].n;
    // dP/dV (diagonal part, plus off-diagonal part for rq)
    Matrix dv = Matrix::Zero(d, d);
    for (Eigen::Index i = 0; i < d; ++i) dv(i, i) = var_w * (other.second(i, i) - 1.0);
    Matrix dc = Matrix::Zero(d, d);
    for (Eigen::Index i = 0; i < d; ++i)
      for (Eigen::Index j = 0; j < d; ++j)
        if (i != j) (off_diag_uses_cross ? dc : dv)(i, j) = cov_w * (off_diag_uses_cross ? other.cross(i, j) : other.second(i, j));
    const RowVector dmean = center ? RowVector(var_w * other.mean / (2.0 * n)) : RowVector::Zero(d);
    for (auto k : rows) {
      // d V/d z_k = (e_i z_kj + z_ki e_j) / 2n, dV symmetric -> z_k dv / n
      gz.row(k) += z.row(k) * dv / n + zp.row(k) * dc / n + dmean;
      gzp.row(k) += zp.row(k) * dv / n + z.row(k) * dc / n + dmean;
    }
  }
  return value;
}

}  // namespace detail

/// Spectral contrastive loss; negatives pair each anchor with every other
/// row's partner (all m(m-1) off-diagonal pairs).
inline LossOutput loss_scl(const Matrix& Z, const Matrix& ZPlus, bool normalize = false, bool center = false) {
  detail::check_pair_shapes(Z, ZPlus, 2, "loss_scl");
  if (!normalize) return detail::cross_pair_loss(Z, ZPlus, 1.0, 0.5, center ? 1.0 : 0.0);
  Vector nz, nzp;
  const Matrix u = detail::normalize_rows(Z, nz);
  const Matrix up = detail::normalize_rows(ZPlus, nzp);
  LossOutput out = detail::cross_pair_loss(u, up, 1.0, 0.5, center ? 1.0 : 0.0);
  out.grad_Z = detail::normalize_rows_backward(u, nz, out.grad_Z);
  out.grad_ZPlus = detail::normalize_rows_backward(up, nzp, out.grad_ZPlus);
  return out;
}

/// Two-encoder low-rank approximation loss: -2 E[Phi(x)^T Psi(a)] + E_indep[(Phi(x)^T Psi(a))^2].
inline LossOutput loss_lora_svd(const Matrix& ZX, const Matrix& ZA, bool center = false) {
  detail::check_pair_shapes(ZX, ZA, 2, "loss_lora_svd");
  return detail::cross_pair_loss(ZX, ZA, 2.0, 1.0, center ? 2.0 : 0.0);
}

/// Rayleigh-quotient loss with penalties on the orthonormality constraints,
/// each penalty estimated as a product of two independent half-batch means.
inline LossOutput loss_rq(const Matrix& Z, const Matrix& ZPlus, const PenaltyConfig& cfg, const SplitScheme& split,
                          bool center = false) {
  detail::check_pair_shapes(Z, ZPlus, 4, "loss_rq");
  require(Z.rows() % 2 == 0, "loss_rq: batch size must be even");
  require(cfg.mu > 0 && cfg.nu > 0, "loss_rq: mu and nu must be positive");
  detail::check_split(split, Z.rows());
  const double m = static_cast<double>(Z.rows());
  const Matrix diff = Z - ZPlus;
  LossOutput out;
  out.value = diff.squaredNorm() / m;
  out.grad_Z = (2.0 / m) * diff;
  out.grad_ZPlus = -out.grad_Z;
  out.value += detail::split_penalty(Z, ZPlus, split, cfg, false, center, out.grad_Z, out.grad_ZPlus);
  return out;
}

/// Same constraints as loss_rq but with T-orthogonality between different
/// functions in place of plain orthogonality, which pins each output to a
/// single eigenfunction (up to order and sign).
inline LossOutput loss_rq_direct(const Matrix& Z, const Matrix& ZPlus, const PenaltyConfig& cfg,
                                 const SplitScheme& split, bool center = false) {
  detail::check_pair_shapes(Z, ZPlus, 4, "loss_rq_direct");
  require(Z.rows() % 2 == 0, "loss_rq_direct: batch size must be even");
  require(cfg.mu > 0 && cfg.nu > 0, "loss_rq_direct: mu and nu must be positive");
  detail::check_split(split, Z.rows());
  const double m = static_cast<double>(Z.rows());
  LossOutput out;
  out.value = -Z.cwiseProduct(ZPlus).sum() / m;
  out.grad_Z = -ZPlus / m;
  out.grad_ZPlus = -Z / m;
  out.value += detail::split_penalty(Z, ZPlus, split, cfg, true, center, out.grad_Z, out.grad_ZPlus);
  return out;
}

/// VICReg as commonly implemented: batch-centered views, hinge on the
/// standard deviation, squared off-diagonal covariance. C is the unbiased
/// covariance of the anchor view.
inline LossOutput loss_vicreg(const Matrix& Z, const Matrix& ZPlus, const PenaltyConfig& cfg) {
  detail::check_pair_shapes(Z, ZPlus, 2, "loss_vicreg");
  const Eigen::Index d = Z.cols();
  const double m = static_cast<double>(Z.rows());
  const double dd = static_cast<double>(d);
  const Matrix zc = Z.rowwise() - Z.colwise().mean();
  const Matrix zpc = ZPlus.rowwise() - ZPlus.colwise().mean();
  const Matrix diff = zc - zpc;
  const Matrix c = zc.transpose() * zc / (m - 1.0);

  LossOutput out;
  out.value = cfg.vicreg_lambda * diff.squaredNorm() / m;
  Matrix gzc = (2.0 * cfg.vicreg_lambda / m) * diff;
  Matrix gzpc = -gzc;

  Matrix gc = Matrix::Zero(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    const double sd = std::sqrt(c(i, i) + cfg.vicreg_eps);
    const double hinge = 1.0 - sd;
    if (hinge > 0) {
      out.value += cfg.mu / dd * hinge;
      gc(i, i) = -cfg.mu / dd / (2.0 * sd);
    }
  }
  if (d > 1) {
    const double w = cfg.nu / (dd * (dd - 1.0));
    for (Eigen::Index i = 0; i < d; ++i)
      for (Eigen::Index j = 0; j < d; ++j)
        if (i != j) {
          out.value += w * c(i, j) * c(i, j);
          gc(i, j) = 2.0 * w * c(i, j);
        }
  }
  gzc += zc * (gc + gc.transpose()) / (m - 1.0);
  out.grad_Z = gzc.rowwise() - gzc.colwise().mean();
  out.grad_ZPlus = gzpc.rowwise() - gzpc.colwise().mean();
  return out;
}

/// Dispatch by configuration. `split` is ignored by objectives that do not use one.
inline LossOutput evaluate_objective(const ObjectiveConfig& cfg, const Matrix& Z, const Matrix& ZPlus,
                                     const SplitScheme& split) {
  switch (cfg.kind) {
    case Objective::scl: return loss_scl(Z, ZPlus, cfg.normalize, cfg.center);
    case Objective::lora_svd: return loss_lora_svd(Z, ZPlus, cfg.center);
    case Objective::rq: return loss_rq(Z, ZPlus, cfg.penalty, split, cfg.center);
    case Objective::vicreg: return loss_vicreg(Z, ZPlus, cfg.penalty);
    case Objective::rq_direct: return loss_rq_direct(Z, ZPlus, cfg.penalty, split, cfg.center);
  }
  throw ConfigError("unknown objective");
}

}  // namespace spex
