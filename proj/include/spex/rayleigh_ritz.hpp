#pragma once

// Post-hoc Rayleigh-Ritz: accumulate a d x d matrix from encoder outputs on
// positive pairs, diagonalize it, and rotate the encoder outputs into ordered
// eigenfunction estimates.
//
//   rq      B = E[z z+^T]                        apply: z U
//   vicreg  B = E[(z - mu)(z+ - mu)^T]           apply: (z - mu) U
//   scl     B = E[z z^T] over both views         apply: (z U) * Sigma^{-1/2}
//
// For vicreg mu is the mean of both views. The state keeps exact running
// means and the cross co-moment (Welford / Chan), so B does not depend on how
// the sample sequence was chunked.

#include <cstdint>
#include <optional>
#include <string>

#include "spex/objectives.hpp"

namespace spex {

enum class RRMode { rq, vicreg, scl };

inline std::string to_string(RRMode m) {
  switch (m) {
    case RRMode::rq: return "rq";
    case RRMode::vicreg: return "vicreg";
    case RRMode::scl: return "scl";
  }
  return "?";
}

inline RRMode rr_mode_for(Objective o) {
  switch (o) {
    case Objective::rq:
    case Objective::rq_direct: return RRMode::rq;
    case Objective::vicreg: return RRMode::vicreg;
    case Objective::scl:
    case Objective::lora_svd: return RRMode::scl;
  }
  return RRMode::rq;
}

struct StreamState {
  RRMode mode = RRMode::rq;
  Matrix B;            // current estimate
  RowVector mean;      // vicreg: mean over both views
  RowVector mean_a;    // vicreg: mean of the anchor view
  RowVector mean_b;    // vicreg: mean of the partner view
  Matrix comoment;     // vicreg: sum (z - mean_a)(z+ - mean_b)^T
  std::uint64_t cnt = 0;

  StreamState() = default;
  StreamState(RRMode m, Eigen::Index d)
      : mode(m),
        B(Matrix::Zero(d, d)),
        mean(RowVector::Zero(d)),
        mean_a(RowVector::Zero(d)),
        mean_b(RowVector::Zero(d)),
        comoment(Matrix::Zero(d, d)) {}

  Eigen::Index dim() const { return B.rows(); }
};

namespace detail {

inline void refresh_vicreg_b(StreamState& s) {
  if (s.cnt == 0) return;
  const double n = static_cast<double>(s.cnt);
  s.mean = 0.5 * (s.mean_a + s.mean_b);
  s.B = (s.comoment + n * (s.mean_a - s.mean).transpose() * (s.mean_b - s.mean)) / n;
}

}  // namespace detail

/// Count-weighted merge of two states of the same mode.
inline StreamState merge(const StreamState& a, const StreamState& b) {
  require(a.mode == b.mode, "merge: stream modes differ");
  require(a.dim() == b.dim(), "merge: stream dimensions differ");
  if (a.cnt == 0) return b;
  if (b.cnt == 0) return a;
  StreamState out = a;
  out.cnt = a.cnt + b.cnt;
  const double na = static_cast<double>(a.cnt), nb = static_cast<double>(b.cnt), n = na + nb;
  if (a.mode != RRMode::vicreg) {
    out.B = (na * a.B + nb * b.B) / n;
    return out;
  }
  const RowVector da = b.mean_a - a.mean_a, db = b.mean_b - a.mean_b;
  out.mean_a = a.mean_a + da * (nb / n);
  out.mean_b = a.mean_b + db * (nb / n);
  out.comoment = a.comoment + b.comoment + (na * nb / n) * da.transpose() * db;
  detail::refresh_vicreg_b(out);
  return out;
}

/// Folds one batch of positive-pair outputs into the state.
inline void stream_update(StreamState& state, const Matrix& Z, const Matrix& ZPlus) {
  require(Z.rows() == ZPlus.rows() && Z.cols() == ZPlus.cols(), "stream_update: Z and ZPlus shapes differ");
  require(Z.cols() == state.dim(), "stream_update: output width does not match the state");
  if (Z.rows() == 0) return;
  const auto m = static_cast<std::uint64_t>(Z.rows());
  const double md = static_cast<double>(m);
  StreamState batch(state.mode, state.dim());
  switch (state.mode) {
    case RRMode::rq:
      batch.B = Z.transpose() * ZPlus / md;
      batch.cnt = m;
      break;
    case RRMode::scl:
      batch.B = (Z.transpose() * Z + ZPlus.transpose() * ZPlus) / (2.0 * md);
      batch.cnt = 2 * m;
      break;
    case RRMode::vicreg: {
      batch.mean_a = Z.colwise().mean();
      batch.mean_b = ZPlus.colwise().mean();
      const Matrix za = Z.rowwise() - batch.mean_a;
      const Matrix zb = ZPlus.rowwise() - batch.mean_b;
      batch.comoment = za.transpose() * zb;
      batch.cnt = m;
      detail::refresh_vicreg_b(batch);
      break;
    }
  }
  state = merge(state, batch);
}

struct RRTransform {
  RRMode mode = RRMode::rq;
  Matrix U;                        // columns rotate outputs into eigenfunctions
  Vector eigenvalues;              // descending
  std::optional<RowVector> mean;   // subtracted before rotating
  std::optional<RowVector> scale;  // multiplies the rotated columns

  Eigen::Index dim() const { return U.rows(); }
};

inline RRTransform identity_transform(Eigen::Index d) {
  return {RRMode::rq, Matrix::Identity(d, d), Vector::Ones(d), std::nullopt, std::nullopt};
}

/// Diagonalizes the accumulated matrix. scl mode whitens by Sigma^{-1/2}.
inline RRTransform finalize(const StreamState& state) {
  const Eigen::Index d = state.dim();
  require(d >= 1, "finalize: empty state");
  if (state.cnt < static_cast<std::uint64_t>(d))
    throw InsufficientData("finalize: " + std::to_string(state.cnt) + " samples for " + std::to_string(d) +
                           " dimensions");
  require(state.B.allFinite(), "finalize: non-finite accumulator");
  const Matrix sym = 0.5 * (state.B + state.B.transpose());
  const SpectralResult eig = sym_eig(sym);
  RRTransform t{state.mode, eig.eigenvectors, eig.eigenvalues, std::nullopt, std::nullopt};
  if (state.mode == RRMode::vicreg) t.mean = state.mean;
  if (state.mode == RRMode::scl) {
    RowVector scale(d);
    for (Eigen::Index i = 0; i < d; ++i) {
      if (!(eig.eigenvalues[i] > 0.0)) throw RankDeficient(static_cast<std::size_t>(i), eig.eigenvalues[i]);
      scale[i] = 1.0 / std::sqrt(eig.eigenvalues[i]);
    }
    t.scale = scale;
  }
  return t;
}

/// Rows of Z mapped to ordered eigenfunction estimates.
inline Matrix apply(const RRTransform& t, const Matrix& Z) {
  require(Z.cols() == t.dim(), "apply: output width does not match the transform");
  Matrix out = t.mean ? Matrix((Z.rowwise() - *t.mean) * t.U) : Matrix(Z * t.U);
  if (t.scale) out.array().rowwise() *= t.scale->array();
  return out;
}

inline RowVector apply(const RRTransform& t, const RowVector& z) {
  const Matrix row = z;
  return apply(t, row).row(0);
}

}  // namespace spex
