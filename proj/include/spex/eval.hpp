#pragma once

// Ground-truth metrics against an analytic kernel spec, eigenvalue
// estimators, a quadrature oracle and prefix-truncation curves.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "spex/kernels.hpp"
#include "spex/rayleigh_ritz.hpp"

namespace spex {

/// Maps an m x p batch of points to m x d estimated eigenfunction values.
using FeatureFn = std::function<Matrix(const Matrix&)>;

inline constexpr Eigen::Index kEvalChunk = 50000;

// ---------------------------------------------------------------------------
// EF-MSE / EV-RAE
// ---------------------------------------------------------------------------

/// Sufficient statistics for sign-aligned squared error.
struct AlignedError {
  Vector ff, gg, fg;
  double n = 0;

  explicit AlignedError(Eigen::Index d) : ff(Vector::Zero(d)), gg(Vector::Zero(d)), fg(Vector::Zero(d)) {}

  void add(const Matrix& est, const Matrix& truth) {
    ff += est.cwiseAbs2().colwise().sum().transpose();
    gg += truth.cwiseAbs2().colwise().sum().transpose();
    fg += est.cwiseProduct(truth).colwise().sum().transpose();
    n += static_cast<double>(est.rows());
  }

  /// min over s = +-1 of mean (s f - g)^2
  Vector mse() const {
    Vector out(ff.size());
    for (Eigen::Index i = 0; i < ff.size(); ++i) out[i] = std::max(0.0, (ff[i] + gg[i] - 2.0 * std::abs(fg[i])) / n);
    return out;
  }
};

/// Per-column sign-aligned MSE between two sampled function tables.
inline Vector ef_mse(const Matrix& est, const Matrix& truth) {
  require(est.rows() == truth.rows() && est.cols() == truth.cols(), "ef_mse: shape mismatch");
  require(est.rows() >= 1, "ef_mse: no evaluation points");
  AlignedError acc(est.cols());
  acc.add(est, truth);
  return acc.mse();
}

/// Estimated column i is compared with psi*_{i + 1 + offset} on n_eval fresh
/// uniform points (offset 1 skips the constant eigenfunction).
inline Vector ef_mse(const FeatureFn& estimates, const KernelSpec& spec, int d, std::size_t n_eval, Rng& rng,
                     int offset = 1) {
  require(d >= 1 && d + offset <= spec.r, "ef_mse: more estimated functions than non-trivial eigenpairs");
  require(n_eval >= 1, "ef_mse: n_eval must be positive");
  AlignedError acc(d);
  std::size_t done = 0;
  while (done < n_eval) {
    const auto m = static_cast<Eigen::Index>(std::min<std::size_t>(kEvalChunk, n_eval - done));
    const Matrix pts = uniform_matrix(rng, m, spec.p, -1.0, 1.0);
    const Matrix est = estimates(pts);
    require(est.rows() == m && est.cols() >= d, "ef_mse: estimator returned the wrong shape");
    acc.add(est.leftCols(d), basis_matrix(spec, pts, 1 + offset, d));
    done += static_cast<std::size_t>(m);
  }
  return acc.mse();
}

/// Per-index |lambda_i - lambda_hat_i| / lambda_i.
inline Vector ev_relative_errors(const Vector& estimated, const Vector& truth) {
  require(estimated.size() == truth.size() && truth.size() >= 1, "ev_rae: length mismatch");
  Vector out(truth.size());
  for (Eigen::Index i = 0; i < truth.size(); ++i) {
    require(truth[i] > 0.0, "ev_rae: true eigenvalues must be positive");
    out[i] = std::abs(truth[i] - estimated[i]) / truth[i];
  }
  return out;
}

inline double ev_rae(const Vector& estimated, const Vector& truth) { return ev_relative_errors(estimated, truth).mean(); }

/// lambda_{1 + offset} .. lambda_{d + offset} of the spec.
inline Vector true_eigenvalues(const KernelSpec& spec, int d, int offset = 1) {
  require(d + offset <= spec.r, "true_eigenvalues: index beyond rank");
  Vector out(d);
  for (int i = 0; i < d; ++i) out[i] = spec.eigenvalues[static_cast<std::size_t>(i + offset)];
  return out;
}

// ---------------------------------------------------------------------------
// Eigenvalue estimation
// ---------------------------------------------------------------------------

enum class EigenvalueMethod { rayleigh, second_moment, from_transform };

inline std::string to_string(EigenvalueMethod m) {
  switch (m) {
    case EigenvalueMethod::rayleigh: return "rayleigh";
    case EigenvalueMethod::second_moment: return "second_moment";
    case EigenvalueMethod::from_transform: return "from_transform";
  }
  return "?";
}

/// rayleigh: E[f(a) f(a+)] / E[f(a)^2]; second_moment: E[f(a)^2], both over n
/// fresh pairs from the spec's sampler.
inline Vector estimate_eigenvalues(const FeatureFn& f, const KernelSpec& spec, std::size_t n, Rng& rng,
                                   EigenvalueMethod method) {
  require(n >= 1, "estimate_eigenvalues: n must be positive");
  require(method != EigenvalueMethod::from_transform, "estimate_eigenvalues: use the transform eigenvalues");
  Vector cross, square;
  std::size_t done = 0;
  while (done < n) {
    const std::size_t m = std::min<std::size_t>(static_cast<std::size_t>(kEvalChunk), n - done);
    const SampleBatch batch = sample_pairs(spec, rng, m);
    const Matrix fa = f(batch.A), fb = f(batch.APlus);
    if (cross.size() == 0) {
      cross = Vector::Zero(fa.cols());
      square = Vector::Zero(fa.cols());
    }
    cross += fa.cwiseProduct(fb).colwise().sum().transpose();
    square += fa.cwiseAbs2().colwise().sum().transpose();
    done += m;
  }
  const double nd = static_cast<double>(n);
  cross /= nd;
  square /= nd;
  if (method == EigenvalueMethod::second_moment) return square;
  Vector out(cross.size());
  for (Eigen::Index i = 0; i < cross.size(); ++i) {
    if (square[i] < 1e-10) throw DegenerateFeature("estimate_eigenvalues: feature " + std::to_string(i) + " is ~0");
    out[i] = cross[i] / square[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Quadrature oracle
// ---------------------------------------------------------------------------

using KernelFn = std::function<double(std::span<const double>, std::span<const double>)>;

struct OracleResult {
  int nodes_per_axis = 0;
  Matrix nodes;        // total x p midpoints
  Vector eigenvalues;  // k, descending
  Matrix values;       // total x k, (1/total) sum v^2 == 1
};

namespace detail {

inline Matrix midpoint_grid(int p, int n) {
  Eigen::Index total = 1;
  for (int j = 0; j < p; ++j) total *= n;
  Matrix nodes(total, p);
  const double h = 2.0 / n;
  for (Eigen::Index k = 0; k < total; ++k) {
    Eigen::Index rest = k;
    for (int j = p - 1; j >= 0; --j) {
      nodes(k, j) = -1.0 + (static_cast<double>(rest % n) + 0.5) * h;
      rest /= n;
    }
  }
  return nodes;
}

/// Block power iteration with Rayleigh-Ritz on the block; converged when
/// successive top-k Ritz values move less than tol.
inline SpectralResult subspace_iteration(const Matrix& M, Eigen::Index k, double tol, int max_iter) {
  const Eigen::Index n = M.rows();
  const Eigen::Index b = std::min(n, k + std::max<Eigen::Index>(4, k));
  Rng rng{0x5eed};
  Eigen::MatrixXd q = normal_matrix(rng, n, b);
  Vector prev = Vector::Constant(k, std::numeric_limits<double>::infinity());
  SpectralResult small;
  for (int it = 0; it < max_iter; ++it) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(q);
    q = qr.householderQ() * Eigen::MatrixXd::Identity(n, b);
    const Eigen::MatrixXd mq = M * q;
    Matrix h = q.transpose() * mq;
    h = 0.5 * (h + h.transpose());
    small = sym_eig(h);
    q = mq * small.eigenvectors;  // next block, already rotated
    const Vector cur = small.eigenvalues.head(k);
    if ((cur - prev).cwiseAbs().maxCoeff() < tol) {
      Eigen::HouseholderQR<Eigen::MatrixXd> fin(q);
      Eigen::MatrixXd basis = fin.householderQ() * Eigen::MatrixXd::Identity(n, b);
      Matrix hb = basis.transpose() * M * basis;
      hb = 0.5 * (hb + hb.transpose());
      const SpectralResult rr = sym_eig(hb);
      return {rr.eigenvalues.head(k), Matrix(basis * rr.eigenvectors.leftCols(k))};
    }
    prev = cur;
  }
  throw ConvergenceError("subspace_iteration: no convergence", (small.eigenvalues.head(k) - prev).norm());
}

}  // namespace detail

/// Midpoint discretization M_jk = K(a_j, a_k) dvol / 2^p of the kernel
/// integral operator under the uniform marginal, diagonalized densely up to
/// 2048 nodes and by subspace iteration beyond.
inline OracleResult grid_oracle(const KernelFn& kernel, int p, int n, int k) {
  require(p >= 1 && p <= 2, "grid_oracle: p must be 1 or 2");
  require(n >= 1 && k >= 1, "grid_oracle: need nodes and wanted pairs");
  OracleResult out;
  out.nodes_per_axis = n;
  out.nodes = detail::midpoint_grid(p, n);
  const Eigen::Index total = out.nodes.rows();
  require(k <= total, "grid_oracle: more pairs requested than nodes");
  const double w = 1.0 / static_cast<double>(total);  // dvol / 2^p
  Matrix M(total, total);
  for (Eigen::Index i = 0; i < total; ++i) {
    const std::span<const double> a(out.nodes.row(i).data(), static_cast<std::size_t>(p));
    for (Eigen::Index j = i; j < total; ++j) {
      const std::span<const double> b(out.nodes.row(j).data(), static_cast<std::size_t>(p));
      M(i, j) = M(j, i) = w * kernel(a, b);
    }
  }
  SpectralResult eig;
  if (total <= 2048) {
    eig = sym_eig(M);
  } else {
    eig = detail::subspace_iteration(M, k, 1e-10, 10000);
  }
  out.eigenvalues = eig.eigenvalues.head(k);
  out.values = eig.eigenvectors.leftCols(k) * std::sqrt(static_cast<double>(total));
  return out;
}

// ---------------------------------------------------------------------------
// Truncation curves
// ---------------------------------------------------------------------------

struct TruncationPoint {
  int k = 0;
  double error = 0.0;    // Monte-Carlo ||K - K_k||_HS^2
  double stderr_ = 0.0;  // its standard error
  double optimum = 0.0;  // sum of squared eigenvalues beyond the prefix
};

/// Reconstruction error of K by sum_{i <= k} lam_i f_i (x) f_i over an n x n
/// grid of independent point pairs. With `prepend_constant` the pair
/// (1, psi == 1) is always included and k counts the estimated functions.
inline std::vector<TruncationPoint> truncation_curve(const FeatureFn& f, const Vector& lambda_hat,
                                                     const KernelSpec& spec, const std::vector<int>& prefixes,
                                                     std::size_t n, Rng& rng, bool prepend_constant = false) {
  const auto d = static_cast<int>(lambda_hat.size());
  for (int k : prefixes) require(k >= 0 && k <= d, "truncation_curve: prefix outside [0, d]");
  require(n >= 2, "truncation_curve: need at least two points per side");
  const auto nn = static_cast<Eigen::Index>(n);
  const Matrix a = uniform_matrix(rng, nn, spec.p, -1.0, 1.0);
  const Matrix b = uniform_matrix(rng, nn, spec.p, -1.0, 1.0);
  Vector lam(spec.r);
  for (int i = 0; i < spec.r; ++i) lam[i] = spec.eigenvalues[static_cast<std::size_t>(i)];
  const Matrix pa = basis_matrix(spec, a, 1, spec.r), pb = basis_matrix(spec, b, 1, spec.r);
  Matrix residual = pa * lam.asDiagonal() * pb.transpose();
  if (prepend_constant) residual.array() -= 1.0;
  const Matrix fa = f(a), fb = f(b);
  require(fa.cols() >= d && fb.cols() >= d, "truncation_curve: estimator narrower than lambda_hat");

  std::vector<int> order = prefixes;
  std::sort(order.begin(), order.end());
  std::vector<TruncationPoint> out;
  int used = 0;
  for (int k : order) {
    for (; used < k; ++used) residual -= lambda_hat[used] * fa.col(used) * fb.col(used).transpose();
    const Matrix sq = residual.cwiseAbs2();
    const double mean = sq.mean();
    const Vector rows = sq.rowwise().mean(), cols = sq.colwise().mean().transpose();
    const double nd = static_cast<double>(n);
    const double var_rows = (rows.array() - mean).square().sum() / (nd - 1.0);
    const double var_cols = (cols.array() - mean).square().sum() / (nd - 1.0);
    const double var_all = (sq.array() - mean).square().sum() / (nd * nd - 1.0);
    TruncationPoint pt;
    pt.k = k;
    pt.error = mean;
    pt.stderr_ = std::sqrt(var_rows / nd + var_cols / nd + var_all / (nd * nd));
    const int skip = k + (prepend_constant ? 1 : 0);
    for (int i = skip; i < spec.r; ++i) pt.optimum += lam[i] * lam[i];
    out.push_back(pt);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Records and aggregation
// ---------------------------------------------------------------------------

struct MetricsRecord {
  Vector ef_mse;       // per index
  double mean_ef_mse = 0.0;
  Vector ev_errors;    // per index relative absolute errors
  double mean_ev_rae = 0.0;
  Vector lambda_hat;
  Vector lambda_true;
  std::size_t samples = 0;
  std::uint64_t seed = 0;
};

inline MetricsRecord make_record(const Vector& mse, const Vector& lambda_hat, const Vector& lambda_true,
                                 std::size_t samples, std::uint64_t seed) {
  MetricsRecord r;
  r.ef_mse = mse;
  r.mean_ef_mse = mse.mean();
  r.ev_errors = ev_relative_errors(lambda_hat, lambda_true);
  r.mean_ev_rae = r.ev_errors.mean();
  r.lambda_hat = lambda_hat;
  r.lambda_true = lambda_true;
  r.samples = samples;
  r.seed = seed;
  return r;
}

struct MeanStderr {
  double mean = 0.0;
  double stderr_ = 0.0;
};

/// Sample mean and standard error (n - 1 normalization; zero for one value).
inline MeanStderr mean_stderr(const std::vector<double>& xs) {
  require(!xs.empty(), "mean_stderr: no values");
  const double n = static_cast<double>(xs.size());
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= n;
  if (xs.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / (n - 1.0) / n)};
}

}  // namespace spex
