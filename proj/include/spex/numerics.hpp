#pragma once

// Dense float64 linear algebra shared by every other header: matrix aliases,
// a counter-based RNG, Legendre recurrences and the symmetric eigensolver.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "spex/errors.hpp"

namespace spex {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

// ---------------------------------------------------------------------------
// Randomness
// ---------------------------------------------------------------------------

/// Domain tags for deriving independent substreams from one seed.
enum class StreamTag : std::uint64_t {
  kernel_sampler = 0x6b65726e656c5f73ULL,
  init = 0x696e69745f706172ULL,
  batch_shuffle = 0x73687566666c6521ULL,
  evaluation = 0x6576616c5f737472ULL,
  rayleigh_ritz = 0x72725f7374726561ULL,
};

/// Counter-based generator: draw k is a pure function of (seed, k), so a
/// stream can be reproduced or split without sharing mutable state.
struct Rng {
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;

  static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t next_u64() noexcept {
    ++counter;
    return mix(seed + counter * 0x9e3779b97f4a7c15ULL);
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  double normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept {
    // Lemire's multiply-shift; the residual bias is < n / 2^64.
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  /// Child stream keyed by (tag, index); independent of this stream's counter.
  Rng substream(StreamTag tag, std::uint64_t index = 0) const noexcept {
    const std::uint64_t k = mix(static_cast<std::uint64_t>(tag) ^ mix(index + 0x632be59bd9b4e019ULL));
    return Rng{mix(seed ^ k), 0};
  }
};

inline Matrix uniform_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double lo, double hi) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

inline Matrix normal_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian with sign fix).
inline Matrix random_orthogonal(Rng& rng, Eigen::Index n) {
  const Eigen::MatrixXd g = normal_matrix(rng, n, n);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < n; ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;
  return q;
}

// ---------------------------------------------------------------------------
// Legendre polynomials
// ---------------------------------------------------------------------------

/// P_n(x) by the Bonnet recurrence (k+1) P_{k+1} = (2k+1) x P_k - k P_{k-1}.
inline double legendre_eval(int n, double x) {
  require(n >= 0, "legendre_eval: degree must be non-negative");
  require(x >= -1.0 && x <= 1.0, "legendre_eval: x outside [-1, 1]");
  if (n == 0) return 1.0;
  double prev = 1.0, cur = x;
  for (int k = 1; k < n; ++k) {
    const double next = ((2.0 * k + 1.0) * x * cur - k * prev) / (k + 1.0);
    prev = cur;
    cur = next;
  }
  return cur;
}

/// Writes P_0(x) .. P_{out.size()-1}(x).
inline void legendre_all(double x, std::span<double> out) {
  if (out.empty()) return;
  out[0] = 1.0;
  if (out.size() > 1) out[1] = x;
  for (std::size_t k = 1; k + 1 < out.size(); ++k)
    out[k + 1] = ((2.0 * k + 1.0) * x * out[k] - k * out[k - 1]) / (k + 1.0);
}

// ---------------------------------------------------------------------------
// Symmetric eigensolver
// ---------------------------------------------------------------------------

struct SpectralResult {
  Vector eigenvalues;  // non-increasing
  Matrix eigenvectors; // column i pairs with eigenvalues[i]
};

namespace detail {

inline double off_diagonal_norm(const Matrix& a) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      if (i != j) s += a(i, j) * a(i, j);
  return std::sqrt(s);
}

inline void check_symmetric(const Matrix& b) {
  require(b.rows() == b.cols(), "sym_eig: matrix is not square");
  require(b.rows() <= 4096, "sym_eig: dimension above 4096");
  require(b.allFinite(), "sym_eig: non-finite entry");
  const double scale = std::max(1.0, b.cwiseAbs().maxCoeff());
  const double asym = (b - b.transpose()).cwiseAbs().maxCoeff();
  require(asym <= 1e-12 * scale, "sym_eig: matrix is not symmetric");
}

/// Sort descending; each eigenvector gets its first non-negligible coordinate
/// positive. Equal eigenvalues keep the order of their leading coordinates.
inline SpectralResult sort_and_fix_signs(const Vector& values, const Matrix& vectors) {
  const Eigen::Index n = values.size();
  Matrix v = vectors;
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = 0; i < n; ++i) {
      if (std::abs(v(i, j)) > 1e-12) {
        if (v(i, j) < 0) v.col(j) *= -1.0;
        break;
      }
    }
  }
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const double tie = 1e-12 * std::max(1.0, values.cwiseAbs().maxCoeff());
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    if (std::abs(values[a] - values[b]) > tie) return values[a] > values[b];
    for (Eigen::Index i = 0; i < n; ++i) {
      const double da = v(i, a), db = v(i, b);
      if (std::abs(da - db) > 1e-12) return da > db;
    }
    return false;
  });
  SpectralResult out{Vector(n), Matrix(n, n)};
  for (Eigen::Index k = 0; k < n; ++k) {
    out.eigenvalues[k] = values[order[static_cast<std::size_t>(k)]];
    out.eigenvectors.col(k) = v.col(order[static_cast<std::size_t>(k)]);
  }
  return out;
}

}  // namespace detail

/// Cyclic Jacobi rotations. Quadratically convergent and unconditionally
/// accurate for symmetric input; cost is O(n^3) per sweep.
inline SpectralResult jacobi_eig(const Matrix& b, int max_sweeps = 100) {
  detail::check_symmetric(b);
  const Eigen::Index n = b.rows();
  Matrix a = 0.5 * (b + b.transpose());
  Matrix v = Matrix::Identity(n, n);
  const double fro = a.norm();
  const double tol = 1e-15 * fro;
  int sweep = 0;
  for (; sweep < max_sweeps; ++sweep) {
    if (detail::off_diagonal_norm(a) <= tol) break;
    for (Eigen::Index p = 0; p + 1 < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) <= 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = a(q, p) = 0.0;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  const double off = detail::off_diagonal_norm(a);
  if (off > tol && off > 1e-13 * fro)
    throw ConvergenceError("jacobi_eig: no convergence after " + std::to_string(sweep) + " sweeps", off);
  return detail::sort_and_fix_signs(a.diagonal(), v);
}

/// Householder tridiagonalization followed by implicit QL (EISPACK tred2/tql2).
inline SpectralResult tridiagonal_eig(const Matrix& b) {
  detail::check_symmetric(b);
  const int n = static_cast<int>(b.rows());
  if (n == 0) return {};
  Eigen::MatrixXd V = 0.5 * (b + b.transpose());  // column-major for the inner loops
  std::vector<double> d(static_cast<std::size_t>(n)), e(static_cast<std::size_t>(n));

  // tred2
  for (int j = 0; j < n; ++j) d[j] = V(n - 1, j);
  for (int i = n - 1; i > 0; --i) {
    double scale = 0.0, h = 0.0;
    for (int k = 0; k < i; ++k) scale += std::abs(d[k]);
    if (scale == 0.0) {
      e[i] = d[i - 1];
      for (int j = 0; j < i; ++j) {
        d[j] = V(i - 1, j);
        V(i, j) = 0.0;
        V(j, i) = 0.0;
      }
    } else {
      for (int k = 0; k < i; ++k) {
        d[k] /= scale;
        h += d[k] * d[k];
      }
      double f = d[i - 1];
      double g = std::sqrt(h);
      if (f > 0) g = -g;
      e[i] = scale * g;
      h -= f * g;
      d[i - 1] = f - g;
      for (int j = 0; j < i; ++j) e[j] = 0.0;
      for (int j = 0; j < i; ++j) {
        f = d[j];
        V(j, i) = f;
        g = e[j] + V(j, j) * f;
        for (int k = j + 1; k <= i - 1; ++k) {
          g += V(k, j) * d[k];
          e[k] += V(k, j) * f;
        }
        e[j] = g;
      }
      f = 0.0;
      for (int j = 0; j < i; ++j) {
        e[j] /= h;
        f += e[j] * d[j];
      }
      const double hh = f / (h + h);
      for (int j = 0; j < i; ++j) e[j] -= hh * d[j];
      for (int j = 0; j < i; ++j) {
        f = d[j];
        g = e[j];
        for (int k = j; k <= i - 1; ++k) V(k, j) -= (f * e[k] + g * d[k]);
        d[j] = V(i - 1, j);
        V(i, j) = 0.0;
      }
    }
    d[i] = h;
  }
  for (int i = 0; i < n - 1; ++i) {
    V(n - 1, i) = V(i, i);
    V(i, i) = 1.0;
    const double h = d[i + 1];
    if (h != 0.0) {
      for (int k = 0; k <= i; ++k) d[k] = V(k, i + 1) / h;
      for (int j = 0; j <= i; ++j) {
        double g = 0.0;
        for (int k = 0; k <= i; ++k) g += V(k, i + 1) * V(k, j);
        for (int k = 0; k <= i; ++k) V(k, j) -= g * d[k];
      }
    }
    for (int k = 0; k <= i; ++k) V(k, i + 1) = 0.0;
  }
  for (int j = 0; j < n; ++j) {
    d[j] = V(n - 1, j);
    V(n - 1, j) = 0.0;
  }
  V(n - 1, n - 1) = 1.0;
  e[0] = 0.0;

  // tql2
  for (int i = 1; i < n; ++i) e[i - 1] = e[i];
  e[n - 1] = 0.0;
  double f = 0.0, tst1 = 0.0;
  const double eps = std::numeric_limits<double>::epsilon();
  const int max_iter = 60;
  for (int l = 0; l < n; ++l) {
    tst1 = std::max(tst1, std::abs(d[l]) + std::abs(e[l]));
    int m = l;
    while (m < n) {
      if (std::abs(e[m]) <= eps * tst1) break;
      ++m;
    }
    if (m == n) m = n - 1;
    if (m > l) {
      int iter = 0;
      do {
        if (++iter > max_iter) {
          double off = 0.0;
          for (int i = 0; i < n; ++i) off += e[i] * e[i];
          throw ConvergenceError("tridiagonal_eig: QL iteration did not converge", std::sqrt(off));
        }
        double g = d[l];
        double p = (d[l + 1] - g) / (2.0 * e[l]);
        double r = std::hypot(p, 1.0);
        if (p < 0) r = -r;
        d[l] = e[l] / (p + r);
        d[l + 1] = e[l] * (p + r);
        const double dl1 = d[l + 1];
        double h = g - d[l];
        for (int i = l + 2; i < n; ++i) d[i] -= h;
        f += h;
        p = d[m];
        double c = 1.0, c2 = 1.0, c3 = 1.0;
        const double el1 = e[l + 1];
        double s = 0.0, s2 = 0.0;
        for (int i = m - 1; i >= l; --i) {
          c3 = c2;
          c2 = c;
          s2 = s;
          g = c * e[i];
          h = c * p;
          r = std::hypot(p, e[i]);
          e[i + 1] = s * r;
          s = e[i] / r;
          c = p / r;
          p = c * d[i] - s * g;
          d[i + 1] = h + s * (c * g + s * d[i]);
          double* vi = V.col(i).data();
          double* vi1 = V.col(i + 1).data();
          for (int k = 0; k < n; ++k) {
            const double t = vi1[k];
            vi1[k] = s * vi[k] + c * t;
            vi[k] = c * vi[k] - s * t;
          }
        }
        p = -s * s2 * c3 * el1 * e[l] / dl1;
        e[l] = s * p;
        d[l] = c * p;
      } while (std::abs(e[l]) > eps * tst1);
    }
    d[l] += f;
    e[l] = 0.0;
  }
  Vector values = Eigen::Map<Vector>(d.data(), n);
  return detail::sort_and_fix_signs(values, Matrix(V));
}

/// Eigendecomposition of a symmetric matrix, eigenvalues descending.
/// Small problems use cyclic Jacobi; larger ones Householder + QL.
inline SpectralResult sym_eig(const Matrix& b) {
  if (b.rows() <= 64) return jacobi_eig(b);
  return tridiagonal_eig(b);
}

}  // namespace spex
