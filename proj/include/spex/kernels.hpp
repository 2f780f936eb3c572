#pragma once

// Synthetic contextual kernels with a known spectrum.
//
//   K(a, a') = sum_{i=1..r} lambda_i psi_i(a) psi_i(a'),   a, a' in [-1, 1]^p
//
// with psi_i orthonormal under the uniform marginal P_A = 2^-p. The joint
// density of a positive pair is K(a, a') P_A(a) P_A(a'), so given a the
// partner has conditional density P+(a' | a) = K(a, a') / 2^p. psi_1 == 1 and
// lambda_1 == 1 make that conditional integrate to one.

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "spex/numerics.hpp"

namespace spex {

enum class BasisKind { legendre, fourier };

inline std::string to_string(BasisKind k) { return k == BasisKind::legendre ? "legendre" : "fourier"; }

inline BasisKind basis_kind_from_string(const std::string& s) {
  if (s == "legendre") return BasisKind::legendre;
  if (s == "fourier") return BasisKind::fourier;
  throw ConfigError("unknown kernel kind '" + s + "'");
}

struct KernelSpec {
  BasisKind kind = BasisKind::legendre;
  int p = 1;
  int r = 1;
  std::vector<double> eigenvalues;  // lambda_1..lambda_r, lambda_1 == 1
};

/// sup |psi_i|^2 over the cube: (2i-1)^p for Legendre, 2^p for Fourier (i >= 2).
inline double envelope_factor(BasisKind kind, int i, int p) {
  const double base = kind == BasisKind::legendre ? 2.0 * i - 1.0 : 2.0;
  return std::pow(base, p);
}

struct Validity {
  bool valid = false;
  double margin = 0.0;
};

/// margin = 1 - sum_{i>=2} B_i^p lambda_i; non-negative margin guarantees a
/// non-negative joint density.
inline Validity validity_check(const KernelSpec& spec) {
  double sum = 0.0;
  for (int i = 2; i <= spec.r; ++i) sum += envelope_factor(spec.kind, i, spec.p) * spec.eigenvalues[i - 1];
  const double margin = 1.0 - sum;
  return {margin >= 0.0, margin};
}

/// lambda_1 = 1 and lambda_i = c exp(-decay i) for i >= 2, with c the largest
/// constant keeping the spec valid (margin exactly zero).
inline KernelSpec make_kernel(BasisKind kind, int p, int r, double decay_rate) {
  require(r >= 1, "make_kernel: rank must be >= 1");
  require(p >= 1, "make_kernel: input dimension must be >= 1");
  require(decay_rate > 0.0, "make_kernel: decay rate must be positive");
  KernelSpec spec{kind, p, r, std::vector<double>(static_cast<std::size_t>(r), 0.0)};
  spec.eigenvalues[0] = 1.0;
  double weighted = 0.0;
  for (int i = 2; i <= r; ++i) weighted += envelope_factor(kind, i, p) * std::exp(-decay_rate * i);
  if (r >= 2) {
    const double c = 1.0 / weighted;
    for (int i = 2; i <= r; ++i) spec.eigenvalues[i - 1] = c * std::exp(-decay_rate * i);
  }
  return spec;
}

inline void check_point(const KernelSpec& spec, std::span<const double> a) {
  require(static_cast<int>(a.size()) == spec.p, "kernel: point has wrong dimension");
  for (double x : a) require(x >= -1.0 && x <= 1.0, "kernel: point outside [-1, 1]^p");
}

/// Fills out[0..count) with psi_first..psi_{first+count-1} at a (1-based index).
inline void basis_values(const KernelSpec& spec, std::span<const double> a, int first, std::span<double> out) {
  const int count = static_cast<int>(out.size());
  const int top = first + count - 1;
  std::vector<double> poly(static_cast<std::size_t>(top));
  for (int k = 0; k < count; ++k) out[k] = 1.0;
  for (int j = 0; j < spec.p; ++j) {
    if (spec.kind == BasisKind::legendre) {
      legendre_all(a[j], poly);
      for (int k = 0; k < count; ++k) {
        const int i = first + k;
        if (i > 1) out[k] *= std::sqrt(2.0 * i - 1.0) * poly[i - 1];
      }
    } else {
      for (int k = 0; k < count; ++k) {
        const int i = first + k;
        if (i > 1) out[k] *= std::numbers::sqrt2 * std::cos((i - 1) * std::numbers::pi * a[j]);
      }
    }
  }
}

/// psi_i(a); psi_1 is the constant 1 for both families.
inline double basis_eval(const KernelSpec& spec, int i, std::span<const double> a) {
  require(i >= 1 && i <= spec.r, "basis_eval: index out of range");
  check_point(spec, a);
  if (i == 1) return 1.0;
  double v = 0.0;
  basis_values(spec, a, i, std::span<double>(&v, 1));
  return v;
}

inline double kernel_eval(const KernelSpec& spec, std::span<const double> a, std::span<const double> b) {
  check_point(spec, a);
  check_point(spec, b);
  std::vector<double> pa(static_cast<std::size_t>(spec.r)), pb(static_cast<std::size_t>(spec.r));
  basis_values(spec, a, 1, pa);
  basis_values(spec, b, 1, pb);
  double k = 0.0;
  for (int i = 0; i < spec.r; ++i) k += spec.eigenvalues[i] * pa[i] * pb[i];
  return k;
}

/// Rows of `points` mapped to psi_first..psi_{first+count-1}.
inline Matrix basis_matrix(const KernelSpec& spec, const Matrix& points, int first, int count) {
  require(first >= 1 && first + count - 1 <= spec.r, "basis_matrix: index range exceeds rank");
  require(points.cols() == spec.p, "basis_matrix: points have wrong dimension");
  Matrix out(points.rows(), count);
  for (Eigen::Index k = 0; k < points.rows(); ++k)
    basis_values(spec, std::span<const double>(points.row(k).data(), static_cast<std::size_t>(spec.p)), first,
                 std::span<double>(out.row(k).data(), static_cast<std::size_t>(count)));
  return out;
}

struct SampleBatch {
  Matrix A;      // m x p, i.i.d. uniform on the cube
  Matrix APlus;  // m x p, row k drawn from P+(. | A row k)
  std::size_t proposals = 0;  // rejection-sampler trials spent on APlus
};

/// Envelope M = 1 + sum_{i>=2} lambda_i B_i^p >= sup K; at most 2 for a valid spec.
inline double rejection_envelope(const KernelSpec& spec) {
  double m = spec.eigenvalues[0];
  for (int i = 2; i <= spec.r; ++i) m += spec.eigenvalues[i - 1] * envelope_factor(spec.kind, i, spec.p);
  return m;
}

/// Draws m positive pairs. a is uniform; a+ comes from uniform proposals
/// accepted with probability K(a, a+) / M.
inline SampleBatch sample_pairs(const KernelSpec& spec, Rng& rng, std::size_t m) {
  require(m >= 1, "sample_pairs: batch size must be >= 1");
  require(validity_check(spec).margin >= -1e-12, "sample_pairs: kernel spec violates the validity bound");
  const auto p = static_cast<Eigen::Index>(spec.p);
  const auto n = static_cast<Eigen::Index>(m);
  SampleBatch batch{Matrix(n, p), Matrix(n, p), 0};
  const double envelope = rejection_envelope(spec);
  std::vector<double> wa(static_cast<std::size_t>(spec.r)), wb(static_cast<std::size_t>(spec.r));
  std::vector<double> cand(static_cast<std::size_t>(p));
  for (Eigen::Index k = 0; k < n; ++k) {
    for (Eigen::Index j = 0; j < p; ++j) batch.A(k, j) = rng.uniform(-1.0, 1.0);
    basis_values(spec, std::span<const double>(batch.A.row(k).data(), cand.size()), 1, wa);
    for (int i = 0; i < spec.r; ++i) wa[i] *= spec.eigenvalues[i];
    for (;;) {
      ++batch.proposals;
      for (auto& x : cand) x = rng.uniform(-1.0, 1.0);
      basis_values(spec, cand, 1, wb);
      double kval = 0.0;
      for (int i = 0; i < spec.r; ++i) kval += wa[i] * wb[i];
      if (rng.uniform() * envelope < kval) break;
    }
    for (Eigen::Index j = 0; j < p; ++j) batch.APlus(k, j) = cand[static_cast<std::size_t>(j)];
  }
  return batch;
}

}  // namespace spex
