#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace spex {

/// A caller broke a documented precondition (shape, range, ordering).
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Unknown or malformed configuration value.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Iterative eigensolver ran out of budget.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double off_diagonal_norm)
      : std::runtime_error(what + " (off-diagonal norm " + std::to_string(off_diagonal_norm) + ")"),
        off_diagonal_norm_(off_diagonal_norm) {}
  double off_diagonal_norm() const noexcept { return off_diagonal_norm_; }

 private:
  double off_diagonal_norm_;
};

class InsufficientData : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Rayleigh-Ritz whitening hit a non-positive eigenvalue.
class RankDeficient : public std::runtime_error {
 public:
  RankDeficient(std::size_t index, double value)
      : std::runtime_error("non-positive eigenvalue " + std::to_string(value) + " at index " +
                           std::to_string(index)),
        index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

class DegenerateFeature : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(const std::string& layer)
      : std::runtime_error("non-finite gradient in " + layer), layer_(layer) {}
  const std::string& layer() const noexcept { return layer_; }

 private:
  std::string layer_;
};

/// Binary file (checkpoint, pair pool) is unreadable or from another version.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractViolation(msg);
}

}  // namespace spex
