#pragma once

#include <cstddef>
#include <cstdint>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdmm {

using Vec = std::vector<double>;

/** Row-major dense matrix of doubles. Small sizes only (particles x latent dim). */
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c, double fill = 0.0) : rows(r), cols(c), a(static_cast<size_t>(r) * c, fill) {}

  double& operator()(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }

  double* row_ptr(int r) { return a.data() + static_cast<size_t>(r) * cols; }
  const double* row_ptr(int r) const { return a.data() + static_cast<size_t>(r) * cols; }

  Vec row(int r) const { return Vec(row_ptr(r), row_ptr(r) + cols); }
  size_t size() const { return a.size(); }
};

/// Fusing a Gaussian quotient whose net precision is not strictly positive.
struct ConstraintViolation : std::runtime_error {
  explicit ConstraintViolation(const std::string& what) : std::runtime_error(what) {}
};

/// Operands with incompatible or invalid shapes/values.
struct ShapeError : std::invalid_argument {
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

/// Training aborted on a non-finite loss; message carries the term breakdown.
struct TrainingDiverged : std::runtime_error {
  explicit TrainingDiverged(const std::string& what) : std::runtime_error(what) {}
};

/// File/serialization problems (malformed dataset, checkpoint, manifest mismatch).
struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

inline bool all_finite(std::span<const double> xs) {
  for (double x : xs)
    if (!std::isfinite(x)) return false;
  return true;
}

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

}  // namespace mdmm
