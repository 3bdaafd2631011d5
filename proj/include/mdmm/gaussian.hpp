#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mdmm/common.hpp"
#include "mdmm/rng.hpp"

namespace mdmm {

/// Net precision below this is treated as a violated quotient constraint.
inline constexpr double kPrecisionFloor = 1e-12;

/**
 * Diagonal Gaussian stored as mean and per-dimension precision (inverse
 * variance). Precision is canonical because products and quotients of
 * Gaussian densities add and subtract precisions; variances are derived.
 */
struct DiagGaussian {
  Vec mean;
  Vec prec;

  DiagGaussian() = default;

  DiagGaussian(Vec m, Vec p) : mean(std::move(m)), prec(std::move(p)) {
    require(mean.size() == prec.size(), "DiagGaussian: mean/precision dim mismatch");
    require(all_finite(mean), "DiagGaussian: non-finite mean");
    for (double t : prec)
      require(std::isfinite(t) && t > 0.0, "DiagGaussian: precision must be finite and > 0");
  }

  static DiagGaussian from_mean_sigma(Vec m, const Vec& sigma) {
    Vec p(sigma.size());
    for (size_t i = 0; i < sigma.size(); ++i) p[i] = 1.0 / (sigma[i] * sigma[i]);
    return DiagGaussian(std::move(m), std::move(p));
  }

  static DiagGaussian from_mean_var(Vec m, const Vec& var) {
    Vec p(var.size());
    for (size_t i = 0; i < var.size(); ++i) p[i] = 1.0 / var[i];
    return DiagGaussian(std::move(m), std::move(p));
  }

  static DiagGaussian standard(int dim) { return DiagGaussian(Vec(dim, 0.0), Vec(dim, 1.0)); }

  int dim() const { return static_cast<int>(mean.size()); }
  double variance(int i) const { return 1.0 / prec[i]; }
  double sigma(int i) const { return 1.0 / std::sqrt(prec[i]); }

  Vec variances() const {
    Vec v(mean.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = 1.0 / prec[i];
    return v;
  }
};

/**
 * Unnormalized quotient of diagonal Gaussian densities,
 * prod(numerators) / prod(denominators). fuse() renormalizes it; the result
 * is a proper Gaussian only while the net precision stays positive.
 */
struct GaussianQuotientFactor {
  std::vector<DiagGaussian> numerators;
  std::vector<DiagGaussian> denominators;
};

/// Renormalized product of two Gaussians: precisions add, means precision-average.
inline DiagGaussian product(const DiagGaussian& a, const DiagGaussian& b) {
  require(a.dim() == b.dim(), "product: dim mismatch");
  const int d = a.dim();
  Vec mean(d), prec(d);
  for (int i = 0; i < d; ++i) {
    prec[i] = a.prec[i] + b.prec[i];
    mean[i] = (a.mean[i] * a.prec[i] + b.mean[i] * b.prec[i]) / prec[i];
  }
  return DiagGaussian(std::move(mean), std::move(prec));
}

/**
 * Closed-form renormalization of a Gaussian quotient. Per dimension the net
 * precision is sum(numerator precisions) - sum(denominator precisions) and
 * the mean is the signed precision-weighted mean combination. Throws
 * ConstraintViolation if any net precision is <= kPrecisionFloor, in which
 * case the quotient cannot be normalized into a probability distribution.
 */
inline DiagGaussian fuse(const GaussianQuotientFactor& f) {
  require(!f.numerators.empty(), "fuse: needs at least one numerator");
  const int d = f.numerators.front().dim();
  for (const auto& g : f.numerators) require(g.dim() == d, "fuse: numerator dim mismatch");
  for (const auto& g : f.denominators) require(g.dim() == d, "fuse: denominator dim mismatch");

  Vec mean(d), prec(d);
  for (int i = 0; i < d; ++i) {
    double t = 0.0, mt = 0.0;
    for (const auto& g : f.numerators) {
      t += g.prec[i];
      mt += g.mean[i] * g.prec[i];
    }
    for (const auto& g : f.denominators) {
      t -= g.prec[i];
      mt -= g.mean[i] * g.prec[i];
    }
    if (!(t > kPrecisionFloor))
      throw ConstraintViolation("fuse: net precision " + std::to_string(t) + " in dim " +
                                std::to_string(i) + " is not positive");
    prec[i] = t;
    mean[i] = mt / t;
  }
  return DiagGaussian(std::move(mean), std::move(prec));
}

/**
 * Moment-matched Gaussian of an equally weighted mixture. The mixture
 * variance avg(var_k) + avg((mean_k - mean)^2) is the cancellation-free
 * rearrangement of avg(var_k + mean_k^2) - mean^2.
 */
inline DiagGaussian moment_match(std::span<const DiagGaussian> components) {
  require(!components.empty(), "moment_match: empty mixture");
  const int d = components.front().dim();
  for (const auto& g : components) require(g.dim() == d, "moment_match: dim mismatch");
  const double k = static_cast<double>(components.size());

  Vec mean(d, 0.0), var(d, 0.0);
  for (const auto& g : components)
    for (int i = 0; i < d; ++i) mean[i] += g.mean[i];
  for (int i = 0; i < d; ++i) mean[i] /= k;
  for (const auto& g : components)
    for (int i = 0; i < d; ++i) {
      const double dm = g.mean[i] - mean[i];
      var[i] += 1.0 / g.prec[i] + dm * dm;
    }
  Vec prec(d);
  for (int i = 0; i < d; ++i) prec[i] = k / var[i];
  return DiagGaussian(std::move(mean), std::move(prec));
}

/// KL(a || b) between diagonal Gaussians, in precision form.
inline double kl(const DiagGaussian& a, const DiagGaussian& b) {
  require(a.dim() == b.dim(), "kl: dim mismatch");
  double acc = 0.0;
  for (int i = 0; i < a.dim(); ++i) {
    const double dm = a.mean[i] - b.mean[i];
    acc += b.prec[i] / a.prec[i] + b.prec[i] * dm * dm - 1.0 + std::log(a.prec[i]) - std::log(b.prec[i]);
  }
  return 0.5 * acc;
}

/// Log density of g at x.
inline double log_prob(const DiagGaussian& g, std::span<const double> x) {
  require(static_cast<int>(x.size()) == g.dim(), "log_prob: dim mismatch");
  constexpr double kLog2Pi = 1.8378770664093454836;  // log(2*pi)
  double acc = 0.0;
  for (int i = 0; i < g.dim(); ++i) {
    const double dm = x[i] - g.mean[i];
    acc += std::log(g.prec[i]) - kLog2Pi - g.prec[i] * dm * dm;
  }
  return 0.5 * acc;
}

/**
 * k reparameterized samples, one per row: mean + eps / sqrt(prec). Noise is
 * consumed row-major (sample outer, dimension inner); callers rely on that
 * order for reproducibility.
 */
inline Mat sample(const DiagGaussian& g, int k, Rng& rng) {
  require(k >= 0, "sample: negative count");
  const int d = g.dim();
  Mat out(k, d);
  Vec sig(d);
  for (int i = 0; i < d; ++i) sig[i] = 1.0 / std::sqrt(g.prec[i]);
  for (int r = 0; r < k; ++r)
    for (int i = 0; i < d; ++i) out(r, i) = g.mean[i] + rng.gaussian() * sig[i];
  return out;
}

inline Vec sample_one(const DiagGaussian& g, Rng& rng) {
  return sample(g, 1, rng).row(0);
}

/**
 * K diagonal Gaussians stored row-wise (mean and precision matrices of equal
 * shape). The batched layout is what transition networks produce for a
 * particle set; helpers below mirror the single-Gaussian ops row by row.
 */
struct RowGauss {
  Mat mean, prec;

  int rows() const { return mean.rows; }
  int dim() const { return mean.cols; }

  DiagGaussian row_gauss(int r) const { return DiagGaussian(mean.row(r), prec.row(r)); }

  static RowGauss from_single(const DiagGaussian& g) {
    RowGauss out;
    out.mean = Mat(1, g.dim());
    out.prec = Mat(1, g.dim());
    for (int i = 0; i < g.dim(); ++i) {
      out.mean(0, i) = g.mean[i];
      out.prec(0, i) = g.prec[i];
    }
    return out;
  }
};

/// Broadcast product of a shared factor onto each row.
inline RowGauss product_rows(const RowGauss& rows, const DiagGaussian& shared) {
  require(rows.dim() == shared.dim(), "product_rows: dim mismatch");
  const int k = rows.rows(), d = rows.dim();
  RowGauss out;
  out.mean = Mat(k, d);
  out.prec = Mat(k, d);
  for (int r = 0; r < k; ++r)
    for (int i = 0; i < d; ++i) {
      const double p = rows.prec(r, i) + shared.prec[i];
      out.prec(r, i) = p;
      out.mean(r, i) = (rows.mean(r, i) * rows.prec(r, i) + shared.mean[i] * shared.prec[i]) / p;
    }
  return out;
}

/// Moment-matched Gaussian of the equally weighted row mixture.
inline DiagGaussian moment_match_rows(const RowGauss& rows) {
  const int k = rows.rows(), d = rows.dim();
  require(k >= 1, "moment_match_rows: empty");
  Vec mu(d, 0.0), var(d, 0.0);
  for (int r = 0; r < k; ++r)
    for (int i = 0; i < d; ++i) mu[i] += rows.mean(r, i);
  for (int i = 0; i < d; ++i) mu[i] /= k;
  Vec spread(d, 0.0), vbar(d, 0.0);
  for (int r = 0; r < k; ++r)
    for (int i = 0; i < d; ++i) {
      const double dm = rows.mean(r, i) - mu[i];
      spread[i] += dm * dm;
      vbar[i] += 1.0 / rows.prec(r, i);
    }
  Vec prec(d);
  for (int i = 0; i < d; ++i) {
    var[i] = vbar[i] / k + spread[i] / k;
    prec[i] = 1.0 / var[i];
  }
  return DiagGaussian(std::move(mu), std::move(prec));
}

/// Mean over rows of KL(a_r || b_r).
inline double kl_rows_mean(const RowGauss& a, const RowGauss& b) {
  require(a.rows() == b.rows() && a.dim() == b.dim(), "kl_rows_mean: shape mismatch");
  const int k = a.rows(), d = a.dim();
  double acc = 0.0;
  for (int r = 0; r < k; ++r)
    for (int i = 0; i < d; ++i) {
      const double dm = a.mean(r, i) - b.mean(r, i);
      acc += b.prec(r, i) / a.prec(r, i) + b.prec(r, i) * dm * dm - 1.0 +
             std::log(a.prec(r, i)) - std::log(b.prec(r, i));
    }
  return 0.5 * acc / k;
}

}  // namespace mdmm
