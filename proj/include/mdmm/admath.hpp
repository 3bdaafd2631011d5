#pragma once

// Differentiable diagonal-Gaussian composites over the tape. Formulas mirror
// the plain closed forms in gaussian.hpp expression-for-expression so a seeded
// graph evaluation and a plain evaluation agree to rounding.

#include <vector>

#include "mdmm/gaussian.hpp"
#include "mdmm/rng.hpp"
#include "mdmm/tape.hpp"

namespace mdmm::ad {

/// Diagonal Gaussian whose mean/precision are 1xD tape nodes.
struct GaussV {
  Var mean, prec;
};

/// K diagonal Gaussians stored row-wise as KxD tape nodes.
struct RowGaussV {
  Var mean, prec;
};

inline GaussV gauss_from_sigma(Tape& t, Var mean, Var sigma) {
  return {mean, t.recip(t.square(sigma))};
}

inline GaussV product(Tape& t, const GaussV& a, const GaussV& b) {
  Var prec = t.add(a.prec, b.prec);
  Var num = t.add(t.mul(a.mean, a.prec), t.mul(b.mean, b.prec));
  return {t.div(num, prec), prec};
}

/// Broadcast product of shared factor onto each row.
inline RowGaussV product_rows(Tape& t, const RowGaussV& rows, const GaussV& shared) {
  const int k = t.rows(rows.mean);
  Var sp = t.broadcast_row(shared.prec, k);
  Var sm = t.broadcast_row(shared.mean, k);
  Var prec = t.add(rows.prec, sp);
  Var num = t.add(t.mul(rows.mean, rows.prec), t.mul(sm, sp));
  return {t.div(num, prec), prec};
}

/**
 * Guarded quotient fusion base * num / den. Where the net precision would not
 * stay above kPrecisionFloor, that dimension's quotient pair is dropped (the
 * past term is uninformative there); the guard mask is a constant, so no
 * gradient flows through dropped contributions.
 */
inline GaussV fuse_quotient(Tape& t, const GaussV& base, const GaussV& num, const GaussV& den) {
  const int d = t.cols(base.prec);
  const double* bp = t.value_ptr(base.prec);
  const double* np = t.value_ptr(num.prec);
  const double* dp = t.value_ptr(den.prec);
  std::vector<double> mask(d);
  for (int i = 0; i < d; ++i) mask[i] = (bp[i] + np[i] - dp[i] > kPrecisionFloor) ? 1.0 : 0.0;
  Var m = t.constant(mask, 1, d);
  Var prec = t.add(base.prec, t.mul(t.sub(num.prec, den.prec), m));
  Var dnum = t.mul(t.sub(t.mul(num.mean, num.prec), t.mul(den.mean, den.prec)), m);
  Var mean = t.div(t.add(t.mul(base.mean, base.prec), dnum), prec);
  return {mean, prec};
}

/// Row-wise guarded quotient fusion: shared * rows / den per row.
inline RowGaussV fuse_quotient_rows(Tape& t, const GaussV& shared, const RowGaussV& rows,
                                    const GaussV& den) {
  const int k = t.rows(rows.mean);
  const int d = t.cols(rows.mean);
  const double* sp = t.value_ptr(shared.prec);
  const double* rp = t.value_ptr(rows.prec);
  const double* dp = t.value_ptr(den.prec);
  std::vector<double> mask(static_cast<size_t>(k) * d);
  for (int r = 0; r < k; ++r)
    for (int i = 0; i < d; ++i)
      mask[static_cast<size_t>(r) * d + i] =
          (sp[i] + rp[static_cast<size_t>(r) * d + i] - dp[i] > kPrecisionFloor) ? 1.0 : 0.0;
  Var m = t.constant(mask, k, d);
  Var bp = t.broadcast_row(shared.prec, k);
  Var bm = t.broadcast_row(shared.mean, k);
  Var dp_b = t.broadcast_row(den.prec, k);
  Var dm_b = t.broadcast_row(den.mean, k);
  Var prec = t.add(bp, t.mul(t.sub(rows.prec, dp_b), m));
  Var dnum = t.mul(t.sub(t.mul(rows.mean, rows.prec), t.mul(dm_b, dp_b)), m);
  Var mean = t.div(t.add(t.mul(bm, bp), dnum), prec);
  return {mean, prec};
}

/// Moment-matched Gaussian of the equally weighted row mixture.
inline GaussV moment_match_rows(Tape& t, const RowGaussV& rows) {
  const int k = t.rows(rows.mean);
  Var mu = t.col_mean(rows.mean);
  Var spread = t.col_mean(t.square(t.sub(rows.mean, t.broadcast_row(mu, k))));
  Var var = t.add(t.col_mean(t.recip(rows.prec)), spread);
  return {mu, t.recip(var)};
}

/// K reparameterized samples (KxD); noise drawn row-major from rng.
inline Var sample_rows(Tape& t, const GaussV& g, int k, Rng& rng) {
  const int d = t.cols(g.mean);
  std::vector<double> eps(static_cast<size_t>(k) * d);
  rng.fill_gaussian(eps);
  Var e = t.constant(eps, k, d);
  Var sig = t.broadcast_row(t.inv_sqrt(g.prec), k);
  return t.add(t.broadcast_row(g.mean, k), t.mul(e, sig));
}

inline Var sample_one(Tape& t, const GaussV& g, Rng& rng) { return sample_rows(t, g, 1, rng); }

/// Mean over rows of KL(a_r || b_r).
inline Var kl_rows_mean(Tape& t, const RowGaussV& a, const RowGaussV& b) {
  return t.kl_mean(a.mean, a.prec, b.mean, b.prec, 1.0 / t.rows(a.mean));
}

inline Var kl_single(Tape& t, const GaussV& a, const GaussV& b) {
  return t.kl_mean(a.mean, a.prec, b.mean, b.prec, 1.0);
}

/// Snapshot of a graph Gaussian as a plain DiagGaussian (evaluation only).
inline DiagGaussian freeze(const Tape& t, const GaussV& g) {
  const int d = t.cols(g.mean);
  return DiagGaussian(Vec(t.value_ptr(g.mean), t.value_ptr(g.mean) + d),
                      Vec(t.value_ptr(g.prec), t.value_ptr(g.prec) + d));
}

}  // namespace mdmm::ad
