#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "mdmm/admath.hpp"
#include "mdmm/common.hpp"
#include "mdmm/gaussian.hpp"
#include "mdmm/model.hpp"
#include "mdmm/rng.hpp"
#include "mdmm/sequence.hpp"

namespace mdmm {

/**
 * Guarded quotient fuse: base * num / den per dimension, except dimensions
 * where the net precision would not stay positive keep the base factor alone.
 * This is the robust in-algorithm variant; fuse() is the strict one that
 * throws instead of falling back. Mirrors the graph op in admath.hpp term for
 * term so both backends produce identical beliefs.
 */
inline DiagGaussian fuse_quotient(const DiagGaussian& base, const DiagGaussian& num,
                                  const DiagGaussian& den) {
  require(base.dim() == num.dim() && base.dim() == den.dim(), "fuse_quotient: dim mismatch");
  const int d = base.dim();
  Vec mean(d), prec(d);
  for (int i = 0; i < d; ++i) {
    const double net = base.prec[i] + num.prec[i] - den.prec[i];
    const double mask = net > kPrecisionFloor ? 1.0 : 0.0;
    prec[i] = base.prec[i] + mask * (num.prec[i] - den.prec[i]);
    mean[i] = (base.mean[i] * base.prec[i] +
               mask * (num.mean[i] * num.prec[i] - den.mean[i] * den.prec[i])) /
              prec[i];
  }
  return DiagGaussian(std::move(mean), std::move(prec));
}

/**
 * One filtering sweep. posterior[t] is the belief at t after local evidence,
 * propagated[t] the belief carried into t before it (the stationary prior at
 * the sweep's starting end). rows_to[t] holds the per-particle transition
 * densities that parameterized propagated[t]; empty at the starting end.
 */
struct FilterResult {
  std::vector<DiagGaussian> posterior;
  std::vector<DiagGaussian> propagated;
  std::vector<RowGauss> rows_to;
};

namespace detail {

/**
 * Shared sweep core. Processing visits times ts(0..T-1); `from_end` selects
 * the direction (true: T-1 down to 0 with the backward transition network,
 * false: 0 up to T-1 with the forward one). Particle noise at time t comes
 * from key.child("p", t), so presence or absence of evidence elsewhere never
 * shifts the draws a timestep sees.
 */
inline FilterResult filter_sweep(const Mdmm& model, const SeqView& view, int particles,
                                 RngKey key, Dir dir, bool from_end) {
  require(particles >= 1, "filter: needs at least one particle");
  const int T = view.T(), M = view.M();
  require(T >= 1, "filter: empty sequence");

  FilterResult res;
  res.posterior.resize(T);
  res.propagated.resize(T);
  res.rows_to.resize(T);

  DiagGaussian carried = model.prior();
  for (int i = 0; i < T; ++i) {
    const int t = from_end ? T - 1 - i : i;
    res.propagated[t] = carried;
    DiagGaussian post = carried;
    for (int m = 0; m < M; ++m)
      if (view.observed(t, m)) post = product(post, model.encode(m, view.at(t, m)));
    res.posterior[t] = post;

    if (i + 1 < T) {
      Rng rng(key.child("p", static_cast<std::uint64_t>(t)));
      Mat z = sample(post, particles, rng);
      RowGauss rows = model.transition_rows(dir, z);
      carried = moment_match_rows(rows);
      res.rows_to[from_end ? t - 1 : t + 1] = std::move(rows);
    }
  }
  return res;
}

}  // namespace detail

/// Backward variational filter: posterior[t] approximates q(z_t | x_{t:T}).
inline FilterResult backward_filter(const Mdmm& model, const SeqView& view, int particles,
                                    RngKey key) {
  return detail::filter_sweep(model, view, particles, key, Dir::Bwd, true);
}

/**
 * Forward variational filter: posterior[t] approximates q(z_t | x_{1:t}).
 * The same sweep run in time order with the forward transition network; the
 * key is salted so sharing one key with backward_filter stays uncorrelated.
 */
inline FilterResult forward_filter(const Mdmm& model, const SeqView& view, int particles,
                                   RngKey key) {
  return detail::filter_sweep(model, view, particles, key.child("ff"), Dir::Fwd, false);
}

/**
 * Forward smoothing sweep over a completed backward filter: combines each
 * backward posterior with the forward-propagated belief through the guarded
 * quotient by the stationary prior (no quotient at t = 1, where the backward
 * posterior already conditions on everything). posterior[t] approximates
 * q(z_t | x_{1:T}); rows_to[t] are the forward per-particle densities that
 * parameterized the propagated belief into t (empty at t = 1).
 */
struct SmoothResult {
  std::vector<DiagGaussian> posterior;
  std::vector<RowGauss> rows_to;
};

inline SmoothResult forward_smooth(const Mdmm& model, std::span<const DiagGaussian> bwd_posterior,
                                   int particles, RngKey key) {
  require(particles >= 1, "smooth: needs at least one particle");
  const int T = static_cast<int>(bwd_posterior.size());
  require(T >= 1, "smooth: empty posterior track");

  SmoothResult res;
  res.posterior.resize(T);
  res.rows_to.resize(T);
  const DiagGaussian prior = model.prior();

  DiagGaussian carried;  // forward-propagated belief, defined for t >= 1
  for (int t = 0; t < T; ++t) {
    res.posterior[t] =
        t == 0 ? bwd_posterior[0] : fuse_quotient(bwd_posterior[t], carried, prior);
    if (t + 1 < T) {
      Rng rng(key.child("p", static_cast<std::uint64_t>(t)));
      Mat z = sample(res.posterior[t], particles, rng);
      RowGauss rows = model.transition_rows(Dir::Fwd, z);
      carried = moment_match_rows(rows);
      res.rows_to[t + 1] = std::move(rows);
    }
  }
  return res;
}

/**
 * Point reconstruction: a backward filter sweep followed by a forward MAP
 * recursion that replaces particle propagation with the transition applied to
 * the previous point estimate. values(t, m) is the decoder mean at the
 * estimated latent, for every cell whether observed or not.
 */
struct MapResult {
  Mat latents;  // T x latent_dim
  Mat values;   // T x M decoder means
};

inline MapResult map_sequence(const Mdmm& model, const SeqView& view, int particles, RngKey key) {
  const FilterResult bwd = backward_filter(model, view, particles, key.child("bwd"));
  const int T = view.T(), M = view.M(), zdim = model.config().latent_dim;
  const DiagGaussian prior = model.prior();

  MapResult res;
  res.latents = Mat(T, zdim);
  res.values = Mat(T, M);

  Vec zhat = bwd.posterior[0].mean;
  std::copy(zhat.begin(), zhat.end(), res.latents.row_ptr(0));
  for (int t = 1; t < T; ++t) {
    DiagGaussian fwd = model.transition(Dir::Fwd, zhat);
    DiagGaussian post = fuse_quotient(bwd.posterior[t], fwd, prior);
    zhat = std::move(post.mean);
    std::copy(zhat.begin(), zhat.end(), res.latents.row_ptr(t));
  }
  for (int t = 0; t < T; ++t)
    for (int m = 0; m < M; ++m) res.values(t, m) = model.emit(m, res.latents.row(t)).mean[0];
  return res;
}

}  // namespace mdmm

namespace mdmm::ad {

/// Graph-side mirror of FilterResult; rows_to entries test false when absent.
struct FilterGraph {
  std::vector<GaussV> posterior;
  std::vector<GaussV> propagated;
  std::vector<RowGaussV> rows_to;
};

/**
 * Differentiable backward filter. Identical control flow, fold order and
 * draw streams as the plain backward_filter, so frozen graph beliefs match
 * the plain backend to floating-point noise.
 */
inline FilterGraph backward_filter(MdmmGraph& g, const SeqView& view, int particles, RngKey key) {
  require(particles >= 1, "filter: needs at least one particle");
  const int T = view.T(), M = view.M();
  require(T >= 1, "filter: empty sequence");
  Tape& t = g.tape();

  FilterGraph res;
  res.posterior.resize(T);
  res.propagated.resize(T);
  res.rows_to.resize(T);

  GaussV carried = g.prior();
  for (int i = 0; i < T; ++i) {
    const int ti = T - 1 - i;
    res.propagated[ti] = carried;
    GaussV post = carried;
    for (int m = 0; m < M; ++m)
      if (view.observed(ti, m)) post = product(t, post, g.encode(m, view.at(ti, m)));
    res.posterior[ti] = post;

    if (i + 1 < T) {
      Rng rng(key.child("p", static_cast<std::uint64_t>(ti)));
      Var z = sample_rows(t, post, particles, rng);
      RowGaussV rows = g.transition_rows(Dir::Bwd, z);
      carried = moment_match_rows(t, rows);
      res.rows_to[ti - 1] = rows;
    }
  }
  return res;
}

struct SmoothGraph {
  std::vector<GaussV> posterior;
  std::vector<RowGaussV> rows_to;
};

/// Differentiable forward smoothing sweep; mirrors the plain forward_smooth.
inline SmoothGraph forward_smooth(MdmmGraph& g, std::span<const GaussV> bwd_posterior,
                                  int particles, RngKey key) {
  require(particles >= 1, "smooth: needs at least one particle");
  const int T = static_cast<int>(bwd_posterior.size());
  require(T >= 1, "smooth: empty posterior track");
  Tape& t = g.tape();

  SmoothGraph res;
  res.posterior.resize(T);
  res.rows_to.resize(T);
  const GaussV prior = g.prior();

  GaussV carried;
  for (int ti = 0; ti < T; ++ti) {
    res.posterior[ti] =
        ti == 0 ? bwd_posterior[0] : fuse_quotient(t, bwd_posterior[ti], carried, prior);
    if (ti + 1 < T) {
      Rng rng(key.child("p", static_cast<std::uint64_t>(ti)));
      Var z = sample_rows(t, res.posterior[ti], particles, rng);
      RowGaussV rows = g.transition_rows(Dir::Fwd, z);
      carried = moment_match_rows(t, rows);
      res.rows_to[ti + 1] = rows;
    }
  }
  return res;
}

}  // namespace mdmm::ad
