#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <span>
#include <thread>
#include <vector>

#include "mdmm/common.hpp"
#include "mdmm/infer.hpp"
#include "mdmm/model.hpp"
#include "mdmm/rng.hpp"
#include "mdmm/sequence.hpp"

namespace mdmm {

/**
 * Everything the training objective and loop need in one place. The defaults
 * are the spirals recipe; override fields per experiment. lambda_match is the
 * prior-match coefficient at full KL weight: the effective multiplier in any
 * given epoch is lambda_match * beta, so it ramps in with the KL anneal.
 */
struct TrainConfig {
  double lambda_filter = 0.5;
  double lambda_smooth = 0.5;
  double lambda_match = 0.01;
  Vec lambda_modal;  // per-modality reconstruction weight; empty means all 1

  int particles_backward = 25;  // filtering particles per step while training
  int particles_forward = 1;    // smoothing particles per step
  int particles_prior = 50;     // prior samples behind the prior-match term

  int epochs = 500;
  int anneal_epochs = 100;  // epochs over which beta ramps 0 -> 1
  int batch_size = 100;
  double learning_rate = 0.02;
  double weight_decay = 1e-4;  // L2 pull on weight matrices only, not biases
  double burst_fraction = 0.1;
  double val_fraction = 0.1;
  bool early_stopping = true;
  int patience = 50;
  int workers = 1;

  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  double lambda_for(int m) const {
    return lambda_modal.empty() ? 1.0 : lambda_modal.at(static_cast<size_t>(m));
  }

  void validate(int num_modalities) const {
    require(lambda_filter >= 0 && lambda_smooth >= 0 && lambda_match >= 0,
            "config: loss multipliers must be nonnegative");
    require(lambda_modal.empty() || static_cast<int>(lambda_modal.size()) == num_modalities,
            "config: lambda_modal size must match the modality count");
    for (double l : lambda_modal) require(l >= 0, "config: lambda_modal entries nonnegative");
    require(particles_backward >= 1 && particles_forward >= 1 && particles_prior >= 1,
            "config: particle counts must be at least 1");
    require(epochs >= 1 && batch_size >= 1, "config: epochs and batch_size must be at least 1");
    require(anneal_epochs >= 0, "config: anneal_epochs must be nonnegative");
    require(learning_rate >= 0 && weight_decay >= 0, "config: rates must be nonnegative");
    require(burst_fraction >= 0 && burst_fraction <= 1, "config: burst_fraction in [0,1]");
    require(val_fraction >= 0 && val_fraction < 1, "config: val_fraction in [0,1)");
    require(patience >= 1, "config: patience must be at least 1");
    require(workers >= 1, "config: workers must be at least 1");
  }
};

/// KL anneal factor: 0 at epoch 0, linear up to 1 at anneal_epochs.
inline double anneal_beta(int epoch, const TrainConfig& cfg) {
  require(epoch >= 0, "anneal: negative epoch");
  if (cfg.anneal_epochs <= 0) return 1.0;
  return std::min(1.0, static_cast<double>(epoch) / cfg.anneal_epochs);
}

/**
 * Batch-mean value of every objective term, unweighted, plus the weighted
 * total actually optimized:
 *   total = lambda_filter * (filter_joint + sum_m filter_modal[m])
 *         + lambda_smooth * (smooth_joint + sum_m smooth_modal[m])
 *         + lambda_match * beta * match
 * A unimodal term is skipped (contributes 0) for sequences missing that
 * modality entirely.
 */
struct LossBreakdown {
  double beta = 0;
  double filter_joint = 0;
  Vec filter_modal;
  double smooth_joint = 0;
  Vec smooth_modal;
  double match = 0;
  double total = 0;

  double weighted_sum(const TrainConfig& cfg) const {
    double f = filter_joint, s = smooth_joint;
    for (double v : filter_modal) f += v;
    for (double v : smooth_modal) s += v;
    return cfg.lambda_filter * f + cfg.lambda_smooth * s + cfg.lambda_match * beta * match;
  }
};

namespace detail {

inline bool any_observed_at(const SeqView& view, int t) {
  for (int m = 0; m < view.M(); ++m)
    if (view.observed(t, m)) return true;
  return false;
}

inline std::uint32_t subset_bits(const SeqView& view) {
  const std::uint32_t full = view.M() >= 32 ? ~0u : ((1u << view.M()) - 1u);
  return view.modality_bits & full;
}

/// Inverse standard normal CDF (rational approximation, ~1e-9 absolute error).
inline double inv_norm_cdf(double p) {
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425;
  double q, r;
  if (p < plow) {
    q = std::sqrt(-2.0 * std::log(p));
    return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  if (p > 1.0 - plow) {
    q = std::sqrt(-2.0 * std::log(1.0 - p));
    return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  q = p - 0.5;
  r = q * q;
  return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
         (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

inline double halton(int i, int base) {
  double f = 1.0, r = 0.0;
  for (int n = i; n > 0; n /= base) {
    f /= base;
    r += f * (n % base);
  }
  return r;
}

/**
 * Noise rows behind the prior-match term: a randomly rotated Halton point set
 * pushed through the Gaussian quantile, then studentized per dimension to
 * exact zero mean and unit variance. Plain Monte Carlo noise at the default
 * sample count moves this loss by up to ~10% between evaluations, which
 * swamps its small weight; the low-discrepancy grid plus exact first two
 * moments keeps the estimate stable while the random rotation keeps draws
 * fresh per key. Row-major k x d, suitable for both backends.
 */
inline Vec prior_match_noise(int k, int d, Rng& rng) {
  Vec shift(static_cast<size_t>(d));
  for (double& s : shift) s = rng.uniform();
  std::vector<int> bases(static_cast<size_t>(d));
  for (int c = 0, p = 2; c < d; ++p) {
    bool prime = p >= 2;
    for (int q = 2; q * q <= p; ++q)
      if (p % q == 0) {
        prime = false;
        break;
      }
    if (prime) bases[static_cast<size_t>(c++)] = p;
  }
  Vec eps(static_cast<size_t>(k) * d);
  for (int i = 0; i < k; ++i)
    for (int c = 0; c < d; ++c) {
      double u = halton(i + 1, bases[static_cast<size_t>(c)]) + shift[static_cast<size_t>(c)];
      u -= std::floor(u);
      u = std::min(std::max(u, 1e-12), 1.0 - 1e-12);
      eps[static_cast<size_t>(i) * d + c] = inv_norm_cdf(u);
    }
  for (int c = 0; c < d; ++c) {
    double mu = 0.0, ss = 0.0;
    for (int i = 0; i < k; ++i) mu += eps[static_cast<size_t>(i) * d + c];
    mu /= k;
    for (int i = 0; i < k; ++i) {
      const double v = eps[static_cast<size_t>(i) * d + c] - mu;
      ss += v * v;
    }
    const double scale = ss > 0.0 ? 1.0 / std::sqrt(ss / k) : 1.0;
    for (int i = 0; i < k; ++i)
      eps[static_cast<size_t>(i) * d + c] = (eps[static_cast<size_t>(i) * d + c] - mu) * scale;
  }
  return eps;
}

}  // namespace detail

}  // namespace mdmm

namespace mdmm::ad {

namespace detail {

/**
 * Negated evidence bound for one completed sweep (filtering or smoothing):
 *   sum_t [ beta * KL_t - sum_{m observed} lambda_m * log p(x_t^m | z_t) ]
 * KL_t compares the posterior against the per-particle transition densities
 * that propagated belief into t, except at the sweep's starting step where
 * the reference is the stationary prior. The reconstruction latent is one
 * reparameterized sample per timestep, drawn from pass_key.child("r", t) so
 * the stream is independent of the sweep's own particle draws.
 */
inline Var sweep_loss(MdmmGraph& g, const SeqView& view, const TrainConfig& cfg, double beta,
                      RngKey pass_key, std::span<const GaussV> posterior,
                      std::span<const RowGaussV> rows_to, int start_t) {
  Tape& t = g.tape();
  const int T = view.T(), M = view.M();
  const GaussV prior = g.prior();
  Var acc = t.constant_scalar(0.0);
  for (int ti = 0; ti < T; ++ti) {
    const GaussV& post = posterior[ti];
    if (mdmm::detail::any_observed_at(view, ti)) {
      Rng rr(pass_key.child("r", static_cast<std::uint64_t>(ti)));
      Var z = sample_one(t, post, rr);
      for (int m = 0; m < M; ++m) {
        if (!view.observed(ti, m)) continue;
        GaussV dec = g.emit(m, z);
        const double x = view.at(ti, m);
        Var lp = t.logpdf(dec.mean, dec.prec, std::span<const double>(&x, 1));
        const double lam = cfg.lambda_for(m);
        acc = t.sub(acc, lam == 1.0 ? lp : t.mul_c(lp, lam));
      }
    }
    if (beta != 0.0) {
      Var kl;
      if (ti == start_t) {
        kl = kl_single(t, post, prior);
      } else {
        const int k = t.rows(rows_to[ti].mean);
        RowGaussV bc{t.broadcast_row(post.mean, k), t.broadcast_row(post.prec, k)};
        kl = kl_rows_mean(t, bc, rows_to[ti]);
      }
      acc = t.add(acc, t.mul_c(kl, beta));
    }
  }
  return acc;
}

}  // namespace detail

/**
 * Filtering loss (negated filtering evidence bound) for the modalities the
 * view exposes. Runs its own backward filter at key.child("bwd") so the same
 * key always reproduces the same Monte Carlo estimate.
 */
inline Var filter_loss(MdmmGraph& g, const SeqView& view, const TrainConfig& cfg, double beta,
                       RngKey key) {
  require(mdmm::detail::subset_bits(view) != 0, "loss: empty modality subset");
  const RngKey pass = key.child("bwd");
  FilterGraph bwd = backward_filter(g, view, cfg.particles_backward, pass);
  return detail::sweep_loss(g, view, cfg, beta, pass, bwd.posterior, bwd.rows_to, view.T() - 1);
}

/**
 * Smoothing loss (negated smoothing evidence bound): a backward filter at
 * key.child("bwd") feeds a forward smoothing sweep at key.child("smooth").
 * Sharing a key with filter_loss reuses the identical backward pass.
 */
inline Var smooth_loss(MdmmGraph& g, const SeqView& view, const TrainConfig& cfg, double beta,
                       RngKey key) {
  require(mdmm::detail::subset_bits(view) != 0, "loss: empty modality subset");
  FilterGraph bwd = backward_filter(g, view, cfg.particles_backward, key.child("bwd"));
  const RngKey pass = key.child("smooth");
  SmoothGraph sm = forward_smooth(g, bwd.posterior, cfg.particles_forward, pass);
  return detail::sweep_loss(g, view, cfg, beta, pass, sm.posterior, sm.rows_to, 0);
}

/**
 * Consistency pull between the stationary prior and what each transition
 * network does to it: KL(prior || MM(transition(prior samples))) for both
 * directions, sharing one set of reparameterized prior draws built from the
 * variance-reduced noise in detail::prior_match_noise.
 */
inline Var prior_match_loss(MdmmGraph& g, int prior_particles, RngKey key) {
  require(prior_particles >= 1, "loss: prior_particles must be at least 1");
  Tape& t = g.tape();
  const GaussV prior = g.prior();
  const int d = t.cols(prior.mean);
  Rng rng(key.child("z"));
  Var e = t.constant(mdmm::detail::prior_match_noise(prior_particles, d, rng),
                     prior_particles, d);
  Var z = t.add(t.broadcast_row(prior.mean, prior_particles),
                t.mul(e, t.broadcast_row(t.inv_sqrt(prior.prec), prior_particles)));
  GaussV mf = moment_match_rows(t, g.transition_rows(Dir::Fwd, z));
  GaussV mb = moment_match_rows(t, g.transition_rows(Dir::Bwd, z));
  return t.add(kl_single(t, prior, mf), kl_single(t, prior, mb));
}

}  // namespace mdmm::ad

namespace mdmm {

namespace detail {

/// Plain-backend mirror of ad::detail::sweep_loss, draw for draw.
inline double sweep_loss_value(const Mdmm& model, const SeqView& view, const TrainConfig& cfg,
                               double beta, RngKey pass_key,
                               std::span<const DiagGaussian> posterior,
                               std::span<const RowGauss> rows_to, int start_t) {
  const int T = view.T(), M = view.M();
  const DiagGaussian prior = model.prior();
  double acc = 0;
  for (int ti = 0; ti < T; ++ti) {
    const DiagGaussian& post = posterior[ti];
    if (any_observed_at(view, ti)) {
      Rng rr(pass_key.child("r", static_cast<std::uint64_t>(ti)));
      Vec z = sample_one(post, rr);
      for (int m = 0; m < M; ++m) {
        if (!view.observed(ti, m)) continue;
        const double x = view.at(ti, m);
        acc -= cfg.lambda_for(m) *
               log_prob(model.emit(m, z), std::span<const double>(&x, 1));
      }
    }
    if (beta != 0.0) {
      double kl_t;
      if (ti == start_t) {
        kl_t = kl(post, prior);
      } else {
        const RowGauss& rows = rows_to[ti];
        double s = 0;
        for (int k = 0; k < rows.rows(); ++k) s += kl(post, rows.row_gauss(k));
        kl_t = s / rows.rows();
      }
      acc += beta * kl_t;
    }
  }
  return acc;
}

}  // namespace detail

/// Plain-backend twin of ad::filter_loss; same draws, same value.
inline double filter_loss_value(const Mdmm& model, const SeqView& view, const TrainConfig& cfg,
                                double beta, RngKey key) {
  require(detail::subset_bits(view) != 0, "loss: empty modality subset");
  const RngKey pass = key.child("bwd");
  FilterResult bwd = backward_filter(model, view, cfg.particles_backward, pass);
  return detail::sweep_loss_value(model, view, cfg, beta, pass, bwd.posterior, bwd.rows_to,
                                  view.T() - 1);
}

/// Plain-backend twin of ad::smooth_loss.
inline double smooth_loss_value(const Mdmm& model, const SeqView& view, const TrainConfig& cfg,
                                double beta, RngKey key) {
  require(detail::subset_bits(view) != 0, "loss: empty modality subset");
  FilterResult bwd = backward_filter(model, view, cfg.particles_backward, key.child("bwd"));
  const RngKey pass = key.child("smooth");
  SmoothResult sm = forward_smooth(model, bwd.posterior, cfg.particles_forward, pass);
  return detail::sweep_loss_value(model, view, cfg, beta, pass, sm.posterior, sm.rows_to, 0);
}

/// Plain-backend twin of ad::prior_match_loss.
inline double prior_match_value(const Mdmm& model, int prior_particles, RngKey key) {
  require(prior_particles >= 1, "loss: prior_particles must be at least 1");
  const DiagGaussian prior = model.prior();
  const int d = prior.dim();
  Rng rng(key.child("z"));
  const Vec eps = detail::prior_match_noise(prior_particles, d, rng);
  Mat z(prior_particles, d);
  for (int r = 0; r < prior_particles; ++r)
    for (int c = 0; c < d; ++c)
      z(r, c) = prior.mean[static_cast<size_t>(c)] +
                eps[static_cast<size_t>(r) * d + c] / std::sqrt(prior.prec[static_cast<size_t>(c)]);
  const DiagGaussian mf = moment_match_rows(model.transition_rows(Dir::Fwd, z));
  const DiagGaussian mb = moment_match_rows(model.transition_rows(Dir::Bwd, z));
  return kl(prior, mf) + kl(prior, mb);
}

namespace detail {

/**
 * Every per-sequence objective term as graph nodes. Joint terms always exist;
 * the unimodal slot for a modality the sequence never observes stays empty
 * (Var tests false) and contributes nothing.
 */
struct SeqLossTerms {
  ad::Var filter_joint, smooth_joint;
  std::vector<ad::Var> filter_modal, smooth_modal;
};

inline SeqLossTerms sequence_loss_terms(MdmmGraph& g, const MultimodalSequence& seq,
                                        const TrainConfig& cfg, double beta, RngKey seq_key) {
  const int M = seq.M;
  SeqLossTerms out;
  out.filter_modal.resize(static_cast<size_t>(M));
  out.smooth_modal.resize(static_cast<size_t>(M));

  auto run = [&](const SeqView& view, ad::Var& f_slot, ad::Var& s_slot) {
    const RngKey sub = seq_key.child("sub", subset_bits(view));
    const RngKey bk = sub.child("bwd");
    ad::FilterGraph bwd = ad::backward_filter(g, view, cfg.particles_backward, bk);
    f_slot = ad::detail::sweep_loss(g, view, cfg, beta, bk, bwd.posterior, bwd.rows_to,
                                    view.T() - 1);
    const RngKey sk = sub.child("smooth");
    ad::SmoothGraph sm = ad::forward_smooth(g, bwd.posterior, cfg.particles_forward, sk);
    s_slot = ad::detail::sweep_loss(g, view, cfg, beta, sk, sm.posterior, sm.rows_to, 0);
  };

  run(SeqView::all(seq), out.filter_joint, out.smooth_joint);
  for (int m = 0; m < M; ++m) {
    if (seq.observed_count_modality(m) == 0) continue;
    run(SeqView::only(seq, m), out.filter_modal[static_cast<size_t>(m)],
        out.smooth_modal[static_cast<size_t>(m)]);
  }
  return out;
}

/// Plain mirror of sequence_loss_terms; empty slots are NaN-free zeros plus a flag.
struct SeqLossValues {
  double filter_joint = 0, smooth_joint = 0;
  Vec filter_modal, smooth_modal;
  std::vector<char> modal_present;
};

inline SeqLossValues sequence_loss_values(const Mdmm& model, const MultimodalSequence& seq,
                                          const TrainConfig& cfg, double beta, RngKey seq_key) {
  const int M = seq.M;
  SeqLossValues out;
  out.filter_modal.assign(static_cast<size_t>(M), 0.0);
  out.smooth_modal.assign(static_cast<size_t>(M), 0.0);
  out.modal_present.assign(static_cast<size_t>(M), 0);

  const SeqView joint = SeqView::all(seq);
  const RngKey jk = seq_key.child("sub", subset_bits(joint));
  out.filter_joint = filter_loss_value(model, joint, cfg, beta, jk);
  out.smooth_joint = smooth_loss_value(model, joint, cfg, beta, jk);
  for (int m = 0; m < M; ++m) {
    if (seq.observed_count_modality(m) == 0) continue;
    out.modal_present[static_cast<size_t>(m)] = 1;
    const SeqView v = SeqView::only(seq, m);
    const RngKey sk = seq_key.child("sub", subset_bits(v));
    out.filter_modal[static_cast<size_t>(m)] = filter_loss_value(model, v, cfg, beta, sk);
    out.smooth_modal[static_cast<size_t>(m)] = smooth_loss_value(model, v, cfg, beta, sk);
  }
  return out;
}

/**
 * One worker's share of a batch: graph losses for the slots in [begin, end),
 * each sequence's weighted loss scaled by 1/batch_size and backpropagated
 * into this worker's model copy. Accumulates unweighted term sums.
 */
struct BatchShard {
  double filter_joint = 0, smooth_joint = 0;
  Vec filter_modal, smooth_modal;
};

inline BatchShard run_batch_shard(Mdmm& model, std::span<const MultimodalSequence> batch,
                                  size_t begin, size_t end, const TrainConfig& cfg, double beta,
                                  RngKey key, bool accumulate_grads) {
  const int M = model.config().num_modalities();
  BatchShard shard;
  shard.filter_modal.assign(static_cast<size_t>(M), 0.0);
  shard.smooth_modal.assign(static_cast<size_t>(M), 0.0);

  ad::Tape tape;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (size_t i = begin; i < end; ++i) {
    tape.reset();
    MdmmGraph g(tape, model);
    SeqLossTerms terms =
        sequence_loss_terms(g, batch[i], cfg, beta, key.child("seq", static_cast<std::uint64_t>(i)));

    ad::Var f_sum = terms.filter_joint, s_sum = terms.smooth_joint;
    shard.filter_joint += tape.scalar(terms.filter_joint);
    shard.smooth_joint += tape.scalar(terms.smooth_joint);
    for (int m = 0; m < M; ++m) {
      if (!terms.filter_modal[static_cast<size_t>(m)].ok()) continue;
      f_sum = tape.add(f_sum, terms.filter_modal[static_cast<size_t>(m)]);
      s_sum = tape.add(s_sum, terms.smooth_modal[static_cast<size_t>(m)]);
      shard.filter_modal[static_cast<size_t>(m)] +=
          tape.scalar(terms.filter_modal[static_cast<size_t>(m)]);
      shard.smooth_modal[static_cast<size_t>(m)] +=
          tape.scalar(terms.smooth_modal[static_cast<size_t>(m)]);
    }
    if (accumulate_grads) {
      ad::Var root = tape.add(tape.mul_c(f_sum, cfg.lambda_filter * inv_b),
                              tape.mul_c(s_sum, cfg.lambda_smooth * inv_b));
      tape.backward(root);
    }
  }
  return shard;
}

}  // namespace detail

/**
 * The full training objective over one batch: joint and per-modality
 * filtering and smoothing losses for every sequence plus one prior-match
 * term, annealed by beta = min(1, epoch / anneal_epochs). Returns batch-mean
 * term values; when accumulate_grads is set, the gradient of .total lands in
 * model.params() grads (caller zeroes them). Worker sharding changes only
 * summation order, never the per-sequence draws, which are keyed by batch
 * slot: results agree across worker counts up to accumulation roundoff.
 */
inline LossBreakdown total_loss(Mdmm& model, std::span<const MultimodalSequence> batch, int epoch,
                                const TrainConfig& cfg, RngKey key, bool accumulate_grads = true) {
  const int M = model.config().num_modalities();
  cfg.validate(M);
  require(!batch.empty(), "loss: empty batch");
  for (const auto& s : batch)
    require(s.M == M, "loss: sequence modality count does not match the model");

  const double beta = anneal_beta(epoch, cfg);
  const size_t B = batch.size();
  const int workers = std::min<int>(cfg.workers, static_cast<int>(B));

  std::vector<detail::BatchShard> shards(static_cast<size_t>(workers));
  if (workers == 1) {
    shards[0] = detail::run_batch_shard(model, batch, 0, B, cfg, beta, key, accumulate_grads);
  } else {
    std::vector<Mdmm> copies(static_cast<size_t>(workers), model);
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
    const size_t chunk = (B + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
      const size_t lo = std::min(B, static_cast<size_t>(w) * chunk);
      const size_t hi = std::min(B, lo + chunk);
      threads.emplace_back([&, w, lo, hi] {
        try {
          copies[static_cast<size_t>(w)].params().zero_grad();
          shards[static_cast<size_t>(w)] =
              detail::run_batch_shard(copies[static_cast<size_t>(w)], batch, lo, hi, cfg, beta,
                                      key, accumulate_grads);
        } catch (...) {
          errors[static_cast<size_t>(w)] = std::current_exception();
        }
      });
    }
    for (auto& th : threads) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
    if (accumulate_grads) {
      ParamStore& ps = model.params();
      for (int w = 0; w < workers; ++w)
        for (int i = 0; i < ps.count(); ++i) {
          const Vec& src = copies[static_cast<size_t>(w)].params().at(i).grad;
          Vec& dst = ps.at(i).grad;
          for (size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
        }
    }
  }

  LossBreakdown out;
  out.beta = beta;
  out.filter_modal.assign(static_cast<size_t>(M), 0.0);
  out.smooth_modal.assign(static_cast<size_t>(M), 0.0);
  for (const auto& sh : shards) {
    out.filter_joint += sh.filter_joint;
    out.smooth_joint += sh.smooth_joint;
    for (int m = 0; m < M; ++m) {
      out.filter_modal[static_cast<size_t>(m)] += sh.filter_modal[static_cast<size_t>(m)];
      out.smooth_modal[static_cast<size_t>(m)] += sh.smooth_modal[static_cast<size_t>(m)];
    }
  }
  const double inv_b = 1.0 / static_cast<double>(B);
  out.filter_joint *= inv_b;
  out.smooth_joint *= inv_b;
  for (int m = 0; m < M; ++m) {
    out.filter_modal[static_cast<size_t>(m)] *= inv_b;
    out.smooth_modal[static_cast<size_t>(m)] *= inv_b;
  }

  {
    ad::Tape tape;
    MdmmGraph g(tape, model);
    ad::Var pm = ad::prior_match_loss(g, cfg.particles_prior, key.child("match"));
    out.match = tape.scalar(pm);
    if (accumulate_grads) tape.backward(tape.mul_c(pm, cfg.lambda_match * beta));
  }

  out.total = out.weighted_sum(cfg);
  return out;
}

/**
 * Plain-backend batch objective with the identical key schedule: same value
 * as total_loss to floating-point noise, no tape, no gradients. This is the
 * validation metric path.
 */
inline LossBreakdown total_loss_value(const Mdmm& model, std::span<const MultimodalSequence> batch,
                                      int epoch, const TrainConfig& cfg, RngKey key) {
  const int M = model.config().num_modalities();
  cfg.validate(M);
  require(!batch.empty(), "loss: empty batch");
  const double beta = anneal_beta(epoch, cfg);

  LossBreakdown out;
  out.beta = beta;
  out.filter_modal.assign(static_cast<size_t>(M), 0.0);
  out.smooth_modal.assign(static_cast<size_t>(M), 0.0);
  for (size_t i = 0; i < batch.size(); ++i) {
    detail::SeqLossValues v = detail::sequence_loss_values(
        model, batch[i], cfg, beta, key.child("seq", static_cast<std::uint64_t>(i)));
    out.filter_joint += v.filter_joint;
    out.smooth_joint += v.smooth_joint;
    for (int m = 0; m < M; ++m) {
      out.filter_modal[static_cast<size_t>(m)] += v.filter_modal[static_cast<size_t>(m)];
      out.smooth_modal[static_cast<size_t>(m)] += v.smooth_modal[static_cast<size_t>(m)];
    }
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  out.filter_joint *= inv_b;
  out.smooth_joint *= inv_b;
  for (int m = 0; m < M; ++m) {
    out.filter_modal[static_cast<size_t>(m)] *= inv_b;
    out.smooth_modal[static_cast<size_t>(m)] *= inv_b;
  }
  out.match = prior_match_value(model, cfg.particles_prior, key.child("match"));
  out.total = out.weighted_sum(cfg);
  return out;
}

}  // namespace mdmm
