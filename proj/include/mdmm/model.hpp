#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mdmm/admath.hpp"
#include "mdmm/common.hpp"
#include "mdmm/gaussian.hpp"
#include "mdmm/nn.hpp"
#include "mdmm/rng.hpp"
#include "mdmm/sequence.hpp"
#include "mdmm/tape.hpp"

namespace mdmm {

struct ModelConfig {
  int latent_dim = 5;
  int hidden_dim = 20;
  std::vector<std::string> modalities = {"x", "y"};

  int num_modalities() const { return static_cast<int>(modalities.size()); }
};

enum class Dir { Fwd, Bwd };

/**
 * Multimodal deep Markov model over a diagonal-Gaussian latent chain: one
 * gated transition per direction, a free stationary prior (mean and
 * log-variance), and per-modality scalar encoder/decoder pairs.
 *
 * Parameter registration order is part of the checkpoint format; do not
 * reorder blocks here without bumping the checkpoint version.
 */
class Mdmm {
 public:
  explicit Mdmm(ModelConfig cfg, std::uint64_t init_seed = 0)
      : cfg_(std::move(cfg)) {
    const int z = cfg_.latent_dim, h = cfg_.hidden_dim;
    fwd_.init(params_, "fwd", z, h);
    bwd_.init(params_, "bwd", z, h);
    prior_mean_ = params_.add("prior.mean", 1, z, false);
    prior_logvar_ = params_.add("prior.logvar", 1, z, false);
    for (const auto& m : cfg_.modalities) {
      MlpEncoder enc;
      enc.init(params_, "enc." + m, z, h);
      encoders_.push_back(enc);
      MlpDecoder dec;
      dec.init(params_, "dec." + m, z, h);
      decoders_.push_back(dec);
    }
    init_params(params_, RngKey{init_seed});
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  DiagGaussian prior() const {
    const Tensor& mt = params_.at(prior_mean_);
    const Tensor& vt = params_.at(prior_logvar_);
    Vec prec(vt.value.size());
    for (size_t i = 0; i < prec.size(); ++i) prec[i] = std::exp(-vt.value[i]);
    return DiagGaussian(mt.value, std::move(prec));
  }

  RowGauss transition_rows(Dir d, const Mat& z) const {
    return (d == Dir::Fwd ? fwd_ : bwd_).apply_rows(params_, z);
  }

  DiagGaussian transition(Dir d, std::span<const double> z) const {
    Mat zm(1, static_cast<int>(z.size()));
    std::copy(z.begin(), z.end(), zm.a.begin());
    RowGauss r = transition_rows(d, zm);
    return DiagGaussian(std::move(r.mean.a), std::move(r.prec.a));
  }

  DiagGaussian encode(int modality, double v) const {
    require(modality >= 0 && modality < cfg_.num_modalities(), "bad modality index");
    return encoders_[modality].apply(params_, v);
  }

  DiagGaussian emit(int modality, std::span<const double> z) const {
    require(modality >= 0 && modality < cfg_.num_modalities(), "bad modality index");
    return decoders_[modality].apply(params_, z);
  }

  /**
   * Ancestral sampling through the forward chain: z_1 from the prior, then
   * z_t ~ fwd(z_{t-1}), each observation from its decoder. Fully observed.
   */
  struct Generated {
    MultimodalSequence seq;
    Mat latents;  // T x latent_dim
  };

  Generated generate(int T, RngKey key) const {
    require(T >= 1, "generate needs T >= 1");
    const int z = cfg_.latent_dim, M = cfg_.num_modalities();
    Generated out;
    out.seq = MultimodalSequence(T, M);
    out.latents = Mat(T, z);

    Rng r0(key.child("z", 0));
    Vec zt = sample_one(prior(), r0);
    std::copy(zt.begin(), zt.end(), out.latents.row_ptr(0));
    for (int t = 1; t < T; ++t) {
      Rng rt(key.child("z", static_cast<std::uint64_t>(t)));
      zt = sample_one(transition(Dir::Fwd, zt), rt);
      std::copy(zt.begin(), zt.end(), out.latents.row_ptr(t));
    }
    for (int t = 0; t < T; ++t) {
      for (int m = 0; m < M; ++m) {
        DiagGaussian e = emit(m, out.latents.row(t));
        Rng rng(key.child("v", static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(m)));
        out.seq.set(t, m, sample_one(e, rng)[0]);
      }
    }
    return out;
  }

 private:
  friend class MdmmGraph;

  ModelConfig cfg_;
  ParamStore params_;
  GatedTransition fwd_, bwd_;
  int prior_mean_ = -1, prior_logvar_ = -1;
  std::vector<MlpEncoder> encoders_;
  std::vector<MlpDecoder> decoders_;
};

/// Differentiable view of a model over one tape; leaves are cached per tensor.
class MdmmGraph {
 public:
  MdmmGraph(ad::Tape& tape, Mdmm& model)
      : tape_(&tape), model_(&model), gp_(tape, model.params()) {}

  ad::Tape& tape() { return *tape_; }
  const ModelConfig& config() const { return model_->cfg_; }

  ad::GaussV prior() {
    ad::Var mean = gp_.leaf(model_->prior_mean_);
    ad::Var logvar = gp_.leaf(model_->prior_logvar_);
    return {mean, tape_->exp_(tape_->neg(logvar))};
  }

  ad::RowGaussV transition_rows(Dir d, ad::Var z) {
    return (d == Dir::Fwd ? model_->fwd_ : model_->bwd_).apply_rows(*tape_, gp_, z);
  }

  ad::GaussV encode(int modality, double v) {
    return model_->encoders_[modality].apply(*tape_, gp_, v);
  }

  ad::GaussV emit(int modality, ad::Var z) {
    return model_->decoders_[modality].apply(*tape_, gp_, z);
  }

 private:
  ad::Tape* tape_;
  Mdmm* model_;
  GraphParams gp_;
};

}  // namespace mdmm
