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
#include "mdmm/rng.hpp"
#include "mdmm/tape.hpp"

namespace mdmm {

/// Additive floor on transition standard deviations.
inline constexpr double kSigmaFloor = 0.001;

/**
 * Named parameter tensor. `decay` marks rank-2 weight matrices, the only
 * tensors weight decay applies to (biases and the free prior are exempt).
 */
struct Tensor {
  std::string name;
  int rows = 0, cols = 0;
  bool decay = false;
  Vec value, grad;

  size_t size() const { return static_cast<size_t>(rows) * cols; }
};

/**
 * Flat registry of tensors in a stable registration order; that order defines
 * initialization draws, checkpoint layout, and optimizer state alignment.
 */
class ParamStore {
 public:
  int add(std::string name, int rows, int cols, bool decay) {
    Tensor t;
    t.name = std::move(name);
    t.rows = rows;
    t.cols = cols;
    t.decay = decay;
    t.value.assign(t.size(), 0.0);
    t.grad.assign(t.size(), 0.0);
    tensors_.push_back(std::move(t));
    return static_cast<int>(tensors_.size()) - 1;
  }

  Tensor& at(int i) { return tensors_[i]; }
  const Tensor& at(int i) const { return tensors_[i]; }
  int count() const { return static_cast<int>(tensors_.size()); }

  size_t param_count() const {
    size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& t : tensors_)
      std::fill(t.grad.begin(), t.grad.end(), 0.0);
  }

  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }

 private:
  std::vector<Tensor> tensors_;
};

/**
 * Weight matrices get U(-1/sqrt(fan_in), +1/sqrt(fan_in)); biases and the
 * prior stay zero. Draws come from a per-tensor child stream, so editing one
 * block's architecture leaves other blocks' initializations untouched.
 */
inline void init_params(ParamStore& ps, RngKey key) {
  for (int i = 0; i < ps.count(); ++i) {
    Tensor& t = ps.at(i);
    if (!t.decay) continue;
    Rng rng(key.child(static_cast<std::uint64_t>(i)));
    const double bound = 1.0 / std::sqrt(static_cast<double>(t.cols));
    for (double& w : t.value) w = (2.0 * rng.uniform() - 1.0) * bound;
  }
}

/// Caches one tape leaf per tensor so repeated block applications share nodes.
struct GraphParams {
  ad::Tape* tape;
  ParamStore* store;
  std::vector<ad::Var> cache;

  GraphParams(ad::Tape& t, ParamStore& s) : tape(&t), store(&s), cache(s.count()) {}

  ad::Var leaf(int idx) {
    if (!cache[idx].ok()) {
      Tensor& t = store->at(idx);
      cache[idx] = tape->param(t.value.data(), t.grad.data(), t.rows, t.cols);
    }
    return cache[idx];
  }
};

/// Affine map; weight stored (out x in), applied as y = W x + b.
struct Linear {
  int w = -1, b = -1;
  int in = 0, out = 0;

  void init(ParamStore& ps, const std::string& name, int in_dim, int out_dim) {
    in = in_dim;
    out = out_dim;
    w = ps.add(name + ".weight", out_dim, in_dim, true);
    b = ps.add(name + ".bias", 1, out_dim, false);
  }

  Vec apply(const ParamStore& ps, std::span<const double> x) const {
    const Tensor& wt = ps.at(w);
    const Tensor& bt = ps.at(b);
    Vec y(out);
    for (int o = 0; o < out; ++o) {
      double acc = bt.value[o];
      const double* wo = wt.value.data() + static_cast<size_t>(o) * in;
      for (int i = 0; i < in; ++i) acc += wo[i] * x[i];
      y[o] = acc;
    }
    return y;
  }

  /// Batched rows: Y = X W^T + b.
  Mat apply_rows(const ParamStore& ps, const Mat& x) const {
    const Tensor& wt = ps.at(w);
    const Tensor& bt = ps.at(b);
    Mat y(x.rows, out);
    for (int r = 0; r < x.rows; ++r) {
      const double* xr = x.row_ptr(r);
      double* yr = y.row_ptr(r);
      for (int o = 0; o < out; ++o) {
        double acc = bt.value[o];
        const double* wo = wt.value.data() + static_cast<size_t>(o) * in;
        for (int i = 0; i < in; ++i) acc += wo[i] * xr[i];
        yr[o] = acc;
      }
    }
    return y;
  }

  ad::Var apply(ad::Tape& t, GraphParams& gp, ad::Var x) const {
    return t.linear(x, gp.leaf(w), gp.leaf(b));
  }
};

namespace detail {
inline void relu_inplace(Mat& x) {
  for (double& v : x.a)
    if (v < 0.0) v = 0.0;
}
inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
inline double stable_softplus(double x) {
  return (x > 0.0 ? x : 0.0) + std::log1p(std::exp(-std::abs(x)));
}
}  // namespace detail

/**
 * Gated transition function: a gate network interpolates between a nonlinear
 * proposal mean and a linear mean, and the scale head reads the proposal
 * mean. sigma gets an additive 0.001 floor for numerical stability.
 *
 *   g   = Sigmoid(gate_out(ReLU(gate_in(z))))
 *   mu~ = prop_out(ReLU(prop_in(z)))
 *   mu" = mu_lin(z)
 *   mu  = g * mu~ + (1-g) * mu"          (computed as mu" + g*(mu~ - mu"))
 *   sig = Softplus(sig_lin(mu~)) + 0.001
 */
struct GatedTransition {
  Linear gate_in, gate_out, prop_in, prop_out, mu_lin, sig_lin;
  int zdim = 0, hdim = 0;

  void init(ParamStore& ps, const std::string& prefix, int z, int h) {
    zdim = z;
    hdim = h;
    gate_in.init(ps, prefix + ".gate_in", z, h);
    gate_out.init(ps, prefix + ".gate_out", h, z);
    prop_in.init(ps, prefix + ".prop_in", z, h);
    prop_out.init(ps, prefix + ".prop_out", h, z);
    mu_lin.init(ps, prefix + ".mu_lin", z, z);
    sig_lin.init(ps, prefix + ".sig_lin", z, z);
  }

  RowGauss apply_rows(const ParamStore& ps, const Mat& z) const {
    Mat hg = gate_in.apply_rows(ps, z);
    detail::relu_inplace(hg);
    Mat g = gate_out.apply_rows(ps, hg);
    for (double& v : g.a) v = detail::stable_sigmoid(v);

    Mat hp = prop_in.apply_rows(ps, z);
    detail::relu_inplace(hp);
    Mat mu_t = prop_out.apply_rows(ps, hp);
    Mat mu_l = mu_lin.apply_rows(ps, z);

    RowGauss out;
    out.mean = Mat(z.rows, zdim);
    for (size_t i = 0; i < out.mean.a.size(); ++i)
      out.mean.a[i] = mu_l.a[i] + g.a[i] * (mu_t.a[i] - mu_l.a[i]);

    Mat s = sig_lin.apply_rows(ps, mu_t);
    out.prec = Mat(z.rows, zdim);
    for (size_t i = 0; i < s.a.size(); ++i) {
      const double sig = detail::stable_softplus(s.a[i]) + kSigmaFloor;
      out.prec.a[i] = 1.0 / (sig * sig);
    }
    return out;
  }

  ad::RowGaussV apply_rows(ad::Tape& t, GraphParams& gp, ad::Var z) const {
    ad::Var g = t.sigmoid(gate_out.apply(t, gp, t.relu(gate_in.apply(t, gp, z))));
    ad::Var mu_t = prop_out.apply(t, gp, t.relu(prop_in.apply(t, gp, z)));
    ad::Var mu_l = mu_lin.apply(t, gp, z);
    ad::Var mean = t.add(mu_l, t.mul(g, t.sub(mu_t, mu_l)));
    ad::Var sig = t.add_c(t.softplus(sig_lin.apply(t, gp, mu_t)), kSigmaFloor);
    return {mean, t.recip(t.square(sig))};
  }
};

/**
 * Per-modality encoder parameterizing the observation's quotient factor
 * directly from one scalar: mu = mu(ReLU(fc(v))), sigma = Softplus(sig(...)).
 */
struct MlpEncoder {
  Linear fc, mu, sig;
  int zdim = 0;

  void init(ParamStore& ps, const std::string& prefix, int z, int h) {
    zdim = z;
    fc.init(ps, prefix + ".fc", 1, h);
    mu.init(ps, prefix + ".mu", h, z);
    sig.init(ps, prefix + ".sig", h, z);
  }

  DiagGaussian apply(const ParamStore& ps, double v) const {
    Vec x = {v};
    Vec h = fc.apply(ps, x);
    for (double& u : h)
      if (u < 0.0) u = 0.0;
    Vec m = mu.apply(ps, h);
    Vec s = sig.apply(ps, h);
    for (double& u : s) u = detail::stable_softplus(u);
    return DiagGaussian::from_mean_sigma(std::move(m), s);
  }

  ad::GaussV apply(ad::Tape& t, GraphParams& gp, double v) const {
    const double x[1] = {v};
    ad::Var xv = t.constant(x, 1, 1);
    ad::Var h = t.relu(fc.apply(t, gp, xv));
    ad::Var m = mu.apply(t, gp, h);
    ad::Var s = t.softplus(sig.apply(t, gp, h));
    return ad::gauss_from_sigma(t, m, s);
  }
};

/// Per-modality decoder: scalar emission Gaussian from the latent state.
struct MlpDecoder {
  Linear fc, mu, sig;

  void init(ParamStore& ps, const std::string& prefix, int z, int h) {
    fc.init(ps, prefix + ".fc", z, h);
    mu.init(ps, prefix + ".mu", h, 1);
    sig.init(ps, prefix + ".sig", h, 1);
  }

  DiagGaussian apply(const ParamStore& ps, std::span<const double> z) const {
    Vec h = fc.apply(ps, z);
    for (double& u : h)
      if (u < 0.0) u = 0.0;
    Vec m = mu.apply(ps, h);
    Vec s = sig.apply(ps, h);
    for (double& u : s) u = detail::stable_softplus(u);
    return DiagGaussian::from_mean_sigma(std::move(m), s);
  }

  ad::GaussV apply(ad::Tape& t, GraphParams& gp, ad::Var z) const {
    ad::Var h = t.relu(fc.apply(t, gp, z));
    ad::Var m = mu.apply(t, gp, h);
    ad::Var s = t.softplus(sig.apply(t, gp, h));
    return ad::gauss_from_sigma(t, m, s);
  }
};

}  // namespace mdmm
