#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "mdmm/common.hpp"

namespace mdmm::ad {

/**
 * Eager reverse-mode tape over matrix-valued nodes. Each op computes its
 * value at creation time (so data-dependent control flow, e.g. quotient
 * guards, can inspect values while building the graph) and backward() replays
 * the records in reverse. One tape per loss evaluation; reset() keeps
 * capacity so per-sequence reuse does not reallocate.
 */
struct Var {
  int id = -1;
  bool ok() const { return id >= 0; }
};

class Tape {
  enum class Op : std::uint8_t {
    kParam, kConst,
    kRelu, kSigmoid, kSoftplus, kExp, kLog, kRecip, kSquare, kInvSqrt, kNeg,
    kAddC, kMulC,
    kAdd, kSub, kMul, kDiv,
    kBroadcastRow, kColMean, kSumAll,
    kLinear, kLogPdf, kKlMean,
  };

  struct Node {
    Op op;
    int rows, cols;
    int a = -1, b = -1, c = -1;
    double s0 = 0.0;
    std::size_t val = 0;           // offset into vals_
    std::size_t aux = 0;           // offset into aux_ (kLogPdf target, kConst source copy)
    double* gsink = nullptr;       // kParam: gradient accumulation target
  };

 public:
  // ---- leaves ----

  Var param(const double* data, double* grad, int rows, int cols) {
    Var v = make(Op::kParam, rows, cols);
    node(v).gsink = grad;
    std::copy(data, data + static_cast<std::size_t>(rows) * cols, vals_.data() + node(v).val);
    return v;
  }

  Var constant(std::span<const double> data, int rows, int cols) {
    require(data.size() == static_cast<std::size_t>(rows) * cols, "tape: constant size mismatch");
    Var v = make(Op::kConst, rows, cols);
    std::copy(data.begin(), data.end(), vals_.data() + node(v).val);
    return v;
  }

  Var constant_scalar(double x) {
    Var v = make(Op::kConst, 1, 1);
    vals_[node(v).val] = x;
    return v;
  }

  // ---- elementwise unary ----

  Var relu(Var a) { return unary(Op::kRelu, a, [](double x) { return x > 0.0 ? x : 0.0; }); }

  Var sigmoid(Var a) {
    return unary(Op::kSigmoid, a, [](double x) { return stable_sigmoid(x); });
  }

  Var softplus(Var a) {
    return unary(Op::kSoftplus, a, [](double x) { return stable_softplus(x); });
  }

  Var exp_(Var a) { return unary(Op::kExp, a, [](double x) { return std::exp(x); }); }
  Var log_(Var a) { return unary(Op::kLog, a, [](double x) { return std::log(x); }); }
  Var recip(Var a) { return unary(Op::kRecip, a, [](double x) { return 1.0 / x; }); }
  Var square(Var a) { return unary(Op::kSquare, a, [](double x) { return x * x; }); }
  Var inv_sqrt(Var a) { return unary(Op::kInvSqrt, a, [](double x) { return 1.0 / std::sqrt(x); }); }
  Var neg(Var a) { return unary(Op::kNeg, a, [](double x) { return -x; }); }

  Var add_c(Var a, double c) {
    Var v = unary(Op::kAddC, a, [c](double x) { return x + c; });
    node(v).s0 = c;
    return v;
  }

  Var mul_c(Var a, double c) {
    Var v = unary(Op::kMulC, a, [c](double x) { return x * c; });
    node(v).s0 = c;
    return v;
  }

  // ---- elementwise binary (equal shapes) ----

  Var add(Var a, Var b) { return binary(Op::kAdd, a, b, [](double x, double y) { return x + y; }); }
  Var sub(Var a, Var b) { return binary(Op::kSub, a, b, [](double x, double y) { return x - y; }); }
  Var mul(Var a, Var b) { return binary(Op::kMul, a, b, [](double x, double y) { return x * y; }); }
  Var div(Var a, Var b) { return binary(Op::kDiv, a, b, [](double x, double y) { return x / y; }); }

  // ---- shape ops ----

  Var broadcast_row(Var a, int k) {
    require(node(a).rows == 1, "tape: broadcast_row needs a row vector");
    const int d = node(a).cols;
    Var v = make(Op::kBroadcastRow, k, d);
    node(v).a = a.id;
    const double* src = value_ptr(a);
    double* dst = vals_.data() + node(v).val;
    for (int r = 0; r < k; ++r)
      for (int j = 0; j < d; ++j) dst[static_cast<std::size_t>(r) * d + j] = src[j];
    return v;
  }

  Var col_mean(Var a) {
    const int k = node(a).rows, d = node(a).cols;
    Var v = make(Op::kColMean, 1, d);
    node(v).a = a.id;
    const double* src = value_ptr(a);
    double* dst = vals_.data() + node(v).val;
    for (int j = 0; j < d; ++j) dst[j] = 0.0;
    for (int r = 0; r < k; ++r)
      for (int j = 0; j < d; ++j) dst[j] += src[static_cast<std::size_t>(r) * d + j];
    for (int j = 0; j < d; ++j) dst[j] /= k;
    return v;
  }

  Var sum_all(Var a) {
    Var v = make(Op::kSumAll, 1, 1);
    node(v).a = a.id;
    const double* src = value_ptr(a);
    double acc = 0.0;
    const std::size_t n = numel(a);
    for (std::size_t i = 0; i < n; ++i) acc += src[i];
    vals_[node(v).val] = acc;
    return v;
  }

  /// Y = X * W^T + b with X: KxDin, W: DoutxDin, b: 1xDout.
  Var linear(Var x, Var w, Var b) {
    const int k = node(x).rows, din = node(x).cols;
    const int dout = node(w).rows;
    require(node(w).cols == din, "tape: linear weight/input dim mismatch");
    require(node(b).rows == 1 && node(b).cols == dout, "tape: linear bias dim mismatch");
    Var v = make(Op::kLinear, k, dout);
    node(v).a = x.id;
    node(v).b = w.id;
    node(v).c = b.id;
    const double* xp = value_ptr(x);
    const double* wp = value_ptr(w);
    const double* bp = value_ptr(b);
    double* yp = vals_.data() + node(v).val;
    for (int r = 0; r < k; ++r) {
      const double* xr = xp + static_cast<std::size_t>(r) * din;
      double* yr = yp + static_cast<std::size_t>(r) * dout;
      for (int o = 0; o < dout; ++o) {
        const double* wo = wp + static_cast<std::size_t>(o) * din;
        double acc = bp[o];
        for (int i = 0; i < din; ++i) acc += xr[i] * wo[i];
        yr[o] = acc;
      }
    }
    return v;
  }

  /// Gaussian log density of a fixed target x under (mean, prec), both 1xD.
  Var logpdf(Var mean, Var prec, std::span<const double> x) {
    const int d = node(mean).cols;
    require(node(mean).rows == 1 && node(prec).rows == 1 && node(prec).cols == d,
            "tape: logpdf operand shapes");
    require(static_cast<int>(x.size()) == d, "tape: logpdf target dim");
    Var v = make(Op::kLogPdf, 1, 1);
    node(v).a = mean.id;
    node(v).b = prec.id;
    node(v).aux = push_aux(x);
    const double* mp = value_ptr(mean);
    const double* tp = value_ptr(prec);
    constexpr double kLog2Pi = 1.8378770664093454836;
    double acc = 0.0;
    for (int i = 0; i < d; ++i) {
      const double dm = x[i] - mp[i];
      acc += std::log(tp[i]) - kLog2Pi - tp[i] * dm * dm;
    }
    vals_[node(v).val] = 0.5 * acc;
    return v;
  }

  /// scale * sum over rows of KL(N(ma_r, ta_r) || N(mb_r, tb_r)); all KxD.
  Var kl_mean(Var ma, Var ta, Var mb, Var tb, double scale) {
    const int k = node(ma).rows, d = node(ma).cols;
    require(same_shape(ma, ta) && same_shape(ma, mb) && same_shape(ma, tb), "tape: kl_mean shapes");
    Var v = make(Op::kKlMean, 1, 1);
    node(v).a = ma.id;
    node(v).b = ta.id;
    node(v).c = mb.id;
    // fourth operand stored via aux trick: keep it in s0-adjacent field; use aux to hold id
    aux_.push_back(static_cast<double>(tb.id));
    node(v).aux = aux_.size() - 1;
    node(v).s0 = scale;
    const double* map = value_ptr(ma);
    const double* tap = value_ptr(ta);
    const double* mbp = value_ptr(mb);
    const double* tbp = value_ptr(tb);
    double acc = 0.0;
    const std::size_t n = static_cast<std::size_t>(k) * d;
    for (std::size_t i = 0; i < n; ++i) {
      const double dm = map[i] - mbp[i];
      acc += tbp[i] / tap[i] + tbp[i] * dm * dm - 1.0 + std::log(tap[i]) - std::log(tbp[i]);
    }
    vals_[node(v).val] = 0.5 * scale * acc;
    return v;
  }

  // ---- access ----

  int rows(Var v) const { return node(v).rows; }
  int cols(Var v) const { return node(v).cols; }
  const double* value_ptr(Var v) const { return vals_.data() + node(v).val; }
  double scalar(Var v) const { return vals_[node(v).val]; }
  std::size_t node_count() const { return nodes_.size(); }

  // ---- reverse sweep ----

  void backward(Var root) {
    require(root.ok() && numel(root) == 1, "tape: backward root must be scalar");
    adj_.assign(vals_.size(), 0.0);
    adj_[node(root).val] = 1.0;
    for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) backprop_node(id);
  }

  void reset() {
    nodes_.clear();
    vals_.clear();
    adj_.clear();
    aux_.clear();
  }

 private:
  std::vector<Node> nodes_;
  std::vector<double> vals_, adj_, aux_;

  Node& node(Var v) { return nodes_[v.id]; }
  const Node& node(Var v) const { return nodes_[v.id]; }
  std::size_t numel(Var v) const { return static_cast<std::size_t>(node(v).rows) * node(v).cols; }
  bool same_shape(Var a, Var b) const {
    return node(a).rows == node(b).rows && node(a).cols == node(b).cols;
  }

  Var make(Op op, int rows, int cols) {
    Node n;
    n.op = op;
    n.rows = rows;
    n.cols = cols;
    n.val = vals_.size();
    vals_.resize(vals_.size() + static_cast<std::size_t>(rows) * cols);
    nodes_.push_back(n);
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::size_t push_aux(std::span<const double> xs) {
    const std::size_t off = aux_.size();
    aux_.insert(aux_.end(), xs.begin(), xs.end());
    return off;
  }

  template <class F>
  Var unary(Op op, Var a, F f) {
    Var v = make(op, node(a).rows, node(a).cols);
    node(v).a = a.id;
    const double* src = value_ptr(a);
    double* dst = vals_.data() + node(v).val;
    const std::size_t n = numel(a);
    for (std::size_t i = 0; i < n; ++i) dst[i] = f(src[i]);
    return v;
  }

  template <class F>
  Var binary(Op op, Var a, Var b, F f) {
    require(same_shape(a, b), "tape: binary op shape mismatch");
    Var v = make(op, node(a).rows, node(a).cols);
    node(v).a = a.id;
    node(v).b = b.id;
    const double* pa = value_ptr(a);
    const double* pb = value_ptr(b);
    double* dst = vals_.data() + node(v).val;
    const std::size_t n = numel(a);
    for (std::size_t i = 0; i < n; ++i) dst[i] = f(pa[i], pb[i]);
    return v;
  }

  static double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  }

  static double stable_softplus(double x) {
    return (x > 0.0 ? x : 0.0) + std::log1p(std::exp(-std::abs(x)));
  }

  void backprop_node(int id) {
    const Node& n = nodes_[id];
    const double* gy = adj_.data() + n.val;
    const double* y = vals_.data() + n.val;
    const std::size_t cnt = static_cast<std::size_t>(n.rows) * n.cols;

    auto gin = [&](int in) { return adj_.data() + nodes_[in].val; };
    auto vin = [&](int in) { return vals_.data() + nodes_[in].val; };

    switch (n.op) {
      case Op::kParam: {
        double* g = n.gsink;
        for (std::size_t i = 0; i < cnt; ++i) g[i] += gy[i];
        break;
      }
      case Op::kConst:
        break;
      case Op::kRelu: {
        const double* x = vin(n.a);
        double* gx = gin(n.a);
        for (std::size_t i = 0; i < cnt; ++i)
          if (x[i] > 0.0) gx[i] += gy[i];
        break;
      }
      case Op::kSigmoid: {
        double* gx = gin(n.a);
        for (std::size_t i = 0; i < cnt; ++i) gx[i] += gy[i] * y[i] * (1.0 - y[i]);
        break;
      }
      case Op::kSoftplus: {
        const double* x = vin(n.a);
        double* gx = gin(n.a);
        for (std::size_t i = 0; i < cnt; ++i) gx[i] += gy[i] * stable_sigmoid(x[i]);
        break;
      }
      case Op::kExp: {
        double* gx = gin(n.a);
        for (std::size_t i = 0; i < cnt; ++i) gx[i] += gy[i] * y[i];
        break;
      }
      case Op::kLog: {
        const double* x = vin(n.a);
        double* gx = gin(n.a);
        for (std::size_t i = 0; i < cnt; ++i) gx[i] += gy[i] / x[i];
        break;
      }
      case Op::kRecip: {
        double* gx = gin(n.a);
        for (std::size_t i = 0; i < cnt; ++i) gx[i] -= gy[i] * y[i] * y[i];
        break;
      }
      case Op::kSquare: {
        const double* x = vin(n.a);
        double* gx = gin(n.a);
        for (std::size_t i = 0; i < cnt; ++i) gx[i] += gy[i] * 2.0 * x[i];
        break;
      }
      case Op::kInvSqrt: {
        double* gx = gin(n.a);
        for (std::size_t i = 0; i < cnt; ++i) gx[i] -= gy[i] * 0.5 * y[i] * y[i] * y[i];
        break;
      }
      case Op::kNeg: {
        double* gx = gin(n.a);
        for (std::size_t i = 0; i < cnt; ++i) gx[i] -= gy[i];
        break;
      }
      case Op::kAddC: {
        double* gx = gin(n.a);
        for (std::size_t i = 0; i < cnt; ++i) gx[i] += gy[i];
        break;
      }
      case Op::kMulC: {
        double* gx = gin(n.a);
        for (std::size_t i = 0; i < cnt; ++i) gx[i] += gy[i] * n.s0;
        break;
      }
      case Op::kAdd: {
        double* ga = gin(n.a);
        double* gb = gin(n.b);
        for (std::size_t i = 0; i < cnt; ++i) {
          ga[i] += gy[i];
          gb[i] += gy[i];
        }
        break;
      }
      case Op::kSub: {
        double* ga = gin(n.a);
        double* gb = gin(n.b);
        for (std::size_t i = 0; i < cnt; ++i) {
          ga[i] += gy[i];
          gb[i] -= gy[i];
        }
        break;
      }
      case Op::kMul: {
        const double* va = vin(n.a);
        const double* vb = vin(n.b);
        double* ga = gin(n.a);
        double* gb = gin(n.b);
        for (std::size_t i = 0; i < cnt; ++i) {
          ga[i] += gy[i] * vb[i];
          gb[i] += gy[i] * va[i];
        }
        break;
      }
      case Op::kDiv: {
        const double* vb = vin(n.b);
        double* ga = gin(n.a);
        double* gb = gin(n.b);
        for (std::size_t i = 0; i < cnt; ++i) {
          ga[i] += gy[i] / vb[i];
          gb[i] -= gy[i] * y[i] / vb[i];
        }
        break;
      }
      case Op::kBroadcastRow: {
        double* ga = gin(n.a);
        for (int r = 0; r < n.rows; ++r)
          for (int j = 0; j < n.cols; ++j) ga[j] += gy[static_cast<std::size_t>(r) * n.cols + j];
        break;
      }
      case Op::kColMean: {
        const int k = nodes_[n.a].rows;
        double* ga = gin(n.a);
        for (int r = 0; r < k; ++r)
          for (int j = 0; j < n.cols; ++j)
            ga[static_cast<std::size_t>(r) * n.cols + j] += gy[j] / k;
        break;
      }
      case Op::kSumAll: {
        double* ga = gin(n.a);
        const std::size_t m = static_cast<std::size_t>(nodes_[n.a].rows) * nodes_[n.a].cols;
        for (std::size_t i = 0; i < m; ++i) ga[i] += gy[0];
        break;
      }
      case Op::kLinear: {
        const int k = n.rows, dout = n.cols, din = nodes_[n.a].cols;
        const double* xp = vin(n.a);
        const double* wp = vin(n.b);
        double* gx = gin(n.a);
        double* gw = gin(n.b);
        double* gb = gin(n.c);
        for (int r = 0; r < k; ++r) {
          const double* gyr = gy + static_cast<std::size_t>(r) * dout;
          const double* xr = xp + static_cast<std::size_t>(r) * din;
          double* gxr = gx + static_cast<std::size_t>(r) * din;
          for (int o = 0; o < dout; ++o) {
            const double g = gyr[o];
            const double* wo = wp + static_cast<std::size_t>(o) * din;
            double* gwo = gw + static_cast<std::size_t>(o) * din;
            gb[o] += g;
            for (int i = 0; i < din; ++i) {
              gxr[i] += g * wo[i];
              gwo[i] += g * xr[i];
            }
          }
        }
        break;
      }
      case Op::kLogPdf: {
        const int d = nodes_[n.a].cols;
        const double g = gy[0];
        const double* mp = vin(n.a);
        const double* tp = vin(n.b);
        const double* x = aux_.data() + n.aux;
        double* gm = gin(n.a);
        double* gt = gin(n.b);
        for (int i = 0; i < d; ++i) {
          const double dm = x[i] - mp[i];
          gm[i] += g * tp[i] * dm;
          gt[i] += g * 0.5 * (1.0 / tp[i] - dm * dm);
        }
        break;
      }
      case Op::kKlMean: {
        const int tb_id = static_cast<int>(aux_[n.aux]);
        const double g = gy[0] * 0.5 * n.s0;
        const double* map = vin(n.a);
        const double* tap = vin(n.b);
        const double* mbp = vin(n.c);
        const double* tbp = vals_.data() + nodes_[tb_id].val;
        double* gma = gin(n.a);
        double* gta = gin(n.b);
        double* gmb = gin(n.c);
        double* gtb = adj_.data() + nodes_[tb_id].val;
        const std::size_t m = static_cast<std::size_t>(nodes_[n.a].rows) * nodes_[n.a].cols;
        for (std::size_t i = 0; i < m; ++i) {
          const double dm = map[i] - mbp[i];
          gma[i] += g * 2.0 * tbp[i] * dm;
          gmb[i] -= g * 2.0 * tbp[i] * dm;
          gta[i] += g * (1.0 / tap[i] - tbp[i] / (tap[i] * tap[i]));
          gtb[i] += g * (dm * dm + 1.0 / tap[i] - 1.0 / tbp[i]);
        }
        break;
      }
    }
  }
};

}  // namespace mdmm::ad
