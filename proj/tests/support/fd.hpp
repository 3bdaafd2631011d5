#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mdmm/common.hpp"
#include "mdmm/tape.hpp"

namespace oracle {

using mdmm::Mat;

/**
 * Finite-difference gradient oracle for tape-built scalar functions. The
 * builder reconstructs the graph from leaf vars, so central differences
 * re-run the exact computation being differentiated.
 */
struct FdProblem {
  std::vector<Mat> inputs;
  std::function<mdmm::ad::Var(mdmm::ad::Tape&, const std::vector<mdmm::ad::Var>&)> build;
};

inline double fd_value(const FdProblem& p, const std::vector<Mat>& xs) {
  mdmm::ad::Tape t;
  std::vector<Mat> sink;
  std::vector<mdmm::ad::Var> vars;
  for (const auto& x : xs) {
    sink.emplace_back(x.rows, x.cols);
    vars.push_back(t.param(x.a.data(), sink.back().a.data(), x.rows, x.cols));
  }
  return t.scalar(p.build(t, vars));
}

inline std::vector<Mat> analytic_grads(const FdProblem& p) {
  mdmm::ad::Tape t;
  std::vector<Mat> grads;
  std::vector<mdmm::ad::Var> vars;
  grads.reserve(p.inputs.size());
  for (const auto& x : p.inputs) grads.emplace_back(x.rows, x.cols);
  for (size_t i = 0; i < p.inputs.size(); ++i)
    vars.push_back(t.param(p.inputs[i].a.data(), grads[i].a.data(),
                           p.inputs[i].rows, p.inputs[i].cols));
  t.backward(p.build(t, vars));
  return grads;
}

/**
 * Worst relative gradient error across every input coordinate; the floor
 * keeps near-zero gradients from inflating the ratio.
 */
inline double fd_max_rel_err(const FdProblem& p, double h = 1e-5, double floor = 1e-7) {
  const std::vector<Mat> grads = analytic_grads(p);
  double worst = 0.0;
  for (size_t i = 0; i < p.inputs.size(); ++i) {
    for (size_t j = 0; j < p.inputs[i].a.size(); ++j) {
      std::vector<Mat> xs = p.inputs;
      const double x0 = xs[i].a[j];
      const double step = h * std::max(1.0, std::abs(x0));
      xs[i].a[j] = x0 + step;
      const double fp = fd_value(p, xs);
      xs[i].a[j] = x0 - step;
      const double fm = fd_value(p, xs);
      const double gfd = (fp - fm) / (2.0 * step);
      const double ga = grads[i].a[j];
      const double denom = std::max({std::abs(ga), std::abs(gfd), floor});
      worst = std::max(worst, std::abs(ga - gfd) / denom);
    }
  }
  return worst;
}

}  // namespace oracle
