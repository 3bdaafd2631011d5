#pragma once

// Grid quadrature utilities for 1-dim density oracles. Everything here is
// computed from the density formula directly, independent of the library's
// closed forms, so tests can compare against it as ground truth.

#include <cmath>
#include <numbers>
#include <vector>

namespace oracle {

struct Grid1D {
  double lo = -20.0;
  double hi = 20.0;
  int n = 4001;

  double step() const { return (hi - lo) / (n - 1); }
  double x(int i) const { return lo + step() * i; }
};

inline double normal_pdf(double x, double mean, double var) {
  const double d = x - mean;
  return std::exp(-0.5 * d * d / var) / std::sqrt(2.0 * std::numbers::pi * var);
}

inline std::vector<double> normal_on_grid(const Grid1D& g, double mean, double var) {
  std::vector<double> out(g.n);
  for (int i = 0; i < g.n; ++i) out[i] = normal_pdf(g.x(i), mean, var);
  return out;
}

inline double trapz(const Grid1D& g, const std::vector<double>& f) {
  double acc = 0.5 * (f.front() + f.back());
  for (int i = 1; i + 1 < g.n; ++i) acc += f[i];
  return acc * g.step();
}

inline void normalize(const Grid1D& g, std::vector<double>& f) {
  const double z = trapz(g, f);
  for (double& v : f) v /= z;
}

inline double grid_mean(const Grid1D& g, const std::vector<double>& f) {
  std::vector<double> xf(g.n);
  for (int i = 0; i < g.n; ++i) xf[i] = g.x(i) * f[i];
  return trapz(g, xf) / trapz(g, f);
}

inline double grid_var(const Grid1D& g, const std::vector<double>& f) {
  const double m = grid_mean(g, f);
  std::vector<double> x2f(g.n);
  for (int i = 0; i < g.n; ++i) {
    const double d = g.x(i) - m;
    x2f[i] = d * d * f[i];
  }
  return trapz(g, x2f) / trapz(g, f);
}

}  // namespace oracle
