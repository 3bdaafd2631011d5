#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "mdmm/common.hpp"

/**
 * Minimal static-SVG canvas. Holds a data-space bounding box, maps it into a
 * fixed pixel frame (y flipped so larger values sit higher), and appends
 * shape elements as text. Every curve becomes exactly one <path> element;
 * markers are circles/rects, so counting paths counts curves.
 */
namespace mdmm::svg {

struct Bounds {
  double xmin = 0.0;
  double xmax = 0.0;
  double ymin = 0.0;
  double ymax = 0.0;
  bool seen = false;

  void expand(double x, double y) {
    if (!std::isfinite(x) || !std::isfinite(y)) return;
    if (!seen) {
      xmin = xmax = x;
      ymin = ymax = y;
      seen = true;
      return;
    }
    xmin = std::min(xmin, x);
    xmax = std::max(xmax, x);
    ymin = std::min(ymin, y);
    ymax = std::max(ymax, y);
  }

  /// Widen by a fraction of the extent; degenerate axes get a unit of slack.
  void pad(double frac) {
    if (!seen) {
      xmin = ymin = -1.0;
      xmax = ymax = 1.0;
      seen = true;
      return;
    }
    const double dx = xmax - xmin;
    const double dy = ymax - ymin;
    const double px = dx > 0.0 ? dx * frac : 1.0;
    const double py = dy > 0.0 ? dy * frac : 1.0;
    xmin -= px;
    xmax += px;
    ymin -= py;
    ymax += py;
  }
};

namespace detail {
inline std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}
}  // namespace detail

class Canvas {
 public:
  Canvas(int width, int height, Bounds b, double margin = 42.0)
      : w_(width), h_(height), margin_(margin), b_(b) {
    require(width > 0 && height > 0, "svg: canvas size must be positive");
    require(b_.seen && b_.xmax > b_.xmin && b_.ymax > b_.ymin, "svg: bounds must span a nonempty box");
  }

  double px(double x) const { return margin_ + (x - b_.xmin) / (b_.xmax - b_.xmin) * (w_ - 2.0 * margin_); }
  double py(double y) const { return h_ - margin_ - (y - b_.ymin) / (b_.ymax - b_.ymin) * (h_ - 2.0 * margin_); }

  /// One polyline through the finite points, as a single path element.
  void path(const std::vector<double>& xs, const std::vector<double>& ys, const std::string& stroke,
            double width, const std::string& dash = "") {
    require(xs.size() == ys.size(), "svg: path coordinate lists must match");
    std::string d;
    bool open = false;
    for (size_t i = 0; i < xs.size(); ++i) {
      if (!std::isfinite(xs[i]) || !std::isfinite(ys[i])) {
        open = false;  // break the stroke around missing samples
        continue;
      }
      d += open ? " L " : " M ";
      d += detail::num(px(xs[i])) + " " + detail::num(py(ys[i]));
      open = true;
    }
    body_ += "  <path d=\"" + d + "\" fill=\"none\" stroke=\"" + stroke + "\" stroke-width=\"" +
             detail::num(width) + "\"";
    if (!dash.empty()) body_ += " stroke-dasharray=\"" + dash + "\"";
    body_ += "/>\n";
  }

  void circle(double x, double y, double r, const std::string& fill, double opacity = 1.0) {
    if (!std::isfinite(x) || !std::isfinite(y)) return;
    body_ += "  <circle cx=\"" + detail::num(px(x)) + "\" cy=\"" + detail::num(py(y)) + "\" r=\"" +
             detail::num(r) + "\" fill=\"" + fill + "\" fill-opacity=\"" + detail::num(opacity) + "\"/>\n";
  }

  /// Square marker centered on a data point, in pixel units.
  void square(double x, double y, double half, const std::string& fill, double opacity) {
    if (!std::isfinite(x) || !std::isfinite(y)) return;
    body_ += "  <rect x=\"" + detail::num(px(x) - half) + "\" y=\"" + detail::num(py(y) - half) +
             "\" width=\"" + detail::num(2.0 * half) + "\" height=\"" + detail::num(2.0 * half) +
             "\" fill=\"" + fill + "\" fill-opacity=\"" + detail::num(opacity) + "\"/>\n";
  }

  /// Vertical segment between two data-space y values (error bars).
  void vseg(double x, double y0, double y1, const std::string& stroke, double width) {
    if (!std::isfinite(x) || !std::isfinite(y0) || !std::isfinite(y1)) return;
    body_ += "  <line x1=\"" + detail::num(px(x)) + "\" y1=\"" + detail::num(py(y0)) + "\" x2=\"" +
             detail::num(px(x)) + "\" y2=\"" + detail::num(py(y1)) + "\" stroke=\"" + stroke +
             "\" stroke-width=\"" + detail::num(width) + "\"/>\n";
  }

  void label(double xpix, double ypix, const std::string& text, int size = 13) {
    body_ += "  <text x=\"" + detail::num(xpix) + "\" y=\"" + detail::num(ypix) + "\" font-family=\"sans-serif\" font-size=\"" +
             std::to_string(size) + "\" fill=\"#444\">" + text + "</text>\n";
  }

  std::string str() const {
    std::string out = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w_) + "\" height=\"" +
           std::to_string(h_) + "\" viewBox=\"0 0 " + std::to_string(w_) + " " + std::to_string(h_) + "\">\n";
    out += "  <rect x=\"0\" y=\"0\" width=\"" + std::to_string(w_) + "\" height=\"" + std::to_string(h_) +
           "\" fill=\"white\"/>\n";
    out += body_;
    out += "</svg>\n";
    return out;
  }

 private:
  int w_;
  int h_;
  double margin_;
  Bounds b_;
  std::string body_;
};

}  // namespace mdmm::svg
