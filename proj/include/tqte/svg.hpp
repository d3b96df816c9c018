#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "tqte/common.hpp"

namespace tqte {

/// Minimal self-contained SVG line/band plot.  No external references; the
/// output is a single valid XML document with polyline/polygon/text
/// primitives only.
class SvgPlot {
 public:
  SvgPlot(std::string title, std::string xlabel, std::string ylabel)
      : title_(std::move(title)), xlabel_(std::move(xlabel)), ylabel_(std::move(ylabel)) {}

  void add_line(const std::vector<double>& x, const std::vector<double>& y,
                const std::string& color, const std::string& label,
                bool dashed = false) {
    if (x.size() != y.size()) throw invalid_input("SvgPlot: x/y length mismatch");
    series_.push_back({x, y, color, label, dashed});
    expand(x, y);
  }

  /// Shaded region between lo and hi (e.g. a confidence band).
  void add_band(const std::vector<double>& x, const std::vector<double>& lo,
                const std::vector<double>& hi, const std::string& color) {
    if (x.size() != lo.size() || x.size() != hi.size())
      throw invalid_input("SvgPlot: band length mismatch");
    bands_.push_back({x, lo, hi, color});
    expand(x, lo);
    expand(x, hi);
  }

  void write(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw invalid_input("cannot open " + path + " for writing");
    out << render();
    if (!out) throw invalid_input("write failure on " + path);
  }

  std::string render() const {
    const double W = 720, H = 480;
    const double L = 70, R = 30, T = 46, B = 56;  // margins
    double x0 = xmin_, x1 = xmax_, y0 = ymin_, y1 = ymax_;
    if (!(x1 > x0)) {
      x0 -= 0.5;
      x1 += 0.5;
    }
    if (!(y1 > y0)) {
      y0 -= 0.5;
      y1 += 0.5;
    }
    const double ypad = 0.05 * (y1 - y0);
    y0 -= ypad;
    y1 += ypad;
    auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
    auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

    std::ostringstream s;
    s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\""
      << H << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
    s << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    s << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" "
      << "font-family=\"sans-serif\" font-size=\"16\">" << escape(title_) << "</text>\n";

    for (const auto& b : bands_) {
      s << "<polygon fill=\"" << b.color << "\" fill-opacity=\"0.25\" stroke=\"none\" "
        << "points=\"";
      for (std::size_t i = 0; i < b.x.size(); ++i)
        s << num(px(b.x[i])) << ',' << num(py(b.lo[i])) << ' ';
      for (std::size_t i = b.x.size(); i-- > 0;)
        s << num(px(b.x[i])) << ',' << num(py(b.hi[i])) << ' ';
      s << "\"/>\n";
    }

    // Axes with 5 ticks per side.
    s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\""
      << H - B << "\" stroke=\"black\"/>\n";
    s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
      const double fx = x0 + (x1 - x0) * t / 4.0;
      const double fy = y0 + (y1 - y0) * t / 4.0;
      s << "<line x1=\"" << num(px(fx)) << "\" y1=\"" << H - B << "\" x2=\"" << num(px(fx))
        << "\" y2=\"" << H - B + 5 << "\" stroke=\"black\"/>\n";
      s << "<text x=\"" << num(px(fx)) << "\" y=\"" << H - B + 20
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">"
        << tick(fx) << "</text>\n";
      s << "<line x1=\"" << L - 5 << "\" y1=\"" << num(py(fy)) << "\" x2=\"" << L
        << "\" y2=\"" << num(py(fy)) << "\" stroke=\"black\"/>\n";
      s << "<text x=\"" << L - 9 << "\" y=\"" << num(py(fy) + 4)
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
        << tick(fy) << "</text>\n";
    }
    s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 14
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">"
      << escape(xlabel_) << "</text>\n";
    s << "<text x=\"18\" y=\"" << (T + H - B) / 2
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" "
      << "transform=\"rotate(-90 18 " << (T + H - B) / 2 << ")\">" << escape(ylabel_)
      << "</text>\n";

    for (const auto& l : series_) {
      s << "<polyline fill=\"none\" stroke=\"" << l.color << "\" stroke-width=\"1.8\"";
      if (l.dashed) s << " stroke-dasharray=\"6 4\"";
      s << " points=\"";
      for (std::size_t i = 0; i < l.x.size(); ++i)
        s << num(px(l.x[i])) << ',' << num(py(l.y[i])) << ' ';
      s << "\"/>\n";
    }

    // Legend in the top-right corner.
    double ly = T + 14;
    for (const auto& l : series_) {
      if (l.label.empty()) continue;
      s << "<line x1=\"" << W - R - 150 << "\" y1=\"" << ly << "\" x2=\"" << W - R - 120
        << "\" y2=\"" << ly << "\" stroke=\"" << l.color << "\" stroke-width=\"1.8\"";
      if (l.dashed) s << " stroke-dasharray=\"6 4\"";
      s << "/>\n";
      s << "<text x=\"" << W - R - 112 << "\" y=\"" << ly + 4
        << "\" font-family=\"sans-serif\" font-size=\"12\">" << escape(l.label)
        << "</text>\n";
      ly += 18;
    }
    s << "</svg>\n";
    return s.str();
  }

 private:
  struct Series {
    std::vector<double> x, y;
    std::string color, label;
    bool dashed = false;
  };
  struct Band {
    std::vector<double> x, lo, hi;
    std::string color;
  };

  void expand(const std::vector<double>& x, const std::vector<double>& y) {
    for (double v : x) {
      xmin_ = std::min(xmin_, v);
      xmax_ = std::max(xmax_, v);
    }
    for (double v : y) {
      ymin_ = std::min(ymin_, v);
      ymax_ = std::max(ymax_, v);
    }
  }
  static std::string escape(const std::string& t) {
    std::string out;
    for (char c : t) {
      if (c == '&')
        out += "&amp;";
      else if (c == '<')
        out += "&lt;";
      else if (c == '>')
        out += "&gt;";
      else
        out.push_back(c);
    }
    return out;
  }
  static std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
  }
  static std::string tick(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3g", v);
    return buf;
  }

  std::string title_, xlabel_, ylabel_;
  std::vector<Series> series_;
  std::vector<Band> bands_;
  double xmin_ = 1e300, xmax_ = -1e300, ymin_ = 1e300, ymax_ = -1e300;
};

}  // namespace tqte
