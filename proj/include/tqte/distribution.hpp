#pragma once

#include <functional>
#include <vector>

#include "tqte/dataset.hpp"

namespace tqte {

/// Equally spaced grid with J = ceil(4 n^0.6) points spanning [y_min, y_max].
inline ThresholdGrid growing_grid(std::size_t n, double y_min, double y_max) {
  if (!(y_min < y_max)) throw invalid_input("growing_grid: y_min must be < y_max");
  const std::size_t J = static_cast<std::size_t>(
      std::ceil(4.0 * std::pow(static_cast<double>(n), 0.6)));
  ThresholdGrid g;
  g.points.resize(std::max<std::size_t>(J, 2));
  const std::size_t m = g.points.size();
  for (std::size_t j = 0; j < m; ++j)
    g.points[j] = y_min + (y_max - y_min) * static_cast<double>(j) /
                              static_cast<double>(m - 1);
  return g;
}

inline ThresholdGrid fixed_grid(std::size_t J, double y_min, double y_max) {
  if (!(y_min < y_max)) throw invalid_input("fixed_grid: y_min must be < y_max");
  if (J < 2) throw invalid_input("fixed_grid: J must be >= 2");
  ThresholdGrid g;
  g.points.resize(J);
  for (std::size_t j = 0; j < J; ++j)
    g.points[j] = y_min + (y_max - y_min) * static_cast<double>(j) /
                              static_cast<double>(J - 1);
  return g;
}

/// Monotone CDF values on a grid with piecewise-linear interpolation and
/// constant extrapolation outside [y_1, y_J].
struct MonotoneCdf {
  ThresholdGrid grid;
  std::vector<double> values;  // nondecreasing, in [0,1]
  double d_iso = 0.0;          // sup-norm distance from the raw input

  void check() const {
    grid.check();
    if (values.size() != grid.size())
      throw invalid_input("MonotoneCdf: values/grid length mismatch");
    double prev = 0.0;
    for (double v : values) {
      if (v < prev - 1e-14 || v < -1e-14 || v > 1.0 + 1e-14)
        throw invalid_input("MonotoneCdf: values must be nondecreasing in [0,1]");
      prev = v;
    }
  }

  double operator()(double y) const {
    const auto& pts = grid.points;
    if (y <= pts.front()) return values.front();
    if (y >= pts.back()) return values.back();
    const auto it = std::upper_bound(pts.begin(), pts.end(), y);
    const std::size_t j = static_cast<std::size_t>(it - pts.begin());
    const double t = (y - pts[j - 1]) / (pts[j] - pts[j - 1]);
    return values[j - 1] + t * (values[j] - values[j - 1]);
  }
};

/// Exact Euclidean projection onto {0 <= f_1 <= ... <= f_J <= 1}: pool
/// adjacent violators, then clamp (clamping a monotone vector stays monotone
/// and yields the projection onto the intersected set).  O(J).
inline std::vector<double> pava(const std::vector<double>& raw) {
  const std::size_t J = raw.size();
  std::vector<double> level(J);  // block means
  std::vector<std::size_t> count(J);
  std::size_t blocks = 0;
  for (std::size_t j = 0; j < J; ++j) {
    level[blocks] = raw[j];
    count[blocks] = 1;
    ++blocks;
    while (blocks > 1 && level[blocks - 2] >= level[blocks - 1]) {
      const double total = level[blocks - 2] * static_cast<double>(count[blocks - 2]) +
                           level[blocks - 1] * static_cast<double>(count[blocks - 1]);
      count[blocks - 2] += count[blocks - 1];
      level[blocks - 2] = total / static_cast<double>(count[blocks - 2]);
      --blocks;
    }
  }
  std::vector<double> out;
  out.reserve(J);
  for (std::size_t b = 0; b < blocks; ++b)
    out.insert(out.end(), count[b], level[b]);
  return out;
}

inline double iso_distance(const std::vector<double>& raw,
                           const std::vector<double>& projected) {
  if (raw.size() != projected.size())
    throw invalid_input("iso_distance: length mismatch");
  double d = 0.0;
  for (std::size_t j = 0; j < raw.size(); ++j)
    d = std::max(d, std::abs(raw[j] - projected[j]));
  return d;
}

inline MonotoneCdf pava_box(const std::vector<double>& raw, const ThresholdGrid& grid) {
  if (raw.size() != grid.size()) throw invalid_input("pava_box: raw/grid length mismatch");
  for (double v : raw)
    if (!std::isfinite(v)) throw invalid_input("pava_box: non-finite input");
  MonotoneCdf f;
  f.grid = grid;
  f.values = pava(raw);
  for (double& v : f.values) v = clamp(v, 0.0, 1.0);
  f.d_iso = iso_distance(raw, f.values);
  return f;
}

struct QuantileResult {
  double value = 0.0;
  bool saturated = false;  // tau exceeded F(y_J); value pinned at y_J
};

/// Generalized inverse of the piecewise-linear interpolant:
/// smallest y in [y_1, y_J] with F(y) >= tau.
inline QuantileResult quantile(const MonotoneCdf& F, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw invalid_input("quantile: tau outside (0,1)");
  const auto& pts = F.grid.points;
  const auto& v = F.values;
  if (v.front() >= tau) return {pts.front(), false};
  if (v.back() < tau) return {pts.back(), true};
  // First grid index with value >= tau; invert linearly on the segment below.
  const auto it = std::lower_bound(v.begin(), v.end(), tau);
  const std::size_t j = static_cast<std::size_t>(it - v.begin());
  const double lo = v[j - 1], hi = v[j];
  const double t = (tau - lo) / (hi - lo);  // hi > lo since lo < tau <= hi
  return {pts[j - 1] + t * (pts[j] - pts[j - 1]), false};
}

struct DensityResult {
  double value = 0.0;
  bool floored = false;
};

inline double density_floor(const MonotoneCdf& F) {
  const double range = F.grid.points.back() - F.grid.points.front();
  return std::max(1e-3, 0.05 / range);
}

/// Central-difference slope of the interpolant at q, floored away from zero so
/// downstream variance scaling stays finite; floored results carry a flag.
inline DensityResult density_at(const MonotoneCdf& F, double q, double h) {
  if (!(h > 0.0)) throw invalid_input("density_at: bandwidth must be > 0");
  const double slope = (F(q + h) - F(q - h)) / (2.0 * h);
  const double floor = density_floor(F);
  if (slope < floor) return {floor, true};
  return {slope, false};
}

/// Default bandwidth: 0.9 * IQR(F) * n^{-1/5}, with IQR from the same CDF.
inline double default_density_bandwidth(const MonotoneCdf& F, std::size_t n) {
  const double q25 = quantile(F, 0.25).value;
  const double q75 = quantile(F, 0.75).value;
  double iqr = q75 - q25;
  if (!(iqr > 0))
    iqr = (F.grid.points.back() - F.grid.points.front()) / 4.0;
  return 0.9 * iqr * std::pow(static_cast<double>(n), -0.2);
}

/// Deterministic inverse-CDF discretization error: restrict the true CDFs to
/// the grid, invert with the same interpolation rules, and compare the grid
/// QTE to the exact QTE over the tau grid.
inline double oracle_grid_error(const std::function<double(double)>& true_cdf1,
                                const std::function<double(double)>& true_cdf0,
                                const ThresholdGrid& grid, const TauGrid& taus) {
  grid.check();
  taus.check();
  auto restricted = [&](const std::function<double(double)>& F) {
    MonotoneCdf out;
    out.grid = grid;
    out.values.reserve(grid.size());
    for (double y : grid.points) out.values.push_back(clamp(F(y), 0.0, 1.0));
    return out;
  };
  const MonotoneCdf F1 = restricted(true_cdf1);
  const MonotoneCdf F0 = restricted(true_cdf0);
  auto exact_quantile = [&](const std::function<double(double)>& F, double tau) {
    double lo = grid.points.front(), hi = grid.points.back();
    // Bisection on the exact CDF; quantile assumed interior to the grid span.
    for (int i = 0; i < 200 && hi - lo > 1e-12 * std::max(1.0, std::abs(hi)); ++i) {
      const double mid = 0.5 * (lo + hi);
      (F(mid) >= tau ? hi : lo) = mid;
    }
    return 0.5 * (lo + hi);
  };
  double err = 0.0;
  for (double tau : taus.levels) {
    const double dg = quantile(F1, tau).value - quantile(F0, tau).value;
    const double dx = exact_quantile(true_cdf1, tau) - exact_quantile(true_cdf0, tau);
    err = std::max(err, std::abs(dg - dx));
  }
  return err;
}

/// Quantile curve over a tau grid for one arm pair; delta = q1 - q0.
struct QuantileCurve {
  TauGrid taus;
  std::vector<double> q;  // nondecreasing in tau
  int arm = 0;
  std::vector<bool> saturated;
};

inline QuantileCurve quantile_curve(const MonotoneCdf& F, const TauGrid& taus, int arm) {
  taus.check();
  QuantileCurve c;
  c.taus = taus;
  c.arm = arm;
  for (double tau : taus.levels) {
    const auto qr = quantile(F, tau);
    c.q.push_back(qr.value);
    c.saturated.push_back(qr.saturated);
  }
  return c;
}

}  // namespace tqte
