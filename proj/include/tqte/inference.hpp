#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tqte/distribution.hpp"
#include "tqte/onestep.hpp"

namespace tqte {

/// Pointwise QTE inference over a tau grid.  The per-observation influence
/// values combine the two arms' CDF influence columns at the grid points
/// nearest the estimated quantiles, scaled by the estimated densities:
///   phi_delta = -phi_1(q1)/f1 + phi_0(q0)/f0.
struct QteInference {
  TauGrid taus;
  std::vector<double> q1, q0, delta;
  std::vector<double> se, ci_lo, ci_hi;
  std::vector<double> f1, f0;
  std::vector<bool> floor1, floor0;      // density floor triggered
  std::vector<bool> saturated;           // either arm's quantile saturated
  Mat influence;                         // n x L
  double alpha = 0.05;
  std::size_t n = 0;
};

inline QteInference qte_pointwise(const CdfEstimate& cdf1, const CdfEstimate& cdf0,
                                  const MonotoneCdf& F1, const MonotoneCdf& F0,
                                  const TauGrid& taus, double alpha,
                                  double bandwidth1 = 0.0, double bandwidth0 = 0.0) {
  taus.check();
  if (!(alpha > 0 && alpha < 1)) throw invalid_input("qte_pointwise: alpha outside (0,1)");
  if (!cdf1.has_influence() || !cdf0.has_influence())
    throw invalid_input("qte_pointwise: method without influence values (Plugin/Source)");
  if (cdf1.influence.rows() != cdf0.influence.rows())
    throw invalid_input("qte_pointwise: arms estimated on different samples");
  const std::size_t n = static_cast<std::size_t>(cdf1.influence.rows());
  const std::size_t L = taus.levels.size();
  const double h1 = bandwidth1 > 0 ? bandwidth1 : default_density_bandwidth(F1, n);
  const double h0 = bandwidth0 > 0 ? bandwidth0 : default_density_bandwidth(F0, n);
  const double z = norm_quantile(1.0 - alpha / 2.0);

  QteInference out;
  out.taus = taus;
  out.alpha = alpha;
  out.n = n;
  out.influence.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(L));
  for (std::size_t l = 0; l < L; ++l) {
    const double tau = taus.levels[l];
    const auto qr1 = quantile(F1, tau);
    const auto qr0 = quantile(F0, tau);
    const auto d1 = density_at(F1, qr1.value, h1);
    const auto d0 = density_at(F0, qr0.value, h0);
    out.q1.push_back(qr1.value);
    out.q0.push_back(qr0.value);
    out.delta.push_back(qr1.value - qr0.value);
    out.f1.push_back(d1.value);
    out.f0.push_back(d0.value);
    out.floor1.push_back(d1.floored);
    out.floor0.push_back(d0.floored);
    out.saturated.push_back(qr1.saturated || qr0.saturated);

    const Eigen::Index j1 = static_cast<Eigen::Index>(cdf1.grid.nearest_index(qr1.value));
    const Eigen::Index j0 = static_cast<Eigen::Index>(cdf0.grid.nearest_index(qr0.value));
    out.influence.col(static_cast<Eigen::Index>(l)) =
        -cdf1.influence.col(j1) / d1.value + cdf0.influence.col(j0) / d0.value;
    const double second_moment =
        out.influence.col(static_cast<Eigen::Index>(l)).squaredNorm() /
        static_cast<double>(n);
    const double se = std::sqrt(second_moment / static_cast<double>(n));
    out.se.push_back(se);
    out.ci_lo.push_back(out.delta.back() - z * se);
    out.ci_hi.push_back(out.delta.back() + z * se);
  }
  return out;
}

enum class MultiplierKind { gaussian, rademacher, mammen };

/// Simultaneous band from the studentized multiplier-bootstrap sup statistic.
struct SimultaneousBand {
  double alpha = 0.05;
  double c_star = 0.0;
  std::vector<double> lo, hi;        // delta_hat -/+ c_star * se
  std::size_t B = 0;
  MultiplierKind kind = MultiplierKind::gaussian;
  std::vector<bool> excluded;        // tau points dropped for degenerate SE
  std::string warning;
};

/// For b = 1..B draw i.i.d. mean-zero unit-variance multipliers, form
///   Z*_b(tau) = n^{-1/2} sum_i xi_i {phi_i(tau) - Pn phi(tau)},
/// and take c* as the empirical (1-alpha) quantile of
///   sup_tau |Z*_b(tau)| / sqrt(Pn phi(tau)^2).
/// Deterministic given the seed; xi_gen overrides the multiplier draw (test
/// hook).
inline SimultaneousBand multiplier_band(const QteInference& qte, std::size_t B,
                                        double alpha, std::uint64_t seed,
                                        MultiplierKind kind = MultiplierKind::gaussian,
                                        const std::function<double(Rng&)>* xi_gen = nullptr) {
  if (B < 100) throw invalid_input("multiplier_band: B must be >= 100");
  if (!(alpha > 0 && alpha < 1)) throw invalid_input("multiplier_band: alpha outside (0,1)");
  const std::size_t n = qte.n;
  const std::size_t L = qte.taus.levels.size();

  SimultaneousBand band;
  band.alpha = alpha;
  band.B = B;
  band.kind = kind;
  band.excluded.assign(L, false);
  std::vector<std::size_t> active;
  Vec scale(static_cast<Eigen::Index>(L));  // sqrt(Pn phi^2) per tau
  for (std::size_t l = 0; l < L; ++l) {
    const double second_moment =
        qte.influence.col(static_cast<Eigen::Index>(l)).squaredNorm() /
        static_cast<double>(n);
    scale(static_cast<Eigen::Index>(l)) = std::sqrt(second_moment);
    if (second_moment > 0)
      active.push_back(l);
    else
      band.excluded[l] = true;
  }
  if (active.size() < L)
    band.warning = "degenerate influence variance at " +
                   std::to_string(L - active.size()) +
                   " tau point(s); excluded from the sup";
  if (active.empty())
    throw estimation_error("multiplier_band: influence variance degenerate at every tau");

  // Centered influence columns (phi - Pn phi), restricted to active taus.
  Mat centered(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(active.size()));
  for (std::size_t c = 0; c < active.size(); ++c) {
    const Eigen::Index l = static_cast<Eigen::Index>(active[c]);
    centered.col(static_cast<Eigen::Index>(c)) =
        (qte.influence.col(l).array() - qte.influence.col(l).mean()) / scale(l);
  }

  // Mammen two-point multiplier: mean 0, variance 1, third moment 1.
  const double golden = (std::sqrt(5.0) + 1.0) / 2.0;
  const double p_mammen = golden / std::sqrt(5.0);

  std::vector<double> sups;
  sups.reserve(B);
  Vec xi(static_cast<Eigen::Index>(n));
  for (std::size_t b = 0; b < B; ++b) {
    Rng rng = Rng::derive(seed, {0x6d756c74ULL, b});
    for (std::size_t i = 0; i < n; ++i) {
      double v;
      if (xi_gen) {
        v = (*xi_gen)(rng);
      } else {
        switch (kind) {
          case MultiplierKind::gaussian: v = rng.normal(); break;
          case MultiplierKind::rademacher: v = rng.uniform() < 0.5 ? -1.0 : 1.0; break;
          case MultiplierKind::mammen:
            v = rng.uniform() < p_mammen ? -(golden - 1.0) : golden;
            break;
          default: v = rng.normal();
        }
      }
      xi(static_cast<Eigen::Index>(i)) = v;
    }
    const Vec z = centered.transpose() * xi / std::sqrt(static_cast<double>(n));
    sups.push_back(z.lpNorm<Eigen::Infinity>());
  }
  std::sort(sups.begin(), sups.end());
  const std::size_t rank = static_cast<std::size_t>(
      std::ceil((1.0 - alpha) * static_cast<double>(B)));
  band.c_star = sups[std::min(rank == 0 ? 0 : rank - 1, B - 1)];

  for (std::size_t l = 0; l < L; ++l) {
    band.lo.push_back(qte.delta[l] - band.c_star * qte.se[l]);
    band.hi.push_back(qte.delta[l] + band.c_star * qte.se[l]);
  }
  return band;
}

/// Effective source sample size of the transport weights:
///   (sum w)^2 / sum w^2, in [1, n1], equal to n1 iff all weights equal.
inline double ess_omega(const Vec& weights) {
  if (weights.size() == 0) throw invalid_input("ess_omega: empty weights");
  double sum = 0, sumsq = 0;
  for (Eigen::Index i = 0; i < weights.size(); ++i) {
    if (weights(i) < 0) throw invalid_input("ess_omega: negative weight");
    sum += weights(i);
    sumsq += weights(i) * weights(i);
  }
  if (sumsq == 0) throw invalid_input("ess_omega: all weights zero");
  return sum * sum / sumsq;
}

/// Closed-form variance reduction from observing surrogates, verified against
/// the enumerated variance difference inside the law.
inline double efficiency_gain(const DiscreteLaw& law, int arm, double y) {
  return law.efficiency_gain(arm, y);
}

inline double quantile_gain(const DiscreteLaw& law, double tau) {
  return law.quantile_gain(tau);
}

/// Band/pointwise results in long CSV form.
inline void write_band_csv(const QteInference& qte, const SimultaneousBand& band,
                           const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw invalid_input("cannot open " + path + " for writing");
  out << "tau,delta_hat,se,lo_pointwise,hi_pointwise,lo_simul,hi_simul,density_floor_flag\n";
  for (std::size_t l = 0; l < qte.taus.levels.size(); ++l)
    out << fmt17(qte.taus.levels[l]) << ',' << fmt17(qte.delta[l]) << ','
        << fmt17(qte.se[l]) << ',' << fmt17(qte.ci_lo[l]) << ',' << fmt17(qte.ci_hi[l])
        << ',' << fmt17(band.lo[l]) << ',' << fmt17(band.hi[l]) << ','
        << ((qte.floor1[l] || qte.floor0[l]) ? 1 : 0) << "\n";
}

}  // namespace tqte
