#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "tqte/config.hpp"
#include "tqte/svg.hpp"

namespace tqte {

/// Per-(method, tau) row of the analysis table.
struct AnalysisRow {
  std::string method;
  double tau = 0;
  double delta = 0;
  double se = std::numeric_limits<double>::quiet_NaN();
  double ci_lo = std::numeric_limits<double>::quiet_NaN();
  double ci_hi = std::numeric_limits<double>::quiet_NaN();
  double ci_len_ratio_vs_sa = std::numeric_limits<double>::quiet_NaN();
};

struct BalanceRow {
  std::string covariate;
  double smd_unweighted = 0;  // target vs source
  double smd_weighted = 0;    // target vs omega-hat-weighted source
};

struct AnalysisResult {
  std::vector<AnalysisRow> rows;
  // Diagnostics.
  std::size_t n = 0, n0 = 0, n1 = 0;
  double ess = 0, ess_fraction = 0;
  double validation_rate = 0;
  // SA curve over band taus (when requested).
  QteInference sa_band_qte;
  SimultaneousBand sa_band;
  bool has_band = false;
  std::vector<BalanceRow> balance;
};

/// Run the estimation roster on a user dataset and assemble the report.
inline AnalysisResult analyze(const TwoSampleDataset& data, const AnalysisConfig& cfg) {
  AnalysisConfig::check(cfg);
  data.check();
  const FoldAssignment folds = make_folds(data, cfg.K, cfg.seed ^ 0x666f6c64ULL);

  // Threshold grid spanning the validated outcomes with a 2% margin.
  double y_lo = 1e300, y_hi = -1e300;
  std::size_t n_source = 0, n_validated = 0;
  for (const auto& o : data.observations) {
    if (o.r == 1) {
      ++n_source;
      if (*o.m == 1) {
        ++n_validated;
        y_lo = std::min(y_lo, *o.y);
        y_hi = std::max(y_hi, *o.y);
      }
    }
  }
  if (n_validated == 0) throw estimation_error("analyze: no validated outcomes");
  if (!(y_lo < y_hi)) throw estimation_error("analyze: validated outcomes are constant");
  const double margin = 0.02 * (y_hi - y_lo);
  const GridChoice gc = GridChoice::parse(cfg.grid);
  const ThresholdGrid grid = gc.build(data.n(), y_lo - margin, y_hi + margin);

  bool need_nos = false;
  for (const auto& m : cfg.roster) need_nos |= (m == "NoS");
  NuisanceConfig nc = cfg.learners;
  nc.fit_nos = need_nos;
  nc.seed = cfg.seed ^ 0x6c65726eULL;
  const NuisanceSet set = fit_nuisances(data, folds, grid, nc);

  AnalysisResult out;
  out.n = data.n();
  out.n1 = n_source;
  out.n0 = data.n() - n_source;
  out.validation_rate = static_cast<double>(n_validated) / static_cast<double>(n_source);
  {
    const auto ev = evaluate_all(data, folds, set, 1);
    std::vector<double> w;
    for (std::size_t i = 0; i < data.n(); ++i)
      if (data.observations[i].r == 1)
        w.push_back(ev.omega_hat(static_cast<Eigen::Index>(i)));
    const Vec wv = Eigen::Map<const Vec>(w.data(), static_cast<Eigen::Index>(w.size()));
    out.ess = ess_omega(wv);
    out.ess_fraction = out.ess / static_cast<double>(n_source);

    if (cfg.balance) {
      // Standardized mean differences per covariate, before/after weighting.
      for (std::size_t j = 0; j < data.p; ++j) {
        double mt = 0, ms = 0, msw = 0, wsum = 0;
        double vt = 0, vs = 0;
        std::size_t nt = 0, ns = 0;
        for (std::size_t i = 0; i < data.n(); ++i) {
          const double x = data.observations[i].x[j];
          if (data.observations[i].r == 0) {
            mt += x;
            ++nt;
          } else {
            ms += x;
            ++ns;
          }
        }
        mt /= static_cast<double>(nt);
        ms /= static_cast<double>(ns);
        std::size_t si = 0;
        for (std::size_t i = 0; i < data.n(); ++i) {
          const double x = data.observations[i].x[j];
          if (data.observations[i].r == 0) {
            vt += (x - mt) * (x - mt);
          } else {
            vs += (x - ms) * (x - ms);
            msw += w[si] * x;
            wsum += w[si];
            ++si;
          }
        }
        vt /= static_cast<double>(nt);
        vs /= static_cast<double>(ns);
        msw /= wsum;
        const double sd = std::sqrt(0.5 * (vt + vs));
        BalanceRow b;
        b.covariate = "x" + std::to_string(j + 1);
        b.smd_unweighted = sd > 0 ? (mt - ms) / sd : 0.0;
        b.smd_weighted = sd > 0 ? (mt - msw) / sd : 0.0;
        out.balance.push_back(b);
      }
    }
  }

  TauGrid taus;
  taus.levels = cfg.taus;
  std::map<double, double> sa_ci_len;

  for (const auto& method : cfg.roster) {
    auto pair = [&](auto&& est) {
      CdfEstimate c1 = est(1), c0 = est(0);
      std::vector<double> r1(c1.raw.data(), c1.raw.data() + c1.raw.size());
      std::vector<double> r0(c0.raw.data(), c0.raw.data() + c0.raw.size());
      return std::tuple<CdfEstimate, CdfEstimate, MonotoneCdf, MonotoneCdf>(
          std::move(c1), std::move(c0), pava_box(r1, grid), pava_box(r0, grid));
    };
    std::tuple<CdfEstimate, CdfEstimate, MonotoneCdf, MonotoneCdf> t;
    if (method == "SA")
      t = pair([&](int a) { return estimate_sa(data, folds, set, a); });
    else if (method == "NoS")
      t = pair([&](int a) { return estimate_nos(data, folds, set, a); });
    else if (method == "IPW")
      t = pair([&](int a) { return estimate_ipw(data, folds, set, a); });
    else if (method == "Plugin")
      t = pair([&](int a) { return estimate_plugin(data, folds, set, a); });
    else
      t = pair([&](int a) { return estimate_source(data, folds, set, a); });
    const auto& [c1, c0, F1, F0] = t;

    if (c1.has_influence()) {
      const QteInference qi = qte_pointwise(c1, c0, F1, F0, taus, cfg.alpha);
      for (std::size_t l = 0; l < taus.levels.size(); ++l) {
        AnalysisRow r;
        r.method = method;
        r.tau = taus.levels[l];
        r.delta = qi.delta[l];
        r.se = qi.se[l];
        r.ci_lo = qi.ci_lo[l];
        r.ci_hi = qi.ci_hi[l];
        if (method == "SA") sa_ci_len[r.tau] = r.ci_hi - r.ci_lo;
        out.rows.push_back(r);
      }
      if (method == "SA" && !cfg.band_taus.empty()) {
        TauGrid bt;
        bt.levels = cfg.band_taus;
        out.sa_band_qte = qte_pointwise(c1, c0, F1, F0, bt, cfg.alpha);
        out.sa_band =
            multiplier_band(out.sa_band_qte, cfg.B, cfg.alpha, cfg.seed ^ 0x62616e64ULL);
        out.has_band = true;
      }
    } else {
      for (double tau : taus.levels) {
        AnalysisRow r;
        r.method = method;
        r.tau = tau;
        r.delta = quantile(F1, tau).value - quantile(F0, tau).value;
        out.rows.push_back(r);
      }
    }
  }
  for (auto& r : out.rows) {
    const auto it = sa_ci_len.find(r.tau);
    if (it != sa_ci_len.end() && !std::isnan(r.se) && it->second > 0)
      r.ci_len_ratio_vs_sa = (r.ci_hi - r.ci_lo) / it->second;
  }
  return out;
}

inline void write_analysis(const AnalysisResult& res, const AnalysisConfig& cfg) {
  std::filesystem::create_directories(cfg.out_dir);
  auto val = [](double v) { return std::isnan(v) ? std::string() : fmt17(v); };
  {
    std::ofstream out(cfg.out_dir + "/analysis_table.csv", std::ios::binary);
    out << "method,tau,delta_hat,se,ci_lo,ci_hi,ci_len_ratio_vs_sa\n";
    for (const auto& r : res.rows)
      out << r.method << ',' << fmt17(r.tau) << ',' << fmt17(r.delta) << ',' << val(r.se)
          << ',' << val(r.ci_lo) << ',' << val(r.ci_hi) << ','
          << val(r.ci_len_ratio_vs_sa) << "\n";
  }
  {
    std::ofstream out(cfg.out_dir + "/diagnostics.csv", std::ios::binary);
    out << "n,n_target,n_source,ess_omega,ess_fraction,validation_rate\n";
    out << res.n << ',' << res.n0 << ',' << res.n1 << ',' << fmt17(res.ess) << ','
        << fmt17(res.ess_fraction) << ',' << fmt17(res.validation_rate) << "\n";
  }
  if (res.has_band)
    write_band_csv(res.sa_band_qte, res.sa_band, cfg.out_dir + "/qte_curve.csv");
  if (!res.balance.empty()) {
    std::ofstream out(cfg.out_dir + "/balance.csv", std::ios::binary);
    out << "covariate,smd_unweighted,smd_weighted\n";
    for (const auto& b : res.balance)
      out << b.covariate << ',' << fmt17(b.smd_unweighted) << ',' << fmt17(b.smd_weighted)
          << "\n";
  }
  if (cfg.svg && res.has_band) {
    SvgPlot plot("Transported QTE with pointwise and simultaneous bands", "tau",
                 "QTE");
    const auto& q = res.sa_band_qte;
    plot.add_band(q.taus.levels, res.sa_band.lo, res.sa_band.hi, "#c6dbef");
    plot.add_band(q.taus.levels, q.ci_lo, q.ci_hi, "#9ecae1");
    plot.add_line(q.taus.levels, q.delta, "#08519c", "SA estimate");
    std::vector<double> zero(q.taus.levels.size(), 0.0);
    plot.add_line(q.taus.levels, zero, "#888888", "", true);
    plot.write(cfg.out_dir + "/qte_curve.svg");
  }
}

}  // namespace tqte
