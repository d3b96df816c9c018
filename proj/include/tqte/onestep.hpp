#pragma once

#include <fstream>
#include <functional>
#include <string>

#include "tqte/discrete_law.hpp"
#include "tqte/pipeline.hpp"

namespace tqte {

enum class Method { SA, NoS, IPW, Plugin, Source, Oracle, FullOracle };

inline std::string method_name(Method m) {
  switch (m) {
    case Method::SA: return "SA";
    case Method::NoS: return "NoS";
    case Method::IPW: return "IPW";
    case Method::Plugin: return "Plugin";
    case Method::Source: return "Source";
    case Method::Oracle: return "Oracle";
    case Method::FullOracle: return "FullOracle";
  }
  return "?";
}

/// Raw CDF-at-threshold estimates for one arm.  Values are neither clipped to
/// [0,1] nor monotone here; projection happens downstream.  The influence
/// matrix is empty for point-estimation baselines (Plugin, Source).
struct CdfEstimate {
  Method method = Method::SA;
  int arm = 0;
  ThresholdGrid grid;
  Vec raw;        // J
  Mat influence;  // n x J

  bool has_influence() const { return influence.size() != 0; }

  void to_csv(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw invalid_input("cannot open " + path + " for writing");
    out << "method,arm,y,psi_hat\n";
    for (std::size_t j = 0; j < grid.size(); ++j)
      out << method_name(method) << ',' << arm << ',' << fmt17(grid.points[j]) << ','
          << fmt17(raw(static_cast<Eigen::Index>(j))) << "\n";
  }
};

namespace detail {

struct SampleLayout {
  std::size_t n = 0, n0 = 0, n1 = 0;
  double pi0 = 0, pi1 = 0;
  std::vector<char> is_target, in_arm;  // in_arm: source unit with A = arm
  std::vector<char> validated;          // in_arm and M = 1
};

inline SampleLayout layout(const TwoSampleDataset& data, int arm) {
  SampleLayout L;
  L.n = data.n();
  L.is_target.assign(L.n, 0);
  L.in_arm.assign(L.n, 0);
  L.validated.assign(L.n, 0);
  std::size_t in_arm_count = 0;
  for (std::size_t i = 0; i < L.n; ++i) {
    const auto& o = data.observations[i];
    if (o.r == 0) {
      L.is_target[i] = 1;
      ++L.n0;
    } else {
      ++L.n1;
      if (*o.a == arm) {
        L.in_arm[i] = 1;
        ++in_arm_count;
        if (*o.m == 1) L.validated[i] = 1;
      }
    }
  }
  if (L.n0 == 0) throw estimation_error("estimate: no target units");
  if (in_arm_count == 0)
    throw estimation_error("estimate: no source units in arm " + std::to_string(arm));
  L.pi0 = static_cast<double>(L.n0) / static_cast<double>(L.n);
  L.pi1 = static_cast<double>(L.n1) / static_cast<double>(L.n);
  return L;
}

/// Indicator matrix Z_ij = 1(Y_i <= y_j), filled only on validated rows.
inline Mat indicator_matrix(const TwoSampleDataset& data, const ThresholdGrid& grid,
                            const SampleLayout& L) {
  Mat Z = Mat::Zero(static_cast<Eigen::Index>(L.n), static_cast<Eigen::Index>(grid.size()));
  for (std::size_t i = 0; i < L.n; ++i) {
    if (!L.validated[i]) continue;
    const double y = *data.observations[i].y;
    for (std::size_t j = 0; j < grid.size(); ++j)
      Z(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          (y <= grid.points[j]) ? 1.0 : 0.0;
  }
  return Z;
}

}  // namespace detail

/// Cross-fitted one-step estimator:
///   psi_hat(y) = Pn0[g] + Pn1[omega 1(A=a)/e (m - g)]
///              + Pn1[omega 1(A=a) M/(e rho) (1(Y<=y) - m)],
/// with Pnr the within-sample means (ratio-of-sums).  Influence values use the
/// empirical sample fractions so columns center exactly.
inline CdfEstimate estimate_sa(const TwoSampleDataset& data, const FoldAssignment& folds,
                               const NuisanceSet& set, int arm,
                               Method tag = Method::SA) {
  const auto L = detail::layout(data, arm);
  const auto ev = evaluate_all(data, folds, set, arm);
  const std::size_t J = set.grid.size();
  const Mat Z = detail::indicator_matrix(data, set.grid, L);

  Vec w2 = Vec::Zero(static_cast<Eigen::Index>(L.n));
  Vec w3 = Vec::Zero(static_cast<Eigen::Index>(L.n));
  for (std::size_t i = 0; i < L.n; ++i) {
    if (!L.in_arm[i]) continue;
    const Eigen::Index ii = static_cast<Eigen::Index>(i);
    w2(ii) = ev.omega_hat(ii) / ev.e_hat(ii);
    if (L.validated[i]) w3(ii) = w2(ii) / ev.rho_hat(ii);
  }

  // Source correction rows: w2 (m - g) + w3 (Z - m), zero off-arm and target.
  Mat C = ((ev.m_hat - ev.g_hat).array().colwise() * w2.array() +
           (Z - ev.m_hat).array().colwise() * w3.array())
              .matrix();

  CdfEstimate est;
  est.method = tag;
  est.arm = arm;
  est.grid = set.grid;
  est.raw.resize(static_cast<Eigen::Index>(J));
  est.influence.resize(static_cast<Eigen::Index>(L.n), static_cast<Eigen::Index>(J));
  Vec target_mean = Vec::Zero(static_cast<Eigen::Index>(J));
  Vec corr_mean = Vec::Zero(static_cast<Eigen::Index>(J));
  for (std::size_t i = 0; i < L.n; ++i) {
    const Eigen::Index ii = static_cast<Eigen::Index>(i);
    if (L.is_target[i])
      target_mean += ev.g_hat.row(ii).transpose() / static_cast<double>(L.n0);
    else
      corr_mean += C.row(ii).transpose() / static_cast<double>(L.n1);
  }
  est.raw = target_mean + corr_mean;
  for (std::size_t i = 0; i < L.n; ++i) {
    const Eigen::Index ii = static_cast<Eigen::Index>(i);
    if (L.is_target[i])
      est.influence.row(ii) = (ev.g_hat.row(ii) - est.raw.transpose()) / L.pi0;
    else
      est.influence.row(ii) = C.row(ii) / L.pi1;
  }
  return est;
}

/// No-surrogate benchmark: two-term estimator on the X-only nuisances
///   psi_hat(y) = Pn0[g0] + Pn1[omega 1(A=a) M/(e rho0) (1(Y<=y) - g0)],
/// where g0 regresses the indicator directly on X over validated units and
/// rho0 is the X-only validation propensity.
inline CdfEstimate estimate_nos(const TwoSampleDataset& data, const FoldAssignment& folds,
                                const NuisanceSet& set, int arm) {
  const auto L = detail::layout(data, arm);
  const auto ev = evaluate_all(data, folds, set, arm);
  if (!set.passthrough() && !set.config.fit_nos)
    throw invalid_input("estimate_nos: nuisances were fitted without fit_nos");
  if (set.passthrough() && !set.oracle->g_nos)
    throw invalid_input("estimate_nos: oracle has no X-only components");
  const std::size_t J = set.grid.size();
  const Mat Z = detail::indicator_matrix(data, set.grid, L);

  Vec w3 = Vec::Zero(static_cast<Eigen::Index>(L.n));
  for (std::size_t i = 0; i < L.n; ++i)
    if (L.validated[i]) {
      const Eigen::Index ii = static_cast<Eigen::Index>(i);
      w3(ii) = ev.omega_hat(ii) / (ev.e_hat(ii) * ev.rho0_hat(ii));
    }
  Mat C = ((Z - ev.g_nos_hat).array().colwise() * w3.array()).matrix();

  CdfEstimate est;
  est.method = Method::NoS;
  est.arm = arm;
  est.grid = set.grid;
  est.raw.setZero(static_cast<Eigen::Index>(J));
  est.influence.resize(static_cast<Eigen::Index>(L.n), static_cast<Eigen::Index>(J));
  Vec target_mean = Vec::Zero(static_cast<Eigen::Index>(J));
  Vec corr_mean = Vec::Zero(static_cast<Eigen::Index>(J));
  for (std::size_t i = 0; i < L.n; ++i) {
    const Eigen::Index ii = static_cast<Eigen::Index>(i);
    if (L.is_target[i])
      target_mean += ev.g_nos_hat.row(ii).transpose() / static_cast<double>(L.n0);
    else
      corr_mean += C.row(ii).transpose() / static_cast<double>(L.n1);
  }
  est.raw = target_mean + corr_mean;
  for (std::size_t i = 0; i < L.n; ++i) {
    const Eigen::Index ii = static_cast<Eigen::Index>(i);
    if (L.is_target[i])
      est.influence.row(ii) = (ev.g_nos_hat.row(ii) - est.raw.transpose()) / L.pi0;
    else
      est.influence.row(ii) = C.row(ii) / L.pi1;
  }
  return est;
}

/// Validation-only transported inverse-probability weighting:
///   psi_hat(y) = Pn1[omega 1(A=a) M/(e rho) 1(Y<=y)].
/// Influence values are source-only centered: (summand - psi_hat)/pi1_hat on
/// source rows, zero on target rows, which still gives exact column centering.
inline CdfEstimate estimate_ipw(const TwoSampleDataset& data, const FoldAssignment& folds,
                                const NuisanceSet& set, int arm) {
  const auto L = detail::layout(data, arm);
  const auto ev = evaluate_all(data, folds, set, arm);
  const std::size_t J = set.grid.size();
  const Mat Z = detail::indicator_matrix(data, set.grid, L);

  Vec w3 = Vec::Zero(static_cast<Eigen::Index>(L.n));
  for (std::size_t i = 0; i < L.n; ++i)
    if (L.validated[i]) {
      const Eigen::Index ii = static_cast<Eigen::Index>(i);
      w3(ii) = ev.omega_hat(ii) / (ev.e_hat(ii) * ev.rho_hat(ii));
    }
  Mat S = (Z.array().colwise() * w3.array()).matrix();

  CdfEstimate est;
  est.method = Method::IPW;
  est.arm = arm;
  est.grid = set.grid;
  est.raw = Vec::Zero(static_cast<Eigen::Index>(J));
  for (std::size_t i = 0; i < L.n; ++i)
    if (!L.is_target[i])
      est.raw += S.row(static_cast<Eigen::Index>(i)).transpose() /
                 static_cast<double>(L.n1);
  est.influence.setZero(static_cast<Eigen::Index>(L.n), static_cast<Eigen::Index>(J));
  for (std::size_t i = 0; i < L.n; ++i)
    if (!L.is_target[i])
      est.influence.row(static_cast<Eigen::Index>(i)) =
          (S.row(static_cast<Eigen::Index>(i)) - est.raw.transpose()) / L.pi1;
  return est;
}

/// Transported regression plug-in: psi_hat(y) = Pn0[g].  Point estimate only.
inline CdfEstimate estimate_plugin(const TwoSampleDataset& data,
                                   const FoldAssignment& folds, const NuisanceSet& set,
                                   int arm) {
  const auto L = detail::layout(data, arm);
  const auto ev = evaluate_all(data, folds, set, arm);
  CdfEstimate est;
  est.method = Method::Plugin;
  est.arm = arm;
  est.grid = set.grid;
  est.raw = Vec::Zero(static_cast<Eigen::Index>(set.grid.size()));
  for (std::size_t i = 0; i < L.n; ++i)
    if (L.is_target[i])
      est.raw += ev.g_hat.row(static_cast<Eigen::Index>(i)).transpose() /
                 static_cast<double>(L.n0);
  return est;
}

/// Negative control that never transports: the one-step form with omega = 1
/// and the target mean replaced by the source mean of g.  Estimates the
/// source-population CDF, so it is biased for the target whenever the
/// covariate laws differ.  Point estimate only.
inline CdfEstimate estimate_source(const TwoSampleDataset& data,
                                   const FoldAssignment& folds, const NuisanceSet& set,
                                   int arm) {
  const auto L = detail::layout(data, arm);
  const auto ev = evaluate_all(data, folds, set, arm);
  const std::size_t J = set.grid.size();
  const Mat Z = detail::indicator_matrix(data, set.grid, L);

  Vec w2 = Vec::Zero(static_cast<Eigen::Index>(L.n));
  Vec w3 = Vec::Zero(static_cast<Eigen::Index>(L.n));
  for (std::size_t i = 0; i < L.n; ++i) {
    if (!L.in_arm[i]) continue;
    const Eigen::Index ii = static_cast<Eigen::Index>(i);
    w2(ii) = 1.0 / ev.e_hat(ii);
    if (L.validated[i]) w3(ii) = w2(ii) / ev.rho_hat(ii);
  }
  Mat C = ((ev.m_hat - ev.g_hat).array().colwise() * w2.array() +
           (Z - ev.m_hat).array().colwise() * w3.array())
              .matrix();

  CdfEstimate est;
  est.method = Method::Source;
  est.arm = arm;
  est.grid = set.grid;
  est.raw = Vec::Zero(static_cast<Eigen::Index>(J));
  for (std::size_t i = 0; i < L.n; ++i)
    if (!L.is_target[i]) {
      const Eigen::Index ii = static_cast<Eigen::Index>(i);
      est.raw += (ev.g_hat.row(ii) + C.row(ii)).transpose() / static_cast<double>(L.n1);
    }
  return est;
}

// ---------------------------------------------------------------------------
// Drift of the one-step signal under a candidate nuisance set, evaluated
// exactly on a discrete law.
// ---------------------------------------------------------------------------

/// Candidate nuisances for one (arm, threshold) pair, indexed by the law's
/// support points: m_bar(xi, si), g_bar(xi), e_bar(xi) [for the chosen arm],
/// rho_bar(xi, si), omega_bar(xi).
struct CandidateNuisances {
  std::function<double(std::size_t, std::size_t)> m_bar;
  std::function<double(std::size_t)> g_bar;
  std::function<double(std::size_t)> e_bar;
  std::function<double(std::size_t, std::size_t)> rho_bar;
  std::function<double(std::size_t)> omega_bar;
};

/// Population value of the one-step signal at the candidate, minus the truth:
///   Psi(eta_bar) - psi = E1[(omega - w_bar)(g_bar - g)]
///                      + E1[w_bar * H{(1 - rho/rho_bar)(m_bar - m)}],
/// with w_bar = omega_bar e / e_bar and H averaging over S given (A=a, X).
/// Both the direct three-expectation form and the product-of-errors form are
/// enumerated; they must agree to 1e-12, which also certifies that the drift
/// vanishes whenever either the regression pair or the weight pair is correct.
inline double drift_value(const CandidateNuisances& cand, const DiscreteLaw& law, int arm,
                          double y) {
  for (std::size_t i = 0; i < law.nx(); ++i) {
    if (law.p_x1[i] <= 0) continue;
    if (!(cand.e_bar(i) > 0))
      throw invalid_input("drift_value: candidate e_bar <= 0 at x index " +
                          std::to_string(i));
    for (std::size_t k = 0; k < law.ns(); ++k)
      if (!(cand.rho_bar(i, k) > 0))
        throw invalid_input("drift_value: candidate rho_bar <= 0 at (x,s) index (" +
                            std::to_string(i) + "," + std::to_string(k) + ")");
  }
  const double psi = law.true_psi(arm, y);

  double direct = 0.0, product_form = 0.0;
  for (std::size_t i = 0; i < law.nx(); ++i) {
    const double gb = cand.g_bar(i);
    const double g = law.g(arm, y, i);
    const double om = law.omega(i);
    const double e = law.e(arm, i);
    const double wbar = cand.omega_bar(i) * e / cand.e_bar(i);

    direct += law.pi0 * law.p_x0[i] * gb / law.pi0;  // E0[g_bar] via target pmf
    double h_resid = 0.0;                            // H{(1 - r_bar)(m_bar - m)}
    for (std::size_t k = 0; k < law.ns(); ++k) {
      const double ps = law.p_s[i][arm][k];
      const double mb = cand.m_bar(i, k);
      const double m = law.m(arm, y, i, k);
      const double r = law.rho(arm, i, k) / cand.rho_bar(i, k);
      // Middle and validation terms of the signal (E[Z|M=1] = m exactly).
      direct += law.p_x1[i] * wbar * ps * ((mb - gb) + r * (m - mb));
      h_resid += ps * (1.0 - r) * (mb - m);
    }
    product_form += law.p_x1[i] * ((om - wbar) * (gb - g) + wbar * h_resid);
  }
  const double drift = direct - psi;
  if (std::abs(drift - product_form) > 1e-12)
    throw estimation_error("drift_value: direct form " + fmt17(drift) +
                           " and product form " + fmt17(product_form) + " disagree");
  return drift;
}

}  // namespace tqte
