#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "tqte/inference.hpp"
#include "tqte/onestep.hpp"
#include "tqte/pipeline.hpp"

namespace tqte {

// ---------------------------------------------------------------------------
// Data-generating processes.  Shared skeleton:
//   X source: independent truncated-normal(0,1) coordinates on [-2,2]^p;
//   X target: exponential tilt exp(c v'x) of the source law, which factorizes
//     into per-coordinate truncated-normal(c v_j, 1) draws on [-2,2];
//   A | X, R=1: randomized Bernoulli(piA) or logistic in X;
//   S = h_A(X) + sigma_S eps_S (scalar surrogate);
//   Y = nu_A(X) + lambda_S beta S + sigma_A(X) eps_Y;
//   M | A, X, S: surrogate-dependent logistic (exp1 family) or constant
//     rho_bar (exp2 family, which keeps the X-only benchmark well defined).
// ---------------------------------------------------------------------------

enum class DgpFamily { nonlinear, linear };  // exp1/3/4 vs exp2 outcome models

struct DgpSpec {
  std::string experiment = "exp1";
  DgpFamily family = DgpFamily::nonlinear;
  std::size_t p = 3;
  double pi1 = 0.5;            // P(R = 1)
  double c = 0.8;              // tilt strength
  Vec v;                       // tilt direction, default (1, 0.5, 0)
  bool randomized = true;
  double piA = 0.5;
  Vec e_coef;                  // observational logit slope (p), intercept below
  double e_intercept = 0.0;
  double lambda_S = 1.0;
  double beta = 1.0;           // surrogate coefficient in the outcome model
  double sigma_S = 1.0;
  bool rho_constant = false;
  double rho_bar = 0.4;        // used when rho_constant

  static DgpSpec defaults(const std::string& experiment) {
    DgpSpec s;
    s.experiment = experiment;
    s.v = Vec(3);
    s.v << 1.0, 0.5, 0.0;
    s.e_coef = Vec::Zero(3);
    if (experiment == "exp2") {
      s.family = DgpFamily::linear;
      s.rho_constant = true;
      s.c = 0.4;
      s.beta = 1.5;  // strong surrogate signal separates the variance ratios
    }
    if (experiment == "exp3") s.lambda_S = 1.0;
    return s;
  }

  // Model functions.
  double h(int a, const Vec& x) const {
    if (family == DgpFamily::linear)
      return (1.0 + 0.5 * a) * x(0) + 0.5 * x(1);
    return (1.0 + a) * std::tanh(x(0)) + 0.5 * x(1);
  }
  double nu(int a, const Vec& x) const {
    if (family == DgpFamily::linear) return a * (1.0 + x(0)) + x(1);
    return a * (1.0 + x(0)) + x(1) * x(1) - 1.0;
  }
  double sigma_y(int, const Vec&) const { return 1.0; }
  double rho(int, const Vec& x, double s) const {
    if (rho_constant) return rho_bar;
    return expit(0.4 + 0.5 * s - 0.3 * x(0));
  }
  double e1(const Vec& x) const {
    if (randomized) return piA;
    return expit(e_intercept + e_coef.dot(x));
  }
  /// Target / source covariate density ratio on [-2,2]^p.
  double omega(const Vec& x) const {
    const double z0 = norm_cdf(2.0) - norm_cdf(-2.0);
    double w = 1.0;
    for (Eigen::Index j = 0; j < x.size(); ++j) {
      const double cv = c * v(j);
      const double zj = norm_cdf(2.0 - cv) - norm_cdf(-2.0 - cv);
      w *= std::exp(cv * x(j)) * std::exp(-0.5 * cv * cv) * z0 / zj;
    }
    return w;
  }
  // Y | A, X marginalizing S: Gaussian with these moments.
  double mu_y(int a, const Vec& x) const {
    return nu(a, x) + lambda_S * beta * h(a, x);
  }
  double sd_y(int a, const Vec& x) const {
    const double lb = lambda_S * beta * sigma_S;
    const double s = sigma_y(a, x);
    return std::sqrt(s * s + lb * lb);
  }
  double m_fn(int a, double y, const Vec& x, double s) const {
    return norm_cdf((y - nu(a, x) - lambda_S * beta * s) / sigma_y(a, x));
  }
  double g_fn(int a, double y, const Vec& x) const {
    return norm_cdf((y - mu_y(a, x)) / sd_y(a, x));
  }
  /// X-only validation propensity rho0(x) = E{rho(x, S) | A=a, X=x}.
  double rho0(int a, const Vec& x) const {
    if (rho_constant) return rho_bar;
    const double hm = h(a, x);
    double total = 0.0, mass = 0.0;
    const int Q = 101;
    for (int i = 0; i < Q; ++i) {
      const double t = -5.0 + 10.0 * (i + 0.5) / Q;  // standardized surrogate noise
      const double w = norm_pdf(t);
      total += w * rho(a, x, hm + sigma_S * t);
      mass += w;
    }
    return total / mass;
  }

  void check() const {
    if (p < 1 || static_cast<std::size_t>(v.size()) != p)
      throw invalid_input("DgpSpec: tilt vector length != p");
    if (!(pi1 > 0 && pi1 < 1)) throw invalid_input("DgpSpec: pi1 outside (0,1)");
    if (!(sigma_S > 0)) throw invalid_input("DgpSpec: sigma_S must be > 0");
    if (rho_constant && !(rho_bar > 0 && rho_bar < 1))
      throw invalid_input("DgpSpec: rho_bar outside (0,1)");
    // Positivity audit on a lattice over the bounded support: the implied e,
    // rho, omega must respect the estimator's positivity requirements.
    std::vector<double> pts = {-2.0, -1.0, 0.0, 1.0, 2.0};
    Vec x(static_cast<Eigen::Index>(p));
    std::vector<std::size_t> idx(p, 0);
    for (;;) {
      for (std::size_t j = 0; j < p; ++j) x(static_cast<Eigen::Index>(j)) = pts[idx[j]];
      const double e = e1(x);
      if (!(e > 1e-3 && e < 1.0 - 1e-3))
        throw invalid_input("DgpSpec: treatment propensity outside [0.001, 0.999] at a "
                            "support lattice point");
      const double w = omega(x);
      if (!(w > 1e-4 && w < 1e4))
        throw invalid_input("DgpSpec: density ratio outside [1e-4, 1e4] on the support");
      for (int a = 0; a < 2; ++a) {
        const double hm = h(a, x);
        for (double t : {-4.0, 0.0, 4.0}) {
          const double r = rho(a, x, hm + sigma_S * t);
          if (!(r > 1e-3 && r < 1.0))
            throw invalid_input("DgpSpec: validation propensity outside (0.001, 1) over "
                                "the plausible surrogate range");
        }
      }
      std::size_t j = 0;
      while (j < p && ++idx[j] == pts.size()) idx[j++] = 0;
      if (j == p) break;
    }
  }

  json to_json() const {
    json j;
    j["experiment"] = experiment;
    j["family"] = family == DgpFamily::linear ? "linear" : "nonlinear";
    j["p"] = p;
    j["pi1"] = pi1;
    j["c"] = c;
    j["v"] = std::vector<double>(v.data(), v.data() + v.size());
    j["randomized"] = randomized;
    j["piA"] = piA;
    j["e_coef"] = std::vector<double>(e_coef.data(), e_coef.data() + e_coef.size());
    j["e_intercept"] = e_intercept;
    j["lambda_S"] = lambda_S;
    j["beta"] = beta;
    j["sigma_S"] = sigma_S;
    j["rho_constant"] = rho_constant;
    j["rho_bar"] = rho_bar;
    return j;
  }
  static DgpSpec from_json(const json& j) {
    DgpSpec s = defaults(j.value("experiment", "custom"));
    if (j.contains("family"))
      s.family = j.at("family") == "linear" ? DgpFamily::linear : DgpFamily::nonlinear;
    if (j.contains("p")) s.p = j.at("p");
    if (j.contains("pi1")) s.pi1 = j.at("pi1");
    if (j.contains("c")) s.c = j.at("c");
    if (j.contains("v")) {
      const auto d = j.at("v").get<std::vector<double>>();
      s.v = Eigen::Map<const Vec>(d.data(), static_cast<Eigen::Index>(d.size()));
    }
    if (j.contains("randomized")) s.randomized = j.at("randomized");
    if (j.contains("piA")) s.piA = j.at("piA");
    if (j.contains("e_coef")) {
      const auto d = j.at("e_coef").get<std::vector<double>>();
      s.e_coef = Eigen::Map<const Vec>(d.data(), static_cast<Eigen::Index>(d.size()));
    }
    if (j.contains("e_intercept")) s.e_intercept = j.at("e_intercept");
    if (j.contains("lambda_S")) s.lambda_S = j.at("lambda_S");
    if (j.contains("beta")) s.beta = j.at("beta");
    if (j.contains("sigma_S")) s.sigma_S = j.at("sigma_S");
    if (j.contains("rho_constant")) s.rho_constant = j.at("rho_constant");
    if (j.contains("rho_bar")) s.rho_bar = j.at("rho_bar");
    s.check();
    return s;
  }
};

namespace detail {

/// Truncated-normal(mean, 1) on [-2, 2] by rejection.
inline double truncated_normal(Rng& rng, double mean) {
  for (;;) {
    const double z = rng.normal(mean, 1.0);
    if (z >= -2.0 && z <= 2.0) return z;
  }
}

}  // namespace detail

/// Sample a dataset.  With full_validation the same latent draws are used but
/// every source primary outcome is treated as observed (M = 1), giving the
/// FullOracle benchmark dataset coupled to the observed one.
inline TwoSampleDataset generate(const DgpSpec& spec, std::size_t n, std::uint64_t seed,
                                 bool full_validation = false) {
  spec.check();
  if (n < 2) throw invalid_input("generate: n must be >= 2");
  Rng rng(seed);
  TwoSampleDataset data;
  data.p = spec.p;
  data.q = 1;
  data.observations.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Observation o;
    o.r = (rng.uniform() < spec.pi1) ? 1 : 0;
    Vec x(static_cast<Eigen::Index>(spec.p));
    for (std::size_t j = 0; j < spec.p; ++j) {
      const double mean = (o.r == 0) ? spec.c * spec.v(static_cast<Eigen::Index>(j)) : 0.0;
      x(static_cast<Eigen::Index>(j)) = detail::truncated_normal(rng, mean);
    }
    o.x.assign(x.data(), x.data() + x.size());
    if (o.r == 1) {
      const int a = (rng.uniform() < spec.e1(x)) ? 1 : 0;
      o.a = a;
      const double s = spec.h(a, x) + spec.sigma_S * rng.normal();
      o.s = std::vector<double>{s};
      const double y = spec.nu(a, x) + spec.lambda_S * spec.beta * s +
                       spec.sigma_y(a, x) * rng.normal();
      const int m = (rng.uniform() < spec.rho(a, x, s)) ? 1 : 0;
      o.m = full_validation ? 1 : m;
      if (*o.m == 1) o.y = y;
    } else {
      // Burn the same number of draws so target rows never shift the source
      // stream between full and observed variants (they do not here, but the
      // invariant is cheap to keep explicit).
    }
    data.observations.push_back(std::move(o));
  }
  data.check();
  return data;
}

inline OracleNuisances oracle_nuisances(const DgpSpec& spec) {
  OracleNuisances nu;
  nu.m = [spec](int a, double y, const Vec& x, const Vec& s) {
    return spec.m_fn(a, y, x, s(0));
  };
  nu.g = [spec](int a, double y, const Vec& x) { return spec.g_fn(a, y, x); };
  nu.e = [spec](int a, const Vec& x) {
    const double e = spec.e1(x);
    return a == 1 ? e : 1.0 - e;
  };
  nu.rho = [spec](int a, const Vec& x, const Vec& s) { return spec.rho(a, x, s(0)); };
  nu.omega = [spec](const Vec& x) { return spec.omega(x); };
  nu.g_nos = nu.g;  // transportability: the validated-unit regression equals g
  nu.rho0 = [spec](int a, const Vec& x) { return spec.rho0(a, x); };
  return nu;
}

// ---------------------------------------------------------------------------
// Ground truth by Monte Carlo mixture of the closed-form conditional CDFs.
// ---------------------------------------------------------------------------

struct TruthTable {
  TauGrid taus;
  std::vector<double> q1, q0, delta, f1, f0;
  Vec mu1, mu0, sd1, sd0;  // mixture components over target covariate draws
  double y_lo = 0, y_hi = 0;
  std::size_t n_truth = 0;
  std::uint64_t seed = 0;

  double psi(int a, double y) const {
    const Vec& mu = a == 1 ? mu1 : mu0;
    const Vec& sd = a == 1 ? sd1 : sd0;
    double total = 0;
    for (Eigen::Index i = 0; i < mu.size(); ++i)
      total += norm_cdf((y - mu(i)) / sd(i));
    return total / static_cast<double>(mu.size());
  }
  double density(int a, double y) const {
    const Vec& mu = a == 1 ? mu1 : mu0;
    const Vec& sd = a == 1 ? sd1 : sd0;
    double total = 0;
    for (Eigen::Index i = 0; i < mu.size(); ++i)
      total += norm_pdf((y - mu(i)) / sd(i)) / sd(i);
    return total / static_cast<double>(mu.size());
  }
  double quantile_of(int a, double tau) const {
    double lo = y_lo, hi = y_hi;
    for (int i = 0; i < 200 && hi - lo > 1e-10; ++i) {
      const double mid = 0.5 * (lo + hi);
      (psi(a, mid) >= tau ? hi : lo) = mid;
    }
    return 0.5 * (lo + hi);
  }
  double delta_at(double tau) const {
    // Precomputed levels first: replication loops query the same tau values
    // repeatedly and bisection over the mixture is the expensive path.
    for (std::size_t l = 0; l < taus.levels.size(); ++l)
      if (taus.levels[l] == tau) return delta[l];
    return quantile_of(1, tau) - quantile_of(0, tau);
  }

  void to_csv(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw invalid_input("cannot open " + path + " for writing");
    out << "tau,q1,q0,delta,f1,f0\n";
    for (std::size_t l = 0; l < taus.levels.size(); ++l)
      out << fmt17(taus.levels[l]) << ',' << fmt17(q1[l]) << ',' << fmt17(q0[l]) << ','
          << fmt17(delta[l]) << ',' << fmt17(f1[l]) << ',' << fmt17(f0[l]) << "\n";
  }
};

inline TruthTable compute_truth(const DgpSpec& spec, const TauGrid& taus,
                                std::size_t n_truth, std::uint64_t seed) {
  spec.check();
  taus.check();
  TruthTable t;
  t.taus = taus;
  t.n_truth = n_truth;
  t.seed = seed;
  Rng rng = Rng::derive(seed, {0x74727574ULL});
  t.mu1.resize(static_cast<Eigen::Index>(n_truth));
  t.mu0.resize(static_cast<Eigen::Index>(n_truth));
  t.sd1.resize(static_cast<Eigen::Index>(n_truth));
  t.sd0.resize(static_cast<Eigen::Index>(n_truth));
  double lo = 1e300, hi = -1e300;
  Vec x(static_cast<Eigen::Index>(spec.p));
  for (std::size_t i = 0; i < n_truth; ++i) {
    for (std::size_t j = 0; j < spec.p; ++j)
      x(static_cast<Eigen::Index>(j)) =
          detail::truncated_normal(rng, spec.c * spec.v(static_cast<Eigen::Index>(j)));
    for (int a = 0; a < 2; ++a) {
      const double mu = spec.mu_y(a, x);
      const double sd = spec.sd_y(a, x);
      (a == 1 ? t.mu1 : t.mu0)(static_cast<Eigen::Index>(i)) = mu;
      (a == 1 ? t.sd1 : t.sd0)(static_cast<Eigen::Index>(i)) = sd;
      lo = std::min(lo, mu - 8 * sd);
      hi = std::max(hi, mu + 8 * sd);
    }
  }
  t.y_lo = lo;
  t.y_hi = hi;
  for (double tau : taus.levels) {
    const double a1 = t.quantile_of(1, tau);
    const double a0 = t.quantile_of(0, tau);
    t.q1.push_back(a1);
    t.q0.push_back(a0);
    t.delta.push_back(a1 - a0);
    t.f1.push_back(t.density(1, a1));
    t.f0.push_back(t.density(0, a0));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Oracle influence-function variance of the QTE at tau, by Monte Carlo with
// the closed-form nuisances; used for the exp2 theory column.
// ---------------------------------------------------------------------------

namespace detail {

/// sigma^2_Delta(tau) for the surrogate-assisted (use_s) or no-surrogate IF.
inline double qte_if_variance_mc(const DgpSpec& spec, const TruthTable& truth, double tau,
                                 bool use_s, std::size_t n_mc, std::uint64_t seed) {
  const double q1 = truth.quantile_of(1, tau);
  const double q0 = truth.quantile_of(0, tau);
  const double f1 = truth.density(1, q1);
  const double f0 = truth.density(0, q0);
  const double psi1 = truth.psi(1, q1);
  const double psi0 = truth.psi(0, q0);
  const double pi0 = 1.0 - spec.pi1;

  Rng rng = Rng::derive(seed, {0x76617263ULL, use_s ? 1u : 0u});
  Vec x(static_cast<Eigen::Index>(spec.p));
  double target_var = 0, source_var = 0;
  for (std::size_t i = 0; i < n_mc; ++i) {
    // Target draw: joint target-term component across arms (correlated).
    for (std::size_t j = 0; j < spec.p; ++j)
      x(static_cast<Eigen::Index>(j)) =
          detail::truncated_normal(rng, spec.c * spec.v(static_cast<Eigen::Index>(j)));
    const double t = -(spec.g_fn(1, q1, x) - psi1) / f1 + (spec.g_fn(0, q0, x) - psi0) / f0;
    target_var += t * t;

    // Source draw: S integrated by one conditional draw per unit and arm.
    for (std::size_t j = 0; j < spec.p; ++j)
      x(static_cast<Eigen::Index>(j)) = detail::truncated_normal(rng, 0.0);
    const double om = spec.omega(x);
    for (int a = 0; a < 2; ++a) {
      const double e = a == 1 ? spec.e1(x) : 1.0 - spec.e1(x);
      const double qa = a == 1 ? q1 : q0;
      const double fa = a == 1 ? f1 : f0;
      const double s = spec.h(a, x) + spec.sigma_S * rng.normal();
      const double m = spec.m_fn(a, qa, x, s);
      const double g = spec.g_fn(a, qa, x);
      double contrib;
      if (use_s) {
        const double r = spec.rho(a, x, s);
        contrib = (m - g) * (m - g) + m * (1.0 - m) / r;
      } else {
        const double r0 = spec.rho0(a, x);
        contrib = ((m - g) * (m - g) + m * (1.0 - m)) / r0;
      }
      source_var += om * om / e * contrib / (fa * fa);
    }
  }
  return target_var / (pi0 * static_cast<double>(n_mc)) +
         source_var / (spec.pi1 * static_cast<double>(n_mc));
}

}  // namespace detail

/// Oracle NoS/SA influence-function variance ratio for the QTE at tau.
inline double theory_ratio(const DgpSpec& spec, const TruthTable& truth, double tau,
                           std::size_t n_mc, std::uint64_t seed) {
  const double v_sa = detail::qte_if_variance_mc(spec, truth, tau, true, n_mc, seed);
  const double v_nos = detail::qte_if_variance_mc(spec, truth, tau, false, n_mc, seed);
  return v_nos / v_sa;
}

// ---------------------------------------------------------------------------
// Replication harness.
// ---------------------------------------------------------------------------

struct GridChoice {
  bool growing = false;
  std::size_t fixed_J = 61;

  static GridChoice parse(const std::string& text) {
    GridChoice g;
    if (text == "growing") {
      g.growing = true;
      return g;
    }
    if (text.rfind("fixed:", 0) == 0) {
      g.fixed_J = static_cast<std::size_t>(std::stoul(text.substr(6)));
      if (g.fixed_J < 2) throw invalid_input("grid: fixed:J needs J >= 2");
      return g;
    }
    throw invalid_input("grid must be 'growing' or 'fixed:J', got '" + text + "'");
  }
  std::string name() const {
    return growing ? "growing" : "fixed" + std::to_string(fixed_J);
  }
  ThresholdGrid build(std::size_t n, double y_lo, double y_hi) const {
    return growing ? growing_grid(n, y_lo, y_hi) : fixed_grid(fixed_J, y_lo, y_hi);
  }
};

struct ExperimentConfig {
  std::string experiment = "exp1";
  std::size_t n = 2000;
  int reps = 200;
  int K = 5;
  std::uint64_t seed = 1;
  std::vector<std::string> roster;  // method names; empty = experiment default
  std::vector<double> taus = {0.25, 0.50, 0.75};
  std::vector<double> band_taus;    // uniform-band tau grid (exp4)
  double alpha = 0.05;
  std::size_t B = 400;
  std::vector<std::string> grids = {"fixed:61"};
  std::vector<std::size_t> ns;      // per-cell sample sizes (exp4); empty = {n}
  int workers = 1;
  std::string out_dir = "out";
  bool svg = false;
  std::size_t n_truth = 200000;
  std::size_t n_theory = 200000;
  NuisanceConfig learners;

  static std::vector<std::string> default_roster(const std::string& experiment) {
    if (experiment == "exp2") return {"SA", "NoS", "IPW", "Oracle", "FullOracle"};
    if (experiment == "exp3") return {"SA", "SA_true_omega", "Source", "IPW"};
    if (experiment == "exp4") return {"SA"};
    return {"SA", "Oracle", "IPW", "Plugin", "Source"};
  }
};

/// One cell of an experiment grid: a DGP plus numerical settings.
struct ExperimentCell {
  std::size_t id = 0;
  DgpSpec spec;
  std::size_t n = 2000;
  GridChoice grid;
  // Semicolon-separated so the label stays a single CSV field.
  std::string label;  // e.g. "lambda=1;rho=0.40"
};

inline std::vector<ExperimentCell> experiment_cells(const ExperimentConfig& cfg) {
  std::vector<ExperimentCell> cells;
  auto push = [&](DgpSpec spec, std::size_t n, GridChoice g, std::string label) {
    ExperimentCell cell;
    cell.id = cells.size();
    cell.spec = std::move(spec);
    cell.n = n;
    cell.grid = g;
    cell.label = std::move(label);
    cells.push_back(std::move(cell));
  };
  const GridChoice g0 = GridChoice::parse(cfg.grids.front());
  if (cfg.experiment == "exp1") {
    push(DgpSpec::defaults("exp1"), cfg.n, g0, "baseline");
  } else if (cfg.experiment == "exp2") {
    for (double rho_bar : {0.20, 0.40, 0.70})
      for (double lam : {0.0, 1.0, 2.0}) {
        DgpSpec s = DgpSpec::defaults("exp2");
        s.rho_bar = rho_bar;
        s.lambda_S = lam;
        push(s, cfg.n, g0,
             "lambda=" + fmt17(lam) + ";rho=" + fmt17(rho_bar));
      }
  } else if (cfg.experiment == "exp3") {
    for (double c : {0.0, 0.4, 0.8, 1.2}) {
      DgpSpec s = DgpSpec::defaults("exp3");
      s.c = c;
      push(s, cfg.n, g0, "c=" + fmt17(c));
    }
  } else if (cfg.experiment == "exp4") {
    const std::vector<std::size_t> ns = cfg.ns.empty()
                                            ? std::vector<std::size_t>{cfg.n}
                                            : cfg.ns;
    for (const std::string& gtext : cfg.grids)
      for (std::size_t n : ns) {
        DgpSpec s = DgpSpec::defaults("exp4");
        const GridChoice g = GridChoice::parse(gtext);
        push(s, n, g, "grid=" + g.name() + ";n=" + std::to_string(n));
      }
  } else {
    throw invalid_input("experiment_cells: unknown experiment '" + cfg.experiment + "'");
  }
  return cells;
}

/// One (replication, method, tau) outcome.  NaN marks unavailable fields.
struct RepRow {
  std::size_t cell = 0;
  int rep = 0;
  std::string method;
  double tau = 0;
  double delta_hat = std::numeric_limits<double>::quiet_NaN();
  double se = std::numeric_limits<double>::quiet_NaN();
  double ci_lo = std::numeric_limits<double>::quiet_NaN();
  double ci_hi = std::numeric_limits<double>::quiet_NaN();
  double d_iso = std::numeric_limits<double>::quiet_NaN();
  double ess = std::numeric_limits<double>::quiet_NaN();
  double sup_err = std::numeric_limits<double>::quiet_NaN();
  double band_cover = std::numeric_limits<double>::quiet_NaN();
  double band_width = std::numeric_limits<double>::quiet_NaN();
};

struct RepFailure {
  std::size_t cell = 0;
  int rep = 0;
  std::string message;
};

namespace detail {

struct MethodResult {
  CdfEstimate cdf1, cdf0;
  MonotoneCdf F1, F0;
  double d_iso = 0;
};

inline MethodResult project_pair(CdfEstimate&& c1, CdfEstimate&& c0) {
  MethodResult r;
  r.cdf1 = std::move(c1);
  r.cdf0 = std::move(c0);
  std::vector<double> raw1(r.cdf1.raw.data(), r.cdf1.raw.data() + r.cdf1.raw.size());
  std::vector<double> raw0(r.cdf0.raw.data(), r.cdf0.raw.data() + r.cdf0.raw.size());
  r.F1 = pava_box(raw1, r.cdf1.grid);
  r.F0 = pava_box(raw0, r.cdf0.grid);
  r.d_iso = std::max(r.F1.d_iso, r.F0.d_iso);
  return r;
}

}  // namespace detail

/// Run one replication of one cell; returns rows for every roster method and
/// reporting tau.  Deterministic in (cfg.seed, cell.id, rep).
inline std::vector<RepRow> run_rep(const ExperimentCell& cell, const ExperimentConfig& cfg,
                                   const TruthTable& truth, int rep) {
  const std::uint64_t seed = Rng::derive(cfg.seed, {cell.id, static_cast<std::uint64_t>(rep)})
                                 .next_u64();
  const auto roster = cfg.roster.empty() ? ExperimentConfig::default_roster(cfg.experiment)
                                         : cfg.roster;
  const TwoSampleDataset data = generate(cell.spec, cell.n, seed);
  const FoldAssignment folds = make_folds(data, cfg.K, seed ^ 0x666f6c64ULL);
  const ThresholdGrid grid = cell.grid.build(cell.n, truth.y_lo, truth.y_hi);
  const OracleNuisances oracle = oracle_nuisances(cell.spec);

  const bool need_nos = std::count(roster.begin(), roster.end(), "NoS") > 0;
  bool need_fit = false;
  for (const auto& m : roster)
    if (m == "SA" || m == "NoS" || m == "IPW" || m == "Plugin" || m == "Source")
      need_fit = true;

  NuisanceSet fitted;
  if (need_fit) {
    NuisanceConfig nc = cfg.learners;
    nc.fit_nos = need_nos;
    nc.seed = seed ^ 0x6c65726eULL;
    nc.e_known = cell.spec.piA;
    if (!cell.spec.randomized) nc.e = ELearner::logistic;
    fitted = fit_nuisances(data, folds, grid, nc, &oracle);
  }

  TauGrid taus;
  taus.levels = cfg.taus;
  TauGrid band_taus;
  band_taus.levels = cfg.band_taus;

  std::vector<RepRow> rows;
  auto emit = [&](const std::string& method, const detail::MethodResult& r,
                  bool has_if, double ess) {
    QteInference qi;
    SimultaneousBand band;
    bool banded = false;
    if (has_if) {
      qi = qte_pointwise(r.cdf1, r.cdf0, r.F1, r.F0, taus, cfg.alpha);
      if (!cfg.band_taus.empty()) {
        QteInference qb = qte_pointwise(r.cdf1, r.cdf0, r.F1, r.F0, band_taus, cfg.alpha);
        band = multiplier_band(qb, cfg.B, cfg.alpha, seed ^ 0x62616e64ULL);
        banded = true;
        double sup_err = 0, width = 0;
        bool cover = true;
        for (std::size_t l = 0; l < band_taus.levels.size(); ++l) {
          const double d0 = truth.delta_at(band_taus.levels[l]);
          sup_err = std::max(sup_err, std::abs(qb.delta[l] - d0));
          width += (band.hi[l] - band.lo[l]) / static_cast<double>(band_taus.levels.size());
          if (d0 < band.lo[l] || d0 > band.hi[l]) cover = false;
        }
        RepRow rr;
        rr.cell = cell.id;
        rr.rep = rep;
        rr.method = method;
        rr.tau = -1.0;  // uniform-band summary row
        rr.d_iso = r.d_iso;
        rr.ess = ess;
        rr.sup_err = sup_err;
        rr.band_cover = cover ? 1.0 : 0.0;
        rr.band_width = width;
        rows.push_back(rr);
      }
    }
    (void)banded;
    for (std::size_t l = 0; l < taus.levels.size(); ++l) {
      RepRow rr;
      rr.cell = cell.id;
      rr.rep = rep;
      rr.method = method;
      rr.tau = taus.levels[l];
      rr.d_iso = r.d_iso;
      rr.ess = ess;
      if (has_if) {
        rr.delta_hat = qi.delta[l];
        rr.se = qi.se[l];
        rr.ci_lo = qi.ci_lo[l];
        rr.ci_hi = qi.ci_hi[l];
      } else {
        rr.delta_hat = quantile(r.F1, taus.levels[l]).value -
                       quantile(r.F0, taus.levels[l]).value;
      }
      rows.push_back(rr);
    }
  };

  auto ess_of = [&](const NuisanceSet& set) {
    const auto ev = evaluate_all(data, folds, set, 1);
    std::vector<double> w;
    for (std::size_t i = 0; i < data.n(); ++i)
      if (data.observations[i].r == 1)
        w.push_back(ev.omega_hat(static_cast<Eigen::Index>(i)));
    return ess_omega(Eigen::Map<const Vec>(w.data(), static_cast<Eigen::Index>(w.size())));
  };

  for (const auto& method : roster) {
    if (method == "SA") {
      emit("SA",
           detail::project_pair(estimate_sa(data, folds, fitted, 1),
                                estimate_sa(data, folds, fitted, 0)),
           true, ess_of(fitted));
    } else if (method == "NoS") {
      emit("NoS",
           detail::project_pair(estimate_nos(data, folds, fitted, 1),
                                estimate_nos(data, folds, fitted, 0)),
           true, ess_of(fitted));
    } else if (method == "IPW") {
      emit("IPW",
           detail::project_pair(estimate_ipw(data, folds, fitted, 1),
                                estimate_ipw(data, folds, fitted, 0)),
           true, ess_of(fitted));
    } else if (method == "Plugin") {
      emit("Plugin",
           detail::project_pair(estimate_plugin(data, folds, fitted, 1),
                                estimate_plugin(data, folds, fitted, 0)),
           false, std::numeric_limits<double>::quiet_NaN());
    } else if (method == "Source") {
      emit("Source",
           detail::project_pair(estimate_source(data, folds, fitted, 1),
                                estimate_source(data, folds, fitted, 0)),
           false, std::numeric_limits<double>::quiet_NaN());
    } else if (method == "SA_true_omega") {
      // Same fitted learners, true density ratio: isolates omega-hat error.
      NuisanceConfig nc = cfg.learners;
      nc.omega = OmegaLearner::known;
      nc.seed = seed ^ 0x6c65726eULL;  // same learner seed as the SA fit
      nc.e_known = cell.spec.piA;
      if (!cell.spec.randomized) nc.e = ELearner::logistic;
      const NuisanceSet fitted_tw = fit_nuisances(data, folds, grid, nc, &oracle);
      emit("SA_true_omega",
           detail::project_pair(estimate_sa(data, folds, fitted_tw, 1),
                                estimate_sa(data, folds, fitted_tw, 0)),
           true, ess_of(fitted_tw));
    } else if (method == "Oracle") {
      const NuisanceSet pass = passthrough_nuisances(oracle, grid);
      emit("Oracle",
           detail::project_pair(
               estimate_sa(data, folds, pass, 1, Method::Oracle),
               estimate_sa(data, folds, pass, 0, Method::Oracle)),
           true, std::numeric_limits<double>::quiet_NaN());
    } else if (method == "FullOracle") {
      const TwoSampleDataset full = generate(cell.spec, cell.n, seed, true);
      const FoldAssignment ffolds = make_folds(full, cfg.K, seed ^ 0x666f6c64ULL);
      const NuisanceSet pass = passthrough_nuisances(oracle, grid);
      emit("FullOracle",
           detail::project_pair(
               estimate_sa(full, ffolds, pass, 1, Method::FullOracle),
               estimate_sa(full, ffolds, pass, 0, Method::FullOracle)),
           true, std::numeric_limits<double>::quiet_NaN());
    } else {
      throw invalid_input("run_rep: unknown roster method '" + method + "'");
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Aggregation and report assembly.
// ---------------------------------------------------------------------------

struct ReportRow {
  std::string experiment, cell_label, method;
  std::size_t cell = 0, n = 0;
  double tau = 0;
  int reps_ok = 0, reps_failed = 0;
  double truth_delta = 0;
  double bias = 0, mse = 0, rmse = 0, variance = 0;
  double coverage = std::numeric_limits<double>::quiet_NaN();
  double ci_length = std::numeric_limits<double>::quiet_NaN();
  double ess = std::numeric_limits<double>::quiet_NaN();
  double d_iso = std::numeric_limits<double>::quiet_NaN();
  double sqrt_n_d_iso = std::numeric_limits<double>::quiet_NaN();
  double oracle_grid_err = std::numeric_limits<double>::quiet_NaN();
  double sup_err = std::numeric_limits<double>::quiet_NaN();
  double unif_cover = std::numeric_limits<double>::quiet_NaN();
  double band_width = std::numeric_limits<double>::quiet_NaN();
  double mse_ratio_vs_sa = std::numeric_limits<double>::quiet_NaN();
  double theory_ratio = std::numeric_limits<double>::quiet_NaN();
};

struct ExperimentReport {
  std::vector<ReportRow> rows;
  std::vector<RepFailure> failures;

  static const char* header() {
    return "experiment,cell,cell_label,n,method,tau,reps_ok,reps_failed,truth_delta,"
           "bias,mse,rmse,variance,coverage,ci_length,ess,d_iso,sqrt_n_d_iso,"
           "oracle_grid_err,sup_err,unif_cover,band_width,mse_ratio_vs_sa,theory_ratio";
  }
  void to_csv(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw invalid_input("cannot open " + path + " for writing");
    out << header() << "\n";
    auto cell_fmt = [](double v) {
      return std::isnan(v) ? std::string() : fmt17(v);
    };
    for (const auto& r : rows)
      out << r.experiment << ',' << r.cell << ',' << r.cell_label << ',' << r.n << ','
          << r.method << ',' << fmt17(r.tau) << ',' << r.reps_ok << ',' << r.reps_failed
          << ',' << fmt17(r.truth_delta) << ',' << fmt17(r.bias) << ',' << fmt17(r.mse)
          << ',' << fmt17(r.rmse) << ',' << fmt17(r.variance) << ','
          << cell_fmt(r.coverage) << ',' << cell_fmt(r.ci_length) << ','
          << cell_fmt(r.ess) << ',' << cell_fmt(r.d_iso) << ','
          << cell_fmt(r.sqrt_n_d_iso) << ',' << cell_fmt(r.oracle_grid_err) << ','
          << cell_fmt(r.sup_err) << ',' << cell_fmt(r.unif_cover) << ','
          << cell_fmt(r.band_width) << ',' << cell_fmt(r.mse_ratio_vs_sa) << ','
          << cell_fmt(r.theory_ratio) << "\n";
  }
};

namespace detail {

inline void rep_rows_to_csv(const std::vector<RepRow>& rows,
                            const std::vector<RepFailure>& failures,
                            const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw invalid_input("cannot open " + path + " for writing");
  out << "cell,rep,method,tau,delta_hat,se,ci_lo,ci_hi,d_iso,ess,sup_err,band_cover,"
         "band_width\n";
  auto val = [](double v) { return std::isnan(v) ? std::string() : fmt17(v); };
  for (const auto& r : rows)
    out << r.cell << ',' << r.rep << ',' << r.method << ',' << fmt17(r.tau) << ','
        << val(r.delta_hat) << ',' << val(r.se) << ',' << val(r.ci_lo) << ','
        << val(r.ci_hi) << ',' << val(r.d_iso) << ',' << val(r.ess) << ','
        << val(r.sup_err) << ',' << val(r.band_cover) << ',' << val(r.band_width) << "\n";
  for (const auto& f : failures) {
    std::string msg = f.message;
    for (char& ch : msg)
      if (ch == ',' || ch == '\n') ch = ';';
    out << f.cell << ',' << f.rep << ",ERROR,," << msg << ",,,,,,,,\n";
  }
}

inline bool load_rep_rows(const std::string& path, std::vector<RepRow>& rows,
                          std::vector<RepFailure>& failures) {
  std::ifstream in(path);
  if (!in) return false;
  std::string line;
  if (!std::getline(in, line)) return false;
  auto parse = [](const std::string& cellv) {
    return cellv.empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(cellv);
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> c;
    std::string cur;
    for (char ch : line) {
      if (ch == ',') {
        c.push_back(cur);
        cur.clear();
      } else
        cur.push_back(ch);
    }
    c.push_back(cur);
    if (c.size() != 13) return false;
    if (c[2] == "ERROR") {
      failures.push_back({std::stoul(c[0]), std::stoi(c[1]), c[4]});
      continue;
    }
    RepRow r;
    r.cell = std::stoul(c[0]);
    r.rep = std::stoi(c[1]);
    r.method = c[2];
    r.tau = std::stod(c[3]);
    r.delta_hat = parse(c[4]);
    r.se = parse(c[5]);
    r.ci_lo = parse(c[6]);
    r.ci_hi = parse(c[7]);
    r.d_iso = parse(c[8]);
    r.ess = parse(c[9]);
    r.sup_err = parse(c[10]);
    r.band_cover = parse(c[11]);
    r.band_width = parse(c[12]);
    rows.push_back(std::move(r));
  }
  return true;
}

}  // namespace detail

/// Run all replications of one cell, parallel over reps, resumable via the
/// per-cell checkpoint CSV.  Row order and content are independent of the
/// worker count because every rep derives its own seed and rows are collected
/// in rep order.
inline void run_cell(const ExperimentCell& cell, const ExperimentConfig& cfg,
                     const TruthTable& truth, std::vector<RepRow>& rows,
                     std::vector<RepFailure>& failures) {
  const std::string ckpt = cfg.out_dir + "/cell_" + cfg.experiment + "_" +
                           std::to_string(cell.id) + ".csv";
  {
    std::vector<RepRow> cached;
    std::vector<RepFailure> cached_fail;
    if (detail::load_rep_rows(ckpt, cached, cached_fail) &&
        !cached.empty()) {
      rows.insert(rows.end(), cached.begin(), cached.end());
      failures.insert(failures.end(), cached_fail.begin(), cached_fail.end());
      return;
    }
  }
  std::vector<std::vector<RepRow>> per_rep(static_cast<std::size_t>(cfg.reps));
  std::vector<RepFailure> per_fail(static_cast<std::size_t>(cfg.reps));
  std::vector<char> failed(static_cast<std::size_t>(cfg.reps), 0);

  std::atomic<int> next{0};
  auto worker = [&] {
    for (;;) {
      const int rep = next.fetch_add(1);
      if (rep >= cfg.reps) return;
      try {
        per_rep[static_cast<std::size_t>(rep)] = run_rep(cell, cfg, truth, rep);
      } catch (const std::exception& e) {
        failed[static_cast<std::size_t>(rep)] = 1;
        per_fail[static_cast<std::size_t>(rep)] = {cell.id, rep, e.what()};
      }
    }
  };
  const int W = std::max(1, cfg.workers);
  if (W == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < W; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::vector<RepRow> cell_rows;
  std::vector<RepFailure> cell_fail;
  for (int rep = 0; rep < cfg.reps; ++rep) {
    if (failed[static_cast<std::size_t>(rep)])
      cell_fail.push_back(per_fail[static_cast<std::size_t>(rep)]);
    else
      cell_rows.insert(cell_rows.end(), per_rep[static_cast<std::size_t>(rep)].begin(),
                       per_rep[static_cast<std::size_t>(rep)].end());
  }
  std::filesystem::create_directories(cfg.out_dir);
  detail::rep_rows_to_csv(cell_rows, cell_fail, ckpt);
  rows.insert(rows.end(), cell_rows.begin(), cell_rows.end());
  failures.insert(failures.end(), cell_fail.begin(), cell_fail.end());
}

inline ExperimentReport run_experiment(const ExperimentConfig& cfg) {
  if (cfg.reps < 1) throw invalid_input("run_experiment: reps must be >= 1");
  const auto cells = experiment_cells(cfg);
  TauGrid taus;
  taus.levels = cfg.taus;
  // Truth over the union of reporting and band taus, so every delta_at lookup
  // in the replication loop is a table hit instead of a fresh bisection.
  TauGrid truth_taus;
  {
    std::set<double> levels(cfg.taus.begin(), cfg.taus.end());
    levels.insert(cfg.band_taus.begin(), cfg.band_taus.end());
    truth_taus.levels.assign(levels.begin(), levels.end());
  }

  ExperimentReport report;
  for (const auto& cell : cells) {
    const TruthTable truth =
        compute_truth(cell.spec, truth_taus, cfg.n_truth, cfg.seed ^ 0x74727574ULL);
    std::vector<RepRow> rows;
    run_cell(cell, cfg, truth, rows, report.failures);

    // Oracle grid-discretization error for this cell's grid (deterministic).
    const ThresholdGrid grid = cell.grid.build(cell.n, truth.y_lo, truth.y_hi);
    TauGrid err_taus = cfg.band_taus.empty() ? taus : [&] {
      TauGrid t;
      t.levels = cfg.band_taus;
      return t;
    }();
    const double grid_err = oracle_grid_error(
        [&](double y) { return truth.psi(1, y); },
        [&](double y) { return truth.psi(0, y); }, grid, err_taus);

    // Aggregate (method, tau) groups.
    std::map<std::pair<std::string, double>, std::vector<const RepRow*>> groups;
    for (const auto& r : rows)
      if (r.cell == cell.id) groups[{r.method, r.tau}].push_back(&r);
    int cell_failures = 0;
    for (const auto& f : report.failures)
      if (f.cell == cell.id) ++cell_failures;

    for (const auto& [key, members] : groups) {
      ReportRow out;
      out.experiment = cfg.experiment;
      out.cell = cell.id;
      out.cell_label = cell.label;
      out.n = cell.n;
      out.method = key.first;
      out.tau = key.second;
      out.reps_ok = static_cast<int>(members.size());
      out.reps_failed = cell_failures;
      out.oracle_grid_err = grid_err;
      // d_iso is zero for most replications with rare heavy-tailed spikes, so
      // the across-rep median is the meaningful summary (a mean would be
      // dominated by one or two replications).
      auto median_diso = [&] {
        std::vector<double> v;
        v.reserve(members.size());
        for (const auto* r : members) v.push_back(r->d_iso);
        std::sort(v.begin(), v.end());
        const std::size_t k = v.size();
        return k == 0 ? std::numeric_limits<double>::quiet_NaN()
                      : (k % 2 ? v[k / 2] : 0.5 * (v[k / 2 - 1] + v[k / 2]));
      };
      if (key.second < 0) {
        // Uniform-band summary rows.
        double sup = 0, cov = 0, width = 0;
        for (const auto* r : members) {
          sup += r->sup_err;
          cov += r->band_cover;
          width += r->band_width;
        }
        const double m = static_cast<double>(members.size());
        out.sup_err = sup / m;
        out.unif_cover = cov / m;
        out.band_width = width / m;
        out.d_iso = median_diso();
        out.sqrt_n_d_iso = std::sqrt(static_cast<double>(cell.n)) * out.d_iso;
        report.rows.push_back(std::move(out));
        continue;
      }
      out.truth_delta = truth.delta_at(key.second);
      double sum = 0, sumsq = 0, cov = 0, covn = 0, len = 0, ess = 0, essn = 0;
      for (const auto* r : members) {
        sum += r->delta_hat;
        sumsq += (r->delta_hat - out.truth_delta) * (r->delta_hat - out.truth_delta);
        if (!std::isnan(r->se)) {
          cov += (r->ci_lo <= out.truth_delta && out.truth_delta <= r->ci_hi) ? 1 : 0;
          len += r->ci_hi - r->ci_lo;
          covn += 1;
        }
        if (!std::isnan(r->ess)) {
          ess += r->ess;
          essn += 1;
        }
      }
      const double m = static_cast<double>(members.size());
      out.bias = sum / m - out.truth_delta;
      out.mse = sumsq / m;
      out.rmse = std::sqrt(out.mse);
      out.variance = out.mse - out.bias * out.bias;
      if (covn > 0) {
        out.coverage = cov / covn;
        out.ci_length = len / covn;
      }
      if (essn > 0) out.ess = ess / essn;
      out.d_iso = median_diso();
      out.sqrt_n_d_iso = std::sqrt(static_cast<double>(cell.n)) * out.d_iso;
      report.rows.push_back(std::move(out));
    }

    // Derived columns: MSE ratios vs SA and the oracle theory ratio.
    for (auto& r : report.rows) {
      if (r.cell != cell.id || r.tau < 0) continue;
      for (const auto& sa : report.rows)
        if (sa.cell == cell.id && sa.method == "SA" && sa.tau == r.tau &&
            r.method != "SA" && sa.mse > 0)
          r.mse_ratio_vs_sa = r.mse / sa.mse;
      if (r.method == "NoS")
        r.theory_ratio =
            theory_ratio(cell.spec, truth, r.tau, cfg.n_theory, cfg.seed ^ 0x7468ULL);
    }
  }
  return report;
}

}  // namespace tqte
