#pragma once

#include <array>
#include <functional>
#include <vector>

#include <nlohmann/json.hpp>

#include "tqte/dataset.hpp"
#include "tqte/learners.hpp"

namespace tqte {

/// Closed-form nuisance callables, either from a discrete law or a simulation
/// design.  Ranges follow the same positivity constraints as fitted nuisances.
struct OracleNuisances {
  std::function<double(int a, double y, const Vec& x, const Vec& s)> m;
  std::function<double(int a, double y, const Vec& x)> g;
  std::function<double(int a, const Vec& x)> e;
  std::function<double(int a, const Vec& x, const Vec& s)> rho;
  std::function<double(const Vec& x)> omega;
  // No-surrogate parts: g fitted on validated units only and the X-only
  // validation propensity (equal to g and rho under surrogate-ignorable
  // labeling).
  std::function<double(int a, double y, const Vec& x)> g_nos;
  std::function<double(int a, const Vec& x)> rho0;
};

/// Exact finite-support observed-data law.  X and S live on finite supports;
/// Y given (A, X, S, M=1) is either finite-support (for CDF identities) or
/// Gaussian location-scale per cell (for quantile/density checks).  All
/// moments of the one-step signal are enumerable in closed form because the
/// outcome enters only through 1(Y<=y), whose conditional mean and variance
/// are m and m(1-m).
struct DiscreteLaw {
  double pi0 = 0.5, pi1 = 0.5;
  std::vector<Vec> x_support;
  std::vector<double> p_x0, p_x1;  // pmfs of X | R=r over x_support
  std::vector<double> e1;          // P(A=1 | X=x_i, R=1)
  std::vector<Vec> s_support;
  // Indexed [x][a][s]:
  std::vector<std::array<std::vector<double>, 2>> p_s;   // pmf of S | A,X
  std::vector<std::array<std::vector<double>, 2>> rho_;  // P(M=1 | A,X,S)
  bool continuous_y = false;
  std::vector<double> y_support;  // finite-support variant
  std::vector<std::array<std::vector<std::vector<double>>, 2>> p_y;  // [x][a][s][y]
  std::vector<std::array<std::vector<double>, 2>> mu, sigma;  // Gaussian variant

  std::size_t nx() const { return x_support.size(); }
  std::size_t ns() const { return s_support.size(); }

  void check() const {
    auto near1 = [](double v) { return std::abs(v - 1.0) <= 1e-12; };
    if (!near1(pi0 + pi1) || pi0 <= 0 || pi1 <= 0)
      throw invalid_input("DiscreteLaw: pi0 + pi1 must be 1 with both positive");
    double s0 = 0, s1 = 0;
    for (std::size_t i = 0; i < nx(); ++i) {
      s0 += p_x0[i];
      s1 += p_x1[i];
      if (p_x0[i] > 0 && p_x1[i] <= 0)
        throw invalid_input("DiscreteLaw: target support not dominated by source");
    }
    if (!near1(s0) || !near1(s1)) throw invalid_input("DiscreteLaw: X pmfs must sum to 1");
    for (std::size_t i = 0; i < nx(); ++i)
      for (int a = 0; a < 2; ++a) {
        double ss = 0;
        for (std::size_t k = 0; k < ns(); ++k) {
          ss += p_s[i][a][k];
          if (!(rho_[i][a][k] > 0 && rho_[i][a][k] <= 1))
            throw invalid_input("DiscreteLaw: rho outside (0,1]");
        }
        if (!near1(ss)) throw invalid_input("DiscreteLaw: S pmf must sum to 1");
        if (!continuous_y)
          for (std::size_t k = 0; k < ns(); ++k) {
            double sy = 0;
            for (double v : p_y[i][a][k]) sy += v;
            if (!near1(sy)) throw invalid_input("DiscreteLaw: Y pmf must sum to 1");
          }
      }
  }

  double omega(std::size_t xi) const {
    return p_x0[xi] / p_x1[xi];
  }
  double e(int a, std::size_t xi) const { return a == 1 ? e1[xi] : 1.0 - e1[xi]; }
  double rho(int a, std::size_t xi, std::size_t si) const { return rho_[xi][a][si]; }

  /// m_a(y, x, s) = P(Y <= y | R=1, A=a, X=x, S=s, M=1).
  double m(int a, double y, std::size_t xi, std::size_t si) const {
    if (continuous_y) {
      return norm_cdf((y - mu[xi][a][si]) / sigma[xi][a][si]);
    }
    double c = 0;
    for (std::size_t k = 0; k < y_support.size(); ++k)
      if (y_support[k] <= y) c += p_y[xi][a][si][k];
    return c;
  }

  double g(int a, double y, std::size_t xi) const {
    double v = 0;
    for (std::size_t k = 0; k < ns(); ++k) v += p_s[xi][a][k] * m(a, y, xi, k);
    return v;
  }

  /// rho0_a(x) = E{rho_a(x,S) | A=a, X=x}; equals rho_a(x,s) for all s under
  /// surrogate-ignorable labeling.
  double rho0(int a, std::size_t xi) const {
    double v = 0;
    for (std::size_t k = 0; k < ns(); ++k) v += p_s[xi][a][k] * rho_[xi][a][k];
    return v;
  }

  bool satisfies_rho_x(double tol, std::string* witness = nullptr) const {
    for (std::size_t i = 0; i < nx(); ++i)
      for (int a = 0; a < 2; ++a)
        for (std::size_t k = 1; k < ns(); ++k)
          if (std::abs(rho_[i][a][k] - rho_[i][a][0]) > tol) {
            if (witness)
              *witness = "x index " + std::to_string(i) + ", arm " + std::to_string(a) +
                         ", s indices 0 and " + std::to_string(k);
            return false;
          }
    return true;
  }

  /// Target-representation psi_a(y) = E_0{g_a(y, X)}; asserts agreement with
  /// the omega-weighted source representation E_1{omega g}.
  double true_psi(int a, double y) const {
    double target = 0, source = 0;
    for (std::size_t i = 0; i < nx(); ++i) {
      const double gv = g(a, y, i);
      target += p_x0[i] * gv;
      source += p_x1[i] * omega(i) * gv;
    }
    if (std::abs(target - source) > 1e-12)
      throw estimation_error("DiscreteLaw: identification representations disagree by " +
                             fmt17(target - source));
    return target;
  }

  /// Quantile of the target CDF (continuous-Y laws) by bisection.
  double true_quantile(int a, double tau, double lo, double hi) const {
    for (int i = 0; i < 200 && hi - lo > 1e-12 * std::max(1.0, std::abs(hi)); ++i) {
      const double mid = 0.5 * (lo + hi);
      (true_psi(a, mid) >= tau ? hi : lo) = mid;
    }
    return 0.5 * (lo + hi);
  }

  /// Target density f_a(y) (continuous-Y laws only).
  double true_density(int a, double y) const {
    if (!continuous_y) throw invalid_input("true_density requires a continuous-Y law");
    double f = 0;
    for (std::size_t i = 0; i < nx(); ++i)
      for (std::size_t k = 0; k < ns(); ++k)
        f += p_x0[i] * p_s[i][a][k] *
             norm_pdf((y - mu[i][a][k]) / sigma[i][a][k]) / sigma[i][a][k];
    return f;
  }

  /// Span of the outcome distribution (for bisection / grids).
  std::pair<double, double> y_range() const {
    if (continuous_y) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t i = 0; i < nx(); ++i)
        for (int a = 0; a < 2; ++a)
          for (std::size_t k = 0; k < ns(); ++k) {
            lo = std::min(lo, mu[i][a][k] - 8 * sigma[i][a][k]);
            hi = std::max(hi, mu[i][a][k] + 8 * sigma[i][a][k]);
          }
      return {lo, hi};
    }
    return {y_support.front() - 1.0, y_support.back() + 1.0};
  }

  // -- EIF enumeration ------------------------------------------------------

  struct EifMoments {
    double mean = 0.0;
    double variance = 0.0;  // V_a(y)
  };

  /// Enumerate a functional of the three EIF components over the full
  /// observation space.  For finite-support Y the validation component is
  /// enumerated outcome by outcome; for Gaussian Y its conditional first and
  /// second moments (0 and m(1-m)) enter analytically.
  template <typename Accumulate>
  void enumerate_eif(int a, double y, double psi, Accumulate&& acc) const {
    for (std::size_t i = 0; i < nx(); ++i) {
      const double t1 = (g(a, y, i) - psi) / pi0;
      acc(pi0 * p_x0[i], t1, 0.0, 0.0, 0.0);  // target branch; T2=T3=0
      const double om = omega(i);
      for (int arm = 0; arm < 2; ++arm) {
        const double pe = e(arm, i);
        for (std::size_t k = 0; k < ns(); ++k) {
          const double pcell = pi1 * p_x1[i] * pe * p_s[i][arm][k];
          const double rr = rho_[i][arm][k];
          if (arm != a) {  // indicator 1(A=a) kills both corrections
            acc(pcell, 0.0, 0.0, 0.0, 0.0);
            continue;
          }
          const double mv = m(a, y, i, k);
          const double t2 = om / (pi1 * pe) * (mv - g(a, y, i));
          const double w3 = om / (pi1 * pe * rr);
          // M = 0 branch: no validation term.
          acc(pcell * (1.0 - rr), 0.0, t2, 0.0, 0.0);
          if (!continuous_y) {
            for (std::size_t yk = 0; yk < y_support.size(); ++yk) {
              const double z = (y_support[yk] <= y) ? 1.0 : 0.0;
              acc(pcell * rr * p_y[i][a][k][yk], 0.0, t2, w3 * (z - mv), 0.0);
            }
          } else {
            acc(pcell * rr, 0.0, t2, 0.0, w3 * w3 * mv * (1.0 - mv));
          }
        }
      }
    }
  }

  /// Exact mean and variance of the efficient influence function; the mean is
  /// asserted to be 0 within 1e-12.
  EifMoments eif_moments(int a, double y) const {
    const double psi = true_psi(a, y);
    double mean = 0, var = 0;
    enumerate_eif(a, y, psi,
                  [&](double p, double t1, double t2, double t3, double t3_var) {
                    const double phi = t1 + t2 + t3;
                    mean += p * phi;
                    var += p * (phi * phi + t3_var);
                  });
    if (std::abs(mean) > 1e-12)
      throw estimation_error("DiscreteLaw: EIF mean is " + fmt17(mean) + ", expected 0");
    return {mean, var};
  }

  /// Covariance matrix of the three EIF components (target, surrogate
  /// process, validation outcome), by enumeration; the off-diagonals come out
  /// as exact zeros.
  Mat three_orthogonal_components(int a, double y) const {
    const double psi = true_psi(a, y);
    Mat cov = Mat::Zero(3, 3);
    enumerate_eif(a, y, psi,
                  [&](double p, double t1, double t2, double t3, double t3_var) {
                    Vec t(3);
                    t << t1, t2, t3;
                    cov += p * (t * t.transpose());
                    cov(2, 2) += p * t3_var;
                  });
    return cov;
  }

  /// Benchmark (no-surrogate) variance V_{a,0}(y); requires surrogate-
  /// ignorable labeling.
  double benchmark_variance(int a, double y) const {
    std::string witness;
    if (!satisfies_rho_x(1e-12, &witness))
      throw invalid_input("benchmark_variance: rho depends on s at " + witness);
    const double psi = true_psi(a, y);
    double var = 0;
    for (std::size_t i = 0; i < nx(); ++i) {
      const double t1 = (g(a, y, i) - psi) / pi0;
      var += pi0 * p_x0[i] * t1 * t1;
      const double om = omega(i);
      const double pe = e(a, i);
      const double r0 = rho0(a, i);
      const double gv = g(a, y, i);
      const double w3 = om / (pi1 * pe * r0);
      for (std::size_t k = 0; k < ns(); ++k) {
        const double pcell = pi1 * p_x1[i] * pe * p_s[i][a][k];
        const double mv = m(a, y, i, k);
        // (Z - g)^2 has conditional mean m(1-m) + (m-g)^2.
        var += pcell * r0 * w3 * w3 * (mv * (1.0 - mv) + (mv - gv) * (mv - gv));
      }
    }
    return var;
  }

  /// Closed-form efficiency gain V_{a,0}(y) - V_a(y); also enumerates the
  /// brute-force difference and asserts agreement within 1e-10.
  double efficiency_gain(int a, double y) const {
    std::string witness;
    if (!satisfies_rho_x(1e-12, &witness))
      throw invalid_input("efficiency_gain: surrogate-ignorable labeling fails at " +
                          witness);
    double gain = 0;
    for (std::size_t i = 0; i < nx(); ++i) {
      const double om = omega(i);
      const double pe = e(a, i);
      const double r0 = rho0(a, i);
      double m1 = 0, m2 = 0;
      for (std::size_t k = 0; k < ns(); ++k) {
        const double mv = m(a, y, i, k);
        m1 += p_s[i][a][k] * mv;
        m2 += p_s[i][a][k] * mv * mv;
      }
      const double cond_var = std::max(m2 - m1 * m1, 0.0);
      gain += p_x1[i] * om * om / pe * (1.0 - r0) / r0 * cond_var;
    }
    gain /= pi1;
    const double brute = benchmark_variance(a, y) - eif_moments(a, y).variance;
    if (std::abs(gain - brute) > 1e-10)
      throw estimation_error("efficiency_gain: closed form " + fmt17(gain) +
                             " != enumerated difference " + fmt17(brute));
    return gain;
  }

  /// Enumerated variance of the QTE influence function at level tau
  /// (continuous-Y laws): E[phi_{Delta,tau}^2].
  double qte_if_variance(double tau) const {
    const auto [ylo, yhi] = y_range();
    const double q1 = true_quantile(1, tau, ylo, yhi);
    const double q0 = true_quantile(0, tau, ylo, yhi);
    const double f1 = true_density(1, q1);
    const double f0 = true_density(0, q0);
    const double psi1 = true_psi(1, q1);
    const double psi0 = true_psi(0, q0);
    double var = 0;
    for (std::size_t i = 0; i < nx(); ++i) {
      // Target cells carry both arms' target terms (correlated).
      const double t = -(g(1, q1, i) - psi1) / (pi0 * f1) +
                       (g(0, q0, i) - psi0) / (pi0 * f0);
      var += pi0 * p_x0[i] * t * t;
      const double om = omega(i);
      for (int a = 0; a < 2; ++a) {
        const double pe = e(a, i);
        const double coef = (a == 1) ? -1.0 / f1 : 1.0 / f0;
        const double qa = (a == 1) ? q1 : q0;
        for (std::size_t k = 0; k < ns(); ++k) {
          const double pcell = pi1 * p_x1[i] * pe * p_s[i][a][k];
          const double mv = m(a, qa, i, k);
          const double t2 = om / (pi1 * pe) * (mv - g(a, qa, i));
          const double rr = rho_[i][a][k];
          const double w3 = om / (pi1 * pe * rr);
          var += pcell * (coef * coef) * (t2 * t2 + rr * w3 * w3 * mv * (1.0 - mv));
        }
      }
    }
    return var;
  }

  /// Quantile-level efficiency gain summed over arms (continuous-Y laws).
  double quantile_gain(double tau) const {
    const auto [ylo, yhi] = y_range();
    double total = 0;
    for (int a = 0; a < 2; ++a) {
      const double qa = true_quantile(a, tau, ylo, yhi);
      const double fa = true_density(a, qa);
      total += efficiency_gain(a, qa) / (fa * fa);
    }
    return total;
  }

  // -- Sampling -------------------------------------------------------------

  TwoSampleDataset sample(std::size_t n, std::uint64_t seed) const {
    if (n == 0) throw invalid_input("DiscreteLaw::sample: n must be >= 1");
    Rng rng(seed);
    TwoSampleDataset data;
    data.p = static_cast<std::size_t>(x_support.front().size());
    data.q = static_cast<std::size_t>(s_support.front().size());
    data.observations.reserve(n);
    for (std::size_t t = 0; t < n; ++t) {
      Observation o;
      o.r = (rng.uniform() < pi1) ? 1 : 0;
      const auto& px = (o.r == 0) ? p_x0 : p_x1;
      const std::size_t xi = rng.categorical(px);
      const Vec& xv = x_support[xi];
      o.x.assign(xv.data(), xv.data() + xv.size());
      if (o.r == 1) {
        const int a = (rng.uniform() < e1[xi]) ? 1 : 0;
        o.a = a;
        const std::size_t si = rng.categorical(p_s[xi][a]);
        const Vec& sv = s_support[si];
        o.s = std::vector<double>(sv.data(), sv.data() + sv.size());
        const int mv = (rng.uniform() < rho_[xi][a][si]) ? 1 : 0;
        o.m = mv;
        if (mv == 1) {
          if (continuous_y)
            o.y = rng.normal(mu[xi][a][si], sigma[xi][a][si]);
          else
            o.y = y_support[rng.categorical(p_y[xi][a][si])];
        }
      }
      data.observations.push_back(std::move(o));
    }
    data.check();
    return data;
  }

  /// Index of the support point matching x exactly (sampled data only).
  std::size_t x_index(const Vec& x) const {
    for (std::size_t i = 0; i < nx(); ++i)
      if ((x_support[i] - x).lpNorm<Eigen::Infinity>() < 1e-12) return i;
    throw invalid_input("DiscreteLaw: x not on support");
  }
  std::size_t s_index(const Vec& s) const {
    for (std::size_t k = 0; k < ns(); ++k)
      if ((s_support[k] - s).lpNorm<Eigen::Infinity>() < 1e-12) return k;
    throw invalid_input("DiscreteLaw: s not on support");
  }

  OracleNuisances oracle_nuisances() const {
    OracleNuisances nu;
    nu.m = [this](int a, double y, const Vec& x, const Vec& s) {
      return m(a, y, x_index(x), s_index(s));
    };
    nu.g = [this](int a, double y, const Vec& x) { return g(a, y, x_index(x)); };
    nu.e = [this](int a, const Vec& x) { return e(a, x_index(x)); };
    nu.rho = [this](int a, const Vec& x, const Vec& s) {
      return rho(a, x_index(x), s_index(s));
    };
    nu.omega = [this](const Vec& x) { return omega(x_index(x)); };
    nu.g_nos = nu.g;
    nu.rho0 = [this](int a, const Vec& x) { return rho0(a, x_index(x)); };
    return nu;
  }

  // -- Serialization (regression-test fixtures) -----------------------------

  json to_json() const {
    json j;
    j["pi0"] = pi0;
    j["pi1"] = pi1;
    auto vecs = [](const std::vector<Vec>& vs) {
      json out = json::array();
      for (const auto& v : vs)
        out.push_back(std::vector<double>(v.data(), v.data() + v.size()));
      return out;
    };
    j["x_support"] = vecs(x_support);
    j["s_support"] = vecs(s_support);
    j["p_x0"] = p_x0;
    j["p_x1"] = p_x1;
    j["e1"] = e1;
    j["p_s"] = p_s;
    j["rho"] = rho_;
    j["continuous_y"] = continuous_y;
    if (continuous_y) {
      j["mu"] = mu;
      j["sigma"] = sigma;
    } else {
      j["y_support"] = y_support;
      j["p_y"] = p_y;
    }
    return j;
  }

  static DiscreteLaw from_json(const json& j) {
    DiscreteLaw law;
    law.pi0 = j.at("pi0");
    law.pi1 = j.at("pi1");
    auto vecs = [](const json& arr) {
      std::vector<Vec> out;
      for (const auto& v : arr) {
        const auto d = v.get<std::vector<double>>();
        out.push_back(Eigen::Map<const Vec>(d.data(), static_cast<Eigen::Index>(d.size())));
      }
      return out;
    };
    law.x_support = vecs(j.at("x_support"));
    law.s_support = vecs(j.at("s_support"));
    law.p_x0 = j.at("p_x0").get<std::vector<double>>();
    law.p_x1 = j.at("p_x1").get<std::vector<double>>();
    law.e1 = j.at("e1").get<std::vector<double>>();
    law.p_s = j.at("p_s").get<decltype(law.p_s)>();
    law.rho_ = j.at("rho").get<decltype(law.rho_)>();
    law.continuous_y = j.at("continuous_y");
    if (law.continuous_y) {
      law.mu = j.at("mu").get<decltype(law.mu)>();
      law.sigma = j.at("sigma").get<decltype(law.sigma)>();
    } else {
      law.y_support = j.at("y_support").get<std::vector<double>>();
      law.p_y = j.at("p_y").get<decltype(law.p_y)>();
    }
    law.check();
    return law;
  }
};

struct RandomLawOptions {
  bool continuous_y = false;
  bool force_rho_x = false;  // rho a function of x only
  double eps = 0.05;         // propensity bounds
  std::size_t max_x = 4, max_s = 3, max_y = 5;
};

/// Seeded random law: Dirichlet pmfs, uniform(eps, 1-eps) propensities.
inline DiscreteLaw make_random_law(std::uint64_t seed, const RandomLawOptions& opt = {}) {
  Rng rng(seed);
  DiscreteLaw law;
  const std::size_t nx = 2 + rng.bounded(opt.max_x - 1);
  const std::size_t ns = 2 + rng.bounded(opt.max_s - 1);
  const std::size_t ny = opt.continuous_y ? 0 : 2 + rng.bounded(opt.max_y - 1);
  law.pi1 = rng.uniform(0.35, 0.65);
  law.pi0 = 1.0 - law.pi1;
  for (std::size_t i = 0; i < nx; ++i) {
    Vec x(1);
    x << static_cast<double>(i) - 0.5 * static_cast<double>(nx);
    law.x_support.push_back(x);
  }
  for (std::size_t k = 0; k < ns; ++k) {
    Vec s(1);
    s << static_cast<double>(k);
    law.s_support.push_back(s);
  }
  law.p_x0 = rng.dirichlet(nx, 2.0);
  law.p_x1 = rng.dirichlet(nx, 2.0);
  for (auto& v : law.p_x0) v = std::max(v, 0.02);
  for (auto& v : law.p_x1) v = std::max(v, 0.02);
  auto renorm = [](std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    for (double& x : v) x /= s;
  };
  renorm(law.p_x0);
  renorm(law.p_x1);
  if (!opt.continuous_y) {
    law.y_support.resize(ny);
    for (std::size_t k = 0; k < ny; ++k) law.y_support[k] = static_cast<double>(k);
  }
  law.continuous_y = opt.continuous_y;
  law.e1.resize(nx);
  law.p_s.resize(nx);
  law.rho_.resize(nx);
  if (opt.continuous_y) {
    law.mu.resize(nx);
    law.sigma.resize(nx);
  } else {
    law.p_y.resize(nx);
  }
  for (std::size_t i = 0; i < nx; ++i) {
    law.e1[i] = rng.uniform(opt.eps, 1.0 - opt.eps);
    for (int a = 0; a < 2; ++a) {
      law.p_s[i][a] = rng.dirichlet(ns, 2.0);
      for (auto& v : law.p_s[i][a]) v = std::max(v, 0.02);
      renorm(law.p_s[i][a]);
      law.rho_[i][a].resize(ns);
      const double rho_x = rng.uniform(opt.eps, 1.0 - opt.eps);
      for (std::size_t k = 0; k < ns; ++k)
        law.rho_[i][a][k] =
            opt.force_rho_x ? rho_x : rng.uniform(opt.eps, 1.0 - opt.eps);
      if (opt.continuous_y) {
        law.mu[i][a].resize(ns);
        law.sigma[i][a].resize(ns);
        for (std::size_t k = 0; k < ns; ++k) {
          law.mu[i][a][k] = rng.uniform(-2.0, 2.0) + (a == 1 ? 0.5 : 0.0);
          law.sigma[i][a][k] = rng.uniform(0.5, 1.5);
        }
      } else {
        law.p_y[i][a].resize(ns);
        for (std::size_t k = 0; k < ns; ++k) {
          law.p_y[i][a][k] = rng.dirichlet(ny, 1.5);
        }
      }
    }
  }
  law.check();
  return law;
}

}  // namespace tqte
