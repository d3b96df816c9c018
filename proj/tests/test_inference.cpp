#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "tqte/inference.hpp"

using namespace tqte;

namespace {

/// Location-shift design: arm 1 outcomes are arm 0 outcomes plus 0.3, so the
/// quantile contrast is exactly 0.3 at every level.
DiscreteLaw shift_law() {
  DiscreteLaw law;
  law.pi0 = 0.4;
  law.pi1 = 0.6;
  Vec x0(1), x1(1);
  x0 << -0.5;
  x1 << 0.5;
  law.x_support = {x0, x1};
  law.p_x0 = {0.3, 0.7};
  law.p_x1 = {0.6, 0.4};
  law.e1 = {0.5, 0.5};
  Vec s0(1), s1(1);
  s0 << 0.0;
  s1 << 1.0;
  law.s_support = {s0, s1};
  law.continuous_y = true;
  law.p_s.resize(2);
  law.rho_.resize(2);
  law.mu.resize(2);
  law.sigma.resize(2);
  for (std::size_t i = 0; i < 2; ++i)
    for (int a = 0; a < 2; ++a) {
      law.p_s[i][a] = {0.5, 0.5};
      law.rho_[i][a] = {0.7, 0.7};
      law.mu[i][a] = {0.3 * a + law.x_support[i](0), 0.3 * a + law.x_support[i](0) + 0.5};
      law.sigma[i][a] = {1.0, 1.0};
    }
  law.check();
  return law;
}

FoldAssignment trivial_folds(std::size_t n) {
  FoldAssignment f;
  f.K = 1;
  f.fold_of.assign(n, 1);
  return f;
}

MonotoneCdf project(const CdfEstimate& est) {
  std::vector<double> raw(est.raw.data(), est.raw.data() + est.raw.size());
  return pava_box(raw, est.grid);
}

/// Synthetic inference object with i.i.d. standard-normal influence columns.
QteInference synthetic_qte(std::size_t n, std::size_t L, std::uint64_t seed) {
  QteInference q;
  for (std::size_t l = 0; l < L; ++l)
    q.taus.levels.push_back(static_cast<double>(l + 1) / static_cast<double>(L + 1));
  q.n = n;
  q.influence.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(L));
  Rng rng(seed);
  for (Eigen::Index i = 0; i < q.influence.rows(); ++i)
    for (Eigen::Index j = 0; j < q.influence.cols(); ++j) q.influence(i, j) = rng.normal();
  for (std::size_t l = 0; l < L; ++l) {
    const double m2 = q.influence.col(static_cast<Eigen::Index>(l)).squaredNorm() /
                      static_cast<double>(n);
    q.delta.push_back(0.0);
    q.se.push_back(std::sqrt(m2 / static_cast<double>(n)));
    q.q1.push_back(0);
    q.q0.push_back(0);
    q.ci_lo.push_back(0);
    q.ci_hi.push_back(0);
  }
  return q;
}

}  // namespace

TEST_CASE("effective sample size of weights") {
  Vec w(2);
  w << 1.0, 2.0;
  CHECK(ess_omega(w) == Catch::Approx(1.8));
  Vec eq = Vec::Ones(7);
  CHECK(ess_omega(eq) == Catch::Approx(7.0));
  Vec neg(2);
  neg << 1.0, -0.5;
  CHECK_THROWS_AS(ess_omega(neg), invalid_input);
  CHECK_THROWS_AS(ess_omega(Vec()), invalid_input);
  CHECK_THROWS_AS(ess_omega(Vec::Zero(3)), invalid_input);
}

TEST_CASE("pointwise qte recovers a pure location shift with coverage") {
  const auto law = shift_law();
  const auto grid = fixed_grid(41, -3.5, 3.5);
  const auto set = passthrough_nuisances(law.oracle_nuisances(), grid);
  const auto data = law.sample(20000, 77);
  const auto folds = trivial_folds(data.n());
  const auto cdf1 = estimate_sa(data, folds, set, 1);
  const auto cdf0 = estimate_sa(data, folds, set, 0);
  TauGrid taus;
  taus.levels = {0.25, 0.5, 0.75};
  const auto qte = qte_pointwise(cdf1, cdf0, project(cdf1), project(cdf0), taus, 0.05);
  for (std::size_t l = 0; l < 3; ++l) {
    CHECK(qte.delta[l] == Catch::Approx(0.3).margin(0.1));
    CHECK(qte.se[l] > 0.0);
    CHECK(qte.ci_lo[l] < qte.ci_hi[l]);
    CHECK_FALSE(qte.saturated[l]);
    CHECK_FALSE(qte.floor1[l]);
  }
  // The simultaneous band contains the truth at every level here.
  const auto band = multiplier_band(qte, 500, 0.05, 9);
  CHECK(band.c_star > 1.5);
  for (std::size_t l = 0; l < 3; ++l) {
    CHECK(band.lo[l] <= 0.3);
    CHECK(band.hi[l] >= 0.3);
    CHECK(band.lo[l] <= qte.ci_lo[l] + 1e-12);
    CHECK(band.hi[l] >= qte.ci_hi[l] - 1e-12);
  }

  // CSV output: header plus one row per tau.
  const std::string path = (std::filesystem::temp_directory_path() / "tqte_band.csv").string();
  write_band_csv(qte, band, path);
  std::ifstream in(path);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) ++lines;
  CHECK(lines == 4);
  std::remove(path.c_str());
}

TEST_CASE("pointwise qte rejects invalid inputs") {
  const auto law = shift_law();
  const auto grid = fixed_grid(11, -3.0, 3.0);
  const auto set = passthrough_nuisances(law.oracle_nuisances(), grid);
  const auto data = law.sample(400, 3);
  const auto folds = trivial_folds(data.n());
  const auto cdf1 = estimate_sa(data, folds, set, 1);
  const auto plug = estimate_plugin(data, folds, set, 0);
  TauGrid taus;
  taus.levels = {0.5};
  CHECK_THROWS_AS(qte_pointwise(cdf1, plug, project(cdf1), project(cdf1), taus, 0.05),
                  invalid_input);
  CHECK_THROWS_AS(qte_pointwise(cdf1, cdf1, project(cdf1), project(cdf1), taus, 1.5),
                  invalid_input);
}

TEST_CASE("single-tau critical value approaches the normal quantile") {
  const auto qte = synthetic_qte(2000, 1, 15);
  const auto band = multiplier_band(qte, 4000, 0.05, 21);
  CHECK(band.c_star == Catch::Approx(1.96).margin(0.12));
}

TEST_CASE("band is deterministic in the seed and monotone in alpha") {
  const auto qte = synthetic_qte(500, 5, 8);
  const auto a = multiplier_band(qte, 800, 0.05, 101);
  const auto b = multiplier_band(qte, 800, 0.05, 101);
  CHECK(a.c_star == b.c_star);
  const auto c = multiplier_band(qte, 800, 0.05, 102);
  CHECK(a.c_star != c.c_star);
  const auto tight = multiplier_band(qte, 800, 0.20, 101);
  const auto wide = multiplier_band(qte, 800, 0.01, 101);
  CHECK(tight.c_star < a.c_star);
  CHECK(a.c_star < wide.c_star);
  // More taus widen the sup.
  const auto one = multiplier_band(synthetic_qte(500, 1, 8), 800, 0.05, 101);
  CHECK(one.c_star < a.c_star + 1e-12);
  CHECK_THROWS_AS(multiplier_band(qte, 50, 0.05, 1), invalid_input);
}

TEST_CASE("multiplier kinds all give sane critical values") {
  const auto qte = synthetic_qte(1500, 3, 4);
  for (auto kind : {MultiplierKind::gaussian, MultiplierKind::rademacher,
                    MultiplierKind::mammen}) {
    const auto band = multiplier_band(qte, 1000, 0.05, 5, kind);
    CHECK(band.c_star > 1.7);
    CHECK(band.c_star < 3.2);
  }
}

TEST_CASE("constant multipliers collapse the bootstrap to zero") {
  // The bootstrap process uses centered influence columns, so a constant
  // multiplier annihilates every draw; this exercises the xi_gen hook.
  const auto qte = synthetic_qte(300, 4, 2);
  const std::function<double(Rng&)> ones = [](Rng&) { return 1.0; };
  const auto band = multiplier_band(qte, 200, 0.05, 7, MultiplierKind::gaussian, &ones);
  CHECK(band.c_star == Catch::Approx(0.0).margin(1e-12));
  for (std::size_t l = 0; l < 4; ++l) CHECK(band.lo[l] == Catch::Approx(band.hi[l]).margin(1e-12));
}

TEST_CASE("degenerate influence columns are excluded with a warning") {
  auto qte = synthetic_qte(400, 3, 6);
  qte.influence.col(1).setZero();
  qte.se[1] = 0.0;
  const auto band = multiplier_band(qte, 300, 0.05, 3);
  CHECK(band.excluded[1]);
  CHECK_FALSE(band.excluded[0]);
  CHECK_FALSE(band.warning.empty());
  CHECK(band.lo[1] == band.hi[1]);  // zero se: band degenerates at that tau

  auto dead = synthetic_qte(100, 2, 1);
  dead.influence.setZero();
  CHECK_THROWS_AS(multiplier_band(dead, 300, 0.05, 3), estimation_error);
}

TEST_CASE("efficiency gain wrappers defer to the law") {
  const auto law = make_random_law(6, {.continuous_y = true, .force_rho_x = true});
  const auto [lo, hi] = law.y_range();
  const double y = 0.5 * (lo + hi);
  CHECK(efficiency_gain(law, 1, y) == Catch::Approx(law.efficiency_gain(1, y)));
  CHECK(quantile_gain(law, 0.5) == Catch::Approx(law.quantile_gain(0.5)));
}
