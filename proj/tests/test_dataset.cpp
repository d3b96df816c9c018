#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "tqte/dataset.hpp"

using namespace tqte;

namespace {

Observation target_obs(std::vector<double> x) {
  Observation o;
  o.r = 0;
  o.x = std::move(x);
  return o;
}

Observation source_obs(std::vector<double> x, int a, std::vector<double> s, int m,
                       double y = 0.0) {
  Observation o;
  o.r = 1;
  o.x = std::move(x);
  o.a = a;
  o.s = std::move(s);
  o.m = m;
  if (m == 1) o.y = y;
  return o;
}

TwoSampleDataset small_dataset(std::size_t n_target = 8, std::size_t n_source = 16) {
  TwoSampleDataset d;
  d.p = 2;
  d.q = 1;
  for (std::size_t i = 0; i < n_target; ++i)
    d.observations.push_back(target_obs({0.1 * static_cast<double>(i), -1.0}));
  for (std::size_t i = 0; i < n_source; ++i) {
    const int a = static_cast<int>(i % 2);
    const int m = (i % 4 < 2) ? 1 : 0;
    d.observations.push_back(
        source_obs({0.2 * static_cast<double>(i), 1.0}, a, {0.5}, m, 0.3 * static_cast<double>(i)));
  }
  return d;
}

}  // namespace

TEST_CASE("observation invariants are enforced") {
  Observation bad;
  bad.r = 0;
  bad.x = {1.0};
  bad.a = 1;  // target rows must not carry source fields
  CHECK_THROWS_AS(bad.check(), invalid_input);

  Observation missing_y;
  missing_y.r = 1;
  missing_y.x = {1.0};
  missing_y.a = 0;
  missing_y.s = std::vector<double>{0.0};
  missing_y.m = 1;  // m=1 requires y
  CHECK_THROWS_AS(missing_y.check(), invalid_input);

  Observation stray_y;
  stray_y.r = 1;
  stray_y.x = {1.0};
  stray_y.a = 0;
  stray_y.s = std::vector<double>{0.0};
  stray_y.m = 0;
  stray_y.y = 1.0;  // m=0 forbids y
  CHECK_THROWS_AS(stray_y.check(), invalid_input);

  CHECK_NOTHROW(small_dataset().check());
}

TEST_CASE("dataset rejects single-population samples and dim mismatches") {
  TwoSampleDataset d;
  d.p = 1;
  d.observations.push_back(target_obs({1.0}));
  CHECK_THROWS_AS(d.check(), invalid_input);

  auto e = small_dataset();
  e.observations[0].x.push_back(9.0);
  CHECK_THROWS_AS(e.check(), invalid_input);
}

TEST_CASE("pi_hat counts populations") {
  const auto d = small_dataset(10, 30);
  CHECK(d.n() == 40);
  CHECK(d.pi_hat(0) == Catch::Approx(0.25));
  CHECK(d.pi_hat(1) == Catch::Approx(0.75));
}

TEST_CASE("folds are stratified, balanced, and seed-deterministic") {
  const auto d = small_dataset(20, 60);
  const auto f = make_folds(d, 5, 99);
  REQUIRE(f.K == 5);
  // Every fold holds target units and validated source units per arm.
  for (int k = 1; k <= 5; ++k) {
    int n_target = 0;
    int validated[2] = {0, 0};
    for (std::size_t i = 0; i < d.n(); ++i) {
      if (f.fold_of[i] != k) continue;
      const auto& o = d.observations[i];
      if (o.r == 0)
        ++n_target;
      else if (*o.m == 1)
        ++validated[*o.a];
    }
    CHECK(n_target >= 2);
    CHECK(validated[0] >= 1);
    CHECK(validated[1] >= 1);
  }
  const auto f2 = make_folds(d, 5, 99);
  CHECK(f.fold_of == f2.fold_of);
  const auto f3 = make_folds(d, 5, 100);
  CHECK(f.fold_of != f3.fold_of);
}

TEST_CASE("folds fail loudly when a stratum is too small") {
  // One target unit cannot be spread over three folds.
  TwoSampleDataset d;
  d.p = 1;
  d.q = 1;
  d.observations.push_back(target_obs({0.0}));
  for (int i = 0; i < 12; ++i)
    d.observations.push_back(source_obs({1.0 * i}, i % 2, {0.0}, 1, 0.5));
  CHECK_THROWS_AS(make_folds(d, 3, 1), estimation_error);
}

TEST_CASE("threshold grid mesh and nearest index") {
  ThresholdGrid g;
  g.points = {0.0, 1.0, 3.0};
  g.check();
  CHECK(g.mesh() == Catch::Approx(1.0));
  CHECK(g.nearest_index(-5.0) == 0);
  CHECK(g.nearest_index(0.4) == 0);
  CHECK(g.nearest_index(0.6) == 1);
  CHECK(g.nearest_index(1.9) == 1);
  CHECK(g.nearest_index(2.1) == 2);
  CHECK(g.nearest_index(9.0) == 2);

  ThresholdGrid bad;
  bad.points = {0.0, 0.0};
  CHECK_THROWS_AS(bad.check(), invalid_input);
}

TEST_CASE("tau grid rejects unsorted or boundary levels") {
  TauGrid t;
  t.levels = {0.25, 0.5, 0.75};
  CHECK_NOTHROW(t.check());
  t.levels = {0.5, 0.25};
  CHECK_THROWS_AS(t.check(), invalid_input);
  t.levels = {0.0};
  CHECK_THROWS_AS(t.check(), invalid_input);
}

TEST_CASE("csv round-trip preserves every field bit-for-bit") {
  const auto d = small_dataset();
  const std::string path = (std::filesystem::temp_directory_path() / "tqte_rt.csv").string();
  write_csv(d, path);
  const auto back = read_csv(path);
  REQUIRE(back.n() == d.n());
  REQUIRE(back.p == d.p);
  REQUIRE(back.q == d.q);
  for (std::size_t i = 0; i < d.n(); ++i) {
    const auto& a = d.observations[i];
    const auto& b = back.observations[i];
    CHECK(a.r == b.r);
    CHECK(a.x == b.x);
    CHECK(a.a == b.a);
    CHECK(a.s == b.s);
    CHECK(a.m == b.m);
    CHECK(a.y == b.y);
  }
  std::remove(path.c_str());
}

TEST_CASE("csv reader reports the offending row and column") {
  const std::string path = (std::filesystem::temp_directory_path() / "tqte_bad.csv").string();
  {
    std::ofstream out(path);
    out << "r,a,m,y,x1\n";
    out << "0,,,,oops\n";
  }
  CHECK_THROWS_WITH(read_csv(path), Catch::Matchers::ContainsSubstring("row 2") &&
                                        Catch::Matchers::ContainsSubstring("x1"));
  {
    std::ofstream out(path);
    out << "r,a,y,m,x1\n";  // wrong column order
  }
  CHECK_THROWS_AS(read_csv(path), invalid_input);
  std::remove(path.c_str());
}
