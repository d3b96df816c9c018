#include <catch2/catch_amalgamated.hpp>

#include "tqte/learners.hpp"

using namespace tqte;

namespace {

Mat random_matrix(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  Mat X(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    for (Eigen::Index j = 0; j < X.cols(); ++j) X(i, j) = rng.normal();
  return X;
}

}  // namespace

TEST_CASE("feature maps have the declared dimensions and values") {
  Vec x(2);
  x << 2.0, -1.0;
  const auto raw = FeatureMap::raw(2);
  CHECK(raw.transform(x) == x);

  const auto poly = FeatureMap::polynomial(2, 3);
  const Vec g = poly.transform(x);
  REQUIRE(g.size() == 6);
  CHECK(g(0) == 2.0);   // x1
  CHECK(g(2) == 4.0);   // x1^2
  CHECK(g(5) == -1.0);  // x2^3

  const auto rff = FeatureMap::random_fourier(2, 64, 1.5, 77);
  const Vec h = rff.transform(x);
  REQUIRE(h.size() == 64);
  const double bound = std::sqrt(2.0 / 64.0);
  for (Eigen::Index i = 0; i < h.size(); ++i) CHECK(std::abs(h(i)) <= bound + 1e-12);
  // Matrix and vector transforms agree.
  Mat X(1, 2);
  X.row(0) = x.transpose();
  CHECK((rff.transform(X).row(0).transpose() - h).norm() < 1e-14);
  // Seed determinism.
  const auto rff2 = FeatureMap::random_fourier(2, 64, 1.5, 77);
  CHECK((rff2.transform(x) - h).norm() == 0.0);
}

TEST_CASE("rff inner products approximate the gaussian kernel") {
  Rng rng(3);
  const auto rff = FeatureMap::random_fourier(3, 4000, 2.0, 12);
  double max_err = 0;
  for (int t = 0; t < 20; ++t) {
    Vec a(3), b(3);
    for (int j = 0; j < 3; ++j) {
      a(j) = rng.normal();
      b(j) = rng.normal();
    }
    const double k = std::exp(-(a - b).squaredNorm() / (2.0 * 4.0));
    const double khat = rff.transform(a).dot(rff.transform(b));
    max_err = std::max(max_err, std::abs(k - khat));
  }
  CHECK(max_err < 0.08);
}

TEST_CASE("ridge recovers a linear model and shrinks with lambda") {
  const Mat X = random_matrix(500, 3, 1);
  Vec beta(3);
  beta << 1.0, -2.0, 0.5;
  Rng rng(2);
  Vec y = X * beta;
  for (Eigen::Index i = 0; i < y.size(); ++i) y(i) += 2.0 + 0.01 * rng.normal();

  const auto m = fit_ridge(X, y, 1e-8);
  CHECK(m.intercept == Catch::Approx(2.0).margin(0.01));
  CHECK((m.theta - beta).norm() < 0.01);

  const auto shrunk = fit_ridge(X, y, 10.0);
  CHECK(shrunk.theta.norm() < m.theta.norm());
  // Intercept is unpenalized: fitted mean is preserved.
  const double mean_fit = (X * shrunk.theta).mean() + shrunk.intercept;
  CHECK(mean_fit == Catch::Approx(y.mean()).margin(1e-8));
}

TEST_CASE("ridge solver reuses one factorization for many responses") {
  const Mat X = random_matrix(200, 4, 5);
  RidgeSolver solver(X, 1e-3, true);
  Rng rng(6);
  for (int t = 0; t < 5; ++t) {
    Vec y(200);
    for (int i = 0; i < 200; ++i) y(i) = rng.normal();
    auto [packed, gnorm] = solver.solve(y);
    const auto direct = fit_ridge(X, y, 1e-3);
    CHECK(std::abs(packed(0) - direct.intercept) < 1e-10);
    CHECK((packed.tail(4) - direct.theta).norm() < 1e-10);
    CHECK(gnorm < 1e-10);
  }
}

TEST_CASE("ridge with lambda=0 fails loudly on singular designs") {
  Mat X(50, 2);
  for (int i = 0; i < 50; ++i) {
    X(i, 0) = i;
    X(i, 1) = 2.0 * i;  // collinear
  }
  Vec y = X.col(0);
  CHECK_THROWS_AS(fit_ridge(X, y, 0.0), estimation_error);
  CHECK_NOTHROW(fit_ridge(X, y, 1e-6));
}

TEST_CASE("logistic regression recovers known coefficients") {
  const Mat X = random_matrix(4000, 2, 9);
  Vec beta(2);
  beta << 1.0, -0.5;
  Rng rng(10);
  Vec y(4000);
  for (Eigen::Index i = 0; i < y.size(); ++i)
    y(i) = (rng.uniform() < expit(0.3 + X.row(i).dot(beta))) ? 1.0 : 0.0;
  const auto m = fit_ridge_logistic(X, y, 1e-6);
  CHECK(m.converged);
  CHECK(m.intercept == Catch::Approx(0.3).margin(0.15));
  CHECK((m.theta - beta).norm() < 0.2);
  // Monotone in the strong coefficient direction.
  Vec lo = Vec::Zero(2), hi = Vec::Zero(2);
  hi(0) = 2.0;
  CHECK(m.predict_prob(hi) > m.predict_prob(lo));
}

TEST_CASE("logistic separable data converges under penalty, errors without") {
  Mat X(20, 1);
  Vec y(20);
  for (int i = 0; i < 20; ++i) {
    X(i, 0) = i < 10 ? -1.0 - 0.1 * i : 1.0 + 0.1 * i;
    y(i) = i < 10 ? 0.0 : 1.0;
  }
  const auto m = fit_ridge_logistic(X, y, 1e-2);
  CHECK(m.converged);
  Vec ally = Vec::Ones(20);
  CHECK_THROWS_AS(fit_ridge_logistic(X, ally, 0.0), estimation_error);
}

TEST_CASE("warm start reproduces the cold-start optimum") {
  const Mat X = random_matrix(300, 3, 4);
  Rng rng(8);
  Vec y(300);
  for (Eigen::Index i = 0; i < y.size(); ++i)
    y(i) = (rng.uniform() < expit(X(i, 0))) ? 1.0 : 0.0;
  const auto cold = fit_ridge_logistic(X, y, 1e-3);
  Vec warm(4);
  warm << cold.intercept, cold.theta;
  const auto hot = fit_ridge_logistic(X, y, 1e-3, FeatureMap(), &warm);
  CHECK(hot.iterations <= 1);
  CHECK(std::abs(hot.intercept - cold.intercept) < 1e-7);
}

TEST_CASE("krr on rff features fits a smooth nonlinear function") {
  Rng rng(13);
  Mat X(600, 1);
  Vec y(600);
  for (int i = 0; i < 600; ++i) {
    X(i, 0) = rng.uniform(-2.0, 2.0);
    y(i) = std::sin(2.0 * X(i, 0)) + 0.05 * rng.normal();
  }
  const auto m = fit_krr_rff(X, y, 300, 0.7, 1e-4, 21);
  double mse = 0;
  for (int t = 0; t < 100; ++t) {
    Vec x(1);
    x << -1.9 + 3.8 * t / 99.0;
    const double err = m.predict(x) - std::sin(2.0 * x(0));
    mse += err * err / 100.0;
  }
  CHECK(mse < 0.01);
}

TEST_CASE("classifier density ratio is calibrated, truncated, normalized") {
  // Source X ~ N(0,1), target X ~ N(1,1): true log ratio is linear in x.
  Rng rng(31);
  const std::size_t n1 = 3000, n0 = 3000;
  Mat X(static_cast<Eigen::Index>(n1 + n0), 1);
  Vec r(static_cast<Eigen::Index>(n1 + n0));
  std::vector<std::size_t> source_idx;
  for (std::size_t i = 0; i < n1 + n0; ++i) {
    const bool src = i < n1;
    X(static_cast<Eigen::Index>(i), 0) = src ? rng.normal() : rng.normal() + 1.0;
    r(static_cast<Eigen::Index>(i)) = src ? 1.0 : 0.0;
    if (src) source_idx.push_back(i);
  }
  const auto m = fit_classifier_ratio(X, r, 1e-4, 0.01, source_idx);
  // Mean one over fitting source sample by construction.
  double mean = 0;
  for (std::size_t i : source_idx)
    mean += m.evaluate(X.row(static_cast<Eigen::Index>(i)).transpose());
  CHECK(mean / static_cast<double>(n1) == Catch::Approx(1.0).epsilon(1e-10));
  // Ratio increases toward the target mean.
  Vec a(1), b(1);
  a << 0.0;
  b << 1.0;
  CHECK(m.evaluate(b) > m.evaluate(a));
  // Truncation bites for extreme x.
  Vec far(1);
  far << 50.0;
  CHECK(m.truncated(far) == Catch::Approx(1.0 / 0.01));
}

TEST_CASE("entropy balancing matches target moments exactly") {
  Rng rng(41);
  Mat G(400, 2);
  for (int i = 0; i < 400; ++i) {
    G(i, 0) = rng.normal();
    G(i, 1) = rng.uniform(-1.0, 1.0);
  }
  Vec target(2);
  target << 0.3, 0.1;
  const auto m = fit_entropy_balance(G, target, 0.001);
  // Weighted source moments hit the target to solver tolerance.
  double w0 = 0, w1 = 0, wsum = 0;
  for (int i = 0; i < 400; ++i) {
    const double w = std::exp(G.row(i).dot(m.tilt_theta.transpose()) + m.tilt_log_norm);
    w0 += w * G(i, 0);
    w1 += w * G(i, 1);
    wsum += w;
  }
  CHECK(w0 / wsum == Catch::Approx(0.3).margin(1e-7));
  CHECK(w1 / wsum == Catch::Approx(0.1).margin(1e-7));
  // Infeasible targets (outside the hull) fail with a named constraint.
  Vec bad(2);
  bad << 0.0, 5.0;
  CHECK_THROWS_AS(fit_entropy_balance(G, bad, 0.001), estimation_error);
}

TEST_CASE("ridge and logistic models serialize and round-trip") {
  const Mat X = random_matrix(100, 2, 51);
  Vec y = X.col(0) + 0.5 * X.col(1);
  const auto rm = fit_ridge(X, y, 1e-3);
  const auto rm2 = RidgeModel::from_json(rm.to_json());
  Vec x(2);
  x << 0.7, -0.3;
  CHECK(rm2.predict(x) == Catch::Approx(rm.predict(x)).epsilon(1e-15));

  Vec lbl(100);
  for (int i = 0; i < 100; ++i) lbl(i) = (i % 2 == 0) ? 1.0 : 0.0;
  const auto lm = fit_ridge_logistic(X, lbl, 1e-2);
  const auto lm2 = LogisticModel::from_json(lm.to_json());
  CHECK(lm2.predict_prob(x) == Catch::Approx(lm.predict_prob(x)).epsilon(1e-15));
}
