#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tqte/common.hpp"

namespace tqte {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Feature maps.  All maps are deterministic given their parameters (and seed
// for random Fourier features) and produce bounded outputs for the RFF kind.
// ---------------------------------------------------------------------------

enum class FeatureKind { raw, polynomial, random_fourier };

class FeatureMap {
 public:
  FeatureMap() = default;

  static FeatureMap raw(std::size_t input_dim) {
    FeatureMap f;
    f.kind_ = FeatureKind::raw;
    f.input_dim_ = input_dim;
    f.output_dim_ = input_dim;
    return f;
  }

  static FeatureMap polynomial(std::size_t input_dim, int degree) {
    if (degree < 1) throw invalid_input("polynomial degree must be >= 1");
    FeatureMap f;
    f.kind_ = FeatureKind::polynomial;
    f.input_dim_ = input_dim;
    f.degree_ = degree;
    f.output_dim_ = input_dim * static_cast<std::size_t>(degree);
    return f;
  }

  /// Gaussian-kernel random Fourier features: frequencies ~ N(0, gamma^-2 I),
  /// phases ~ U[0, 2pi); feature_j(x) = sqrt(2/D) cos(w_j.x + b_j).
  static FeatureMap random_fourier(std::size_t input_dim, std::size_t rank,
                                   double bandwidth, std::uint64_t seed) {
    if (rank < 1) throw invalid_input("random Fourier rank must be >= 1");
    if (!(bandwidth > 0)) throw invalid_input("random Fourier bandwidth must be > 0");
    FeatureMap f;
    f.kind_ = FeatureKind::random_fourier;
    f.input_dim_ = input_dim;
    f.output_dim_ = rank;
    f.bandwidth_ = bandwidth;
    f.seed_ = seed;
    Rng rng(seed);
    f.freq_.resize(rank, input_dim);
    f.phase_.resize(rank);
    for (std::size_t i = 0; i < rank; ++i) {
      for (std::size_t j = 0; j < input_dim; ++j)
        f.freq_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
            rng.normal() / bandwidth;
      f.phase_(static_cast<Eigen::Index>(i)) = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    return f;
  }

  FeatureKind kind() const { return kind_; }
  std::size_t input_dim() const { return input_dim_; }
  std::size_t output_dim() const { return output_dim_; }

  Vec transform(const Vec& x) const {
    if (static_cast<std::size_t>(x.size()) != input_dim_)
      throw invalid_input("feature map: input dimension mismatch");
    switch (kind_) {
      case FeatureKind::raw:
        return x;
      case FeatureKind::polynomial: {
        Vec out(output_dim_);
        for (int d = 0; d < degree_; ++d)
          for (std::size_t j = 0; j < input_dim_; ++j)
            out(static_cast<Eigen::Index>(d * input_dim_ + j)) = std::pow(x(j), d + 1);
        return out;
      }
      case FeatureKind::random_fourier: {
        const double scale = std::sqrt(2.0 / static_cast<double>(output_dim_));
        Vec t = freq_ * x + phase_;
        return scale * t.array().cos().matrix();
      }
    }
    throw invalid_input("feature map: unknown kind");
  }

  /// Row-wise transform of an n x input_dim design matrix.
  Mat transform(const Mat& X) const {
    if (kind_ == FeatureKind::raw) return X;
    if (kind_ == FeatureKind::random_fourier) {
      const double scale = std::sqrt(2.0 / static_cast<double>(output_dim_));
      Mat t = X * freq_.transpose();
      t.rowwise() += phase_.transpose();
      return scale * t.array().cos().matrix();
    }
    Mat out(X.rows(), static_cast<Eigen::Index>(output_dim_));
    for (int d = 0; d < degree_; ++d)
      out.middleCols(static_cast<Eigen::Index>(d * input_dim_),
                     static_cast<Eigen::Index>(input_dim_)) =
          X.array().pow(d + 1).matrix();
    return out;
  }

  json to_json() const {
    json j;
    j["kind"] = kind_ == FeatureKind::raw          ? "raw"
                : kind_ == FeatureKind::polynomial ? "polynomial"
                                                   : "random_fourier";
    j["input_dim"] = input_dim_;
    j["output_dim"] = output_dim_;
    if (kind_ == FeatureKind::polynomial) j["degree"] = degree_;
    if (kind_ == FeatureKind::random_fourier) {
      j["bandwidth"] = bandwidth_;
      j["seed"] = seed_;
    }
    return j;
  }

  static FeatureMap from_json(const json& j) {
    const std::string k = j.at("kind");
    if (k == "raw") return raw(j.at("input_dim"));
    if (k == "polynomial") return polynomial(j.at("input_dim"), j.at("degree"));
    return random_fourier(j.at("input_dim"), j.at("output_dim"), j.at("bandwidth"),
                          j.at("seed"));
  }

 private:
  FeatureKind kind_ = FeatureKind::raw;
  std::size_t input_dim_ = 0;
  std::size_t output_dim_ = 0;
  int degree_ = 1;
  double bandwidth_ = 1.0;
  std::uint64_t seed_ = 0;
  Mat freq_;   // rank x input_dim
  Vec phase_;  // rank
};

/// Median pairwise distance bandwidth heuristic on (a subsample of) the rows.
inline double median_bandwidth(const Mat& X, std::size_t max_points = 500) {
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(X.rows()), max_points);
  std::vector<double> d;
  d.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      d.push_back((X.row(static_cast<Eigen::Index>(i)) - X.row(static_cast<Eigen::Index>(j)))
                      .norm());
  if (d.empty()) return 1.0;
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2), d.end());
  const double med = d[d.size() / 2];
  return med > 0 ? med : 1.0;
}

// ---------------------------------------------------------------------------
// Ridge least squares.  theta solves (G'G/n + lambda I) theta = G'y/n with an
// unpenalized intercept.
// ---------------------------------------------------------------------------

struct RidgeModel {
  FeatureMap features;
  Vec theta;
  double intercept = 0.0;
  double lambda = 0.0;
  bool has_intercept = true;

  double predict(const Vec& x) const {
    return features.transform(x).dot(theta) + intercept;
  }
  double predict_features(const Vec& g) const { return g.dot(theta) + intercept; }

  json to_json() const {
    json j;
    j["type"] = "ridge";
    j["features"] = features.to_json();
    j["theta"] = std::vector<double>(theta.data(), theta.data() + theta.size());
    j["intercept"] = intercept;
    j["lambda"] = lambda;
    j["has_intercept"] = has_intercept;
    return j;
  }
  static RidgeModel from_json(const json& j) {
    RidgeModel m;
    m.features = FeatureMap::from_json(j.at("features"));
    const auto t = j.at("theta").get<std::vector<double>>();
    m.theta = Eigen::Map<const Vec>(t.data(), static_cast<Eigen::Index>(t.size()));
    m.intercept = j.at("intercept");
    m.lambda = j.at("lambda");
    m.has_intercept = j.at("has_intercept");
    return m;
  }
};

/// Factorizes the penalized normal equations once so many responses on the
/// same design can be solved by back-substitution (used per fold and arm for
/// the grid-indexed regressions).
class RidgeSolver {
 public:
  RidgeSolver(const Mat& G, double lambda, bool intercept) : intercept_(intercept) {
    const Eigen::Index n = G.rows();
    const Eigen::Index d = G.cols();
    if (n < 1) throw invalid_input("fit_ridge: empty design");
    if (lambda < 0) throw invalid_input("fit_ridge: lambda must be >= 0");
    n_ = n;
    if (intercept) {
      Mat A(d + 1, d + 1);
      A(0, 0) = 1.0;
      A.block(0, 1, 1, d) = G.colwise().mean();
      A.block(1, 0, d, 1) = A.block(0, 1, 1, d).transpose();
      A.block(1, 1, d, d) = G.transpose() * G / static_cast<double>(n);
      A.block(1, 1, d, d).diagonal().array() += lambda;
      ldlt_.compute(A);
      Gt_mean_rows_ = d + 1;
    } else {
      Mat A = G.transpose() * G / static_cast<double>(n);
      A.diagonal().array() += lambda;
      ldlt_.compute(A);
      Gt_mean_rows_ = d;
    }
    if (ldlt_.info() != Eigen::Success || !ldlt_.isPositive()) {
      if (lambda == 0.0)
        throw estimation_error(
            "fit_ridge: singular Gram matrix with lambda=0; use lambda>0");
      throw estimation_error("fit_ridge: normal equations not positive definite");
    }
    singular_guard_ = (lambda == 0.0);
    G_ = &G;
    lambda_ = lambda;
  }

  /// Solve for one response vector; validates the residual gradient norm.
  std::pair<Vec, double> solve(const Vec& y) const {
    const Mat& G = *G_;
    const Eigen::Index d = G.cols();
    Vec rhs(Gt_mean_rows_);
    if (intercept_) {
      rhs(0) = y.mean();
      rhs.tail(d) = G.transpose() * y / static_cast<double>(n_);
    } else {
      rhs = G.transpose() * y / static_cast<double>(n_);
    }
    Vec sol = ldlt_.solve(rhs);
    // Residual of the normal equations; catches near-singular lambda=0 solves.
    Vec resid(Gt_mean_rows_);
    if (intercept_) {
      const double b = sol(0);
      const Vec th = sol.tail(d);
      const Vec fitted = G * th;
      resid(0) = b + fitted.mean() - rhs(0);
      resid.tail(d) = G.transpose() * fitted / static_cast<double>(n_) +
                      b * G.colwise().mean().transpose() + lambda_ * th -
                      rhs.tail(d);
    } else {
      resid = (G.transpose() * (G * sol)) / static_cast<double>(n_) + lambda_ * sol - rhs;
    }
    const double gnorm = resid.lpNorm<Eigen::Infinity>();
    if (singular_guard_ && !(gnorm <= 1e-8 * std::max(1.0, rhs.lpNorm<Eigen::Infinity>())))
      throw estimation_error("fit_ridge: singular system with lambda=0; use lambda>0");
    double intercept = 0.0;
    Vec theta;
    if (intercept_) {
      intercept = sol(0);
      theta = sol.tail(d);
    } else {
      theta = sol;
    }
    Vec packed(theta.size() + 1);
    packed << intercept, theta;
    return {packed, gnorm};
  }

 private:
  const Mat* G_ = nullptr;
  Eigen::LDLT<Mat> ldlt_;
  Eigen::Index n_ = 0, Gt_mean_rows_ = 0;
  bool intercept_ = true;
  bool singular_guard_ = false;
  double lambda_ = 0.0;
};

inline RidgeModel fit_ridge(const Mat& features, const Vec& responses, double lambda,
                            bool intercept = true,
                            FeatureMap map = FeatureMap()) {
  if (features.rows() != responses.size())
    throw invalid_input("fit_ridge: rows of features != length of responses");
  RidgeSolver solver(features, lambda, intercept);
  auto [packed, gnorm] = solver.solve(responses);
  RidgeModel m;
  m.features = map.input_dim() ? map
                               : FeatureMap::raw(static_cast<std::size_t>(features.cols()));
  m.intercept = packed(0);
  m.theta = packed.tail(packed.size() - 1);
  m.lambda = lambda;
  m.has_intercept = intercept;
  (void)gnorm;
  return m;
}

// ---------------------------------------------------------------------------
// Ridge logistic regression via damped Newton (IRLS).  Objective is the mean
// negative log-likelihood plus lambda ||theta||^2 / 2, intercept unpenalized.
// ---------------------------------------------------------------------------

struct LogisticModel {
  FeatureMap features;
  Vec theta;
  double intercept = 0.0;
  double lambda = 0.0;
  int iterations = 0;
  double final_grad_norm = 0.0;
  bool converged = false;

  double predict_prob(const Vec& x) const {
    return expit(features.transform(x).dot(theta) + intercept);
  }
  double predict_prob_features(const Vec& g) const {
    return expit(g.dot(theta) + intercept);
  }

  json to_json() const {
    json j;
    j["type"] = "logistic";
    j["features"] = features.to_json();
    j["theta"] = std::vector<double>(theta.data(), theta.data() + theta.size());
    j["intercept"] = intercept;
    j["lambda"] = lambda;
    j["iterations"] = iterations;
    j["final_grad_norm"] = final_grad_norm;
    j["converged"] = converged;
    return j;
  }
  static LogisticModel from_json(const json& j) {
    LogisticModel m;
    m.features = FeatureMap::from_json(j.at("features"));
    const auto t = j.at("theta").get<std::vector<double>>();
    m.theta = Eigen::Map<const Vec>(t.data(), static_cast<Eigen::Index>(t.size()));
    m.intercept = j.at("intercept");
    m.lambda = j.at("lambda");
    m.iterations = j.at("iterations");
    m.final_grad_norm = j.at("final_grad_norm");
    m.converged = j.at("converged");
    return m;
  }
};

inline LogisticModel fit_ridge_logistic(const Mat& features, const Vec& labels,
                                        double lambda,
                                        FeatureMap map = FeatureMap(),
                                        const Vec* warm_start = nullptr,
                                        double tol = 1e-9, int max_iter = 100) {
  const Eigen::Index n = features.rows();
  const Eigen::Index d = features.cols();
  if (n != labels.size()) throw invalid_input("fit_ridge_logistic: size mismatch");
  if (n < 1) throw invalid_input("fit_ridge_logistic: empty design");
  const double ybar = labels.mean();
  if (lambda == 0.0 && (ybar <= 0.0 || ybar >= 1.0))
    throw estimation_error(
        "fit_ridge_logistic: all labels in one class with lambda=0; use lambda>0");

  Vec beta = Vec::Zero(d + 1);  // (intercept, theta)
  if (warm_start && warm_start->size() == d + 1) beta = *warm_start;
  if (beta.isZero() && ybar > 0.0 && ybar < 1.0)
    beta(0) = std::log(ybar / (1.0 - ybar));

  auto objective = [&](const Vec& b) {
    const Vec eta = (features * b.tail(d)).array() + b(0);
    double nll = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double e = eta(i);
      // log(1+exp(e)) - y*e, computed stably
      nll += (e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e))) -
             labels(i) * e;
    }
    return nll / static_cast<double>(n) + 0.5 * lambda * b.tail(d).squaredNorm();
  };

  double obj = objective(beta);
  int it = 0;
  double gnorm = std::numeric_limits<double>::infinity();
  for (; it < max_iter; ++it) {
    const Vec eta = (features * beta.tail(d)).array() + beta(0);
    Vec p(n), w(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      p(i) = expit(eta(i));
      w(i) = std::max(p(i) * (1.0 - p(i)), 1e-10);
    }
    Vec grad(d + 1);
    const Vec r = (p - labels) / static_cast<double>(n);
    grad(0) = r.sum();
    grad.tail(d) = features.transpose() * r + lambda * beta.tail(d);
    gnorm = grad.lpNorm<Eigen::Infinity>();
    if (gnorm <= tol) break;

    Mat H(d + 1, d + 1);
    H(0, 0) = w.sum() / static_cast<double>(n);
    H.block(0, 1, 1, d) = (w.transpose() * features) / static_cast<double>(n);
    H.block(1, 0, d, 1) = H.block(0, 1, 1, d).transpose();
    H.block(1, 1, d, d) =
        features.transpose() * w.asDiagonal() * features / static_cast<double>(n);
    H.block(1, 1, d, d).diagonal().array() += lambda;

    Vec step = H.ldlt().solve(grad);
    // Halve the step while the objective increases.
    double t = 1.0;
    Vec cand = beta - step;
    double cand_obj = objective(cand);
    int halvings = 0;
    while (cand_obj > obj + 1e-14 && halvings < 40) {
      t *= 0.5;
      cand = beta - t * step;
      cand_obj = objective(cand);
      ++halvings;
    }
    beta = cand;
    obj = cand_obj;
  }

  LogisticModel m;
  m.features = map.input_dim() ? map
                               : FeatureMap::raw(static_cast<std::size_t>(features.cols()));
  m.intercept = beta(0);
  m.theta = beta.tail(d);
  m.lambda = lambda;
  m.iterations = it;
  m.final_grad_norm = gnorm;
  m.converged = (gnorm <= tol);
  return m;
}

/// Finite-rank KRR: ridge regression on a Gaussian random Fourier feature map.
inline RidgeModel fit_krr_rff(const Mat& inputs, const Vec& responses, std::size_t rank,
                              double bandwidth, double lambda, std::uint64_t seed) {
  FeatureMap map = FeatureMap::random_fourier(
      static_cast<std::size_t>(inputs.cols()), rank, bandwidth, seed);
  const Mat G = map.transform(inputs);
  return fit_ridge(G, responses, lambda, /*intercept=*/true, map);
}

inline double predict_clipped(const RidgeModel& m, const Vec& x, double lo, double hi) {
  return clamp(m.predict(x), lo, hi);
}
inline double predict_clipped(const LogisticModel& m, const Vec& x, double lo, double hi) {
  return clamp(m.predict_prob(x), lo, hi);
}

// ---------------------------------------------------------------------------
// Density-ratio models.
// ---------------------------------------------------------------------------

enum class RatioVariant { classifier, entropy_tilt, known };

/// omega(x) = dP_{X,0}/dP_{X,1}.  Evaluations are truncated to [eps, 1/eps]
/// and divided by the source-sample normalization constant so the mean over
/// the fitting source sample is exactly one.
struct DensityRatioModel {
  RatioVariant variant = RatioVariant::classifier;
  LogisticModel classifier;        // P(R=0 | X) model, classifier variant
  double calibration = 1.0;        // pi1_hat / pi0_hat factor
  Vec tilt_theta;                  // entropy_tilt variant
  double tilt_log_norm = 0.0;      // log c(theta)
  FeatureMap tilt_features;
  std::function<double(const Vec&)> known_fn;  // known variant (oracle)
  double eps = 0.01;
  double c_norm = 1.0;             // source-sample mean of the truncated ratio

  double raw(const Vec& x) const {
    switch (variant) {
      case RatioVariant::classifier: {
        const double p0 = classifier.predict_prob(x);
        return p0 / std::max(1.0 - p0, 1e-300) * calibration;
      }
      case RatioVariant::entropy_tilt:
        return std::exp(tilt_theta.dot(tilt_features.transform(x)) + tilt_log_norm);
      case RatioVariant::known:
        return known_fn(x);
    }
    return 1.0;
  }

  double truncated(const Vec& x) const { return clamp(raw(x), eps, 1.0 / eps); }

  double evaluate(const Vec& x) const { return truncated(x) / c_norm; }

  json to_json() const {
    json j;
    j["eps"] = eps;
    j["c_norm"] = c_norm;
    switch (variant) {
      case RatioVariant::classifier:
        j["variant"] = "classifier";
        j["classifier"] = classifier.to_json();
        j["calibration"] = calibration;
        break;
      case RatioVariant::entropy_tilt:
        j["variant"] = "entropy_tilt";
        j["theta"] = std::vector<double>(tilt_theta.data(),
                                         tilt_theta.data() + tilt_theta.size());
        j["log_norm"] = tilt_log_norm;
        j["features"] = tilt_features.to_json();
        break;
      case RatioVariant::known:
        throw invalid_input("known density ratio is not serializable");
    }
    return j;
  }
  static DensityRatioModel from_json(const json& j) {
    DensityRatioModel m;
    m.eps = j.at("eps");
    m.c_norm = j.at("c_norm");
    const std::string v = j.at("variant");
    if (v == "classifier") {
      m.variant = RatioVariant::classifier;
      m.classifier = LogisticModel::from_json(j.at("classifier"));
      m.calibration = j.at("calibration");
    } else {
      m.variant = RatioVariant::entropy_tilt;
      const auto t = j.at("theta").get<std::vector<double>>();
      m.tilt_theta = Eigen::Map<const Vec>(t.data(), static_cast<Eigen::Index>(t.size()));
      m.tilt_log_norm = j.at("log_norm");
      m.tilt_features = FeatureMap::from_json(j.at("features"));
    }
    return m;
  }
};

/// Calibrated-classifier density ratio: logistic fit for P(R=0|X) on all
/// training units, ratio formed with the training-sample pi factors, truncated
/// to [eps, 1/eps], then normalized to mean one over the training source units.
inline DensityRatioModel fit_classifier_ratio(const Mat& covariates, const Vec& r_labels,
                                              double lambda, double eps,
                                              const std::vector<std::size_t>& source_idx,
                                              FeatureMap map = FeatureMap()) {
  const Eigen::Index n = covariates.rows();
  if (n != r_labels.size()) throw invalid_input("fit_classifier_ratio: size mismatch");
  double n0 = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) n0 += (r_labels(i) == 0.0);
  const double pi0 = n0 / static_cast<double>(n);
  if (pi0 <= 0.0 || pi0 >= 1.0)
    throw estimation_error("fit_classifier_ratio: one of the samples is empty");

  // Classifier target is 1(R=0).
  Vec target(n);
  for (Eigen::Index i = 0; i < n; ++i) target(i) = (r_labels(i) == 0.0) ? 1.0 : 0.0;
  const FeatureMap fmap =
      map.input_dim() ? map : FeatureMap::raw(static_cast<std::size_t>(covariates.cols()));
  const Mat G = fmap.transform(covariates);
  DensityRatioModel m;
  m.variant = RatioVariant::classifier;
  m.classifier = fit_ridge_logistic(G, target, lambda, fmap);
  m.calibration = (1.0 - pi0) / pi0;
  m.eps = eps;
  m.c_norm = 1.0;
  double mean = 0.0;
  for (std::size_t i : source_idx)
    mean += m.truncated(covariates.row(static_cast<Eigen::Index>(i)).transpose());
  if (source_idx.empty())
    throw estimation_error("fit_classifier_ratio: no source units to normalize on");
  m.c_norm = mean / static_cast<double>(source_idx.size());
  return m;
}

/// Entropy balancing in dual form: Newton on
///   theta -> log sum_i exp{theta' (b(X_i) - target_means)},
/// giving w_i proportional to exp{theta' b(X_i)} with sum one and exact
/// moment balance.  The exponential-tilt parameters extend omega to new x.
inline DensityRatioModel fit_entropy_balance(const Mat& source_features,
                                             const Vec& target_means, double eps,
                                             FeatureMap map = FeatureMap(),
                                             double tol = 1e-10, int max_iter = 200) {
  const Eigen::Index n1 = source_features.rows();
  const Eigen::Index d = source_features.cols();
  if (target_means.size() != d)
    throw invalid_input("fit_entropy_balance: dimension mismatch");
  if (n1 < 1) throw invalid_input("fit_entropy_balance: empty source sample");

  const Mat C = source_features.rowwise() - target_means.transpose();  // centered
  Vec theta = Vec::Zero(d);
  auto weights_of = [&](const Vec& th) {
    Vec eta = C * th;
    const double mx = eta.maxCoeff();
    Vec w = (eta.array() - mx).exp();
    w /= w.sum();
    return w;
  };

  Vec w = weights_of(theta);
  double resid = (C.transpose() * w).lpNorm<Eigen::Infinity>();
  int it = 0;
  for (; it < max_iter && resid > tol; ++it) {
    const Vec grad = C.transpose() * w;  // = sum_i w_i (b_i - b0bar)
    Mat H = C.transpose() * w.asDiagonal() * C - grad * grad.transpose();
    H.diagonal().array() += 1e-12;
    const Vec step = H.ldlt().solve(grad);
    double t = 1.0;
    Vec cand = theta - step;
    Vec wc = weights_of(cand);
    double rc = (C.transpose() * wc).lpNorm<Eigen::Infinity>();
    int halvings = 0;
    while (rc > resid && halvings < 50) {
      t *= 0.5;
      cand = theta - t * step;
      wc = weights_of(cand);
      rc = (C.transpose() * wc).lpNorm<Eigen::Infinity>();
      ++halvings;
    }
    if (rc >= resid && halvings >= 50) break;
    theta = cand;
    w = wc;
    resid = rc;
  }
  if (resid > 1e-8) {
    const Vec grad = C.transpose() * w;
    Eigen::Index worst;
    grad.cwiseAbs().maxCoeff(&worst);
    throw estimation_error(
        "fit_entropy_balance: infeasible balance, worst constraint is feature " +
        std::to_string(worst) + " with residual " + fmt17(grad.cwiseAbs().maxCoeff()) +
        " (target means may be outside the source feature hull)");
  }

  DensityRatioModel m;
  m.variant = RatioVariant::entropy_tilt;
  m.tilt_theta = theta;
  m.tilt_features =
      map.input_dim() ? map : FeatureMap::raw(static_cast<std::size_t>(d));
  // omega(X_i) = n1 w_i  =>  log c = log n1 - log sum_j exp(theta' b_j)
  Vec eta = source_features * theta;
  const double mx = eta.maxCoeff();
  const double lse = mx + std::log((eta.array() - mx).exp().sum());
  m.tilt_log_norm = std::log(static_cast<double>(n1)) - lse;
  m.eps = eps;
  m.c_norm = 1.0;
  // source_features are already in b(x) space; normalize from eta directly.
  double mean = 0.0;
  for (Eigen::Index i = 0; i < n1; ++i)
    mean += clamp(std::exp(eta(i) + m.tilt_log_norm), eps, 1.0 / eps);
  m.c_norm = mean / static_cast<double>(n1);
  return m;
}

}  // namespace tqte
