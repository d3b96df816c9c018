#pragma once

#include <array>
#include <optional>
#include <variant>
#include <vector>

#include "tqte/dataset.hpp"
#include "tqte/discrete_law.hpp"
#include "tqte/distribution.hpp"
#include "tqte/learners.hpp"

namespace tqte {

enum class MLearner { logistic, ridge };
enum class GLearner { ridge };
enum class ELearner { known, logistic };
enum class RhoLearner { logistic, known };
enum class OmegaLearner { classifier, entropy_balance, known };

struct FeatureSpec {
  FeatureKind kind = FeatureKind::raw;
  int degree = 2;            // polynomial
  std::size_t rank = 200;    // random_fourier
  double bandwidth = 0.0;    // 0 = median heuristic

  FeatureMap build(const Mat& inputs, std::uint64_t seed) const {
    const std::size_t d = static_cast<std::size_t>(inputs.cols());
    switch (kind) {
      case FeatureKind::raw:
        return FeatureMap::raw(d);
      case FeatureKind::polynomial:
        return FeatureMap::polynomial(d, degree);
      case FeatureKind::random_fourier: {
        const double bw = bandwidth > 0 ? bandwidth : median_bandwidth(inputs);
        return FeatureMap::random_fourier(d, rank, bw, seed);
      }
    }
    throw invalid_input("unknown feature kind");
  }

  json to_json() const {
    json j;
    j["kind"] = kind == FeatureKind::raw          ? "raw"
                : kind == FeatureKind::polynomial ? "polynomial"
                                                  : "random_fourier";
    if (kind == FeatureKind::polynomial) j["degree"] = degree;
    if (kind == FeatureKind::random_fourier) {
      j["rank"] = rank;
      j["bandwidth"] = bandwidth;
    }
    return j;
  }
  static FeatureSpec from_json(const json& j) {
    FeatureSpec f;
    const std::string k = j.at("kind");
    f.kind = k == "raw"          ? FeatureKind::raw
             : k == "polynomial" ? FeatureKind::polynomial
                                 : FeatureKind::random_fourier;
    if (j.contains("degree")) f.degree = j.at("degree");
    if (j.contains("rank")) f.rank = j.at("rank");
    if (j.contains("bandwidth")) f.bandwidth = j.at("bandwidth");
    return f;
  }
};

struct NuisanceConfig {
  MLearner m = MLearner::logistic;
  GLearner g = GLearner::ridge;
  ELearner e = ELearner::known;
  RhoLearner rho = RhoLearner::logistic;
  OmegaLearner omega = OmegaLearner::classifier;
  double e_known = 0.5;  // P(A=1|X) when treatment is randomized by design
  double lambda_m = 1e-3, lambda_g = 1e-3, lambda_e = 1e-3, lambda_rho = 1e-3,
         lambda_omega = 1e-3;
  FeatureSpec features_x;  // b_X
  FeatureSpec features_u;  // b_U over (x, s)
  double eps = 0.01;
  int k_inner = 2;
  bool fit_nos = false;  // also fit the no-surrogate g and X-only rho
  std::uint64_t seed = 0;

  void check() const {
    if (!(eps > 0 && eps < 0.5)) throw invalid_input("NuisanceConfig: eps outside (0,0.5)");
    if (k_inner < 2) throw invalid_input("NuisanceConfig: k_inner must be >= 2");
    if (lambda_m < 0 || lambda_g < 0 || lambda_e < 0 || lambda_rho < 0 || lambda_omega < 0)
      throw invalid_input("NuisanceConfig: penalties must be >= 0");
  }

  json to_json() const {
    json j;
    j["m"] = m == MLearner::logistic ? "logistic" : "ridge";
    j["g"] = "ridge";
    j["e"] = e == ELearner::known ? "known" : "logistic";
    j["rho"] = rho == RhoLearner::logistic ? "logistic" : "known";
    j["omega"] = omega == OmegaLearner::classifier        ? "classifier"
                 : omega == OmegaLearner::entropy_balance ? "entropy_balance"
                                                          : "known";
    j["e_known"] = e_known;
    j["lambda_m"] = lambda_m;
    j["lambda_g"] = lambda_g;
    j["lambda_e"] = lambda_e;
    j["lambda_rho"] = lambda_rho;
    j["lambda_omega"] = lambda_omega;
    j["features_x"] = features_x.to_json();
    j["features_u"] = features_u.to_json();
    j["eps"] = eps;
    j["k_inner"] = k_inner;
    j["fit_nos"] = fit_nos;
    j["seed"] = seed;
    return j;
  }
  static NuisanceConfig from_json(const json& j) {
    NuisanceConfig c;
    if (j.contains("m")) c.m = j.at("m") == "ridge" ? MLearner::ridge : MLearner::logistic;
    if (j.contains("e")) c.e = j.at("e") == "logistic" ? ELearner::logistic : ELearner::known;
    if (j.contains("rho"))
      c.rho = j.at("rho") == "known" ? RhoLearner::known : RhoLearner::logistic;
    if (j.contains("omega")) {
      const std::string o = j.at("omega");
      c.omega = o == "entropy_balance" ? OmegaLearner::entropy_balance
                : o == "known"         ? OmegaLearner::known
                                       : OmegaLearner::classifier;
    }
    if (j.contains("e_known")) c.e_known = j.at("e_known");
    if (j.contains("lambda_m")) c.lambda_m = j.at("lambda_m");
    if (j.contains("lambda_g")) c.lambda_g = j.at("lambda_g");
    if (j.contains("lambda_e")) c.lambda_e = j.at("lambda_e");
    if (j.contains("lambda_rho")) c.lambda_rho = j.at("lambda_rho");
    if (j.contains("lambda_omega")) c.lambda_omega = j.at("lambda_omega");
    if (j.contains("features_x")) c.features_x = FeatureSpec::from_json(j.at("features_x"));
    if (j.contains("features_u")) c.features_u = FeatureSpec::from_json(j.at("features_u"));
    if (j.contains("eps")) c.eps = j.at("eps");
    if (j.contains("k_inner")) c.k_inner = j.at("k_inner");
    if (j.contains("fit_nos")) c.fit_nos = j.at("fit_nos");
    if (j.contains("seed")) c.seed = j.at("seed");
    c.check();
    return c;
  }
};

namespace detail {

/// Packed design matrices for one dataset.
struct DesignMatrices {
  Mat X;           // n x p
  Mat U;           // n x (p+q); surrogate block zero-filled on target rows
  std::vector<char> has_s;
  Vec a;           // -1 where absent
  Vec r, m_ind, y;

  static DesignMatrices build(const TwoSampleDataset& data) {
    const std::size_t n = data.n();
    DesignMatrices d;
    d.X.resize(n, static_cast<Eigen::Index>(data.p));
    d.U.setZero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(data.p + data.q));
    d.has_s.assign(n, 0);
    d.a = Vec::Constant(static_cast<Eigen::Index>(n), -1.0);
    d.r.resize(n);
    d.m_ind = Vec::Zero(static_cast<Eigen::Index>(n));
    d.y = Vec::Zero(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
      const auto& o = data.observations[i];
      for (std::size_t j = 0; j < data.p; ++j)
        d.X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = o.x[j];
      d.U.row(static_cast<Eigen::Index>(i)).head(static_cast<Eigen::Index>(data.p)) =
          d.X.row(static_cast<Eigen::Index>(i));
      if (o.s) {
        for (std::size_t j = 0; j < data.q; ++j)
          d.U(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(data.p + j)) =
              (*o.s)[j];
        d.has_s[i] = 1;
      }
      d.r(static_cast<Eigen::Index>(i)) = o.r;
      if (o.a) d.a(static_cast<Eigen::Index>(i)) = *o.a;
      if (o.m) d.m_ind(static_cast<Eigen::Index>(i)) = *o.m;
      if (o.y) d.y(static_cast<Eigen::Index>(i)) = *o.y;
    }
    return d;
  }

  Mat rows(const Mat& M, const std::vector<std::size_t>& idx) const {
    Mat out(static_cast<Eigen::Index>(idx.size()), M.cols());
    for (std::size_t i = 0; i < idx.size(); ++i)
      out.row(static_cast<Eigen::Index>(i)) = M.row(static_cast<Eigen::Index>(idx[i]));
    return out;
  }
};

}  // namespace detail

/// Grid-indexed regression bundle: either a ridge model per grid point
/// (coefficients stacked in a matrix for shared-design evaluation) or a
/// logistic model per grid point.
struct GridModels {
  FeatureMap features;
  bool logistic = false;
  Mat coef;        // (d+1) x J, row 0 = intercept
  std::vector<LogisticModel> logit;  // J entries when logistic

  /// Predictions for transformed features G (rows) at all grid points,
  /// clipped to [0, 1].
  Mat predict_clipped01(const Mat& G) const {
    if (!logistic) {
      Mat out = G * coef.bottomRows(coef.rows() - 1);
      out.rowwise() += coef.row(0);
      return out.array().min(1.0).max(0.0).matrix();
    }
    Mat out(G.rows(), static_cast<Eigen::Index>(logit.size()));
    for (std::size_t j = 0; j < logit.size(); ++j) {
      const auto& mj = logit[j];
      for (Eigen::Index i = 0; i < G.rows(); ++i)
        out(i, static_cast<Eigen::Index>(j)) =
            expit(G.row(i).dot(mj.theta) + mj.intercept);
    }
    return out;
  }
};

/// Per-(fold, arm) fitted nuisance components.
struct FoldArmNuisances {
  GridModels m_models;      // m_a(y_j, x, s) over b_U
  GridModels g_models;      // g_a(y_j, x) over b_X
  GridModels g_nos_models;  // direct regression of 1(Y<=y_j) on b_X (optional)
  std::optional<LogisticModel> rho_model;   // over b_U
  std::optional<LogisticModel> rho0_model;  // over b_X (optional)
  double rho_known = 0.0;
};

struct FoldNuisances {
  std::array<FoldArmNuisances, 2> arm;
  std::optional<LogisticModel> e_model;  // P(A=1|X) over b_X; absent if known
  DensityRatioModel omega;
  FeatureMap fx, fu;
};

/// Cross-fitted nuisance collection.  Either fitted per fold or an oracle
/// pass-through.  Immutable after construction.
struct NuisanceSet {
  std::vector<FoldNuisances> folds;  // index k-1
  NuisanceConfig config;
  ThresholdGrid grid;
  std::optional<OracleNuisances> oracle;  // pass-through mode
  const OracleNuisances* known_source = nullptr;  // components marked "known"

  bool passthrough() const { return oracle.has_value(); }
};

/// Quintuple of nuisance evaluations at one observation and grid point.
struct NuisanceValues {
  double m = 0, g = 0, e = 0, rho = 0, omega = 0;
};

namespace detail {

inline GridModels fit_grid_ridge(const Mat& G, const Mat& Z, double lambda,
                                 const FeatureMap& map) {
  RidgeSolver solver(G, lambda, /*intercept=*/true);
  GridModels out;
  out.features = map;
  out.logistic = false;
  out.coef.resize(G.cols() + 1, Z.cols());
  for (Eigen::Index j = 0; j < Z.cols(); ++j) {
    auto [packed, gnorm] = solver.solve(Z.col(j));
    out.coef.col(j) = packed;
    (void)gnorm;
  }
  return out;
}

inline GridModels fit_grid_logistic(const Mat& G, const Mat& Z, double lambda,
                                    const FeatureMap& map) {
  GridModels out;
  out.features = map;
  out.logistic = true;
  out.logit.reserve(static_cast<std::size_t>(Z.cols()));
  Vec warm;
  for (Eigen::Index j = 0; j < Z.cols(); ++j) {
    // Warm-start from the previous grid point; thresholds move slowly.
    LogisticModel mj = fit_ridge_logistic(G, Z.col(j), lambda, map,
                                          warm.size() ? &warm : nullptr);
    warm.resize(mj.theta.size() + 1);
    warm << mj.intercept, mj.theta;
    out.logit.push_back(std::move(mj));
  }
  return out;
}

}  // namespace detail

/// Fit all nuisances per fold on out-of-fold training data.  The generated
/// responses for the g regression come from inner-fold m models so the
/// second-stage noise is independent of the unit the response is evaluated
/// at.  Fold-specific omega normalization uses the training source sample.
inline NuisanceSet fit_nuisances(const TwoSampleDataset& data, const FoldAssignment& folds,
                                 const ThresholdGrid& grid, const NuisanceConfig& config,
                                 const OracleNuisances* known = nullptr) {
  config.check();
  grid.check();
  data.check();
  const std::size_t n = data.n();
  const std::size_t J = grid.size();
  const auto D = detail::DesignMatrices::build(data);

  NuisanceSet set;
  set.config = config;
  set.grid = grid;
  set.known_source = known;
  const bool need_known = config.omega == OmegaLearner::known ||
                          config.rho == RhoLearner::known;
  if (need_known && !known)
    throw invalid_input("fit_nuisances: 'known' learner selected without oracle callables");

  for (int k = 1; k <= folds.K; ++k) {
    std::vector<std::size_t> train;
    for (std::size_t i = 0; i < n; ++i)
      if (folds.K == 1 || folds.fold_of[i] != k) train.push_back(i);

    std::vector<std::size_t> train_target, train_source;
    for (std::size_t i : train)
      (data.observations[i].r == 0 ? train_target : train_source).push_back(i);
    if (train_target.empty())
      throw estimation_error("fit_nuisances: fold " + std::to_string(k) +
                             " training set has no target units");
    if (train_source.empty())
      throw estimation_error("fit_nuisances: fold " + std::to_string(k) +
                             " training set has no source units");

    FoldNuisances fn;
    const Mat Xtr_all = D.rows(D.X, train);
    fn.fx = config.features_x.build(Xtr_all, Rng::derive(config.seed, {static_cast<std::uint64_t>(k), 101}).next_u64());
    fn.fu = config.features_u.build(D.rows(D.U, train_source),
                                    Rng::derive(config.seed, {static_cast<std::uint64_t>(k), 102}).next_u64());

    // e: treatment propensity on training source units.
    if (config.e == ELearner::logistic) {
      const Mat G = fn.fx.transform(D.rows(D.X, train_source));
      Vec lbl(static_cast<Eigen::Index>(train_source.size()));
      for (std::size_t i = 0; i < train_source.size(); ++i)
        lbl(static_cast<Eigen::Index>(i)) = D.a(static_cast<Eigen::Index>(train_source[i]));
      fn.e_model = fit_ridge_logistic(G, lbl, config.lambda_e, fn.fx);
    }

    // omega: density ratio on all training units, normalized on training source.
    if (config.omega == OmegaLearner::known) {
      fn.omega.variant = RatioVariant::known;
      fn.omega.known_fn = [known](const Vec& x) { return known->omega(x); };
      fn.omega.eps = config.eps;
      fn.omega.c_norm = 1.0;
    } else if (config.omega == OmegaLearner::classifier) {
      Vec rlbl(static_cast<Eigen::Index>(train.size()));
      for (std::size_t i = 0; i < train.size(); ++i)
        rlbl(static_cast<Eigen::Index>(i)) = D.r(static_cast<Eigen::Index>(train[i]));
      std::vector<std::size_t> src_local;
      for (std::size_t i = 0; i < train.size(); ++i)
        if (data.observations[train[i]].r == 1) src_local.push_back(i);
      fn.omega = fit_classifier_ratio(Xtr_all, rlbl, config.lambda_omega, config.eps,
                                      src_local, fn.fx);
    } else {
      const Mat Gs = fn.fx.transform(D.rows(D.X, train_source));
      const Mat Gt = fn.fx.transform(D.rows(D.X, train_target));
      fn.omega = fit_entropy_balance(Gs, Gt.colwise().mean().transpose(), config.eps, fn.fx);
    }

    for (int a = 0; a < 2; ++a) {
      FoldArmNuisances& fa = fn.arm[static_cast<std::size_t>(a)];
      std::vector<std::size_t> arm_units, validated;
      for (std::size_t i : train_source) {
        if (static_cast<int>(D.a(static_cast<Eigen::Index>(i))) != a) continue;
        arm_units.push_back(i);
        if (D.m_ind(static_cast<Eigen::Index>(i)) == 1.0) validated.push_back(i);
      }
      if (validated.empty())
        throw estimation_error("fit_nuisances: fold " + std::to_string(k) + ", arm " +
                               std::to_string(a) +
                               ": no validated source units in training set");

      // m: grid-indexed regression of 1(Y<=y_j) on b_U over validated units.
      const Mat GU_val = fn.fu.transform(D.rows(D.U, validated));
      Mat Zval(static_cast<Eigen::Index>(validated.size()), static_cast<Eigen::Index>(J));
      for (std::size_t i = 0; i < validated.size(); ++i)
        for (std::size_t j = 0; j < J; ++j)
          Zval(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
              (D.y(static_cast<Eigen::Index>(validated[i])) <= grid.points[j]) ? 1.0 : 0.0;
      fa.m_models = (config.m == MLearner::logistic)
                        ? detail::fit_grid_logistic(GU_val, Zval, config.lambda_m, fn.fu)
                        : detail::fit_grid_ridge(GU_val, Zval, config.lambda_m, fn.fu);

      // g: ridge of inner-cross-fitted generated responses on b_X over the
      // full training arm (validated or not; all have surrogates).
      const int K_in = config.k_inner;
      std::vector<int> inner_of(arm_units.size());
      {
        std::vector<std::size_t> perm(arm_units.size());
        for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
        Rng rng = Rng::derive(config.seed, {static_cast<std::uint64_t>(k),
                                            static_cast<std::uint64_t>(a), 7});
        rng.shuffle(perm);
        for (std::size_t i = 0; i < perm.size(); ++i)
          inner_of[perm[i]] = 1 + static_cast<int>(i) % K_in;
      }
      Mat Gen(static_cast<Eigen::Index>(arm_units.size()), static_cast<Eigen::Index>(J));
      for (int c = 1; c <= K_in; ++c) {
        std::vector<std::size_t> fit_units, eval_local;
        for (std::size_t i = 0; i < arm_units.size(); ++i) {
          if (inner_of[i] == c)
            eval_local.push_back(i);
          else if (D.m_ind(static_cast<Eigen::Index>(arm_units[i])) == 1.0)
            fit_units.push_back(arm_units[i]);
        }
        if (eval_local.empty()) continue;
        if (fit_units.empty())
          throw estimation_error("fit_nuisances: fold " + std::to_string(k) + ", arm " +
                                 std::to_string(a) + ": inner fold " + std::to_string(c) +
                                 " leaves no validated units to fit m on");
        const Mat Gfit = fn.fu.transform(D.rows(D.U, fit_units));
        Mat Zfit(static_cast<Eigen::Index>(fit_units.size()), static_cast<Eigen::Index>(J));
        for (std::size_t i = 0; i < fit_units.size(); ++i)
          for (std::size_t j = 0; j < J; ++j)
            Zfit(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                (D.y(static_cast<Eigen::Index>(fit_units[i])) <= grid.points[j]) ? 1.0 : 0.0;
        const GridModels inner_m =
            (config.m == MLearner::logistic)
                ? detail::fit_grid_logistic(Gfit, Zfit, config.lambda_m, fn.fu)
                : detail::fit_grid_ridge(Gfit, Zfit, config.lambda_m, fn.fu);
        std::vector<std::size_t> eval_global;
        for (std::size_t i : eval_local) eval_global.push_back(arm_units[i]);
        const Mat Geval = fn.fu.transform(D.rows(D.U, eval_global));
        const Mat pred = inner_m.predict_clipped01(Geval);
        for (std::size_t i = 0; i < eval_local.size(); ++i)
          Gen.row(static_cast<Eigen::Index>(eval_local[i])) =
              pred.row(static_cast<Eigen::Index>(i));
      }
      const Mat GX_arm = fn.fx.transform(D.rows(D.X, arm_units));
      fa.g_models = detail::fit_grid_ridge(GX_arm, Gen, config.lambda_g, fn.fx);

      // rho: validation propensity on the training arm.
      if (config.rho == RhoLearner::logistic) {
        const Mat GU_arm = fn.fu.transform(D.rows(D.U, arm_units));
        Vec mlbl(static_cast<Eigen::Index>(arm_units.size()));
        for (std::size_t i = 0; i < arm_units.size(); ++i)
          mlbl(static_cast<Eigen::Index>(i)) =
              D.m_ind(static_cast<Eigen::Index>(arm_units[i]));
        fa.rho_model = fit_ridge_logistic(GU_arm, mlbl, config.lambda_rho, fn.fu);
      }

      if (config.fit_nos) {
        // Direct regression of 1(Y<=y_j) on b_X over validated units.
        const Mat GX_val = fn.fx.transform(D.rows(D.X, validated));
        fa.g_nos_models = detail::fit_grid_ridge(GX_val, Zval, config.lambda_g, fn.fx);
        // X-only validation propensity.
        const Mat GXa = fn.fx.transform(D.rows(D.X, arm_units));
        Vec mlbl(static_cast<Eigen::Index>(arm_units.size()));
        for (std::size_t i = 0; i < arm_units.size(); ++i)
          mlbl(static_cast<Eigen::Index>(i)) =
              D.m_ind(static_cast<Eigen::Index>(arm_units[i]));
        fa.rho0_model = fit_ridge_logistic(GXa, mlbl, config.lambda_rho, fn.fx);
      }
    }
    set.folds.push_back(std::move(fn));
  }
  return set;
}

/// Oracle pass-through nuisance set (no fitting).
inline NuisanceSet passthrough_nuisances(const OracleNuisances& oracle,
                                         const ThresholdGrid& grid,
                                         double eps = 0.01) {
  NuisanceSet set;
  set.grid = grid;
  set.oracle = oracle;
  set.config.eps = eps;
  return set;
}

/// Evaluate the nuisance quintuple for one observation at a grid point.
/// Interpolation never happens here; y must be on the grid.
inline NuisanceValues evaluate(const NuisanceSet& set, int fold, int arm, double y,
                               const Observation& obs) {
  const auto it = std::lower_bound(set.grid.points.begin(), set.grid.points.end(), y);
  if (it == set.grid.points.end() || *it != y)
    throw invalid_input("evaluate: y is not a grid point");
  const std::size_t j = static_cast<std::size_t>(it - set.grid.points.begin());
  const double eps = set.config.eps;

  Vec x = Eigen::Map<const Vec>(obs.x.data(), static_cast<Eigen::Index>(obs.x.size()));
  NuisanceValues v;
  if (set.passthrough()) {
    const auto& nu = *set.oracle;
    v.g = nu.g(arm, y, x);
    v.omega = nu.omega(x);
    v.e = nu.e(arm, x);
    if (obs.s) {
      Vec s = Eigen::Map<const Vec>(obs.s->data(), static_cast<Eigen::Index>(obs.s->size()));
      v.m = nu.m(arm, y, x, s);
      v.rho = nu.rho(arm, x, s);
    }
    return v;
  }
  if (fold < 1 || fold > static_cast<int>(set.folds.size()))
    throw invalid_input("evaluate: fold out of range");
  const FoldNuisances& fn = set.folds[static_cast<std::size_t>(fold - 1)];
  const FoldArmNuisances& fa = fn.arm[static_cast<std::size_t>(arm)];
  const Vec gx = fn.fx.transform(x);

  {
    Mat row = gx.transpose();
    v.g = fa.g_models.predict_clipped01(row)(0, static_cast<Eigen::Index>(j));
  }
  v.omega = fn.omega.evaluate(x);
  if (fn.e_model) {
    const double p1 = clamp(fn.e_model->predict_prob_features(gx), eps, 1.0 - eps);
    v.e = arm == 1 ? p1 : 1.0 - p1;
  } else {
    v.e = arm == 1 ? set.config.e_known : 1.0 - set.config.e_known;
  }
  if (obs.s) {
    Vec u(x.size() + static_cast<Eigen::Index>(obs.s->size()));
    u << x, Eigen::Map<const Vec>(obs.s->data(), static_cast<Eigen::Index>(obs.s->size()));
    const Vec gu = fn.fu.transform(u);
    Mat row = gu.transpose();
    v.m = fa.m_models.predict_clipped01(row)(0, static_cast<Eigen::Index>(j));
    if (fa.rho_model)
      v.rho = clamp(fa.rho_model->predict_prob_features(gu), eps, 1.0 - eps);
    else if (set.known_source)
      v.rho = set.known_source->rho(arm, x,
                                    Eigen::Map<const Vec>(obs.s->data(),
                                                          static_cast<Eigen::Index>(obs.s->size())));
  }
  return v;
}

/// Dense nuisance evaluations for a whole dataset: each observation evaluated
/// under its own fold's models at every grid point.
struct NuisanceEvaluation {
  Mat m_hat, g_hat;       // n x J; m rows only meaningful for source units
  Mat g_nos_hat;          // n x J (when fitted)
  Vec e_hat, rho_hat, rho0_hat, omega_hat;  // n
  ThresholdGrid grid;
};

inline NuisanceEvaluation evaluate_all(const TwoSampleDataset& data,
                                       const FoldAssignment& folds,
                                       const NuisanceSet& set, int arm) {
  const std::size_t n = data.n();
  const std::size_t J = set.grid.size();
  const auto D = detail::DesignMatrices::build(data);
  const double eps = set.config.eps;

  NuisanceEvaluation ev;
  ev.grid = set.grid;
  ev.m_hat.setZero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(J));
  ev.g_hat.setZero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(J));
  ev.g_nos_hat.setZero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(J));
  ev.e_hat = Vec::Zero(static_cast<Eigen::Index>(n));
  ev.rho_hat = Vec::Zero(static_cast<Eigen::Index>(n));
  ev.rho0_hat = Vec::Zero(static_cast<Eigen::Index>(n));
  ev.omega_hat = Vec::Zero(static_cast<Eigen::Index>(n));

  if (set.passthrough()) {
    const auto& nu = *set.oracle;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& o = data.observations[i];
      Vec x = Eigen::Map<const Vec>(o.x.data(), static_cast<Eigen::Index>(o.x.size()));
      for (std::size_t j = 0; j < J; ++j) {
        ev.g_hat(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
            nu.g(arm, set.grid.points[j], x);
        if (nu.g_nos)
          ev.g_nos_hat(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
              nu.g_nos(arm, set.grid.points[j], x);
      }
      ev.omega_hat(static_cast<Eigen::Index>(i)) = nu.omega(x);
      ev.e_hat(static_cast<Eigen::Index>(i)) = nu.e(arm, x);
      if (nu.rho0) ev.rho0_hat(static_cast<Eigen::Index>(i)) = nu.rho0(arm, x);
      if (o.s) {
        Vec s = Eigen::Map<const Vec>(o.s->data(), static_cast<Eigen::Index>(o.s->size()));
        for (std::size_t j = 0; j < J; ++j)
          ev.m_hat(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
              nu.m(arm, set.grid.points[j], x, s);
        ev.rho_hat(static_cast<Eigen::Index>(i)) = nu.rho(arm, x, s);
      }
    }
    return ev;
  }

  // Group rows by fold and evaluate in blocks so feature transforms and
  // coefficient products are matrix level.
  for (int k = 1; k <= folds.K; ++k) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; ++i)
      if (folds.fold_of[i] == k) idx.push_back(i);
    if (idx.empty()) continue;
    const FoldNuisances& fn = set.folds[static_cast<std::size_t>(k - 1)];
    const FoldArmNuisances& fa = fn.arm[static_cast<std::size_t>(arm)];

    const Mat GX = fn.fx.transform(D.rows(D.X, idx));
    const Mat gpred = fa.g_models.predict_clipped01(GX);
    Mat gnos;
    if (fa.g_nos_models.coef.size() || !fa.g_nos_models.logit.empty())
      gnos = fa.g_nos_models.predict_clipped01(GX);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      ev.g_hat.row(static_cast<Eigen::Index>(idx[i])) =
          gpred.row(static_cast<Eigen::Index>(i));
      if (gnos.size())
        ev.g_nos_hat.row(static_cast<Eigen::Index>(idx[i])) =
            gnos.row(static_cast<Eigen::Index>(i));
      const Vec x = D.X.row(static_cast<Eigen::Index>(idx[i])).transpose();
      ev.omega_hat(static_cast<Eigen::Index>(idx[i])) = fn.omega.evaluate(x);
      if (fn.e_model) {
        const double p1 = clamp(
            fn.e_model->predict_prob_features(GX.row(static_cast<Eigen::Index>(i)).transpose()),
            set.config.eps, 1.0 - set.config.eps);
        ev.e_hat(static_cast<Eigen::Index>(idx[i])) = arm == 1 ? p1 : 1.0 - p1;
      } else {
        ev.e_hat(static_cast<Eigen::Index>(idx[i])) =
            arm == 1 ? set.config.e_known : 1.0 - set.config.e_known;
      }
      if (fa.rho0_model)
        ev.rho0_hat(static_cast<Eigen::Index>(idx[i])) =
            clamp(fa.rho0_model->predict_prob_features(
                      GX.row(static_cast<Eigen::Index>(i)).transpose()),
                  eps, 1.0 - eps);
    }

    std::vector<std::size_t> src;
    for (std::size_t i : idx)
      if (data.observations[i].r == 1) src.push_back(i);
    if (!src.empty()) {
      const Mat GU = fn.fu.transform(D.rows(D.U, src));
      const Mat mpred = fa.m_models.predict_clipped01(GU);
      for (std::size_t i = 0; i < src.size(); ++i) {
        ev.m_hat.row(static_cast<Eigen::Index>(src[i])) =
            mpred.row(static_cast<Eigen::Index>(i));
        if (fa.rho_model)
          ev.rho_hat(static_cast<Eigen::Index>(src[i])) =
              clamp(fa.rho_model->predict_prob_features(
                        GU.row(static_cast<Eigen::Index>(i)).transpose()),
                    eps, 1.0 - eps);
        else if (set.known_source) {
          const auto& o = data.observations[src[i]];
          Vec x = Eigen::Map<const Vec>(o.x.data(), static_cast<Eigen::Index>(o.x.size()));
          Vec s = Eigen::Map<const Vec>(o.s->data(), static_cast<Eigen::Index>(o.s->size()));
          ev.rho_hat(static_cast<Eigen::Index>(src[i])) = set.known_source->rho(arm, x, s);
        }
      }
    }
  }
  return ev;
}

}  // namespace tqte
