#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "tqte/simlab.hpp"

namespace tqte {

namespace detail {

/// Reject unknown keys with a field-path message.
inline void check_keys(const json& j, const std::set<std::string>& allowed,
                       const std::string& path) {
  if (!j.is_object()) throw invalid_input(path + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!allowed.count(key))
      throw invalid_input(path + "." + key + ": unknown key");
  }
}

}  // namespace detail

inline json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw invalid_input("cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw invalid_input(path + ": JSON parse error: " + e.what());
  }
  return j;
}

inline void validate_feature_spec(const json& j, const std::string& path) {
  detail::check_keys(j, {"kind", "degree", "rank", "bandwidth"}, path);
  const std::string k = j.value("kind", "raw");
  if (k != "raw" && k != "polynomial" && k != "random_fourier")
    throw invalid_input(path + ".kind: must be raw|polynomial|random_fourier");
}

inline void validate_learners(const json& j, const std::string& path) {
  detail::check_keys(j,
                     {"m", "g", "e", "rho", "omega", "e_known", "lambda_m", "lambda_g",
                      "lambda_e", "lambda_rho", "lambda_omega", "features_x",
                      "features_u", "eps", "k_inner", "fit_nos", "seed"},
                     path);
  if (j.contains("features_x")) validate_feature_spec(j.at("features_x"), path + ".features_x");
  if (j.contains("features_u")) validate_feature_spec(j.at("features_u"), path + ".features_u");
}

inline void validate_dgp_spec(const json& j, const std::string& path) {
  detail::check_keys(j,
                     {"experiment", "family", "p", "pi1", "c", "v", "randomized", "piA",
                      "e_coef", "e_intercept", "lambda_S", "beta", "sigma_S",
                      "rho_constant", "rho_bar"},
                     path);
}

/// Default learner stack for simulation studies: penalized logistic threshold
/// regressions for m on degree-2 polynomial features, ridge for g, a logistic
/// validation propensity and a classifier density ratio. The penalties and the
/// positivity clip are deliberately conservative: with a low labeling rate the
/// inverse validation weights 1/(e rho) are the dominant noise source, and
/// shrinking rho-hat toward a constant (the intercept is unpenalized) trades a
/// little tail fit for much lower weight variance.
inline NuisanceConfig default_sim_learners() {
  NuisanceConfig nc;
  nc.m = MLearner::logistic;
  nc.lambda_m = 0.05;
  nc.lambda_rho = 0.05;
  nc.eps = 0.05;
  nc.features_x.kind = FeatureKind::polynomial;
  nc.features_x.degree = 2;
  nc.features_u.kind = FeatureKind::polynomial;
  nc.features_u.degree = 2;
  return nc;
}

inline ExperimentConfig experiment_config_from_json(const json& j) {
  detail::check_keys(j,
                     {"experiment", "n", "reps", "K", "seed", "roster", "taus",
                      "band_taus", "alpha", "B", "grids", "ns", "workers", "out_dir",
                      "svg", "n_truth", "n_theory", "learners"},
                     "config");
  ExperimentConfig c;
  c.learners = default_sim_learners();
  if (j.contains("experiment")) c.experiment = j.at("experiment");
  if (j.contains("n")) c.n = j.at("n");
  if (j.contains("reps")) c.reps = j.at("reps");
  if (j.contains("K")) c.K = j.at("K");
  if (j.contains("seed")) c.seed = j.at("seed");
  if (j.contains("roster")) c.roster = j.at("roster").get<std::vector<std::string>>();
  if (j.contains("taus")) c.taus = j.at("taus").get<std::vector<double>>();
  if (j.contains("band_taus")) c.band_taus = j.at("band_taus").get<std::vector<double>>();
  if (j.contains("alpha")) c.alpha = j.at("alpha");
  if (j.contains("B")) c.B = j.at("B");
  if (j.contains("grids")) c.grids = j.at("grids").get<std::vector<std::string>>();
  if (j.contains("ns")) c.ns = j.at("ns").get<std::vector<std::size_t>>();
  if (j.contains("workers")) c.workers = j.at("workers");
  if (j.contains("out_dir")) c.out_dir = j.at("out_dir");
  if (j.contains("svg")) c.svg = j.at("svg");
  if (j.contains("n_truth")) c.n_truth = j.at("n_truth");
  if (j.contains("n_theory")) c.n_theory = j.at("n_theory");
  if (j.contains("learners")) {
    validate_learners(j.at("learners"), "config.learners");
    c.learners = NuisanceConfig::from_json(j.at("learners"));
  }
  return c;
}

inline void validate_experiment_config(const ExperimentConfig& c) {
  if (c.experiment != "exp1" && c.experiment != "exp2" && c.experiment != "exp3" &&
      c.experiment != "exp4")
    throw invalid_input("config.experiment: must be exp1|exp2|exp3|exp4");
  if (c.reps < 1) throw invalid_input("config.reps: must be >= 1");
  if (c.n < 50) throw invalid_input("config.n: must be >= 50");
  if (c.K < 1) throw invalid_input("config.K: must be >= 1");
  if (!(c.alpha > 0 && c.alpha < 1)) throw invalid_input("config.alpha: outside (0,1)");
  if (c.workers < 1) throw invalid_input("config.workers: must be >= 1");
  if (c.grids.empty()) throw invalid_input("config.grids: must be nonempty");
  for (const auto& g : c.grids) (void)GridChoice::parse(g);
  TauGrid t;
  t.levels = c.taus;
  t.check();
  if (!c.band_taus.empty()) {
    TauGrid bt;
    bt.levels = c.band_taus;
    bt.check();
  }
  c.learners.check();
}

struct AnalysisConfig {
  std::string dataset;            // CSV path
  std::vector<std::string> roster = {"SA"};
  std::vector<double> taus = {0.25, 0.50, 0.75};
  std::vector<double> band_taus;  // optional uniform band over these taus
  std::string grid = "growing";
  double alpha = 0.05;
  std::size_t B = 1000;
  int K = 5;
  std::uint64_t seed = 1;
  std::string out_dir = "out";
  bool svg = false;
  bool balance = false;           // standardized-mean-difference table
  NuisanceConfig learners;

  static AnalysisConfig from_json(const json& j) {
    detail::check_keys(j,
                       {"dataset", "roster", "taus", "band_taus", "grid", "alpha", "B",
                        "K", "seed", "out_dir", "svg", "balance", "learners"},
                       "config");
    AnalysisConfig c;
    c.learners = default_sim_learners();
    c.learners.e = ELearner::logistic;  // treatment mechanism unknown in user data
    if (!j.contains("dataset")) throw invalid_input("config.dataset: required");
    c.dataset = j.at("dataset");
    if (j.contains("roster")) c.roster = j.at("roster").get<std::vector<std::string>>();
    if (j.contains("taus")) c.taus = j.at("taus").get<std::vector<double>>();
    if (j.contains("band_taus")) c.band_taus = j.at("band_taus").get<std::vector<double>>();
    if (j.contains("grid")) c.grid = j.at("grid");
    if (j.contains("alpha")) c.alpha = j.at("alpha");
    if (j.contains("B")) c.B = j.at("B");
    if (j.contains("K")) c.K = j.at("K");
    if (j.contains("seed")) c.seed = j.at("seed");
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir");
    if (j.contains("svg")) c.svg = j.at("svg");
    if (j.contains("balance")) c.balance = j.at("balance");
    if (j.contains("learners")) {
      validate_learners(j.at("learners"), "config.learners");
      c.learners = NuisanceConfig::from_json(j.at("learners"));
    }
    check(c);
    return c;
  }

  static void check(const AnalysisConfig& c) {
    if (c.roster.empty()) throw invalid_input("config.roster: must be nonempty");
    for (const auto& m : c.roster)
      if (m != "SA" && m != "NoS" && m != "IPW" && m != "Plugin" && m != "Source")
        throw invalid_input("config.roster: unknown method '" + m + "'");
    TauGrid t;
    t.levels = c.taus;
    t.check();
    if (!c.band_taus.empty()) {
      TauGrid bt;
      bt.levels = c.band_taus;
      bt.check();
    }
    (void)GridChoice::parse(c.grid);
    if (!(c.alpha > 0 && c.alpha < 1)) throw invalid_input("config.alpha: outside (0,1)");
    if (c.K < 1) throw invalid_input("config.K: must be >= 1");
    c.learners.check();
  }

  /// DGP spec for the truth command, read from a config with a "dgp" object.
  static DgpSpec dgp_from_json(const json& j) {
    if (!j.contains("dgp")) throw invalid_input("config.dgp: required for truth");
    validate_dgp_spec(j.at("dgp"), "config.dgp");
    return DgpSpec::from_json(j.at("dgp"));
  }
};

}  // namespace tqte
