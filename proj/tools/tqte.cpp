// Command-line front end: simulate Monte Carlo experiments, compute DGP
// ground truth, and analyze user-supplied two-sample CSV datasets.
//
// Exit codes: 0 success, 1 runtime estimation failure, 2 configuration or
// validation failure.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tqte/analyze.hpp"
#include "tqte/config.hpp"
#include "tqte/svg.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

std::uint64_t seed_fallback() {
  if (const char* env = std::getenv("TQTE_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw tqte::invalid_input("TQTE_SEED: not an unsigned integer");
    }
  }
  return 1;
}

struct CommonFlags {
  std::string config_path;
  std::optional<std::string> experiment;
  std::optional<std::size_t> n;
  std::optional<int> reps;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::optional<std::string> out;
  bool svg = false;
  std::optional<std::string> grid;
  std::optional<double> alpha;
  std::optional<std::size_t> bootstrap;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "JSON config file");
  cmd->add_option("--experiment", f.experiment, "Experiment id (exp1..exp4)");
  cmd->add_option("--n", f.n, "Sample size per replication");
  cmd->add_option("--reps", f.reps, "Number of Monte Carlo replications");
  cmd->add_option("--seed", f.seed, "Master seed (fallback: TQTE_SEED env, then 1)");
  cmd->add_option("--workers", f.workers, "Worker thread count");
  cmd->add_option("--out", f.out, "Output directory");
  cmd->add_flag("--svg", f.svg, "Also emit SVG plots");
  cmd->add_option("--grid", f.grid, "Threshold grid: fixed:J or growing");
  cmd->add_option("--alpha", f.alpha, "Nominal level for intervals/bands");
  cmd->add_option("--bootstrap", f.bootstrap, "Multiplier bootstrap draws B");
}

int cmd_simulate(const CommonFlags& f) {
  tqte::ExperimentConfig cfg;
  bool config_has_seed = false;
  if (!f.config_path.empty()) {
    const tqte::json j = tqte::load_json(f.config_path);
    cfg = tqte::experiment_config_from_json(j);
    config_has_seed = j.contains("seed");
  } else {
    cfg.learners = tqte::default_sim_learners();
  }
  if (f.experiment) cfg.experiment = *f.experiment;
  if (f.n) cfg.n = *f.n;
  if (f.reps) cfg.reps = *f.reps;
  if (f.seed)
    cfg.seed = *f.seed;
  else if (!config_has_seed)
    cfg.seed = seed_fallback();
  if (f.workers) cfg.workers = *f.workers;
  if (f.out) cfg.out_dir = *f.out;
  if (f.svg) cfg.svg = true;
  if (f.grid) cfg.grids = {*f.grid};
  if (f.alpha) cfg.alpha = *f.alpha;
  if (f.bootstrap) cfg.B = *f.bootstrap;
  tqte::validate_experiment_config(cfg);

  const tqte::ExperimentReport report = tqte::run_experiment(cfg);
  std::filesystem::create_directories(cfg.out_dir);
  report.to_csv(cfg.out_dir + "/report.csv");

  // Console summary: one line per (cell, method) at the first reporting tau.
  std::cout << "cell,label,method,tau,bias,rmse,coverage\n";
  for (const auto& r : report.rows) {
    if (r.tau != cfg.taus.front()) continue;
    std::cout << r.cell << ',' << r.cell_label << ',' << r.method << ',' << r.tau << ','
              << r.bias << ',' << r.rmse << ','
              << (std::isnan(r.coverage) ? std::string("-") : std::to_string(r.coverage))
              << "\n";
  }
  if (!report.failures.empty()) {
    std::map<std::size_t, int> by_cell;
    for (const auto& fl : report.failures) ++by_cell[fl.cell];
    std::cerr << "replication errors:";
    for (const auto& [cell, count] : by_cell)
      std::cerr << " cell " << cell << ": " << count;
    std::cerr << "\n";
    return kExitRuntime;
  }

  if (cfg.svg) {
    // RMSE by cell, one line per method, at the first reporting tau.
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> lines;
    for (const auto& r : report.rows) {
      if (r.tau != cfg.taus.front()) continue;
      lines[r.method].first.push_back(static_cast<double>(r.cell));
      lines[r.method].second.push_back(r.rmse);
    }
    tqte::SvgPlot plot("RMSE by cell (tau = " + tqte::fmt17(cfg.taus.front()) + ")",
                       "cell", "RMSE");
    const std::vector<std::string> palette = {"#08519c", "#a63603", "#54278f",
                                              "#006d2c", "#99000d", "#636363"};
    std::size_t ci = 0;
    for (const auto& [method, xy] : lines)
      plot.add_line(xy.first, xy.second, palette[ci++ % palette.size()], method);
    plot.write(cfg.out_dir + "/report.svg");
  }
  return kExitOk;
}

int cmd_truth(const CommonFlags& f) {
  if (f.config_path.empty() && !f.experiment)
    throw tqte::invalid_input("truth: needs --config with a dgp object or --experiment");
  tqte::DgpSpec spec;
  std::vector<double> taus = {0.25, 0.50, 0.75};
  std::size_t n_truth = 200000;
  std::string out_dir = "out";
  std::uint64_t seed = f.seed ? *f.seed : seed_fallback();
  if (!f.config_path.empty()) {
    const tqte::json j = tqte::load_json(f.config_path);
    tqte::detail::check_keys(j, {"dgp", "taus", "n_truth", "seed", "out_dir"}, "config");
    spec = tqte::AnalysisConfig::dgp_from_json(j);
    if (j.contains("taus")) taus = j.at("taus").get<std::vector<double>>();
    if (j.contains("n_truth")) n_truth = j.at("n_truth");
    if (j.contains("seed") && !f.seed) seed = j.at("seed");
    if (j.contains("out_dir")) out_dir = j.at("out_dir");
  } else {
    spec = tqte::DgpSpec::defaults(*f.experiment);
  }
  if (f.out) out_dir = *f.out;
  if (n_truth < 100000)
    std::cerr << "warning: n_truth=" << n_truth
              << " < 100000; truth values may carry visible Monte Carlo error\n";
  tqte::TauGrid tg;
  tg.levels = taus;
  const tqte::TruthTable truth = tqte::compute_truth(spec, tg, n_truth, seed);
  std::filesystem::create_directories(out_dir);
  truth.to_csv(out_dir + "/truth.csv");
  std::cout << "tau,delta\n";
  for (std::size_t l = 0; l < taus.size(); ++l)
    std::cout << taus[l] << ',' << truth.delta[l] << "\n";
  return kExitOk;
}

int cmd_analyze(const CommonFlags& f) {
  if (f.config_path.empty()) throw tqte::invalid_input("analyze: --config is required");
  tqte::json j = tqte::load_json(f.config_path);
  tqte::AnalysisConfig cfg = tqte::AnalysisConfig::from_json(j);
  if (f.seed) cfg.seed = *f.seed;
  if (f.out) cfg.out_dir = *f.out;
  if (f.svg) cfg.svg = true;
  if (f.grid) cfg.grid = *f.grid;
  if (f.alpha) cfg.alpha = *f.alpha;
  if (f.bootstrap) cfg.B = *f.bootstrap;
  tqte::AnalysisConfig::check(cfg);

  const tqte::TwoSampleDataset data = tqte::read_csv(cfg.dataset);
  const tqte::AnalysisResult res = tqte::analyze(data, cfg);
  tqte::write_analysis(res, cfg);

  std::cout << "method,tau,delta_hat,se,ci_lo,ci_hi\n";
  for (const auto& r : res.rows) {
    std::cout << r.method << ',' << r.tau << ',' << r.delta << ',';
    if (!std::isnan(r.se))
      std::cout << r.se << ',' << r.ci_lo << ',' << r.ci_hi;
    else
      std::cout << ",,";
    std::cout << "\n";
  }
  std::cout << "ess_omega=" << res.ess << " (fraction " << res.ess_fraction
            << "), validation_rate=" << res.validation_rate << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transported distributional and quantile treatment-effect estimation"};
  app.require_subcommand(1);

  CommonFlags sim_flags, truth_flags, analyze_flags;
  CLI::App* sim = app.add_subcommand("simulate", "Run a Monte Carlo experiment");
  add_common(sim, sim_flags);
  CLI::App* tru = app.add_subcommand("truth", "Compute ground truth for a DGP");
  add_common(tru, truth_flags);
  CLI::App* ana = app.add_subcommand("analyze", "Analyze a two-sample CSV dataset");
  add_common(ana, analyze_flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (sim->parsed()) return cmd_simulate(sim_flags);
    if (tru->parsed()) return cmd_truth(truth_flags);
    return cmd_analyze(analyze_flags);
  } catch (const tqte::invalid_input& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const tqte::estimation_error& e) {
    std::cerr << "estimation error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
