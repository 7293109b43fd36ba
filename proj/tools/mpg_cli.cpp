// Command-line driver: gen-economy, baseline-random, train, eval, report
// and run (all stages). Every subcommand works on one run directory.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mpg/experiment.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::string out = "run";
  std::string preset;
  std::string method;
  std::string utility;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool with_method) {
  cmd->add_option("--config", f.config, "key = value config file");
  cmd->add_option("--seed", f.seed, "master seed");
  cmd->add_option("--out", f.out, "run directory");
  cmd->add_option("--preset", f.preset, "desk | paper-det | paper-stoch")
      ->check(CLI::IsMember({"desk", "paper-det", "paper-stoch"}));
  cmd->add_option("--utility", f.utility, "linear | cobb-douglas | leontief");
  if (with_method) {
    cmd->add_option("--method", f.method, "gapnet | npm | both")->check(CLI::IsMember({"gapnet", "npm", "both"}));
  }
}

// Explicit --config wins; otherwise an existing run directory's resolved
// config is reused. Flags are applied last.
mpg::ExperimentConfig resolve(const CommonFlags& f) {
  std::string path = f.config;
  const mpg::RunPaths paths{f.out};
  if (path.empty() && mpg::fs::exists(paths.config())) path = paths.config().string();
  mpg::KeyValues over;
  if (!f.preset.empty()) over.entries.emplace_back("preset", f.preset);
  if (!f.utility.empty()) over.entries.emplace_back("economy.utility", f.utility);
  if (!f.method.empty()) over.entries.emplace_back("method", f.method);
  if (f.seed) over.entries.emplace_back("seed", std::to_string(*f.seed));
  mpg::ExperimentConfig cfg = mpg::load_config(path, over);
  mpg::validate(cfg);
  return cfg;
}

void ensure_economy(const mpg::RunPaths& paths, const mpg::ExperimentConfig& cfg) {
  if (!mpg::fs::exists(paths.economy())) mpg::stage_economy(paths, cfg);
}

void print_rows(const std::vector<mpg::MetricRow>& rows) {
  for (const auto& r : rows) {
    if (r.method == "random") continue;
    std::printf("%-8s %-22s %-15s raw %-12.6g normalized %.6g\n", r.method.c_str(), r.economy_id.c_str(),
                r.metric.c_str(), r.raw, r.normalized);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Markov pseudo-game equilibrium solver for exchange economies"};
  app.require_subcommand(1);

  CommonFlags gen_f, base_f, train_f, eval_f, run_f;
  std::size_t n_random = 0;
  bool grid = false;
  std::vector<std::string> report_runs;
  std::string report_out = "report";

  auto* gen = app.add_subcommand("gen-economy", "sample an economy and write economy.json");
  add_common(gen, gen_f, false);
  auto* base = app.add_subcommand("baseline-random", "metrics of uniformly random policies");
  add_common(base, base_f, false);
  base->add_option("--n", n_random, "number of random policies");
  auto* train = app.add_subcommand("train", "train GAPNet and/or the projection method");
  add_common(train, train_f, true);
  train->add_flag("--grid", grid, "learning-rate grid search before the final run");
  auto* eval = app.add_subcommand("eval", "evaluate trained checkpoints against the baseline");
  add_common(eval, eval_f, true);
  auto* rep = app.add_subcommand("report", "aggregate several run directories");
  rep->add_option("--runs", report_runs, "run directories")->required();
  rep->add_option("--out", report_out, "report directory");
  auto* run = app.add_subcommand("run", "all stages in one directory");
  add_common(run, run_f, true);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const auto cfg = resolve(gen_f);
      mpg::stage_economy(mpg::RunPaths{gen_f.out}, cfg);
      std::printf("wrote %s\n", mpg::RunPaths{gen_f.out}.economy().c_str());
    } else if (base->parsed()) {
      auto cfg = resolve(base_f);
      if (n_random > 0) cfg.baseline_policies = n_random;
      const mpg::RunPaths paths{base_f.out};
      ensure_economy(paths, cfg);
      mpg::stage_baseline(paths, cfg);
      std::printf("wrote %s (%zu policies)\n", paths.baseline().c_str(), cfg.baseline_policies);
    } else if (train->parsed()) {
      auto cfg = resolve(train_f);
      const mpg::RunPaths paths{train_f.out};
      ensure_economy(paths, cfg);
      if (grid) {
        if (!mpg::fs::exists(paths.baseline())) mpg::stage_baseline(paths, cfg);
        cfg = mpg::grid_search(paths, cfg);
        mpg::write_text(paths.config(), mpg::to_config_text(cfg));
        std::printf("grid: gapnet lr %.3g, npm lr %.3g (see %s)\n", cfg.gapnet.lr_theta, cfg.npm.lr,
                    paths.grid().c_str());
      }
      const auto out = mpg::stage_train(paths, cfg);
      if (out.gapnet) {
        const auto& best = mpg::best_iterate(*out.gapnet);
        std::printf("gapnet: best iterate %zu, exploitability %.6g%s\n", best.iteration, best.exploitability,
                    out.gapnet->diverged ? (" (" + out.gapnet->message + ")").c_str() : "");
      }
      if (out.npm) std::printf("npm: final loss %.6g\n", out.npm->trace.checkpoints.back().cumulative_regret);
    } else if (eval->parsed()) {
      const auto cfg = resolve(eval_f);
      const mpg::RunPaths paths{eval_f.out};
      if (!mpg::fs::exists(paths.baseline())) {
        throw std::runtime_error("missing " + paths.baseline().string() + "; run baseline-random first");
      }
      print_rows(mpg::stage_eval(paths, cfg));
    } else if (rep->parsed()) {
      const std::vector<mpg::fs::path> runs(report_runs.begin(), report_runs.end());
      mpg::report(runs, report_out);
      std::printf("wrote %s/report.csv\n", report_out.c_str());
    } else if (run->parsed()) {
      const auto cfg = resolve(run_f);
      print_rows(mpg::run_experiment(cfg, run_f.out));
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
