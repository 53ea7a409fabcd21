// condistfl: dataset generation, federated training, evaluation, reports
// and gradient certification.
//
// Exit status: 0 success, 1 failure (including a failed gradcheck), 2 usage.
// Failures print one line: "error: <Class>: <message>".

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "condist/config.hpp"
#include "condist/errors.hpp"
#include "condist/experiment.hpp"
#include "condist/gradcert.hpp"

namespace fs = std::filesystem;

namespace {

std::string one_line(std::string s) {
  for (auto& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

int fail(const std::string& kind, const std::string& what) {
  std::cerr << "error: " << kind << ": " << one_line(what) << "\n";
  return 1;
}

struct Options {
  std::string config;
  std::string data;
  std::string out;
  std::string run;
  std::vector<std::string> runs;
  bool standalone = false;
  bool parallel = false;
  bool no_validate = false;
  int instances = 20;
  double perturb = 0.0;
  std::uint64_t seed = 0x5eed;
};

condist::ExperimentConfig load(const Options& o) {
  condist::ExperimentConfig cfg = condist::parse_config(o.config);
  if (o.standalone) cfg.standalone = true;
  if (o.parallel) cfg.federation.parallel_clients = true;
  if (!o.out.empty()) cfg.output_dir = o.out;
  condist::validate_config(cfg);
  return cfg;
}

condist::ScenarioData data_for(const condist::ExperimentConfig& cfg, const std::string& dir) {
  if (dir.empty()) return condist::build_scenario_data(cfg);
  return condist::read_scenario_data(dir, cfg);
}

int cmd_gen_data(const Options& o) {
  const auto cfg = load(o);
  const fs::path out = o.out.empty() ? fs::path(cfg.output_dir) / "data" : fs::path(o.out);
  const auto data = condist::build_scenario_data(cfg);
  condist::write_scenario_data(out, cfg, data);
  std::size_t n = data.val.size() + data.test.size() + data.out_of_federation.size();
  for (const auto& c : data.clients) n += c.train.size();
  std::cout << "wrote " << n << " samples to " << out.string() << "\n";
  return 0;
}

int cmd_train(const Options& o) {
  const auto cfg = load(o);
  const auto data = data_for(cfg, o.data);
  const auto history = condist::run_experiment(cfg, data, !o.no_validate);
  for (const auto& r : history.rounds) {
    double last = 0.0;
    for (const auto& traj : r.client_losses) last += traj.empty() ? 0.0 : traj.back();
    std::cout << "round " << r.round << " lambda " << r.lambda << " mean_last_loss "
              << last / static_cast<double>(r.client_losses.size());
    if (!r.val_dice.empty()) {
      double m = 0.0;
      for (double v : r.val_dice) m += v;
      std::cout << " val_dice " << m / static_cast<double>(r.val_dice.size());
    }
    std::cout << " (" << r.wall_seconds << " s)\n";
  }
  condist::write_run(cfg.output_dir, cfg, history);
  std::cout << "run_checksum " << std::hex << history.checksum() << std::dec << "\n"
            << "wrote " << cfg.output_dir << "\n";
  return 0;
}

int cmd_evaluate(const Options& o) {
  const auto run = condist::read_run(o.run);
  const auto data = data_for(run.config, o.data);
  const auto eval = condist::evaluate_run(run.config, data, run.global, run.locals);
  condist::write_evaluation(o.run, condist::method_label(run.config), eval);
  std::cout << "in_federation_mean_dice " << eval.in_federation.mean_dice() << "\n"
            << "out_of_federation_mean_dice " << eval.out_of_federation.mean_dice() << "\n";
  if (!eval.forgetting.entries.empty()) {
    std::cout << "local_unlabeled_mean_dice " << eval.forgetting.mean_local() << "\n"
              << "forgetting_mean_gap " << eval.forgetting.mean_gap() << "\n";
  }
  return 0;
}

int cmd_report(const Options& o) {
  std::vector<fs::path> dirs(o.runs.begin(), o.runs.end());
  condist::write_report(dirs, o.out);
  std::cout << "wrote " << (fs::path(o.out) / "report.csv").string() << "\n";
  return 0;
}

int cmd_gradcheck(const Options& o) {
  condist::GradCertOptions g;
  g.instances = o.instances;
  g.perturbation = o.perturb;
  g.seed = o.seed;
  const auto result = condist::run_gradcert(g);
  for (const auto& s : result.suites) {
    std::cout << (s.passed ? "PASS " : "FAIL ") << s.name << " instances=" << s.cases.size()
              << " checked=" << s.checked << " skipped=" << s.skipped
              << " max_rel_error=" << s.max_rel_error << "\n";
  }
  if (!result.passed()) return fail("GradientCheckFailure", "analytic and numeric gradients disagree");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated conditional distillation simulator"};
  app.set_version_flag("--version", std::string(CONDIST_VERSION));
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen-data", "Generate and write the scenario datasets");
  gen->add_option("-c,--config", o.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  gen->add_option("-o,--out", o.out, "Dataset directory (default <output_dir>/data)");

  auto* train = app.add_subcommand("train", "Run the federation and write a run directory");
  train->add_option("-c,--config", o.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("-d,--data", o.data, "Dataset directory from gen-data (default: generate)");
  train->add_option("-o,--out", o.out, "Run directory (overrides output_dir)");
  train->add_flag("--standalone", o.standalone, "Train the single client without federation");
  train->add_flag("--parallel", o.parallel, "Run clients on concurrent threads");
  train->add_flag("--no-validate", o.no_validate, "Skip per-round validation");

  auto* eval = app.add_subcommand("evaluate", "Evaluate a run directory");
  eval->add_option("-r,--run", o.run, "Run directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("-d,--data", o.data, "Dataset directory (default: regenerate)");

  auto* report = app.add_subcommand("report", "Tabulate evaluated runs");
  report->add_option("runs", o.runs, "Evaluated run directories")->required()->check(CLI::ExistingDirectory);
  report->add_option("-o,--out", o.out, "Report directory")->required();

  auto* grad = app.add_subcommand("gradcheck", "Run the gradient certification suite");
  grad->add_option("-n,--instances", o.instances, "Instances per suite")->check(CLI::PositiveNumber);
  grad->add_option("--perturb", o.perturb, "Relative perturbation of analytic gradients");
  grad->add_option("--seed", o.seed, "Instance seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e);
    std::cerr << "error: UsageError: " << one_line(e.what()) << "\n";
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(o);
    if (*train) return cmd_train(o);
    if (*eval) return cmd_evaluate(o);
    if (*report) return cmd_report(o);
    if (*grad) return cmd_gradcheck(o);
  } catch (const condist::Error& e) {
    return fail(e.kind(), e.what());
  } catch (const std::exception& e) {
    return fail("InternalError", e.what());
  }
  return 2;
}
