// fedstar: command-line front end for experiment files.
//
//   fedstar run <spec>
//   fedstar sweep <spec> --param q --values 0.2,0.4,0.8
//   fedstar pretrain <spec>
//   fedstar validate <spec>
//
// FEDSTAR_OUTPUT_DIR overrides output_dir from the file.

#include <exception>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedstar/fedstar.hpp"

namespace {

void print_report(const fedstar::ComparisonReport& report) {
  for (const auto& m : report.modes) {
    std::cout << std::left << std::setw(14) << fedstar::to_string(m.mode) << std::right << std::fixed
              << std::setprecision(4) << " mean " << m.mean_accuracy << "  std " << m.std_accuracy
              << "  (" << m.trial_accuracies.size() << " trials, L=" << report.labeled_fraction << ")\n";
  }
}

fedstar::ExperimentSpec load(const std::string& path) {
  auto spec = fedstar::load_spec(path);
  fedstar::apply_env_overrides(spec);
  return spec;
}

int cmd_run(const std::string& path) {
  const auto spec = load(path);
  const auto report = fedstar::run_experiment(spec);
  print_report(report);
  std::cout << "wrote " << (std::filesystem::path(spec.output_dir) / "summary.csv").string() << '\n';
  return 0;
}

int cmd_sweep(const std::string& path, const std::string& param, const std::vector<std::string>& values) {
  const auto spec = load(path);
  const auto reports = fedstar::sweep(spec, param, values);
  for (std::size_t i = 0; i < reports.size(); ++i) {
    std::cout << param << " = " << values[i] << '\n';
    print_report(reports[i]);
  }
  return 0;
}

// Pretrains the encoder the first trial would use and saves it as a
// parameter file that `init_file` can point at.
int cmd_pretrain(const std::string& path) {
  const auto spec = load(path);
  const auto task = fedstar::prepare_task(spec);
  const auto arch = fedstar::experiment_arch(spec, task);
  const auto result = fedstar::pretrain_for_trial(spec, arch, fedstar::derive_seed(spec.seed, "trial", 0));

  std::filesystem::create_directories(spec.output_dir);
  const auto out = std::filesystem::path(spec.output_dir) / "pretrained.params";
  fedstar::save_params(out, result.classifier);
  std::cout << std::fixed << std::setprecision(4) << "contrastive loss " << result.epoch_losses.front()
            << " -> " << result.epoch_losses.back() << " over " << result.epoch_losses.size()
            << " epochs\nwrote " << out.string() << '\n';
  return 0;
}

int cmd_validate(const std::string& path) {
  const auto spec = load(path);
  std::cout << path << ": ok\n";
  fedstar::write_spec(std::cout, spec);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated self-training simulator"};
  app.require_subcommand(1);

  std::string spec_path;
  std::string param;
  std::vector<std::string> values;

  auto* run = app.add_subcommand("run", "Run every trial and mode of an experiment");
  run->add_option("spec", spec_path, "Experiment file")->required();

  auto* sweep = app.add_subcommand("sweep", "Repeat an experiment over values of one parameter");
  sweep->add_option("spec", spec_path, "Experiment file")->required();
  sweep->add_option("--param", param, "One of q, E, N, sigma, L, U, tau_max, class_sigma_c")->required();
  sweep->add_option("--values", values, "Comma-separated values")->required()->delimiter(',');

  auto* pretrain = app.add_subcommand("pretrain", "Contrastive pretraining; writes pretrained.params");
  pretrain->add_option("spec", spec_path, "Experiment file")->required();

  auto* validate = app.add_subcommand("validate", "Parse and check an experiment file");
  validate->add_option("spec", spec_path, "Experiment file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(spec_path);
    if (*sweep) return cmd_sweep(spec_path, param, values);
    if (*pretrain) return cmd_pretrain(spec_path);
    if (*validate) return cmd_validate(spec_path);
  } catch (const fedstar::ParseError& e) {
    std::cerr << "fedstar: " << spec_path << ": " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "fedstar: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
