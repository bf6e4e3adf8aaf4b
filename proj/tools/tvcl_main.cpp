#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tvcl/experiment.hpp"

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kIo = 3, kMissing = 4, kDiverged = 5 };

std::vector<double> parse_values(const std::string& text) {
  std::vector<double> values;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      values.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw tvcl::ConfigError("--values", "'" + item + "' is not a number");
    }
  }
  if (values.empty()) throw tvcl::ConfigError("--values", "at least one value is required");
  return values;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual learning with PEFT modules and task arithmetic"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::size_t jobs = 1;
  std::string dimension;
  std::string values_text;

  auto add_common = [&](CLI::App* sub, bool parallel) {
    sub->add_option("--config", config_path, "Experiment config (JSON)")->required();
    sub->add_option("--out", out_dir, "Output directory (overrides run.output_dir)");
    if (parallel) sub->add_option("--jobs", jobs, "Independent runs to execute in parallel")->check(CLI::PositiveNumber);
  };
  CLI::App* pretrain = app.add_subcommand("pretrain", "Pre-train and freeze the backbone");
  add_common(pretrain, false);
  CLI::App* run = app.add_subcommand("run", "Run the configured method over all orders and seeds");
  add_common(run, true);
  CLI::App* sweep = app.add_subcommand("sweep", "One run per value of a merge or PEFT dimension");
  add_common(sweep, true);
  sweep->add_option("--dimension", dimension, "lambda | lora_rank | adapter_bottleneck")->required();
  sweep->add_option("--values", values_text, "Comma-separated values")->required();
  CLI::App* ablate = app.add_subcommand("ablate-init", "Compare noinit, pre and mean initialization");
  add_common(ablate, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    tvcl::ExperimentConfig config = tvcl::load_experiment_config(config_path);
    if (!out_dir.empty()) config.run.output_dir = out_dir;
    const auto out = config.output_dir();

    if (pretrain->parsed()) {
      tvcl::cmd_pretrain(config, out);
      std::cout << "backbone written to " << (out / "backbone.tvec").string() << "\n";
    } else if (run->parsed()) {
      const auto reports = tvcl::cmd_run(config, out, jobs);
      for (const auto& r : reports) std::cout << tvcl::csv_row(r);
    } else if (sweep->parsed()) {
      const auto dim = tvcl::sweep_dimension_from_string(dimension);
      const auto rows = tvcl::cmd_sweep(config, dim, parse_values(values_text), out, jobs);
      for (const auto& row : rows) {
        std::printf("%g,%s\n", row.value, tvcl::format_one_decimal(100.0 * row.average_accuracy).c_str());
      }
    } else if (ablate->parsed()) {
      const auto table = tvcl::cmd_ablate_init(config, out, jobs);
      for (const auto& row : table.rows) {
        std::cout << tvcl::to_string(row.init) << "," << tvcl::format_one_decimal(100.0 * row.average_accuracy) << "\n";
      }
      std::cout << "ordering pre >= mean >= noinit: " << (table.ordering_holds ? "holds" : "does not hold") << "\n";
    }
  } catch (const tvcl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const tvcl::MissingArtifactError& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return kMissing;
  } catch (const tvcl::RunDivergedError& e) {
    std::cerr << "diverged in run " << e.what() << "\n";
    return kDiverged;
  } catch (const tvcl::DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return kDiverged;
  } catch (const tvcl::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const tvcl::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
  return kOk;
}
