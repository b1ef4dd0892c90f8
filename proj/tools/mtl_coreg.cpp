// mtl-coreg: synthetic multi-task pipeline with two-view co-regularized
// classifiers, noisy-label filtering and per-task checkpoint/threshold selection.

#include <CLI11.hpp>
#include <cstdint>
#include <string>

#include "mtl/commands.hpp"
#include "mtl/error.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Two-view co-regularized multi-task learning toolkit", "mtl-coreg"};
  app.set_version_flag("--version", mtl::kToolVersion);

  std::string command;
  std::string config;
  std::uint64_t seed = 0;
  std::size_t group = 0;
  std::string pretrain_on;
  mtl::CommandOptions options;

  app.add_option("command", command, "synth | train | filter | select | ensemble | eval | ablate")
      ->required()
      ->check(CLI::IsMember({"synth", "train", "filter", "select", "ensemble", "eval", "ablate"}));
  app.add_option("--config", config, "JSON config file, or a manifest from a previous run")->required();
  auto* seed_opt = app.add_option("--seed", seed, "override the config seed");
  app.add_option("--threads", options.threads, "worker threads; 1 gives bitwise-reproducible runs")
      ->check(CLI::PositiveNumber);
  app.add_option("--out", options.out_dir, "artifact directory (default: out)");
  auto* group_opt = app.add_option("--group", group, "restrict to task group G from the config");
  auto* pretrain_opt =
      app.add_option("--pretrain-on", pretrain_on, "train: pretrain on train + this dataset, then finetune");
  app.add_option("--dataset", options.eval_set, "eval: val or test (default test when it exists)")
      ->check(CLI::IsMember({"val", "test"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(mtl::ExitCode::kUsage);
  }

  options.config_path = config;
  if (*seed_opt) options.seed = seed;
  if (*group_opt) options.group = group;
  if (*pretrain_opt) options.pretrain_on = pretrain_on;
  return mtl::run_command(command, options);
}
