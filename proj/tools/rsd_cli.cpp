#include <iostream>

#include "CLI11.hpp"
#include "rsd/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Restoration score distillation toolkit"};
  app.require_subcommand(1);

  rsd::RunOptions options;
  std::uint64_t seed = 0;
  std::string out_dir;

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"pretrain", "train a teacher denoiser on corrupted observations"},
      {"distill", "distill a one-step generator from a teacher"},
      {"verify-theorem", "check linear-theory recovery on random problems"},
      {"evaluate", "score saved generator checkpoints"},
      {"sample", "draw samples from a generator or the teacher"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", options.config_path, "experiment config file")->required();
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--out-dir", out_dir, "override the output directory");
    sub->add_flag("--dry-run", options.dry_run, "validate and print the plan only");
    sub->add_flag("--timings", options.timings, "add wall-time columns to CSV outputs");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? rsd::kExitOk : rsd::kExitConfig;
  }

  for (const auto* sub : app.get_subcommands()) {
    options.command = sub->get_name();
    if (sub->count("--seed")) options.seed = seed;
    if (sub->count("--out-dir")) options.out_dir = out_dir;
  }
  return rsd::run_command(options, std::cout, std::cerr);
}
