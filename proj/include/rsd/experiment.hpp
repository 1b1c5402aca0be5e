#pragma once

// Config-driven experiment runner behind the command-line tool.
//
// Sections (see docs/config_schema.md): [experiment], [data], [operator],
// [noise], [model], [pretrain], [distill], [sample], [theory].

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "rsd/config.hpp"
#include "rsd/distillation.hpp"
#include "rsd/linear_theory.hpp"
#include "rsd/operators.hpp"
#include "rsd/pretraining.hpp"

namespace rsd {

enum ExitCode : int {
  kExitOk = 0,
  kExitCheckFailed = 1,
  kExitConfig = 2,
  kExitNumerical = 3,
};

struct DataSpec {
  std::string source = "synthetic";  // synthetic | file
  Index dim = 8;                     // clean dimension (synthetic)
  Index rank = 1;
  Index samples = 20000;
  std::string path;                  // observations (file)
};

struct ModelSpec {
  std::string kind = "mlp";  // mlp | linear_gaussian | exact
  std::vector<Index> hidden = {64, 64};
  Index embed_dim = 16;
  Index rank = 0;  // linear_gaussian factor rank; 0 means full
};

struct DistillSpec {
  DistillConfig config;
  std::string generator = "auto";  // auto | low_rank | linear | mlp
  Index generator_rank = 0;        // 0 means the data rank
  double sigma_init = 0.0;         // 0 means sigma_max / 2
  std::string teacher;             // checkpoint path; empty means <out>/teacher.ckpt
};

struct SampleSpec {
  std::string source = "generator";  // generator | teacher
  Index n = 1000;
  int steps = 20;
  bool truncate = true;
};

struct TheorySpec {
  int problems = 50;
  Index dim = 8;
  Index measurements = 4;
  std::vector<double> sigmas = {0.1, 0.2, 0.5};
  int trials = 1;
  int nodes = 64;
  double sigma_min = 0.02;
  double sigma_max = 10.0;
};

struct ExperimentConfig {
  std::string task = "linear_theory";
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  DataSpec data;
  OperatorSpec op;
  double sigma = 0.0;
  ModelSpec model;
  TrainConfig pretrain;
  DistillSpec distill;
  SampleSpec sample;
  TheorySpec theory;
  bool has_operator = false;

  // Parses and validates; throws ConfigError with "line N: [section] key:"
  // diagnostics.
  static ExperimentConfig from_file(const ConfigFile& file);
  // Human-readable resolved plan for --dry-run.
  std::string plan(const std::string& command) const;
};

struct RunOptions {
  std::string command;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  bool dry_run = false;
  bool timings = false;
};

// Executes one subcommand; returns an ExitCode. Diagnostics go to err,
// progress lines to out.
int run_command(const RunOptions& options, std::ostream& out, std::ostream& err);

// Pieces reused by tests.
TheoremReport run_theory_problem(const TheorySpec& spec, std::uint64_t seed, int problem, double* sigma_out,
                                 double* ae_norm_out);
std::string theorem_csv(const TheorySpec& spec, std::uint64_t seed, bool with_wall_time, bool* all_pass,
                        par::Mode mode = par::Mode::kParallel);

}  // namespace rsd
