#include "rsd/experiment.hpp"

#include <chrono>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "rsd/checkpoint.hpp"
#include "rsd/gaussian_model.hpp"
#include "rsd/io.hpp"
#include "rsd/metrics.hpp"

namespace rsd {

namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "1.0.0";

const ConfigSection& section_or_empty(const ConfigFile& file, const std::string& name) {
  static const ConfigSection empty;
  return file.has(name) ? file.section(name) : empty;
}

void reject_unknown(const ConfigSection& s, const std::vector<std::string>& known) {
  for (const auto& key : s.keys()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) s.fail(key, "unknown key");
  }
}

}  // namespace

ExperimentConfig ExperimentConfig::from_file(const ConfigFile& file) {
  static const std::vector<std::string> known_sections = {"experiment", "data",    "operator", "noise", "model",
                                                          "pretrain",   "distill", "sample",   "theory"};
  for (const auto& s : file.sections()) {
    if (std::find(known_sections.begin(), known_sections.end(), s.name()) == known_sections.end()) {
      throw ConfigError("line " + std::to_string(s.line()) + ": unknown section [" + s.name() + "]");
    }
  }
  ExperimentConfig c;

  const ConfigSection& ex = section_or_empty(file, "experiment");
  reject_unknown(ex, {"task", "seed", "output_dir"});
  c.task = ex.get_string("task", "linear_theory");
  static const std::vector<std::string> tasks = {"linear_theory", "synthetic", "deblur", "inpaint", "superres",
                                                 "fourier"};
  if (std::find(tasks.begin(), tasks.end(), c.task) == tasks.end()) ex.fail("task", "unknown task '" + c.task + "'");
  const auto seed = ex.get_int("seed", 0);
  if (seed < 0) ex.fail("seed", "must be >= 0");
  c.seed = static_cast<std::uint64_t>(seed);
  c.output_dir = ex.get_string("output_dir", "out");

  const ConfigSection& data = section_or_empty(file, "data");
  reject_unknown(data, {"source", "dim", "rank", "samples", "path"});
  c.data.source = data.get_string("source", "synthetic");
  if (c.data.source != "synthetic" && c.data.source != "file") data.fail("source", "must be synthetic or file");
  c.data.dim = data.get_int("dim", 8);
  c.data.rank = data.get_int("rank", 1);
  c.data.samples = data.get_int("samples", 20000);
  c.data.path = data.get_string("path", "");
  if (c.data.dim < 2) data.fail("dim", "must be >= 2");
  if (c.data.rank < 1 || c.data.rank >= c.data.dim) data.fail("rank", "must satisfy 1 <= rank < dim");
  if (c.data.samples < 2) data.fail("samples", "must be >= 2");
  if (c.data.source == "file" && c.data.path.empty()) data.fail("path", "required when source = file");

  c.has_operator = file.has("operator");
  if (c.has_operator) {
    const ConfigSection& s = file.section("operator");
    reject_unknown(s, {"kind", "side", "dim", "kernel_size", "sigma_g", "missing_rate", "per_sample", "factor",
                       "acceleration", "coils", "dense_file", "seed"});
    c.op = OperatorSpec::from_config(s);
    if (!s.has("seed")) c.op.seed = c.seed;
    if (c.op.input_dim() != c.data.dim && c.data.source == "synthetic") {
      s.fail("kind", detail::concat("operator input dimension ", c.op.input_dim(), " does not match data dim ",
                                    c.data.dim));
    }
  } else {
    c.op.kind = OperatorKind::kDense;
    c.op.dim = c.data.dim;
    c.op.seed = c.seed;
  }

  const ConfigSection& noise = section_or_empty(file, "noise");
  reject_unknown(noise, {"sigma", "sigma_min", "sigma_max"});
  c.sigma = noise.get_double("sigma", 0.0);
  if (c.sigma < 0.0) noise.fail("sigma", "must be >= 0");
  NoiseSchedule schedule;
  schedule.sigma_min = noise.get_double("sigma_min", 0.02);
  schedule.sigma_max = noise.get_double("sigma_max", 10.0);
  if (!(schedule.sigma_min > 0.0)) noise.fail("sigma_min", "must be positive");
  if (!(schedule.sigma_max >= schedule.sigma_min)) noise.fail("sigma_max", "must be >= sigma_min");

  const ConfigSection& model = section_or_empty(file, "model");
  reject_unknown(model, {"kind", "hidden", "embed_dim", "rank"});
  c.model.kind = model.get_string("kind", "mlp");
  if (c.model.kind != "mlp" && c.model.kind != "linear_gaussian" && c.model.kind != "exact") {
    model.fail("kind", "must be mlp, linear_gaussian or exact");
  }
  if (model.has("hidden")) {
    c.model.hidden.clear();
    for (auto h : model.get_ints("hidden")) {
      if (h < 1) model.fail("hidden", "widths must be positive");
      c.model.hidden.push_back(h);
    }
  }
  c.model.embed_dim = model.get_int("embed_dim", 16);
  if (c.model.embed_dim < 0 || c.model.embed_dim % 2 != 0) model.fail("embed_dim", "must be even and >= 0");
  c.model.rank = model.get_int("rank", 0);
  if (c.model.rank < 0) model.fail("rank", "must be >= 0");
  if (c.model.kind == "exact" && c.data.source != "synthetic") {
    model.fail("kind", "the exact teacher needs synthetic data");
  }

  const ConfigSection& pre = section_or_empty(file, "pretrain");
  reject_unknown(pre, {"objective", "steps", "batch", "lr", "ema_decay", "further_rate", "trace_every"});
  try {
    c.pretrain.objective = parse_objective(pre.get_string("objective", "standard"));
  } catch (const ContractError& e) {
    pre.fail("objective", e.what());
  }
  c.pretrain.sigma = c.sigma;
  c.pretrain.steps = pre.get_int("steps", 2000);
  c.pretrain.batch = pre.get_int("batch", 128);
  c.pretrain.lr = pre.get_double("lr", 1e-3);
  c.pretrain.ema_decay = pre.get_double("ema_decay", 0.999);
  c.pretrain.further_rate = pre.get_double("further_rate", 0.2);
  c.pretrain.trace_every = static_cast<int>(pre.get_int("trace_every", 100));
  c.pretrain.schedule = schedule;
  c.pretrain.seed = c.seed;
  if (c.pretrain.steps < 0) pre.fail("steps", "must be >= 0");
  if (c.pretrain.batch < 1) pre.fail("batch", "must be >= 1");
  if (!(c.pretrain.lr > 0.0)) pre.fail("lr", "must be positive");
  if (c.pretrain.ema_decay < 0.0 || c.pretrain.ema_decay > 1.0) pre.fail("ema_decay", "must lie in [0, 1]");
  if (c.pretrain.further_rate < 0.0 || c.pretrain.further_rate >= 1.0) pre.fail("further_rate", "must lie in [0, 1)");
  if (c.pretrain.trace_every < 1) pre.fail("trace_every", "must be >= 1");
  if (c.pretrain.objective == Objective::kAmbientInpaint && c.op.kind != OperatorKind::kRandomMask) {
    pre.fail("objective", "ambient_inpaint requires a random_mask operator");
  }
  if (c.pretrain.objective == Objective::kFourierAmbient && c.op.kind != OperatorKind::kMulticoil) {
    pre.fail("objective", "fourier_ambient requires a multicoil operator");
  }
  if (c.model.kind == "exact" && c.pretrain.objective != Objective::kStandard &&
      c.pretrain.objective != Objective::kAmbientTweedie) {
    pre.fail("objective", "the exact teacher supports the standard and ambient_tweedie objectives only");
  }

  const ConfigSection& dis = section_or_empty(file, "distill");
  reject_unknown(dis, {"alpha", "generator_lr", "fake_lr", "fake_updates", "steps", "batch", "sigma_init",
                       "final_lr_factor", "fake_observation_noise", "metric_every", "eval_samples", "generator",
                       "generator_rank", "teacher"});
  DistillConfig& d = c.distill.config;
  d.alpha = dis.get_double("alpha", 1.2);
  d.generator_lr = dis.get_double("generator_lr", 1e-4);
  d.fake_lr = dis.get_double("fake_lr", 1e-3);
  d.fake_updates = static_cast<int>(dis.get_int("fake_updates", 1));
  d.steps = dis.get_int("steps", 1000);
  d.batch = dis.get_int("batch", 128);
  d.final_lr_factor = dis.get_double("final_lr_factor", 1.0);
  d.fake_observation_noise = dis.get_bool("fake_observation_noise", true);
  d.metric_every = dis.get_int("metric_every", 100);
  d.eval_samples = dis.get_int("eval_samples", 10000);
  d.sigma = c.sigma;
  d.objective = c.pretrain.objective;
  d.schedule = schedule;
  d.further_rate = c.pretrain.further_rate;
  d.seed = c.seed;
  c.distill.sigma_init = dis.get_double("sigma_init", schedule.sigma_max / 2.0);
  c.distill.generator = dis.get_string("generator", "auto");
  c.distill.generator_rank = dis.get_int("generator_rank", 0);
  c.distill.teacher = dis.get_string("teacher", "");
  if (!std::isfinite(d.alpha)) dis.fail("alpha", "must be finite");
  if (!(d.generator_lr > 0.0)) dis.fail("generator_lr", "must be positive");
  if (!(d.fake_lr > 0.0)) dis.fail("fake_lr", "must be positive");
  if (d.fake_updates < 0) dis.fail("fake_updates", "must be >= 0");
  if (d.steps < 0) dis.fail("steps", "must be >= 0");
  if (d.batch < 1) dis.fail("batch", "must be >= 1");
  if (!(d.final_lr_factor > 0.0)) dis.fail("final_lr_factor", "must be positive");
  if (d.metric_every < 1) dis.fail("metric_every", "must be >= 1");
  if (d.eval_samples < 0) dis.fail("eval_samples", "must be >= 0");
  if (!(c.distill.sigma_init > 0.0)) dis.fail("sigma_init", "must be positive");
  const auto& g = c.distill.generator;
  if (g != "auto" && g != "low_rank" && g != "linear" && g != "mlp") {
    dis.fail("generator", "must be auto, low_rank, linear or mlp");
  }
  if (c.distill.generator_rank < 0) dis.fail("generator_rank", "must be >= 0");

  const ConfigSection& smp = section_or_empty(file, "sample");
  reject_unknown(smp, {"source", "n", "steps", "truncate"});
  c.sample.source = smp.get_string("source", "generator");
  if (c.sample.source != "generator" && c.sample.source != "teacher") smp.fail("source", "must be generator or teacher");
  c.sample.n = smp.get_int("n", 1000);
  c.sample.steps = static_cast<int>(smp.get_int("steps", 20));
  c.sample.truncate = smp.get_bool("truncate", true);
  if (c.sample.n < 1) smp.fail("n", "must be >= 1");
  if (c.sample.steps < 1) smp.fail("steps", "must be >= 1");

  const ConfigSection& th = section_or_empty(file, "theory");
  reject_unknown(th, {"problems", "dim", "measurements", "sigmas", "trials", "nodes", "sigma_min", "sigma_max"});
  c.theory.problems = static_cast<int>(th.get_int("problems", 50));
  c.theory.dim = th.get_int("dim", 8);
  c.theory.measurements = th.get_int("measurements", 4);
  if (th.has("sigmas")) c.theory.sigmas = th.get_doubles("sigmas");
  c.theory.trials = static_cast<int>(th.get_int("trials", 1));
  c.theory.nodes = static_cast<int>(th.get_int("nodes", 64));
  c.theory.sigma_min = th.get_double("sigma_min", 0.02);
  c.theory.sigma_max = th.get_double("sigma_max", 10.0);
  if (c.theory.problems < 1) th.fail("problems", "must be >= 1");
  if (c.theory.dim < 1) th.fail("dim", "must be >= 1");
  if (c.theory.measurements < 1 || c.theory.measurements > c.theory.dim) {
    th.fail("measurements", "must satisfy 1 <= measurements <= dim");
  }
  if (c.theory.sigmas.empty()) th.fail("sigmas", "need at least one value");
  for (double s : c.theory.sigmas) {
    if (!(s > 0.0)) th.fail("sigmas", "values must be positive");
  }
  if (c.theory.trials < 1) th.fail("trials", "must be >= 1");
  if (c.theory.nodes < 1) th.fail("nodes", "must be >= 1");
  if (!(c.theory.sigma_min > 0.0) || c.theory.sigma_max < c.theory.sigma_min) {
    th.fail("sigma_max", "need 0 < sigma_min <= sigma_max");
  }
  return c;
}

std::string ExperimentConfig::plan(const std::string& command) const {
  std::ostringstream os;
  os << "command: " << command << '\n'
     << "task: " << task << '\n'
     << "seed: " << seed << '\n'
     << "output_dir: " << output_dir << '\n';
  if (command == "verify-theorem") {
    os << "theory: " << theory.problems << " problems, d=" << theory.dim << ", m=" << theory.measurements
       << ", trials=" << theory.trials << ", nodes=" << theory.nodes << ", sigmas=";
    for (std::size_t i = 0; i < theory.sigmas.size(); ++i) os << (i ? "," : "") << theory.sigmas[i];
    os << '\n';
    return os.str();
  }
  os << "data: " << data.source;
  if (data.source == "synthetic") os << " d=" << data.dim << " r=" << data.rank << " n=" << data.samples;
  else os << " path=" << data.path;
  os << '\n'
     << "operator: " << to_string(op.kind) << (op.per_sample ? " (per-sample)" : "") << '\n'
     << "sigma: " << sigma << '\n'
     << "model: " << model.kind << '\n'
     << "objective: " << to_string(pretrain.objective) << '\n';
  if (command == "pretrain") {
    os << "pretrain: steps=" << pretrain.steps << " batch=" << pretrain.batch << " lr=" << pretrain.lr << '\n';
  } else if (command == "distill") {
    os << "distill: steps=" << distill.config.steps << " batch=" << distill.config.batch
       << " alpha=" << distill.config.alpha << " generator=" << distill.generator << '\n';
  } else if (command == "sample") {
    os << "sample: source=" << sample.source << " n=" << sample.n << '\n';
  }
  return os.str();
}

TheoremReport run_theory_problem(const TheorySpec& spec, std::uint64_t seed, int problem, double* sigma_out,
                                 double* ae_norm_out) {
  const double sigma = spec.sigmas[static_cast<std::size_t>(problem) % spec.sigmas.size()];
  Rng build = Rng(seed).stream(stream_tag::kTheory, 1000000 + static_cast<std::uint64_t>(problem));
  const TheoryProblem p = random_theory_problem(spec.dim, spec.measurements, sigma, build,
                                                TheorySchedule::geometric(spec.nodes, spec.sigma_min, spec.sigma_max));
  if (sigma_out) *sigma_out = sigma;
  if (ae_norm_out) *ae_norm_out = std::sqrt(p.ae2());
  return verify_theorem(p, spec.trials, Rng(seed).stream(stream_tag::kTheory, 2000000 + static_cast<std::uint64_t>(problem)),
                        par::Mode::kSerial);
}

std::string theorem_csv(const TheorySpec& spec, std::uint64_t seed, bool with_wall_time, bool* all_pass,
                        par::Mode mode) {
  struct Result {
    TheoremReport report;
    double sigma = 0.0;
    double ae_norm = 0.0;
  };
  std::vector<Result> results(static_cast<std::size_t>(spec.problems));
  par::for_each_index(
      spec.problems,
      [&](std::int64_t k) {
        Result& r = results[static_cast<std::size_t>(k)];
        r.report = run_theory_problem(spec, seed, static_cast<int>(k), &r.sigma, &r.ae_norm);
      },
      mode);
  std::vector<std::string> header = {"problem",  "trial",         "sigma",       "ae_norm", "final_loss",
                                     "psi_g_star", "dist_to_optimum", "kernel_norm", "w2",      "w2_expected",
                                     "iterations", "converged",     "pass"};
  if (with_wall_time) header.push_back("wall_time");
  CsvWriter csv(header);
  bool ok = true;
  for (std::size_t k = 0; k < results.size(); ++k) {
    for (const auto& t : results[k].report.trials) {
      const bool pass = trial_passes(t);
      ok = ok && pass;
      std::vector<std::string> row = {std::to_string(k),
                                      std::to_string(t.trial),
                                      format_double(results[k].sigma),
                                      format_double(results[k].ae_norm),
                                      format_double(t.final_loss),
                                      format_double(t.psi_g_star),
                                      format_double(t.dist_to_optimum),
                                      format_double(t.kernel_norm),
                                      format_double(t.w2),
                                      format_double(t.w2_expected),
                                      std::to_string(t.iterations),
                                      t.converged ? "1" : "0",
                                      pass ? "1" : "0"};
      if (with_wall_time) row.push_back(format_double(t.wall_seconds));
      csv.add_row(std::move(row));
    }
  }
  if (all_pass) *all_pass = ok;
  return csv.str();
}

namespace {

struct Dataset {
  Samples observations;
  std::optional<LowRankGaussian> law;
};

Dataset build_dataset(const ExperimentConfig& c, const OperatorSample& ops) {
  Dataset ds;
  if (c.data.source == "file") {
    ds.observations = read_dataset(c.data.path);
    if (ds.observations.cols() != ops.fixed().output_dim()) {
      throw ConfigError(detail::concat("dataset ", c.data.path, " has dimension ", ds.observations.cols(),
                                       ", operator produces ", ops.fixed().output_dim()));
    }
    return ds;
  }
  const Rng master(c.seed);
  Rng law_rng = master.stream(stream_tag::kData, 0);
  ds.law = LowRankGaussian::random(c.data.dim, c.data.rank, law_rng);
  const Samples clean = sample_clean(*ds.law, c.data.samples, master.stream(stream_tag::kData, 1));
  const Index m = ops.fixed().output_dim();
  ds.observations.resize(c.data.samples, m);
  const Rng noise = master.stream(stream_tag::kNoise, 0);
  par::for_each_index(c.data.samples, [&](std::int64_t i) {
    const CorruptionOperator op = ops.at(static_cast<std::uint64_t>(i));
    Vector y = op.apply(clean.row(i).transpose());
    if (c.sigma > 0.0) {
      Rng local = noise.stream(stream_tag::kNoise, static_cast<std::uint64_t>(i));
      for (Index k = 0; k < m; ++k) y(k) += c.sigma * local.normal();
    }
    ds.observations.row(i) = y.transpose();
  });
  return ds;
}

Index cond_dim_for(const ExperimentConfig& c, const OperatorSample& ops) {
  if (c.pretrain.objective == Objective::kAmbientInpaint) return ops.fixed().output_dim();
  if (c.pretrain.objective == Objective::kFourierAmbient) return static_cast<Index>(ops.fixed().mask_bits().size());
  return 0;
}

std::unique_ptr<Denoiser> exact_teacher(const ExperimentConfig& c, const Dataset& ds, const OperatorSample& ops) {
  RSD_REQUIRE(!ops.per_sample(), "exact teacher needs a fixed operator");
  const double noise = c.pretrain.objective == Objective::kAmbientTweedie ? 0.0 : c.sigma;
  CorruptedGaussian law(*ds.law, ops.fixed(), noise);
  return std::make_unique<LinearGaussianDenoiser>(LinearGaussianDenoiser::exact(law.covariance()));
}

std::unique_ptr<Denoiser> fresh_model(const ExperimentConfig& c, const OperatorSample& ops) {
  const Index m = ops.fixed().output_dim();
  const Index cond = cond_dim_for(c, ops);
  if (c.model.kind == "linear_gaussian") {
    return std::make_unique<LinearGaussianDenoiser>(m, c.model.rank > 0 ? std::min(c.model.rank, m) : m, cond);
  }
  MlpConfig mc;
  mc.data_dim = m;
  mc.cond_dim = cond;
  mc.hidden = c.model.hidden;
  mc.embed_dim = c.model.embed_dim;
  mc.seed = c.seed;
  return std::make_unique<Mlp>(mc);
}

std::string teacher_path(const ExperimentConfig& c) {
  return c.distill.teacher.empty() ? (fs::path(c.output_dir) / "teacher.ckpt").string() : c.distill.teacher;
}

std::unique_ptr<Denoiser> load_teacher(const ExperimentConfig& c, const Dataset& ds, const OperatorSample& ops) {
  if (c.model.kind == "exact") return exact_teacher(c, ds, ops);
  const std::string path = teacher_path(c);
  if (!fs::exists(path)) throw IoError("teacher checkpoint not found: " + path);
  return load_denoiser(path);
}

std::unique_ptr<Generator> build_generator(const ExperimentConfig& c, const Denoiser& teacher, Index output_dim) {
  const Index rank = c.distill.generator_rank > 0 ? c.distill.generator_rank : c.data.rank;
  const std::string& kind = c.distill.generator;
  if (kind == "auto") return initial_generator(teacher, output_dim, c.distill.sigma_init, rank, c.seed);
  if (kind == "mlp") {
    MlpConfig mc;
    mc.data_dim = output_dim;
    mc.hidden = c.model.hidden;
    mc.embed_dim = c.model.embed_dim;
    mc.seed = c.seed;
    if (const auto* mlp = dynamic_cast<const Mlp*>(&teacher); mlp && mlp->data_dim() == output_dim) {
      return std::make_unique<MlpGenerator>(*mlp, c.distill.sigma_init);
    }
    return std::make_unique<MlpGenerator>(Mlp(mc), c.distill.sigma_init);
  }
  Matrix map;
  if (const auto* lin = dynamic_cast<const LinearGaussianDenoiser*>(&teacher); lin && lin->data_dim() == output_dim) {
    map = lin->map_at(c.distill.sigma_init);
  } else {
    Rng rng = Rng(c.seed).stream(stream_tag::kInit, 1);
    map.resize(output_dim, output_dim);
    for (Index j = 0; j < output_dim; ++j) {
      for (Index i = 0; i < output_dim; ++i) map(i, j) = 0.1 * rng.normal() / std::sqrt(static_cast<double>(output_dim));
    }
  }
  if (kind == "linear") return std::make_unique<LinearGenerator>(map);
  return std::make_unique<LowRankLinearGenerator>(LowRankLinearGenerator::from_map(map, std::min(rank, output_dim)));
}

class Manifest {
 public:
  void add(const std::string& key, const std::string& value) { lines_.push_back(key + ": " + value); }
  void save(const fs::path& dir) const {
    std::string text;
    for (const auto& l : lines_) text += l + '\n';
    write_text_file((dir / "manifest.txt").string(), text);
  }

 private:
  std::vector<std::string> lines_;
};

std::string trace_csv(const std::vector<TracePoint>& trace) {
  CsvWriter csv({"step", "loss", "ema_loss"});
  for (const auto& t : trace) csv.add_row({std::to_string(t.step), format_double(t.loss), format_double(t.ema_loss)});
  return csv.str();
}

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << v;
  return os.str();
}

int do_pretrain(const ExperimentConfig& c, const RunOptions& o, const fs::path& out_dir, std::ostream& out,
                Manifest& manifest) {
  (void)o;
  const OperatorSample ops(c.op);
  const Dataset ds = build_dataset(c, ops);
  if (c.data.source == "synthetic") write_dataset((out_dir / "observations.bin").string(), ds.observations);
  std::unique_ptr<Denoiser> model;
  std::vector<TracePoint> trace;
  if (c.model.kind == "exact") {
    model = exact_teacher(c, ds, ops);
  } else {
    model = fresh_model(c, ops);
    TrainingData data{&ds.observations, &ops};
    try {
      TrainResult res = train(c.pretrain, data, *model);
      trace = std::move(res.trace);
      model = std::move(res.ema_model);
    } catch (const TrainingAborted& e) {
      model->params() = e.last_good_params();
      save_denoiser((out_dir / "teacher_last_good.ckpt").string(), *model);
      throw;
    }
  }
  save_denoiser((out_dir / "teacher.ckpt").string(), *model);
  write_text_file((out_dir / "loss_trace.csv").string(), trace_csv(trace));
  manifest.add("objective", to_string(c.pretrain.objective));
  manifest.add("model", model->kind());
  manifest.add("teacher_hash", hex(params_hash(model->params())));
  manifest.add("outputs", "teacher.ckpt, loss_trace.csv" +
                              std::string(c.data.source == "synthetic" ? ", observations.bin" : ""));
  out << "pretrain: " << trace.size() << " trace rows, final loss "
      << (trace.empty() ? std::string("n/a") : format_double(trace.back().loss)) << '\n';
  return kExitOk;
}

int do_distill(const ExperimentConfig& c, const RunOptions& o, const fs::path& out_dir, std::ostream& out,
               Manifest& manifest) {
  const OperatorSample ops(c.op);
  const Dataset ds = build_dataset(c, ops);
  const auto teacher = load_teacher(c, ds, ops);
  const std::uint64_t teacher_hash = params_hash(teacher->params());
  auto generator = build_generator(c, *teacher, ops.fixed().input_dim());
  DistillContext ctx;
  ctx.operators = &ops;
  ctx.corrupted_reference = &ds.observations;
  ctx.clean_law = ds.law ? &*ds.law : nullptr;
  Distiller distiller(*teacher, std::move(generator), c.distill.config, ctx);
  try {
    distiller.run();
  } catch (const NumericalError&) {
    save_generator((out_dir / "generator_last_good.ckpt").string(), distiller.generator());
    throw;
  }
  if (params_hash(teacher->params()) != teacher_hash || params_hash(distiller.teacher().params()) != teacher_hash) {
    throw NumericalError("teacher parameters changed during distillation");
  }
  const MetricReport& report = distiller.report();
  write_text_file((out_dir / "metrics.csv").string(), report.to_csv(o.timings));
  save_generator((out_dir / "generator.ckpt").string(), distiller.generator());
  save_denoiser((out_dir / "fake.ckpt").string(), distiller.fake());
  const std::int64_t selected = select_checkpoint(report);
  for (const auto& snap : distiller.snapshots()) {
    if (snap.step == selected) {
      auto g = distiller.generator().clone();
      g->params() = snap.generator_params;
      save_generator((out_dir / "generator_selected.ckpt").string(), *g);
    }
  }
  manifest.add("objective", to_string(c.pretrain.objective));
  manifest.add("teacher_hash", hex(teacher_hash));
  manifest.add("generator", distiller.generator().kind());
  manifest.add("selected_step", std::to_string(selected));
  manifest.add("outputs", "metrics.csv, generator.ckpt, generator_selected.ckpt, fake.ckpt");
  const MetricRow& last = report.rows.back();
  out << "distill: " << report.rows.size() << " metric rows, selected step " << selected << ", final proximal "
      << format_double(last.proximal_frechet);
  if (last.true_frechet) out << ", final true " << format_double(*last.true_frechet);
  out << '\n';
  return kExitOk;
}

int do_evaluate(const ExperimentConfig& c, const fs::path& out_dir, std::ostream& out, Manifest& manifest) {
  const OperatorSample ops(c.op);
  const Dataset ds = build_dataset(c, ops);
  CsvWriter csv({"checkpoint", "proximal_frechet", "true_frechet", "max_angle_deg", "observation_baseline"});
  std::string baseline;
  if (ds.law && ds.observations.cols() == ds.law->dim()) {
    const MomentFit fit = fit_moments(ds.observations);
    baseline = format_double(frechet_distance(fit.mean, fit.covariance, Vector::Zero(ds.law->dim()), ds.law->covariance()));
  }
  std::vector<std::string> names;
  for (const char* name : {"generator.ckpt", "generator_selected.ckpt"}) {
    const fs::path path = out_dir / name;
    if (!fs::exists(path)) continue;
    names.push_back(name);
    const auto g = load_generator(path.string());
    const Rng eval = Rng(c.seed).stream(stream_tag::kEval, 0);
    const Index n = std::max<Index>(c.distill.config.eval_samples, 2);
    const Samples x = generate(*g, n, eval.stream(0, 0));
    const double prox = proximal_frechet(x, ds.observations, ops, c.sigma, eval.stream(1, 0));
    std::string truth, angle;
    if (ds.law) {
      const Vector zero = Vector::Zero(ds.law->dim());
      if (auto cov = g->output_covariance()) {
        truth = format_double(frechet_distance(zero, *cov, zero, ds.law->covariance()));
      } else {
        const MomentFit fit = fit_moments(x);
        truth = format_double(frechet_distance(fit.mean, fit.covariance, zero, ds.law->covariance()));
      }
      try {
        angle = format_double(eigenspace_alignment(x, ds.law->factor()).back());
      } catch (const NumericalError&) {
      }
    }
    csv.add_row({name, format_double(prox), truth, angle, baseline});
  }
  if (names.empty()) throw IoError("no generator checkpoint found in " + out_dir.string());
  write_text_file((out_dir / "evaluate.csv").string(), csv.str());
  manifest.add("outputs", "evaluate.csv");
  out << "evaluate: " << names.size() << " checkpoint(s)\n";
  return kExitOk;
}

int do_sample(const ExperimentConfig& c, const fs::path& out_dir, std::ostream& out, Manifest& manifest) {
  const Rng rng = Rng(c.seed).stream(stream_tag::kSample, 0);
  Matrix samples;  // n x d
  if (c.sample.source == "generator") {
    const fs::path path = out_dir / "generator.ckpt";
    if (!fs::exists(path)) throw IoError("generator checkpoint not found: " + path.string());
    samples = generate(*load_generator(path.string()), c.sample.n, rng);
  } else {
    const OperatorSample ops(c.op);
    std::unique_ptr<Denoiser> teacher;
    if (c.model.kind == "exact") {
      teacher = exact_teacher(c, build_dataset(c, ops), ops);
    } else {
      const std::string path = teacher_path(c);
      if (!fs::exists(path)) throw IoError("teacher checkpoint not found: " + path);
      teacher = load_denoiser(path);
    }
    const auto grid = tweedie_grid(c.pretrain.schedule.sigma_max, c.pretrain.schedule.sigma_min, c.sample.steps);
    samples = sample_ambient_tweedie(*teacher, c.sigma, grid, c.sample.truncate, c.sample.n, rng).transpose();
  }
  std::vector<std::string> header;
  for (Index j = 0; j < samples.cols(); ++j) header.push_back("x" + std::to_string(j));
  CsvWriter csv(header);
  for (Index i = 0; i < samples.rows(); ++i) {
    std::vector<std::string> row;
    for (Index j = 0; j < samples.cols(); ++j) row.push_back(format_double(samples(i, j)));
    csv.add_row(std::move(row));
  }
  write_text_file((out_dir / "samples.csv").string(), csv.str());
  manifest.add("sample_source", c.sample.source);
  manifest.add("outputs", "samples.csv");
  out << "sample: wrote " << samples.rows() << " samples\n";
  return kExitOk;
}

int do_verify(const ExperimentConfig& c, const RunOptions& o, const fs::path& out_dir, std::ostream& out,
              Manifest& manifest) {
  bool all_pass = false;
  const std::string csv = theorem_csv(c.theory, c.seed, o.timings, &all_pass);
  write_text_file((out_dir / "verify_theorem.csv").string(), csv);
  manifest.add("outputs", "verify_theorem.csv");
  manifest.add("all_pass", all_pass ? "true" : "false");
  out << "verify-theorem: " << c.theory.problems * c.theory.trials << " trials, "
      << (all_pass ? "all pass" : "FAILURES") << '\n';
  return all_pass ? kExitOk : kExitCheckFailed;
}

}  // namespace

int run_command(const RunOptions& o, std::ostream& out, std::ostream& err) {
  static const std::vector<std::string> commands = {"pretrain", "distill", "verify-theorem", "evaluate", "sample"};
  if (std::find(commands.begin(), commands.end(), o.command) == commands.end()) {
    err << "error: unknown command '" << o.command << "'\n";
    return kExitConfig;
  }
  ExperimentConfig c;
  try {
    if (o.config_path.empty()) throw ConfigError("--config is required");
    if (!fs::exists(o.config_path)) throw IoError("config file not found: " + o.config_path);
    c = ExperimentConfig::from_file(ConfigFile::load(o.config_path));
    if (o.seed) {
      c.seed = *o.seed;
      c.pretrain.seed = c.seed;
      c.distill.config.seed = c.seed;
    }
    if (o.out_dir) c.output_dir = *o.out_dir;
    if (c.data.source == "file" && o.command != "verify-theorem" && !fs::exists(c.data.path)) {
      throw IoError("dataset file not found: " + c.data.path);
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ContractError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  }

  if (o.dry_run) {
    out << c.plan(o.command) << "dry run: configuration is valid, nothing executed\n";
    return kExitOk;
  }

  try {
    const fs::path out_dir(c.output_dir);
    fs::create_directories(out_dir);
    Manifest manifest;
    manifest.add("command", o.command);
    manifest.add("config", o.config_path);
    manifest.add("seed", std::to_string(c.seed));
    manifest.add("task", c.task);
    manifest.add("version", kVersion);
    int code = kExitOk;
    if (o.command == "pretrain") code = do_pretrain(c, o, out_dir, out, manifest);
    else if (o.command == "distill") code = do_distill(c, o, out_dir, out, manifest);
    else if (o.command == "verify-theorem") code = do_verify(c, o, out_dir, out, manifest);
    else if (o.command == "evaluate") code = do_evaluate(c, out_dir, out, manifest);
    else code = do_sample(c, out_dir, out, manifest);
    manifest.save(out_dir);
    return code;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  }
}

}  // namespace rsd
