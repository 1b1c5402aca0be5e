// Acceptance runner: prints one PASS/FAIL line per criterion and exits
// nonzero if any fails.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "rsd/experiment.hpp"
#include "rsd/gaussian_model.hpp"
#include "rsd/io.hpp"
#include "rsd/linear_theory.hpp"
#include "rsd/pretraining.hpp"
#include "rsd/throughput.hpp"

namespace fs = std::filesystem;
using namespace rsd;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

fs::path scratch_dir() {
  const auto dir = fs::temp_directory_path() / "rsd_acceptance";
  fs::create_directories(dir);
  return dir;
}

// CSV as header -> column of cells.
std::map<std::string, std::vector<std::string>> read_csv_columns(const std::string& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  std::getline(in, line);
  std::vector<std::string> header;
  {
    std::istringstream hs(line);
    std::string cell;
    while (std::getline(hs, cell, ',')) header.push_back(cell);
  }
  std::map<std::string, std::vector<std::string>> cols;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string cell;
    for (std::size_t k = 0; k < header.size(); ++k) {
      if (!std::getline(ls, cell, ',')) cell.clear();
      cols[header[k]].push_back(cell);
    }
  }
  return cols;
}

Outcome theorem_recovery() {
  const auto t0 = Clock::now();
  TheorySpec spec;
  spec.problems = 50;
  bool all_pass = false;
  const std::string csv = theorem_csv(spec, 2024, false, &all_pass);
  const double elapsed = seconds_since(t0);
  const auto cols = read_csv_columns([&] {
    const auto p = (scratch_dir() / "theorem.csv").string();
    write_text_file(p, csv);
    return p;
  }());
  double worst_dist = 0.0, worst_w2 = 0.0, worst_loss = 0.0;
  for (std::size_t i = 0; i < cols.at("problem").size(); ++i) {
    worst_dist = std::max(worst_dist, std::stod(cols.at("dist_to_optimum")[i]));
    worst_w2 = std::max(worst_w2, std::abs(std::stod(cols.at("w2")[i]) - std::stod(cols.at("w2_expected")[i])));
    worst_loss =
        std::max(worst_loss, std::abs(std::stod(cols.at("final_loss")[i]) - std::stod(cols.at("psi_g_star")[i])));
  }
  // Reference value for sigma = 0.2, |Ae| = 1.
  const double example = std::pow(std::sqrt(1.0 + 0.04) - 1.0, 2);
  const bool example_ok = std::abs(example - 3.9223e-4) < 1e-4;
  std::ostringstream d;
  d << cols.at("problem").size() << " trials, max dist " << worst_dist << ", max |L - Psi| " << worst_loss
    << ", max |w2 - expected| " << worst_w2 << ", " << elapsed << " s";
  return {all_pass && example_ok && elapsed < 60.0, d.str()};
}

Outcome monte_carlo_consistency() {
  const auto t0 = Clock::now();
  Rng rng(31);
  int ok = 0;
  double worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    const auto p = random_theory_problem(8, 4, 0.1 + 0.1 * (k % 3), rng, TheorySchedule::geometric(16, 0.1, 3.0));
    const Vector u1 = oracle::random_vector(8, rng), u2 = oracle::random_vector(8, rng);
    const auto m1 = mc_fisher_divergence(p, u1, 100000, Rng(1000 + k));
    const auto m2 = mc_fisher_divergence(p, u2, 100000, Rng(2000 + k));
    const double se = std::hypot(m1.std_error, m2.std_error);
    const double z = std::abs((m1.estimate - m2.estimate) - (reduced_loss(p, u1) - reduced_loss(p, u2))) / se;
    worst = std::max(worst, z);
    if (z < 3.0) ++ok;
  }
  const double elapsed = seconds_since(t0);
  std::ostringstream d;
  d << ok << "/20 pairs within 3 SE (worst " << worst << " SE), " << elapsed << " s";
  return {ok == 20 && elapsed < 30.0, d.str()};
}

Outcome gradient_correctness() {
  Rng rng(41);
  double theory = 0.0;
  for (int t = 0; t < 100; ++t) {
    const auto p = random_theory_problem(2 + t % 7, 1 + t % 2, 0.05 + rng.uniform(), rng);
    const Vector u = oracle::random_vector(p.dim(), rng);
    const Vector num = oracle::numeric_gradient([&](const Vector& v) { return reduced_loss(p, v); }, u, 1e-5);
    theory = std::max(theory, oracle::relative_error(reduced_loss_grad(p, u), num));
  }
  double mlp = 0.0, lin = 0.0, gen = 0.0, sid = 0.0;
  for (int i = 0; i < 100; ++i) {
    mlp = std::max(mlp, gradcheck::mlp_check(i));
    lin = std::max(lin, gradcheck::linear_gaussian_check(i));
    gen = std::max(gen, gradcheck::generator_check(i));
    sid = std::max(sid, gradcheck::sid_check(i));
  }
  std::ostringstream d;
  d << "reduced loss " << theory << "; mlp " << mlp << ", linear denoiser " << lin << ", generators " << gen
    << ", score identity " << sid;
  return {theory < 1e-5 && mlp < 1e-4 && lin < 1e-4 && gen < 1e-4 && sid < 1e-4, d.str()};
}

Outcome woodbury_and_score() {
  Rng rng(51);
  double wood = 0.0;
  for (Index m = 1; m <= 64; ++m) {
    const Index k = 1 + m % 5;
    const Matrix b = oracle::random_matrix(m, k, rng);
    const double c = 0.1 + rng.uniform();
    const Matrix dense = (b * b.transpose() + c * Matrix::Identity(m, m)).inverse();
    wood = std::max(wood, (woodbury_inverse(c, b) - dense).norm());
  }
  double sc = 0.0;
  for (int t = 0; t < 50; ++t) {
    const Index d = 3 + t % 6, m = 1 + t % 8;
    const auto law = LowRankGaussian::random(d, 1 + t % (d - 1), rng);
    const CorruptedGaussian g(law, CorruptionOperator::dense(oracle::random_matrix(m, d, rng)), 0.5);
    const double extra = 0.1 * (t % 3);
    const Matrix cov = g.covariance() + extra * Matrix::Identity(m, m);
    const Vector y = oracle::random_vector(m, rng);
    const Vector num =
        oracle::numeric_gradient([&](const Vector& v) { return oracle::gaussian_log_density(cov, v); }, y, 1e-5);
    sc = std::max(sc, (score(g, extra, y) - num).norm());
  }
  std::ostringstream d;
  d << "woodbury max Frobenius error " << wood << " (m <= 64); score max error " << sc << " (m <= 8)";
  return {wood < 1e-10 && sc < 1e-6, d.str()};
}

Outcome objective_equivalences() {
  Rng rng(61);
  const Index side = 2, d = 8;
  MlpConfig fc;
  fc.data_dim = d;
  fc.cond_dim = side * side;
  MlpConfig mc = fc;
  mc.cond_dim = d;
  MlpConfig pc = fc;
  pc.cond_dim = 0;
  Mlp fourier_net(fc), mask_net(mc), plain(pc);
  gradcheck::randomize(fourier_net.params(), rng, 0.3);
  gradcheck::randomize(mask_net.params(), rng, 0.3);
  gradcheck::randomize(plain.params(), rng, 0.3);
  NoiseSchedule sched;
  double worst = 0.0;
  bool clipped_zero = true;
  for (int t = 0; t < 20; ++t) {
    const Matrix y = oracle::random_matrix(d, 16, rng);
    NoiseDraw draw = draw_noise(sched, d, 16, rng);
    const Matrix ones = Matrix::Ones(d, 16);
    const auto unit = make_fourier_mask(side, MaskBits(4, 1), {ComplexField(4, {1.0, 0.0})});
    const double base_mask = loss_standard(mask_net, y, sched, draw);
    worst = std::max(worst, std::abs(loss_ambient_inpaint(mask_net, y, ones, ones, sched, draw) - base_mask));
    worst = std::max(worst, std::abs(loss_ambient_tweedie(mask_net, y, 0.0, sched, draw) - base_mask));
    worst = std::max(worst, std::abs(loss_fourier_ambient(fourier_net, y, {unit}, {unit}, sched, draw) -
                                     loss_standard(fourier_net, y, sched, draw)));
    // Every node at or below the observation level contributes nothing.
    NoiseDraw low = draw;
    low.sigma.setConstant(0.3);
    Vector grad;
    clipped_zero = clipped_zero && loss_ambient_tweedie(plain, y, 0.3, sched, low, &grad) == 0.0 &&
                   grad.cwiseAbs().maxCoeff() == 0.0;
  }
  std::ostringstream msg;
  msg << "max |specialized - standard| " << worst << "; clipped node exactly zero: " << (clipped_zero ? "yes" : "no");
  return {worst < 1e-8 && clipped_zero, msg.str()};
}

// Criteria 6 and 7 share one set of distillation runs.
struct SeedRun {
  std::uint64_t seed = 0;
  double final_w2 = 0.0;
  double baseline = 0.0;
  double selected_true = 0.0;
  double min_true = 0.0;
  std::int64_t selected_step = 0;
  double seconds = 0.0;
  bool ok = false;
  std::string error;
};

const char* kToyConfig =
    "[experiment]\ntask = synthetic\n"
    "[data]\ndim = 8\nrank = 1\nsamples = 1000000\n"
    "[noise]\nsigma = 0.2\n"
    "[model]\nkind = exact\n"
    "[distill]\nalpha = 1.2\ngenerator = low_rank\ngenerator_lr = 3e-3\nfake_lr = 3e-2\n"
    "final_lr_factor = 0.01\nfake_observation_noise = false\nsteps = 6000\nbatch = 2048\n"
    "metric_every = 300\neval_samples = 1000000\n";

std::vector<SeedRun> distill_seeds() {
  const auto cfg = (scratch_dir() / "toy.cfg").string();
  write_text_file(cfg, kToyConfig);
  std::vector<SeedRun> runs;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SeedRun r;
    r.seed = seed;
    const auto t0 = Clock::now();
    const auto out = scratch_dir() / ("toy_seed" + std::to_string(seed));
    fs::remove_all(out);
    std::ostringstream sink;
    RunOptions o;
    o.config_path = cfg;
    o.seed = seed;
    o.out_dir = out.string();
    o.command = "distill";
    int code = run_command(o, sink, sink);
    if (code == kExitOk) {
      o.command = "evaluate";
      code = run_command(o, sink, sink);
    }
    r.seconds = seconds_since(t0);
    if (code != kExitOk) {
      r.error = "exit " + std::to_string(code) + ": " + sink.str();
      runs.push_back(r);
      continue;
    }
    const auto metrics = read_csv_columns((out / "metrics.csv").string());
    r.min_true = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < metrics.at("step").size(); ++i) {
      const double t = std::stod(metrics.at("true_frechet")[i]);
      r.min_true = std::min(r.min_true, t);
      if (metrics.at("selected")[i] == "1") {
        r.selected_true = t;
        r.selected_step = std::stoll(metrics.at("step")[i]);
      }
    }
    const auto eval = read_csv_columns((out / "evaluate.csv").string());
    for (std::size_t i = 0; i < eval.at("checkpoint").size(); ++i) {
      if (eval.at("checkpoint")[i] != "generator.ckpt") continue;
      r.final_w2 = std::stod(eval.at("true_frechet")[i]);
      r.baseline = std::stod(eval.at("observation_baseline")[i]);
    }
    r.ok = true;
    runs.push_back(r);
  }
  return runs;
}

Outcome student_beats_observation(const std::vector<SeedRun>& runs, double total_seconds) {
  const double lam = std::sqrt(1.0 + 0.2 * 0.2);
  const double bound = 1.5 * (lam - 1.0) * (lam - 1.0);
  int passed = 0;
  std::ostringstream d;
  d << "bound " << bound << ";";
  for (const auto& r : runs) {
    if (!r.ok) {
      d << " seed " << r.seed << " failed (" << r.error << ")";
      continue;
    }
    const bool ok = r.final_w2 <= bound && r.final_w2 < r.baseline;
    passed += ok;
    d << " seed " << r.seed << ": W2^2 " << r.final_w2 << " vs observation " << r.baseline << (ok ? "" : " [x]")
      << ";";
  }
  d << " " << passed << "/5, " << total_seconds << " s";
  return {passed == 5 && total_seconds < 300.0, d.str()};
}

Outcome proximal_selection(const std::vector<SeedRun>& runs) {
  int passed = 0;
  std::ostringstream d;
  for (const auto& r : runs) {
    if (!r.ok) continue;
    const double ratio = r.selected_true / r.min_true;
    passed += ratio <= 1.25;
    d << "seed " << r.seed << ": step " << r.selected_step << " ratio " << ratio << "; ";
  }
  d << passed << "/5";
  return {passed == 5, d.str()};
}

Outcome one_step_speedup() {
  MlpConfig c;
  c.data_dim = 16;
  c.hidden = {128, 128};
  const auto r = measure_one_step_speedup(c, 4096, 20, 3);
  std::ostringstream d;
  d << "generate " << r.generate_per_second << " samples/s, 20-step sampler " << r.sampler_per_second
    << " samples/s, speedup " << r.speedup << "x";
  return {r.speedup >= 10.0, d.str()};
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(RSD_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome cli_determinism() {
  const auto cfg = (scratch_dir() / "determinism.cfg").string();
  write_text_file(cfg,
                  "[experiment]\ntask = inpaint\nseed = 9\n"
                  "[data]\ndim = 8\nrank = 2\nsamples = 2000\n"
                  "[operator]\nkind = random_mask\ndim = 8\nmissing_rate = 0.3\nper_sample = true\n"
                  "[noise]\nsigma = 0.1\n"
                  "[model]\nkind = mlp\nhidden = 32, 32\n"
                  "[pretrain]\nobjective = ambient_inpaint\nsteps = 100\nbatch = 64\nlr = 1e-3\ntrace_every = 10\n"
                  "[distill]\ngenerator = mlp\nsteps = 30\nbatch = 64\nmetric_every = 10\neval_samples = 1000\n"
                  "[sample]\nsource = teacher\nn = 100\nsteps = 10\n"
                  "[theory]\nproblems = 4\n");
  std::map<std::string, std::string> first;
  int mismatched = 0, files = 0;
  for (int pass = 0; pass < 2; ++pass) {
    const auto out = scratch_dir() / ("determinism" + std::to_string(pass));
    fs::remove_all(out);
    for (const char* cmd : {"pretrain", "distill", "evaluate", "sample", "verify-theorem"}) {
      const int code = run_cli(std::string(cmd) + " --config " + cfg + " --out-dir " + out.string());
      if (code != 0) return {false, std::string(cmd) + " exited with " + std::to_string(code)};
    }
    for (const auto& entry : fs::directory_iterator(out)) {
      if (entry.path().extension() != ".csv") continue;
      const std::string name = entry.path().filename().string();
      const std::string text = read_text_file(entry.path().string());
      if (pass == 0) {
        first[name] = text;
      } else {
        ++files;
        if (first[name] != text) ++mismatched;
      }
    }
  }
  std::ostringstream d;
  d << files << " CSV files compared across two runs, " << mismatched << " differ";
  return {files >= 5 && mismatched == 0, d.str()};
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](const std::string& name, const Outcome& o) {
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
    failures += !o.pass;
  };
  auto guarded = [&](const std::string& name, const std::function<Outcome()>& f) {
    try {
      report(name, f());
    } catch (const std::exception& e) {
      report(name, {false, std::string("exception: ") + e.what()});
    }
  };
  guarded("theorem recovery", theorem_recovery);
  guarded("monte carlo consistency", monte_carlo_consistency);
  guarded("gradient correctness", gradient_correctness);
  guarded("woodbury and score exactness", woodbury_and_score);
  guarded("objective equivalences", objective_equivalences);
  std::vector<SeedRun> runs;
  double distill_seconds = 0.0;
  try {
    const auto t0 = Clock::now();
    runs = distill_seeds();
    distill_seconds = seconds_since(t0);
  } catch (const std::exception& e) {
    std::cout << "distillation runs threw: " << e.what() << std::endl;
  }
  guarded("student beats observation", [&] { return student_beats_observation(runs, distill_seconds); });
  guarded("proximal selection", [&] { return proximal_selection(runs); });
  guarded("one-step speedup", one_step_speedup);
  guarded("cli determinism", cli_determinism);
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
