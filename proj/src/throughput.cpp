#include "rsd/throughput.hpp"

#include <chrono>

#include "rsd/distillation.hpp"
#include "rsd/pretraining.hpp"

namespace rsd {

namespace {

template <typename Fn>
double best_time(int repeats, Fn&& fn) {
  double best = std::numeric_limits<double>::infinity();
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  return best;
}

}  // namespace

SpeedupResult measure_one_step_speedup(const MlpConfig& config, Index n, int steps, int repeats, par::Mode mode) {
  RSD_REQUIRE(n > 0 && steps > 0 && repeats > 0, "n, steps and repeats must be positive");
  RSD_REQUIRE(config.cond_dim == 0, "throughput comparison uses unconditional networks");
  const Mlp teacher(config);
  const MlpGenerator generator(teacher, 5.0);
  const Rng rng(config.seed);
  const auto grid = tweedie_grid(10.0, 0.02, steps);

  double sink = 0.0;
  SpeedupResult r;
  r.generate_seconds = best_time(repeats, [&] { sink += generate(generator, n, rng, mode)(0, 0); });
  r.sampler_seconds =
      best_time(repeats, [&] { sink += sample_ambient_tweedie(teacher, 0.0, grid, false, n, rng, mode)(0, 0); });
  RSD_REQUIRE(std::isfinite(sink), "non-finite benchmark output");
  r.generate_per_second = static_cast<double>(n) / r.generate_seconds;
  r.sampler_per_second = static_cast<double>(n) / r.sampler_seconds;
  r.speedup = r.sampler_seconds / r.generate_seconds;
  return r;
}

}  // namespace rsd
