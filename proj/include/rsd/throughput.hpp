#pragma once

#include "rsd/nn.hpp"
#include "rsd/parallel.hpp"

namespace rsd {

struct SpeedupResult {
  double generate_seconds = 0.0;  // best of repeats
  double sampler_seconds = 0.0;
  double generate_per_second = 0.0;
  double sampler_per_second = 0.0;
  double speedup = 0.0;
};

// Times generate() on an MlpGenerator against sample_ambient_tweedie with
// `steps` denoiser calls, both built on the same network shape.
SpeedupResult measure_one_step_speedup(const MlpConfig& config, Index n, int steps, int repeats,
                                       par::Mode mode = par::Mode::kParallel);

}  // namespace rsd
