#pragma once

// Denoiser training from corrupted observations: the standard denoising
// loss, the noise-floor-aware (Tweedie) loss, the masked loss with a further
// input mask, and the Fourier-space masked loss; plus the deterministic
// sampler with early truncation at the data noise floor.
//
// Every loss has an overload taking explicit noise draws, so different
// objectives can be compared on identical randomness.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "rsd/common.hpp"
#include "rsd/nn.hpp"
#include "rsd/operators.hpp"
#include "rsd/parallel.hpp"
#include "rsd/rng.hpp"

namespace rsd {

struct NoiseSchedule {
  double sigma_min = 0.02;
  double sigma_max = 10.0;
  // lambda(sigma_t); default 1 / sigma_t^2.
  std::function<double(double)> weight = [](double s) { return 1.0 / (s * s); };

  void validate() const;
  // log sigma uniform on [log sigma_min, log sigma_max].
  double draw(Rng& rng) const;
};

struct NoiseDraw {
  Vector sigma;  // one per column
  Matrix eps;    // same shape as the batch
};
NoiseDraw draw_noise(const NoiseSchedule& schedule, Index dim, Index batch, Rng& rng);

// Batches are column-major (dim x B). Each loss returns the batch mean and,
// when grad is non-null, its gradient with respect to the model parameters.

double loss_standard(const Denoiser& model, const Matrix& y, const NoiseSchedule& schedule, const NoiseDraw& draw,
                     Vector* grad = nullptr);
double loss_standard(const Denoiser& model, const Matrix& y, const NoiseSchedule& schedule, Rng& rng,
                     Vector* grad = nullptr);

// sigma >= 0 is the observation noise level; sigma_t is clipped to >= sigma.
double loss_ambient_tweedie(const Denoiser& model, const Matrix& y, double sigma, const NoiseSchedule& schedule,
                            const NoiseDraw& draw, Vector* grad = nullptr);
double loss_ambient_tweedie(const Denoiser& model, const Matrix& y, double sigma, const NoiseSchedule& schedule,
                            Rng& rng, Vector* grad = nullptr);

// masks / further_masks are 0-1 matrices shaped like y; further <= masks.
double loss_ambient_inpaint(const Denoiser& model, const Matrix& y, const Matrix& masks, const Matrix& further_masks,
                            const NoiseSchedule& schedule, const NoiseDraw& draw, Vector* grad = nullptr);
double loss_ambient_inpaint(const Denoiser& model, const Matrix& y, const Matrix& masks, const Matrix& further_masks,
                            const NoiseSchedule& schedule, Rng& rng, Vector* grad = nullptr);

// ops / further_ops hold one shared operator or one per column. Operators
// must be square (fourier_mask with coils); further_ops use sub-masks.
double loss_fourier_ambient(const Denoiser& model, const Matrix& y, const std::vector<CorruptionOperator>& ops,
                            const std::vector<CorruptionOperator>& further_ops, const NoiseSchedule& schedule,
                            const NoiseDraw& draw, Vector* grad = nullptr);
double loss_fourier_ambient(const Denoiser& model, const Matrix& y, const std::vector<CorruptionOperator>& ops,
                            const std::vector<CorruptionOperator>& further_ops, const NoiseSchedule& schedule, Rng& rng,
                            Vector* grad = nullptr);

// Drops each kept bit independently with probability further_rate.
MaskBits sample_secondary_mask(const MaskBits& mask, double further_rate, Rng& rng);

enum class Objective { kStandard, kAmbientTweedie, kAmbientInpaint, kFourierAmbient };
std::string to_string(Objective objective);
Objective parse_objective(const std::string& name);

struct TrainConfig {
  Objective objective = Objective::kStandard;
  double sigma = 0.0;  // observation noise level (Tweedie objective)
  Index batch = 128;
  std::int64_t steps = 50000;
  double lr = 1e-3;
  double ema_decay = 0.999;
  double further_rate = 0.2;
  NoiseSchedule schedule;
  std::uint64_t seed = 0;
  int trace_every = 100;
};

// Observations (one per row) and the operators that produced them. The
// operator source is needed by the masked objectives only.
struct TrainingData {
  const Samples* observations = nullptr;
  const OperatorSample* operators = nullptr;
};

struct TracePoint {
  std::int64_t step = 0;
  double loss = 0.0;
  double ema_loss = 0.0;  // exponentially smoothed loss (factor 0.98)
};

struct TrainResult {
  std::unique_ptr<Denoiser> ema_model;
  std::vector<TracePoint> trace;
};

class TrainingAborted : public NumericalError {
 public:
  TrainingAborted(const std::string& what, std::int64_t step, Vector last_good)
      : NumericalError(what), step_(step), last_good_(std::move(last_good)) {}
  std::int64_t step() const { return step_; }
  const Vector& last_good_params() const { return last_good_; }

 private:
  std::int64_t step_;
  Vector last_good_;
};

// Checks that the objective, operators and model dimensions fit together.
void validate_training(const TrainConfig& config, const TrainingData& data, const Denoiser& model);

// One optimizer step of the configured objective on a batch (columns),
// with masks/operators already resolved. Returns the batch loss.
struct ObjectiveBatch {
  Matrix y;
  std::vector<CorruptionOperator> ops;  // one per column when masked
};
double objective_loss(const TrainConfig& config, const Denoiser& model, const ObjectiveBatch& batch, Rng& rng,
                      Vector* grad);

TrainResult train(const TrainConfig& config, const TrainingData& data, Denoiser& model);

// Geometric decreasing grid sigma_max -> sigma_min with steps + 1 entries.
std::vector<double> tweedie_grid(double sigma_max, double sigma_min, int steps);

// Deterministic sampler: x_T ~ N(0, sigma_T^2 I) and
// x <- x - ((s_i - s_{i+1}) / s_i)(x - f(x, s_i)). With truncate, the first
// step whose next level falls below sigma returns f(x, s_i) instead.
// Sample j starts from stream (kSample, j) of rng. Output: d x n.
Matrix sample_ambient_tweedie(const Denoiser& model, double sigma, const std::vector<double>& grid, bool truncate,
                              Index n, const Rng& rng, par::Mode mode = par::Mode::kParallel);

// Columns are processed in fixed-size blocks so serial and parallel runs
// issue identical kernel calls.
inline constexpr Index kBlockColumns = 256;

}  // namespace rsd
