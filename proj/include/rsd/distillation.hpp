#pragma once

// One-step generator distillation. A frozen teacher denoiser f_phi, a fake
// denoiser f_psi fitted to corrupted generator outputs, and a generator G
// trained with the score-identity loss
//
//   (1 - alpha) lambda |D|^2 + lambda D^T (f_psi(w_t) - w_g),
//   D = f_phi(w_t) - f_psi(w_t),  w_t = w_g + sigma_t eps,  w_g = A G(z).
//
// Gradients reach G through w_g and w_t, including the input Jacobians of
// both denoisers; the denoiser parameters receive nothing.

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rsd/common.hpp"
#include "rsd/gaussian_model.hpp"
#include "rsd/metrics.hpp"
#include "rsd/nn.hpp"
#include "rsd/operators.hpp"
#include "rsd/pretraining.hpp"
#include "rsd/rng.hpp"

namespace rsd {

class Generator {
 public:
  virtual ~Generator() = default;
  virtual std::string kind() const = 0;
  virtual Index latent_dim() const = 0;
  virtual Index output_dim() const = 0;
  Index num_params() const { return params().size(); }
  virtual Vector& params() { return params_; }
  virtual const Vector& params() const { return params_; }

  // z is latent_dim x B.
  virtual Matrix forward(const Matrix& z, Tape* tape = nullptr) const = 0;
  virtual void backward(const Tape& tape, const Matrix& grad_out, Vector* grad_params) const = 0;
  virtual std::unique_ptr<Generator> clone() const = 0;
  virtual nlohmann::json header() const = 0;
  // Output covariance for z ~ N(0, I) when the map is linear.
  virtual std::optional<Matrix> output_covariance() const { return std::nullopt; }

 protected:
  Vector params_;
};

// A denoiser network evaluated at a fixed noise level: G(z) = f(z, sigma_init).
class MlpGenerator final : public Generator {
 public:
  MlpGenerator(const Mlp& network, double sigma_init);

  std::string kind() const override { return "mlp_generator"; }
  Index latent_dim() const override { return net_.data_dim(); }
  Index output_dim() const override { return net_.data_dim(); }
  double sigma_init() const { return sigma_init_; }
  Vector& params() override { return net_.params(); }
  const Vector& params() const override { return net_.params(); }
  const Mlp& network() const { return net_; }

  Matrix forward(const Matrix& z, Tape* tape = nullptr) const override;
  void backward(const Tape& tape, const Matrix& grad_out, Vector* grad_params) const override;
  std::unique_ptr<Generator> clone() const override { return std::make_unique<MlpGenerator>(*this); }
  nlohmann::json header() const override;

 private:
  Mlp net_;
  double sigma_init_;
};

// G(z) = W z.
class LinearGenerator final : public Generator {
 public:
  explicit LinearGenerator(const Matrix& w);
  std::string kind() const override { return "linear_generator"; }
  Index latent_dim() const override { return latent_; }
  Index output_dim() const override { return output_; }
  Matrix weight() const { return Eigen::Map<const Matrix>(params_.data(), output_, latent_); }

  Matrix forward(const Matrix& z, Tape* tape = nullptr) const override;
  void backward(const Tape& tape, const Matrix& grad_out, Vector* grad_params) const override;
  std::unique_ptr<Generator> clone() const override { return std::make_unique<LinearGenerator>(*this); }
  nlohmann::json header() const override;
  std::optional<Matrix> output_covariance() const override;

 private:
  Index output_;
  Index latent_;
};

// G(z) = U V^T z with U: output x r, V: latent x r.
class LowRankLinearGenerator final : public Generator {
 public:
  LowRankLinearGenerator(const Matrix& u, const Matrix& v);
  // Rank-r truncated SVD of a linear map.
  static LowRankLinearGenerator from_map(const Matrix& map, Index rank);

  std::string kind() const override { return "low_rank_generator"; }
  Index latent_dim() const override { return latent_; }
  Index output_dim() const override { return output_; }
  Index rank() const { return rank_; }
  Matrix u() const { return Eigen::Map<const Matrix>(params_.data(), output_, rank_); }
  Matrix v() const { return Eigen::Map<const Matrix>(params_.data() + output_ * rank_, latent_, rank_); }
  Matrix map() const { return u() * v().transpose(); }

  Matrix forward(const Matrix& z, Tape* tape = nullptr) const override;
  void backward(const Tape& tape, const Matrix& grad_out, Vector* grad_params) const override;
  std::unique_ptr<Generator> clone() const override { return std::make_unique<LowRankLinearGenerator>(*this); }
  nlohmann::json header() const override;
  std::optional<Matrix> output_covariance() const override;

 private:
  Index output_;
  Index latent_;
  Index rank_;
};

std::unique_ptr<Generator> make_generator(const nlohmann::json& header);
void save_generator(const std::string& path, const Generator& g);
std::unique_ptr<Generator> load_generator(const std::string& path);

// Inputs of one score-identity evaluation. cond (c x B) is passed to both
// denoisers; when empty, models that need conditioning get ones.
// input_mask (0-1, d x B) multiplies w_t before it reaches the denoisers.
// projection holds zero, one shared, or one-per-column square operators
// applied to both denoiser outputs.
struct SidBatch {
  Matrix w_g;
  Vector sigma;
  Matrix eps;
  Matrix cond;
  Matrix input_mask;
  std::vector<CorruptionOperator> projection;
};

struct SidResult {
  double loss = 0.0;  // batch mean
  Matrix grad_w;      // d(loss)/d(w_g), d x B
};

// When teacher_param_grads / fake_param_grads are given, the parameter
// gradients of the two denoisers are also computed and returned there; they
// never feed into grad_w.
SidResult sid_generator_loss(const Denoiser& teacher, const Denoiser& fake, const SidBatch& batch, double alpha,
                             const std::function<double(double)>& weight, Vector* teacher_param_grads = nullptr,
                             Vector* fake_param_grads = nullptr);
// Single-vector form.
double sid_generator_loss(const Denoiser& teacher, const Denoiser& fake, const Vector& w_g, double sigma_t,
                          const Vector& eps, double alpha, double lambda);

struct DistillConfig {
  double alpha = 1.2;
  double generator_lr = 1e-4;
  double fake_lr = 1e-3;
  int fake_updates = 1;
  std::int64_t steps = 1000;
  Index batch = 128;
  double sigma = 0.0;  // observation noise level of the teacher's data
  Objective objective = Objective::kStandard;
  NoiseSchedule schedule;
  double further_rate = 0.2;
  // Add sigma-noise to corrupted generator outputs before fitting the fake.
  bool fake_observation_noise = true;
  // Multiply both learning rates by this factor over the run (geometric).
  double final_lr_factor = 1.0;
  std::uint64_t seed = 0;
  std::int64_t metric_every = 100;
  Index eval_samples = 10000;
};

// Everything the loop needs besides the models.
struct DistillContext {
  const OperatorSample* operators = nullptr;  // required
  const Samples* corrupted_reference = nullptr;  // for proximal Frechet; optional
  const LowRankGaussian* clean_law = nullptr;    // for true W2; optional
};

struct DistillSnapshot {
  std::int64_t step = 0;
  Vector generator_params;
};

class Distiller {
 public:
  Distiller(const Denoiser& teacher, std::unique_ptr<Generator> generator, DistillConfig config,
            DistillContext context);
  // Fake initialized from the given model instead of the teacher.
  Distiller(const Denoiser& teacher, std::unique_ptr<Denoiser> fake, std::unique_ptr<Generator> generator,
            DistillConfig config, DistillContext context);

  const Denoiser& teacher() const { return *teacher_; }
  const Denoiser& fake() const { return *fake_; }
  Denoiser& fake() { return *fake_; }
  const Generator& generator() const { return *generator_; }
  Generator& generator() { return *generator_; }
  const DistillConfig& config() const { return config_; }
  std::int64_t step() const { return step_; }

  // One fake update on freshly corrupted generator samples; returns its loss.
  double fake_model_step(Rng& rng);
  // One generator update; returns the batch score-identity loss.
  double generator_step(Rng& rng);
  // fake_updates fake steps then one generator step, with rngs derived from
  // (seed, step).
  void advance();

  MetricRow evaluate(double sid_loss, double fake_loss) const;
  // Runs config.steps iterations; metrics at step 0, every metric_every
  // steps, and after the last step.
  void run();

  const MetricReport& report() const { return report_; }
  const std::vector<DistillSnapshot>& snapshots() const { return snapshots_; }

 private:
  CorruptionOperator draw_operator(Rng& rng) const;
  double lr_scale() const;

  std::unique_ptr<Denoiser> teacher_;
  std::unique_ptr<Denoiser> fake_;
  std::unique_ptr<Generator> generator_;
  DistillConfig config_;
  DistillContext context_;
  TrainConfig fake_train_;
  AdamState fake_adam_;
  AdamState gen_adam_;
  std::int64_t step_ = 0;
  double last_sid_ = 0.0;
  double last_fake_ = 0.0;
  MetricReport report_;
  std::vector<DistillSnapshot> snapshots_;
};

// Default generator: a copy of the teacher network at sigma_init when the
// teacher is an Mlp with matching dimension; a rank-truncated map of the
// teacher at sigma_init for linear teachers; a fresh network otherwise.
std::unique_ptr<Generator> initial_generator(const Denoiser& teacher, Index output_dim, double sigma_init,
                                             Index linear_rank, std::uint64_t seed);

// One forward pass per latent column. Column j of the latent batch is
// drawn from stream (kSample, j) of rng. Output: n x d.
Samples generate(const Generator& g, Index n, const Rng& rng, par::Mode mode = par::Mode::kParallel);
Vector generate(const Generator& g, const Vector& z);

}  // namespace rsd
