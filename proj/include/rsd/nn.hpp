#pragma once

// Time-conditioned denoisers with hand-written reverse mode.
//
// Batches are column-major: x is d x B, cond is c x B (c may be 0), sigma
// holds one noise level per column. Parameters live in one flat vector so
// optimizers, EMA and checkpoints treat every model the same way.

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "rsd/common.hpp"
#include "rsd/rng.hpp"

namespace rsd {

// Activations saved by forward() for the matching backward() call.
struct Tape {
  Matrix x;
  Vector sigma;
  std::vector<Matrix> pre;   // pre-activations per layer
  std::vector<Matrix> post;  // layer inputs (post[0] is the network input)
};

class Denoiser {
 public:
  virtual ~Denoiser() = default;

  virtual std::string kind() const = 0;
  virtual Index data_dim() const = 0;
  virtual Index cond_dim() const = 0;
  Index num_params() const { return params_.size(); }
  Vector& params() { return params_; }
  const Vector& params() const { return params_; }

  virtual Matrix forward(const Matrix& x, const Matrix& cond, const Vector& sigma, Tape* tape = nullptr) const = 0;
  // grad_out = dLoss/d(output). Either output pointer may be null.
  virtual void backward(const Tape& tape, const Matrix& grad_out, Vector* grad_params, Matrix* grad_x) const = 0;
  virtual std::unique_ptr<Denoiser> clone() const = 0;
  // Architecture description written ahead of the parameters in checkpoints.
  virtual nlohmann::json header() const = 0;

  // Single-sample convenience wrapper.
  Vector forward_one(const Vector& x, double sigma, const Vector& cond = Vector()) const;

 protected:
  Vector params_;
};

// EDM-style preconditioning constants.
struct Preconditioner {
  double sigma_data = 0.5;
  double c_in(double s) const { return 1.0 / std::sqrt(s * s + sigma_data * sigma_data); }
  double c_skip(double s) const { return sigma_data * sigma_data / (s * s + sigma_data * sigma_data); }
  double c_out(double s) const { return s * sigma_data / std::sqrt(s * s + sigma_data * sigma_data); }
  double c_noise(double s) const { return 0.25 * std::log(s); }
};

struct MlpConfig {
  Index data_dim = 0;
  Index cond_dim = 0;
  std::vector<Index> hidden = {64, 64};
  Index embed_dim = 16;  // even; cos/sin pairs of the log-noise feature
  double sigma_data = 0.5;
  std::uint64_t seed = 0;
};

// out = c_skip x + c_out net([c_in x; cond; embed(sigma)]), SiLU hidden
// layers, orthogonal hidden init, zero output layer.
class Mlp final : public Denoiser {
 public:
  explicit Mlp(MlpConfig config);

  std::string kind() const override { return "mlp"; }
  Index data_dim() const override { return config_.data_dim; }
  Index cond_dim() const override { return config_.cond_dim; }
  const MlpConfig& config() const { return config_; }
  Index input_width() const { return config_.data_dim + config_.cond_dim + config_.embed_dim; }

  Matrix forward(const Matrix& x, const Matrix& cond, const Vector& sigma, Tape* tape = nullptr) const override;
  void backward(const Tape& tape, const Matrix& grad_out, Vector* grad_params, Matrix* grad_x) const override;
  std::unique_ptr<Denoiser> clone() const override { return std::make_unique<Mlp>(*this); }
  nlohmann::json header() const override;

  // Fourier features of c_noise(sigma): rows cos(k c), sin(k c), k = 1..E/2.
  Matrix embed(const Vector& sigma) const;

 private:
  struct Layer {
    Index in = 0;
    Index out = 0;
    Index offset = 0;  // weights (column-major) then biases
  };
  Eigen::Map<const Matrix> weight(const Layer& l) const;
  Eigen::Map<const Vector> bias(const Layer& l) const;

  MlpConfig config_;
  Preconditioner pre_;
  std::vector<Layer> layers_;
};

// f(x, s) = L L^T (L L^T + s^2 I)^{-1} x, the exact posterior mean for data
// N(0, L L^T). Parameters are L (d x k, column-major).
class LinearGaussianDenoiser final : public Denoiser {
 public:
  LinearGaussianDenoiser(Index data_dim, Index rank, Index cond_dim = 0);
  explicit LinearGaussianDenoiser(const Matrix& factor, Index cond_dim = 0);
  // Factor of a PSD covariance (eigen square root restricted to its range
  // when rank < d).
  static LinearGaussianDenoiser exact(const Matrix& covariance, Index cond_dim = 0);

  std::string kind() const override { return "linear_gaussian"; }
  Index data_dim() const override { return data_dim_; }
  Index cond_dim() const override { return cond_dim_; }
  Index rank() const { return rank_; }
  Matrix factor() const { return Eigen::Map<const Matrix>(params_.data(), data_dim_, rank_); }

  Matrix forward(const Matrix& x, const Matrix& cond, const Vector& sigma, Tape* tape = nullptr) const override;
  void backward(const Tape& tape, const Matrix& grad_out, Vector* grad_params, Matrix* grad_x) const override;
  std::unique_ptr<Denoiser> clone() const override { return std::make_unique<LinearGaussianDenoiser>(*this); }
  nlohmann::json header() const override;

  // The linear map applied at noise level s.
  Matrix map_at(double s) const;

 private:
  Index data_dim_;
  Index rank_;
  Index cond_dim_;
};

// Loss value plus parameter gradient from one forward/backward pass. The
// closure receives the model output and fills dLoss/d(output).
struct LossGrad {
  double loss = 0.0;
  Vector grad;
};
using OutputLoss = std::function<double(const Matrix& out, Matrix& grad_out)>;
LossGrad loss_and_grad(const Denoiser& model, const Matrix& x, const Matrix& cond, const Vector& sigma,
                       const OutputLoss& loss);

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Vector m;
  Vector v;
  std::int64_t step = 0;
};
void adam_step(AdamState& state, Vector& params, const Vector& grads);

// ema <- decay ema + (1 - decay) params, decay in [0, 1].
void ema_update(Vector& ema, const Vector& params, double decay);

// FNV-1a over the raw parameter bytes.
std::uint64_t params_hash(const Vector& params);

// Rebuild a model from a checkpoint header (parameters left at init).
std::unique_ptr<Denoiser> make_denoiser(const nlohmann::json& header);

}  // namespace rsd
