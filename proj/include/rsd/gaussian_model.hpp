#pragma once

// Degenerate Gaussian laws N(0, E E^T) and their corrupted images
// N(0, A E E^T A^T + sigma^2 I), with closed-form scores, posterior means,
// and Frechet / W2 distances.

#include "rsd/common.hpp"
#include "rsd/operators.hpp"
#include "rsd/parallel.hpp"
#include "rsd/rng.hpp"

namespace rsd {

class LowRankGaussian {
 public:
  // factor: d x r with orthonormal columns (checked to 1e-10), r < d.
  explicit LowRankGaussian(Matrix factor);
  // Random orthonormal factor (QR of a Gaussian matrix).
  static LowRankGaussian random(Index d, Index r, Rng& rng);

  const Matrix& factor() const { return factor_; }
  Index dim() const { return factor_.rows(); }
  Index rank() const { return factor_.cols(); }
  Matrix covariance() const { return factor_ * factor_.transpose(); }

 private:
  Matrix factor_;
};

class CorruptedGaussian {
 public:
  CorruptedGaussian(LowRankGaussian base, CorruptionOperator op, double sigma);

  const LowRankGaussian& base() const { return base_; }
  const CorruptionOperator& op() const { return op_; }
  double sigma() const { return sigma_; }
  Index dim() const { return op_.output_dim(); }
  // B = A E (m x r).
  const Matrix& range_factor() const { return ae_; }
  Matrix covariance() const;

 private:
  LowRankGaussian base_;
  CorruptionOperator op_;
  double sigma_;
  Matrix ae_;
};

// Row i is drawn from stream (kData, i) of rng, so sample i does not depend
// on n or on the thread that produced it.
Samples sample_clean(const LowRankGaussian& model, Index n, const Rng& rng, par::Mode mode = par::Mode::kParallel);
Samples sample_corrupted(const CorruptedGaussian& model, Index n, const Rng& rng,
                         par::Mode mode = par::Mode::kParallel);

// (B B^T + c I)^{-1} through the k x k capacitance matrix.
Matrix woodbury_inverse(double c, const Matrix& b);

// Score of N(0, A E E^T A^T + (sigma^2 + a) I) at y.
Vector score(const CorruptedGaussian& model, double extra_variance, const Vector& y);
double log_density(const CorruptedGaussian& model, double extra_variance, const Vector& y);

// Sigma (Sigma + sigma_t^2 I)^{-1} x_t.
Vector posterior_mean(const Matrix& covariance, double sigma_t, const Vector& x_t);
// The linear map Sigma (Sigma + sigma_t^2 I)^{-1}.
Matrix posterior_mean_map(const Matrix& covariance, double sigma_t);

// Symmetric PSD square root; eigenvalues below 1e-10 (relative to the
// largest) are clamped to 0. Throws NumericalError below -1e-8.
Matrix psd_sqrt(const Matrix& c);

// W2^2 between N(mu1, cov1) and N(mu2, cov2).
double frechet_distance(const Vector& mu1, const Matrix& cov1, const Vector& mu2, const Matrix& cov2);

// W2^2(N(0, e e^T), N(0, u u^T)) = 1 + |u|^2 - 2|e.u|.
double w2_rank_one(const Vector& e, const Vector& u);

// Mean and (1/n-normalized) covariance of the rows.
struct MomentFit {
  Vector mean;
  Matrix covariance;
};
MomentFit fit_moments(const Samples& samples);

}  // namespace rsd
