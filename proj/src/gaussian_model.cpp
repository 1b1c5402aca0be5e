#include "rsd/gaussian_model.hpp"

#include <cmath>
#include <numbers>

namespace rsd {

LowRankGaussian::LowRankGaussian(Matrix factor) : factor_(std::move(factor)) {
  RSD_REQUIRE(factor_.cols() >= 1 && factor_.rows() > factor_.cols(), "LowRankGaussian: need 1 <= r < d, got d=",
              factor_.rows(), " r=", factor_.cols());
  const Matrix gram = factor_.transpose() * factor_;
  const double err = (gram - Matrix::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff();
  RSD_REQUIRE(err < 1e-10, "LowRankGaussian: factor columns are not orthonormal (error ", err, ")");
}

LowRankGaussian LowRankGaussian::random(Index d, Index r, Rng& rng) {
  RSD_REQUIRE(r >= 1 && r < d, "LowRankGaussian::random: need 1 <= r < d");
  Matrix g(d, r);
  for (Index j = 0; j < r; ++j) {
    for (Index i = 0; i < d; ++i) g(i, j) = rng.normal();
  }
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(d, r);
  return LowRankGaussian(std::move(q));
}

CorruptedGaussian::CorruptedGaussian(LowRankGaussian base, CorruptionOperator op, double sigma)
    : base_(std::move(base)), op_(std::move(op)), sigma_(sigma) {
  RSD_REQUIRE(op_.input_dim() == base_.dim(), "CorruptedGaussian: operator input dim ", op_.input_dim(),
              " does not match data dim ", base_.dim());
  RSD_REQUIRE(sigma_ >= 0.0 && std::isfinite(sigma_), "CorruptedGaussian: sigma must be >= 0");
  ae_.resize(op_.output_dim(), base_.rank());
  for (Index j = 0; j < base_.rank(); ++j) ae_.col(j) = op_.apply(base_.factor().col(j));
}

Matrix CorruptedGaussian::covariance() const {
  return ae_ * ae_.transpose() + sigma_ * sigma_ * Matrix::Identity(dim(), dim());
}

Samples sample_clean(const LowRankGaussian& model, Index n, const Rng& rng, par::Mode mode) {
  RSD_REQUIRE(n >= 1, "sample_clean: n must be >= 1");
  const Index d = model.dim();
  const Index r = model.rank();
  const Matrix& e = model.factor();
  Samples out(n, d);
  par::for_each_index(
      n,
      [&](std::int64_t i) {
        Rng local = rng.stream(stream_tag::kData, static_cast<std::uint64_t>(i));
        Vector z(r);
        for (Index k = 0; k < r; ++k) z(k) = local.normal();
        out.row(i) = (e * z).transpose();
      },
      mode);
  return out;
}

Samples sample_corrupted(const CorruptedGaussian& model, Index n, const Rng& rng, par::Mode mode) {
  RSD_REQUIRE(n >= 1, "sample_corrupted: n must be >= 1");
  const Index m = model.dim();
  const Index r = model.base().rank();
  const Matrix& b = model.range_factor();
  Samples out(n, m);
  par::for_each_index(
      n,
      [&](std::int64_t i) {
        Rng local = rng.stream(stream_tag::kData, static_cast<std::uint64_t>(i));
        Vector z(r);
        for (Index k = 0; k < r; ++k) z(k) = local.normal();
        Vector y = b * z;
        for (Index k = 0; k < m; ++k) y(k) += model.sigma() * local.normal();
        out.row(i) = y.transpose();
      },
      mode);
  return out;
}

Matrix woodbury_inverse(double c, const Matrix& b) {
  RSD_REQUIRE(c > 0.0, "woodbury_inverse: c must be positive, got ", c);
  const Index m = b.rows();
  const Index k = b.cols();
  Matrix out = Matrix::Identity(m, m) / c;
  if (k == 0) return out;
  const Matrix cap = Matrix::Identity(k, k) + (b.transpose() * b) / c;
  const Matrix solved = cap.llt().solve(b.transpose());  // k x m
  out.noalias() -= (b * solved) / (c * c);
  return out;
}

Vector score(const CorruptedGaussian& model, double extra_variance, const Vector& y) {
  RSD_REQUIRE(y.size() == model.dim(), "score: expected dimension ", model.dim(), ", got ", y.size());
  RSD_REQUIRE(extra_variance >= 0.0, "score: extra variance must be >= 0");
  const double c = model.sigma() * model.sigma() + extra_variance;
  if (c <= 0.0) {
    throw NumericalError("score: singular covariance (sigma = 0 and no extra variance)");
  }
  return -(woodbury_inverse(c, model.range_factor()) * y);
}

double log_density(const CorruptedGaussian& model, double extra_variance, const Vector& y) {
  const Index m = model.dim();
  const double c = model.sigma() * model.sigma() + extra_variance;
  if (c <= 0.0) throw NumericalError("log_density: singular covariance");
  const Matrix cov = model.range_factor() * model.range_factor().transpose() + c * Matrix::Identity(m, m);
  Eigen::LLT<Matrix> llt(cov);
  const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  const double quad = y.dot(llt.solve(y));
  return -0.5 * (quad + logdet + static_cast<double>(m) * std::log(2.0 * std::numbers::pi));
}

Matrix posterior_mean_map(const Matrix& covariance, double sigma_t) {
  RSD_REQUIRE(covariance.rows() == covariance.cols(), "posterior_mean: covariance must be square");
  RSD_REQUIRE(sigma_t > 0.0, "posterior_mean: sigma_t must be positive");
  const Index d = covariance.rows();
  const Matrix shifted = covariance + sigma_t * sigma_t * Matrix::Identity(d, d);
  // Sigma (Sigma + s^2 I)^{-1} = I - s^2 (Sigma + s^2 I)^{-1}; symmetric.
  Matrix inv = shifted.llt().solve(Matrix::Identity(d, d));
  return Matrix::Identity(d, d) - sigma_t * sigma_t * inv;
}

Vector posterior_mean(const Matrix& covariance, double sigma_t, const Vector& x_t) {
  RSD_REQUIRE(x_t.size() == covariance.rows(), "posterior_mean: dimension mismatch");
  RSD_REQUIRE(sigma_t > 0.0, "posterior_mean: sigma_t must be positive");
  const Index d = covariance.rows();
  const Matrix shifted = covariance + sigma_t * sigma_t * Matrix::Identity(d, d);
  return covariance * shifted.ldlt().solve(x_t);
}

Matrix psd_sqrt(const Matrix& c) {
  RSD_REQUIRE(c.rows() == c.cols(), "psd_sqrt: matrix must be square");
  const Matrix sym = 0.5 * (c + c.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym);
  Vector lambda = eig.eigenvalues();
  const double scale = std::max(1.0, lambda.cwiseAbs().maxCoeff());
  for (Index i = 0; i < lambda.size(); ++i) {
    if (lambda(i) < -1e-8 * scale) {
      throw NumericalError(detail::concat("matrix is not PSD (eigenvalue ", lambda(i), ")"));
    }
    lambda(i) = lambda(i) < 1e-10 * scale ? 0.0 : std::sqrt(lambda(i));
  }
  return eig.eigenvectors() * lambda.asDiagonal() * eig.eigenvectors().transpose();
}

double frechet_distance(const Vector& mu1, const Matrix& cov1, const Vector& mu2, const Matrix& cov2) {
  RSD_REQUIRE(mu1.size() == mu2.size() && cov1.rows() == mu1.size() && cov2.rows() == mu2.size() &&
                  cov1.cols() == cov1.rows() && cov2.cols() == cov2.rows(),
              "frechet_distance: dimension mismatch");
  const Matrix s2 = psd_sqrt(cov2);
  psd_sqrt(cov1);  // validates PSD-ness of the first argument
  const Matrix cross = psd_sqrt(s2 * cov1 * s2);
  const double value = (mu1 - mu2).squaredNorm() + cov1.trace() + cov2.trace() - 2.0 * cross.trace();
  return std::max(0.0, value);
}

double w2_rank_one(const Vector& e, const Vector& u) {
  RSD_REQUIRE(e.size() == u.size(), "w2_rank_one: dimension mismatch");
  RSD_REQUIRE(std::abs(e.norm() - 1.0) < 1e-10, "w2_rank_one: e must be a unit vector (norm ", e.norm(), ")");
  return std::max(0.0, 1.0 + u.squaredNorm() - 2.0 * std::abs(e.dot(u)));
}

MomentFit fit_moments(const Samples& samples) {
  RSD_REQUIRE(samples.rows() >= 1, "fit_moments: empty sample set");
  const double n = static_cast<double>(samples.rows());
  MomentFit fit;
  fit.mean = samples.colwise().sum().transpose() / n;
  const Matrix centered = samples.rowwise() - fit.mean.transpose();
  fit.covariance = (centered.transpose() * centered) / n;
  return fit;
}

}  // namespace rsd
