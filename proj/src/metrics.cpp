#include "rsd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "rsd/gaussian_model.hpp"
#include "rsd/io.hpp"

namespace rsd {

double sample_frechet(const Samples& a, const Samples& b, double regularization) {
  RSD_REQUIRE(a.cols() == b.cols(), "sample_frechet: dimension mismatch (", a.cols(), " vs ", b.cols(), ")");
  RSD_REQUIRE(regularization >= 0.0, "sample_frechet: regularization must be >= 0");
  MomentFit fa = fit_moments(a);
  MomentFit fb = fit_moments(b);
  if (regularization == 0.0 && (a.rows() <= a.cols() || b.rows() <= b.cols())) {
    throw ContractError("sample_frechet: need more than d samples per set without regularization");
  }
  if (fa.mean == fb.mean && fa.covariance == fb.covariance) return 0.0;
  const Index d = a.cols();
  fa.covariance += regularization * Matrix::Identity(d, d);
  fb.covariance += regularization * Matrix::Identity(d, d);
  return frechet_distance(fa.mean, fa.covariance, fb.mean, fb.covariance);
}

double proximal_frechet(const Samples& generated, const Samples& corrupted_ref, const OperatorSample& ops,
                        double sigma, const Rng& rng, double regularization, par::Mode mode) {
  RSD_REQUIRE(sigma >= 0.0, "proximal_frechet: sigma must be >= 0");
  RSD_REQUIRE(generated.rows() >= 1 && corrupted_ref.rows() >= 1, "proximal_frechet: empty sample set");
  const CorruptionOperator& fixed = ops.fixed();
  RSD_REQUIRE(generated.cols() == fixed.input_dim(), "proximal_frechet: generated samples have dimension ",
              generated.cols(), ", operator expects ", fixed.input_dim());
  RSD_REQUIRE(corrupted_ref.cols() == fixed.output_dim(), "proximal_frechet: reference has dimension ",
              corrupted_ref.cols(), ", operator produces ", fixed.output_dim());
  Samples corrupted(generated.rows(), fixed.output_dim());
  par::for_each_index(
      generated.rows(),
      [&](std::int64_t i) {
        const CorruptionOperator op = ops.per_sample() ? ops.at(static_cast<std::uint64_t>(i)) : fixed;
        Vector y = op.apply(generated.row(i).transpose());
        if (sigma > 0.0) {
          Rng local = rng.stream(stream_tag::kEval, static_cast<std::uint64_t>(i));
          for (Index k = 0; k < y.size(); ++k) y(k) += sigma * local.normal();
        }
        corrupted.row(i) = y.transpose();
      },
      mode);
  return sample_frechet(corrupted, corrupted_ref, regularization);
}

std::vector<double> eigenspace_alignment(const Samples& samples, const Matrix& e) {
  const Index d = samples.cols();
  const Index r = e.cols();
  RSD_REQUIRE(e.rows() == d && r >= 1 && r <= d, "eigenspace_alignment: reference factor must be d x r");
  RSD_REQUIRE(samples.rows() >= r, "eigenspace_alignment: need at least r samples");
  const MomentFit fit = fit_moments(samples);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(fit.covariance);
  const Vector& lambda = eig.eigenvalues();
  const double top = lambda(d - 1);
  if (!(top > 0.0) || lambda(d - r) <= 1e-12 * top) {
    throw NumericalError("eigenspace_alignment: sample covariance has rank below r");
  }
  const Matrix q = eig.eigenvectors().rightCols(r);
  // Orthonormal basis of span(E).
  Eigen::HouseholderQR<Matrix> qr(e);
  const Matrix basis = qr.householderQ() * Matrix::Identity(d, r);
  Eigen::JacobiSVD<Matrix> svd(q.transpose() * basis);
  std::vector<double> angles;
  for (Index i = 0; i < r; ++i) {
    const double c = std::clamp(svd.singularValues()(i), -1.0, 1.0);
    angles.push_back(std::acos(c) * 180.0 / std::numbers::pi);
  }
  std::sort(angles.begin(), angles.end());
  return angles;
}

std::int64_t select_checkpoint(const MetricReport& report) {
  RSD_REQUIRE(!report.rows.empty(), "select_checkpoint: empty report");
  const MetricRow* best = &report.rows.front();
  for (const auto& row : report.rows) {
    if (row.proximal_frechet < best->proximal_frechet ||
        (row.proximal_frechet == best->proximal_frechet && row.step < best->step)) {
      best = &row;
    }
  }
  return best->step;
}

std::string MetricReport::to_csv(bool with_wall_time) const {
  std::vector<std::string> header = {"step", "sid_loss", "fake_loss", "proximal_frechet", "true_frechet",
                                     "max_angle_deg", "selected"};
  if (with_wall_time) header.push_back("wall_time");
  CsvWriter csv(header);
  const std::int64_t selected = rows.empty() ? -1 : select_checkpoint(*this);
  for (const auto& r : rows) {
    std::vector<std::string> cells = {std::to_string(r.step),
                                      format_double(r.sid_loss),
                                      format_double(r.fake_loss),
                                      format_double(r.proximal_frechet),
                                      r.true_frechet ? format_double(*r.true_frechet) : "",
                                      r.max_angle_degrees ? format_double(*r.max_angle_degrees) : "",
                                      r.step == selected ? "1" : "0"};
    if (with_wall_time) cells.push_back(format_double(r.wall_seconds));
    csv.add_row(std::move(cells));
  }
  return csv.str();
}

}  // namespace rsd
