#pragma once

// Sample-based metrics: Frechet distance after re-corruption (a clean-data
// free model-selection signal), principal angles to a reference subspace,
// and checkpoint selection.

#include <optional>
#include <string>
#include <vector>

#include "rsd/common.hpp"
#include "rsd/operators.hpp"
#include "rsd/parallel.hpp"
#include "rsd/rng.hpp"

namespace rsd {

inline constexpr double kFrechetRegularization = 1e-6;

// Corrupts generated row i as A_i x_i + sigma eps_i (operator from
// ops.at(i), noise from stream (kEval, i) of rng), fits Gaussians to both
// sets and returns their Frechet distance. Both covariances receive
// `regularization` * I.
double proximal_frechet(const Samples& generated, const Samples& corrupted_ref, const OperatorSample& ops,
                        double sigma, const Rng& rng, double regularization = kFrechetRegularization,
                        par::Mode mode = par::Mode::kParallel);

// Frechet distance between moment fits of two sample sets (same dimension).
double sample_frechet(const Samples& a, const Samples& b, double regularization = kFrechetRegularization);

// Principal angles (degrees, ascending) between the top-r eigenvectors of
// the sample covariance and span(E).
std::vector<double> eigenspace_alignment(const Samples& samples, const Matrix& e);

struct MetricRow {
  std::int64_t step = 0;
  double sid_loss = 0.0;
  double fake_loss = 0.0;
  double proximal_frechet = 0.0;
  std::optional<double> true_frechet;       // W2^2 to the clean law when known
  std::optional<double> max_angle_degrees;  // eigenspace alignment when known
  double wall_seconds = 0.0;
};

struct MetricReport {
  std::vector<MetricRow> rows;
  // Columns: step, sid_loss, fake_loss, proximal_frechet, true_frechet,
  // max_angle_deg, selected[, wall_time]. Unknown values are left empty.
  std::string to_csv(bool with_wall_time) const;
};

// Step of the row with the smallest proximal_frechet; ties go to the
// earlier step. Rows need not be sorted.
std::int64_t select_checkpoint(const MetricReport& report);

}  // namespace rsd
