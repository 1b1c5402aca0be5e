#pragma once

// Linear corruption operators A: R^d -> R^m.
//
// Every operator is stored as a pair of compressed sparse row tables (A and
// its transpose) with column indices ascending inside each row. apply() and
// adjoint() accumulate row dot products left to right, which makes
// as_matrix() * x (evaluated with a plain ascending loop) reproduce apply(x)
// bit for bit. Complex-valued operators act on interleaved (re, im) pairs.

#include <complex>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rsd/common.hpp"
#include "rsd/config.hpp"
#include "rsd/parallel.hpp"
#include "rsd/rng.hpp"

namespace rsd {

using MaskBits = std::vector<std::uint8_t>;
using ComplexField = std::vector<std::complex<double>>;

enum class OperatorKind { kDense, kGaussianBlur, kRandomMask, kAvgPool, kFourierMask, kMulticoil };

std::string to_string(OperatorKind kind);
OperatorKind parse_operator_kind(const std::string& name);

// Upper bound on m*d for anything materialized densely.
inline constexpr std::int64_t kDenseBudget = std::int64_t{1} << 24;

class CorruptionOperator {
 public:
  static CorruptionOperator dense(const Matrix& a);
  static CorruptionOperator identity(Index d);
  static CorruptionOperator mask(const MaskBits& keep);

  OperatorKind kind() const { return kind_; }
  Index input_dim() const { return input_dim_; }
  Index output_dim() const { return output_dim_; }

  Vector apply(const Vector& x) const;
  Vector adjoint(const Vector& y) const;
  // Row-wise application to a sample set; parallel over rows.
  Samples apply_rows(const Samples& x, par::Mode mode = par::Mode::kParallel) const;
  Samples adjoint_rows(const Samples& y, par::Mode mode = par::Mode::kParallel) const;

  // Column j equals apply(e_j). Enforces m*d <= kDenseBudget.
  Matrix as_matrix() const;

  // d / (number of retained measurements).
  double acceleration() const;

  // Kind-specific accessors (empty when not applicable).
  const MaskBits& mask_bits() const { return mask_; }
  const std::vector<double>& blur_kernel() const { return kernel_; }
  const std::vector<ComplexField>& coils() const { return coils_; }
  Index side() const { return side_; }

  // Same operator family with a different mask (Fourier kinds and masks).
  CorruptionOperator with_mask(const MaskBits& keep) const;

 private:
  struct Csr {
    std::vector<std::int64_t> row_ptr;
    std::vector<std::int32_t> col;
    std::vector<double> val;
  };
  struct Triplet {
    Index row;
    Index col;
    double value;
  };

  friend CorruptionOperator make_gaussian_blur(Index, int, double);
  friend CorruptionOperator make_avg_pool(Index, Index, Index, Index);
  friend CorruptionOperator make_fourier_mask(Index, const MaskBits&, const std::vector<ComplexField>&);

  static CorruptionOperator from_triplets(OperatorKind kind, Index m, Index d, std::vector<Triplet> entries);
  static Csr build_csr(Index rows, std::vector<Triplet>& entries);
  static void csr_matvec(const Csr& csr, const double* x, double* y, Index rows);

  OperatorKind kind_ = OperatorKind::kDense;
  Index input_dim_ = 0;
  Index output_dim_ = 0;
  Index side_ = 0;
  Index retained_ = 0;
  std::shared_ptr<const Csr> forward_;
  std::shared_ptr<const Csr> transpose_;
  MaskBits mask_;
  std::vector<double> kernel_;
  std::vector<ComplexField> coils_;
};

// 2-D convolution with a normalized Gaussian kernel on a side x side image,
// replicate padding at the borders.
CorruptionOperator make_gaussian_blur(Index side, int kernel_size = 9, double sigma_g = 2.0);

// Each coordinate dropped independently with probability missing_rate;
// dropped coordinates are zeroed (output stays in R^d).
CorruptionOperator make_random_mask(Index d, double missing_rate, Rng& rng);
MaskBits draw_mask_bits(Index d, double missing_rate, Rng& rng);

// Block averaging of a rows x cols image by factor_r x factor_c blocks.
CorruptionOperator make_avg_pool(Index rows, Index cols, Index factor_r, Index factor_c);
inline CorruptionOperator make_avg_pool(Index side, Index factor) {
  return make_avg_pool(side, side, factor, factor);
}

// Without coils: real side x side image -> masked unitary 2-D DFT as 2d
// interleaved reals. With coils: complex image (2d interleaved reals) ->
// sum_i S_i^H F^-1 M F S_i x, same shape.
CorruptionOperator make_fourier_mask(Index side, const MaskBits& keep,
                                     const std::vector<ComplexField>& coils = {});

// Orthogonal projector onto ker(A), via SVD of as_matrix().
Matrix kernel_projector(const CorruptionOperator& op);

// Smooth synthetic coil sensitivities normalized so sum_i |S_i|^2 = 1.
std::vector<ComplexField> synthetic_coils(Index side, int num_coils, Rng& rng);

// Frequency mask with keep probability 1/acceleration; DC always kept.
MaskBits draw_frequency_mask(Index side, double acceleration, Rng& rng);

// Serializable recipe for an operator (the [operator] config section).
struct OperatorSpec {
  OperatorKind kind = OperatorKind::kDense;
  Index side = 0;          // image side for image operators
  Index dim = 0;           // d for dense/identity/mask
  int kernel_size = 9;
  double sigma_g = 2.0;
  double missing_rate = 0.0;
  bool per_sample = false;  // mask redrawn for every data point
  Index factor = 2;
  double fourier_acceleration = 4.0;
  int num_coils = 0;
  std::string dense_file;   // CSV for dense kind; empty means identity
  std::uint64_t seed = 0;

  static OperatorSpec from_config(const ConfigSection& section);
  void to_config(ConfigSection& section) const;
  Index input_dim() const;
};

// Resolves a spec into concrete operators, one per sample index when the
// spec is per-sample. Masks derive from (seed, sample index).
class OperatorSample {
 public:
  explicit OperatorSample(OperatorSpec spec);

  const OperatorSpec& spec() const { return spec_; }
  bool per_sample() const { return spec_.per_sample; }
  // The fixed operator, or the draw for sample `index` when per-sample.
  CorruptionOperator at(std::uint64_t index) const;
  const CorruptionOperator& fixed() const { return fixed_; }

 private:
  OperatorSpec spec_;
  CorruptionOperator fixed_;
};

}  // namespace rsd
