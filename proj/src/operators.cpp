#include "rsd/operators.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "rsd/io.hpp"

namespace rsd {

std::string to_string(OperatorKind kind) {
  switch (kind) {
    case OperatorKind::kDense: return "dense";
    case OperatorKind::kGaussianBlur: return "gaussian_blur";
    case OperatorKind::kRandomMask: return "random_mask";
    case OperatorKind::kAvgPool: return "avg_pool";
    case OperatorKind::kFourierMask: return "fourier_mask";
    case OperatorKind::kMulticoil: return "multicoil";
  }
  return "unknown";
}

OperatorKind parse_operator_kind(const std::string& name) {
  if (name == "dense" || name == "identity") return OperatorKind::kDense;
  if (name == "gaussian_blur") return OperatorKind::kGaussianBlur;
  if (name == "random_mask") return OperatorKind::kRandomMask;
  if (name == "avg_pool") return OperatorKind::kAvgPool;
  if (name == "fourier_mask") return OperatorKind::kFourierMask;
  if (name == "multicoil") return OperatorKind::kMulticoil;
  throw ContractError("unknown operator kind '" + name + "'");
}

CorruptionOperator::Csr CorruptionOperator::build_csr(Index rows, std::vector<Triplet>& entries) {
  std::sort(entries.begin(), entries.end(), [](const Triplet& a, const Triplet& b) {
    return a.row != b.row ? a.row < b.row : a.col < b.col;
  });
  Csr csr;
  csr.row_ptr.assign(rows + 1, 0);
  csr.col.reserve(entries.size());
  csr.val.reserve(entries.size());
  for (const auto& t : entries) {
    if (t.value == 0.0) continue;
    csr.col.push_back(static_cast<std::int32_t>(t.col));
    csr.val.push_back(t.value);
    ++csr.row_ptr[t.row + 1];
  }
  for (Index r = 0; r < rows; ++r) csr.row_ptr[r + 1] += csr.row_ptr[r];
  return csr;
}

CorruptionOperator CorruptionOperator::from_triplets(OperatorKind kind, Index m, Index d,
                                                     std::vector<Triplet> entries) {
  CorruptionOperator op;
  op.kind_ = kind;
  op.output_dim_ = m;
  op.input_dim_ = d;
  op.retained_ = m;
  std::vector<Triplet> transposed;
  transposed.reserve(entries.size());
  for (const auto& t : entries) transposed.push_back({t.col, t.row, t.value});
  op.forward_ = std::make_shared<const Csr>(build_csr(m, entries));
  op.transpose_ = std::make_shared<const Csr>(build_csr(d, transposed));
  return op;
}

void CorruptionOperator::csr_matvec(const Csr& csr, const double* x, double* y, Index rows) {
  for (Index r = 0; r < rows; ++r) {
    double s = 0.0;
    for (auto k = csr.row_ptr[r]; k < csr.row_ptr[r + 1]; ++k) s += csr.val[k] * x[csr.col[k]];
    y[r] = s;
  }
}

CorruptionOperator CorruptionOperator::dense(const Matrix& a) {
  RSD_REQUIRE(a.rows() >= 1 && a.cols() >= 1, "dense operator needs a non-empty matrix");
  std::vector<Triplet> entries;
  entries.reserve(static_cast<std::size_t>(a.size()));
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < a.cols(); ++j) entries.push_back({i, j, a(i, j)});
  }
  return from_triplets(OperatorKind::kDense, a.rows(), a.cols(), std::move(entries));
}

CorruptionOperator CorruptionOperator::identity(Index d) {
  RSD_REQUIRE(d >= 1, "identity operator needs d >= 1");
  std::vector<Triplet> entries;
  for (Index i = 0; i < d; ++i) entries.push_back({i, i, 1.0});
  return from_triplets(OperatorKind::kDense, d, d, std::move(entries));
}

CorruptionOperator CorruptionOperator::mask(const MaskBits& keep) {
  RSD_REQUIRE(!keep.empty(), "mask operator needs d >= 1");
  const auto d = static_cast<Index>(keep.size());
  std::vector<Triplet> entries;
  Index kept = 0;
  for (Index i = 0; i < d; ++i) {
    if (keep[i]) {
      entries.push_back({i, i, 1.0});
      ++kept;
    }
  }
  auto op = from_triplets(OperatorKind::kRandomMask, d, d, std::move(entries));
  op.mask_ = keep;
  op.retained_ = kept;
  return op;
}

Vector CorruptionOperator::apply(const Vector& x) const {
  RSD_REQUIRE(x.size() == input_dim_, "apply: expected input of dimension ", input_dim_, ", got ", x.size());
  Vector y(output_dim_);
  csr_matvec(*forward_, x.data(), y.data(), output_dim_);
  return y;
}

Vector CorruptionOperator::adjoint(const Vector& y) const {
  RSD_REQUIRE(y.size() == output_dim_, "adjoint: expected input of dimension ", output_dim_, ", got ", y.size());
  Vector x(input_dim_);
  csr_matvec(*transpose_, y.data(), x.data(), input_dim_);
  return x;
}

Samples CorruptionOperator::apply_rows(const Samples& x, par::Mode mode) const {
  RSD_REQUIRE(x.cols() == input_dim_, "apply_rows: expected ", input_dim_, " columns, got ", x.cols());
  Samples y(x.rows(), output_dim_);
  const Csr& csr = *forward_;
  par::for_each_index(
      x.rows(), [&](std::int64_t i) { csr_matvec(csr, x.row(i).data(), y.row(i).data(), output_dim_); }, mode);
  return y;
}

Samples CorruptionOperator::adjoint_rows(const Samples& y, par::Mode mode) const {
  RSD_REQUIRE(y.cols() == output_dim_, "adjoint_rows: expected ", output_dim_, " columns, got ", y.cols());
  Samples x(y.rows(), input_dim_);
  const Csr& csr = *transpose_;
  par::for_each_index(
      y.rows(), [&](std::int64_t i) { csr_matvec(csr, y.row(i).data(), x.row(i).data(), input_dim_); }, mode);
  return x;
}

Matrix CorruptionOperator::as_matrix() const {
  RSD_REQUIRE(output_dim_ * input_dim_ <= kDenseBudget, "as_matrix: m*d = ", output_dim_ * input_dim_,
              " exceeds the dense budget of ", kDenseBudget);
  Matrix a(output_dim_, input_dim_);
  Vector e = Vector::Zero(input_dim_);
  for (Index j = 0; j < input_dim_; ++j) {
    e(j) = 1.0;
    a.col(j) = apply(e);
    e(j) = 0.0;
  }
  return a;
}

double CorruptionOperator::acceleration() const {
  RSD_REQUIRE(retained_ > 0, "acceleration undefined: operator retains no measurements");
  return static_cast<double>(input_dim_) / static_cast<double>(retained_);
}

CorruptionOperator CorruptionOperator::with_mask(const MaskBits& keep) const {
  switch (kind_) {
    case OperatorKind::kRandomMask: return mask(keep);
    case OperatorKind::kFourierMask:
    case OperatorKind::kMulticoil: return make_fourier_mask(side_, keep, coils_);
    default: throw ContractError("with_mask: operator kind " + to_string(kind_) + " has no mask");
  }
}

CorruptionOperator make_gaussian_blur(Index side, int kernel_size, double sigma_g) {
  RSD_REQUIRE(side >= 1, "gaussian_blur: side must be positive");
  RSD_REQUIRE(kernel_size >= 1 && kernel_size % 2 == 1, "gaussian_blur: kernel_size must be odd, got ", kernel_size);
  RSD_REQUIRE(sigma_g > 0.0, "gaussian_blur: sigma_g must be positive");
  const int half = kernel_size / 2;
  std::vector<double> kernel(static_cast<std::size_t>(kernel_size) * kernel_size);
  double total = 0.0;
  for (int a = -half; a <= half; ++a) {
    for (int b = -half; b <= half; ++b) {
      const double w = std::exp(-(a * a + b * b) / (2.0 * sigma_g * sigma_g));
      kernel[(a + half) * kernel_size + (b + half)] = w;
      total += w;
    }
  }
  for (double& w : kernel) w /= total;

  const Index d = side * side;
  std::vector<CorruptionOperator::Triplet> entries;
  entries.reserve(static_cast<std::size_t>(d) * kernel.size());
  std::vector<double> row_weights(static_cast<std::size_t>(d), 0.0);
  std::vector<Index> touched;
  for (Index r = 0; r < side; ++r) {
    for (Index c = 0; c < side; ++c) {
      touched.clear();
      for (int a = -half; a <= half; ++a) {
        for (int b = -half; b <= half; ++b) {
          const Index rr = std::clamp<Index>(r + a, 0, side - 1);
          const Index cc = std::clamp<Index>(c + b, 0, side - 1);
          const Index j = rr * side + cc;
          if (row_weights[j] == 0.0) touched.push_back(j);
          row_weights[j] += kernel[(a + half) * kernel_size + (b + half)];
        }
      }
      const Index i = r * side + c;
      for (Index j : touched) {
        entries.push_back({i, j, row_weights[j]});
        row_weights[j] = 0.0;
      }
    }
  }
  auto op = CorruptionOperator::from_triplets(OperatorKind::kGaussianBlur, d, d, std::move(entries));
  op.side_ = side;
  op.kernel_ = std::move(kernel);
  return op;
}

MaskBits draw_mask_bits(Index d, double missing_rate, Rng& rng) {
  RSD_REQUIRE(missing_rate >= 0.0 && missing_rate <= 1.0, "missing rate must lie in [0, 1], got ", missing_rate);
  MaskBits keep(static_cast<std::size_t>(d));
  for (auto& bit : keep) bit = rng.uniform() >= missing_rate ? 1 : 0;
  return keep;
}

CorruptionOperator make_random_mask(Index d, double missing_rate, Rng& rng) {
  RSD_REQUIRE(d >= 1, "random_mask: d must be positive");
  return CorruptionOperator::mask(draw_mask_bits(d, missing_rate, rng));
}

CorruptionOperator make_avg_pool(Index rows, Index cols, Index factor_r, Index factor_c) {
  RSD_REQUIRE(rows >= 1 && cols >= 1 && factor_r >= 1 && factor_c >= 1, "avg_pool: sizes must be positive");
  RSD_REQUIRE(rows % factor_r == 0 && cols % factor_c == 0, "avg_pool: factor ", factor_r, "x", factor_c,
              " does not divide image ", rows, "x", cols);
  const Index out_r = rows / factor_r;
  const Index out_c = cols / factor_c;
  const double w = 1.0 / static_cast<double>(factor_r * factor_c);
  std::vector<CorruptionOperator::Triplet> entries;
  for (Index i = 0; i < out_r; ++i) {
    for (Index j = 0; j < out_c; ++j) {
      for (Index a = 0; a < factor_r; ++a) {
        for (Index b = 0; b < factor_c; ++b) {
          entries.push_back({i * out_c + j, (i * factor_r + a) * cols + (j * factor_c + b), w});
        }
      }
    }
  }
  auto op = CorruptionOperator::from_triplets(OperatorKind::kAvgPool, out_r * out_c, rows * cols, std::move(entries));
  op.side_ = rows == cols ? rows : 0;
  return op;
}

CorruptionOperator make_fourier_mask(Index side, const MaskBits& keep, const std::vector<ComplexField>& coils) {
  RSD_REQUIRE(side >= 1, "fourier_mask: side must be positive");
  const Index d = side * side;
  RSD_REQUIRE(static_cast<Index>(keep.size()) == d, "fourier_mask: mask has ", keep.size(), " bits, expected ", d);
  for (const auto& s : coils) {
    RSD_REQUIRE(static_cast<Index>(s.size()) == d, "fourier_mask: sensitivity map has ", s.size(),
                " entries, expected ", d);
  }
  RSD_REQUIRE(4 * d * d <= kDenseBudget, "fourier_mask: side ", side, " exceeds the dense budget");

  // Twiddle table: e^{-2 pi i q / side}, phases reduced modulo side.
  std::vector<std::complex<double>> twiddle(static_cast<std::size_t>(side));
  for (Index q = 0; q < side; ++q) {
    const double angle = -2.0 * std::numbers::pi * static_cast<double>(q) / static_cast<double>(side);
    twiddle[q] = {std::cos(angle), std::sin(angle)};
  }
  const double scale = 1.0 / static_cast<double>(side);  // unitary 2-D DFT: 1/sqrt(d)
  Index kept = 0;
  for (auto bit : keep) kept += bit ? 1 : 0;

  std::vector<CorruptionOperator::Triplet> entries;
  CorruptionOperator op;
  if (coils.empty()) {
    entries.reserve(static_cast<std::size_t>(2 * kept * d));
    for (Index fr = 0; fr < side; ++fr) {
      for (Index fc = 0; fc < side; ++fc) {
        const Index k = fr * side + fc;
        if (!keep[k]) continue;
        for (Index jr = 0; jr < side; ++jr) {
          for (Index jc = 0; jc < side; ++jc) {
            const auto phase = twiddle[(fr * jr + fc * jc) % side] * scale;
            const Index j = jr * side + jc;
            entries.push_back({2 * k, j, phase.real()});
            entries.push_back({2 * k + 1, j, phase.imag()});
          }
        }
      }
    }
    op = CorruptionOperator::from_triplets(OperatorKind::kFourierMask, 2 * d, d, std::move(entries));
  } else {
    // F^H M F is a circular convolution: entry (j, k) depends on j - k only.
    std::vector<std::complex<double>> h(static_cast<std::size_t>(d));
    for (Index dr = 0; dr < side; ++dr) {
      for (Index dc = 0; dc < side; ++dc) {
        std::complex<double> acc = 0.0;
        for (Index fr = 0; fr < side; ++fr) {
          for (Index fc = 0; fc < side; ++fc) {
            if (!keep[fr * side + fc]) continue;
            acc += std::conj(twiddle[(fr * dr + fc * dc) % side]);
          }
        }
        h[dr * side + dc] = acc / static_cast<double>(d);
      }
    }
    entries.reserve(static_cast<std::size_t>(4 * d * d));
    for (Index jr = 0; jr < side; ++jr) {
      for (Index jc = 0; jc < side; ++jc) {
        const Index j = jr * side + jc;
        for (Index kr = 0; kr < side; ++kr) {
          for (Index kc = 0; kc < side; ++kc) {
            const Index k = kr * side + kc;
            const Index delta = ((jr - kr + side) % side) * side + ((jc - kc + side) % side);
            std::complex<double> a = 0.0;
            for (const auto& s : coils) a += std::conj(s[j]) * s[k];
            a *= h[delta];
            entries.push_back({2 * j, 2 * k, a.real()});
            entries.push_back({2 * j, 2 * k + 1, -a.imag()});
            entries.push_back({2 * j + 1, 2 * k, a.imag()});
            entries.push_back({2 * j + 1, 2 * k + 1, a.real()});
          }
        }
      }
    }
    op = CorruptionOperator::from_triplets(OperatorKind::kMulticoil, 2 * d, 2 * d, std::move(entries));
  }
  op.side_ = side;
  op.mask_ = keep;
  op.coils_ = coils;
  // Acceleration is measured against the image pixel count.
  op.retained_ = kept;
  op.input_dim_ = coils.empty() ? d : 2 * d;
  return op;
}

Matrix kernel_projector(const CorruptionOperator& op) {
  const Matrix a = op.as_matrix();
  const Index d = a.cols();
  Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeFullV);
  const auto& s = svd.singularValues();
  const double smax = s.size() > 0 ? s(0) : 0.0;
  const double tol = static_cast<double>(std::max(a.rows(), a.cols())) * std::numeric_limits<double>::epsilon() * smax;
  Index rank = 0;
  for (Index i = 0; i < s.size(); ++i) {
    if (s(i) > tol && s(i) > 0.0) ++rank;
  }
  const Matrix null_basis = svd.matrixV().rightCols(d - rank);
  return null_basis * null_basis.transpose();
}

std::vector<ComplexField> synthetic_coils(Index side, int num_coils, Rng& rng) {
  RSD_REQUIRE(num_coils >= 1, "synthetic_coils: need at least one coil");
  const Index d = side * side;
  std::vector<ComplexField> coils(static_cast<std::size_t>(num_coils), ComplexField(static_cast<std::size_t>(d)));
  const double width = 0.6 * static_cast<double>(side);
  for (int i = 0; i < num_coils; ++i) {
    const double angle = 2.0 * std::numbers::pi * (i + 0.25 * rng.uniform()) / num_coils;
    const double cr = 0.5 * (side - 1) * (1.0 + std::cos(angle));
    const double cc = 0.5 * (side - 1) * (1.0 + std::sin(angle));
    const double phase = 2.0 * std::numbers::pi * rng.uniform();
    for (Index r = 0; r < side; ++r) {
      for (Index c = 0; c < side; ++c) {
        const double dist2 = (r - cr) * (r - cr) + (c - cc) * (c - cc);
        const double mag = std::exp(-dist2 / (2.0 * width * width));
        coils[i][r * side + c] = std::polar(mag, phase + 0.1 * (r + c));
      }
    }
  }
  for (Index j = 0; j < d; ++j) {
    double norm2 = 0.0;
    for (const auto& s : coils) norm2 += std::norm(s[j]);
    const double inv = 1.0 / std::sqrt(norm2);
    for (auto& s : coils) s[j] *= inv;
  }
  return coils;
}

MaskBits draw_frequency_mask(Index side, double acceleration, Rng& rng) {
  RSD_REQUIRE(acceleration >= 1.0, "frequency mask acceleration must be >= 1, got ", acceleration);
  MaskBits keep = draw_mask_bits(side * side, 1.0 - 1.0 / acceleration, rng);
  keep[0] = 1;
  return keep;
}

OperatorSpec OperatorSpec::from_config(const ConfigSection& s) {
  OperatorSpec spec;
  const std::string kind = s.get_string("kind");
  try {
    spec.kind = parse_operator_kind(kind);
  } catch (const ContractError& e) {
    s.fail("kind", e.what());
  }
  spec.side = s.get_int("side", 0);
  spec.dim = s.get_int("dim", spec.side * spec.side);
  spec.kernel_size = static_cast<int>(s.get_int("kernel_size", 9));
  spec.sigma_g = s.get_double("sigma_g", 2.0);
  spec.missing_rate = s.get_double("missing_rate", 0.0);
  spec.per_sample = s.get_bool("per_sample", false);
  spec.factor = s.get_int("factor", 2);
  spec.fourier_acceleration = s.get_double("acceleration", 4.0);
  spec.num_coils = static_cast<int>(s.get_int("coils", 0));
  spec.dense_file = s.get_string("dense_file", "");
  spec.seed = static_cast<std::uint64_t>(s.get_int("seed", 0));

  const bool image_kind = spec.kind != OperatorKind::kDense && spec.kind != OperatorKind::kRandomMask;
  if (image_kind && spec.side < 1) s.fail("side", "image operators need side >= 1");
  if (spec.dim < 1) s.fail("dim", "dimension must be positive");
  if (spec.kind == OperatorKind::kGaussianBlur && spec.kernel_size % 2 == 0) s.fail("kernel_size", "must be odd");
  if (spec.kind == OperatorKind::kGaussianBlur && !(spec.sigma_g > 0.0)) s.fail("sigma_g", "must be positive");
  if (spec.missing_rate < 0.0 || spec.missing_rate > 1.0) s.fail("missing_rate", "must lie in [0, 1]");
  if (spec.kind == OperatorKind::kAvgPool && (spec.factor < 1 || spec.side % spec.factor != 0)) {
    s.fail("factor", "must divide side");
  }
  if ((spec.kind == OperatorKind::kFourierMask || spec.kind == OperatorKind::kMulticoil) &&
      spec.fourier_acceleration < 1.0) {
    s.fail("acceleration", "must be >= 1");
  }
  if (spec.kind == OperatorKind::kMulticoil && spec.num_coils < 1) s.fail("coils", "multicoil needs coils >= 1");
  return spec;
}

void OperatorSpec::to_config(ConfigSection& s) const {
  s.set("kind", to_string(kind));
  if (side > 0) s.set("side", std::to_string(side));
  s.set("dim", std::to_string(dim));
  s.set("seed", std::to_string(seed));
  switch (kind) {
    case OperatorKind::kGaussianBlur:
      s.set("kernel_size", std::to_string(kernel_size));
      s.set("sigma_g", detail::concat(sigma_g));
      break;
    case OperatorKind::kRandomMask:
      s.set("missing_rate", detail::concat(missing_rate));
      s.set("per_sample", per_sample ? "true" : "false");
      break;
    case OperatorKind::kAvgPool: s.set("factor", std::to_string(factor)); break;
    case OperatorKind::kFourierMask:
    case OperatorKind::kMulticoil:
      s.set("acceleration", detail::concat(fourier_acceleration));
      s.set("per_sample", per_sample ? "true" : "false");
      if (num_coils > 0) s.set("coils", std::to_string(num_coils));
      break;
    case OperatorKind::kDense:
      if (!dense_file.empty()) s.set("dense_file", dense_file);
      break;
  }
}

Index OperatorSpec::input_dim() const {
  switch (kind) {
    case OperatorKind::kMulticoil: return 2 * side * side;
    case OperatorKind::kDense:
    case OperatorKind::kRandomMask: return dim;
    default: return side * side;
  }
}

namespace {

CorruptionOperator build(const OperatorSpec& spec, Rng rng) {
  switch (spec.kind) {
    case OperatorKind::kDense: {
      if (spec.dense_file.empty()) return CorruptionOperator::identity(spec.dim);
      return CorruptionOperator::dense(read_matrix_csv(spec.dense_file));
    }
    case OperatorKind::kGaussianBlur: return make_gaussian_blur(spec.side, spec.kernel_size, spec.sigma_g);
    case OperatorKind::kRandomMask: return make_random_mask(spec.dim, spec.missing_rate, rng);
    case OperatorKind::kAvgPool: return make_avg_pool(spec.side, spec.factor);
    case OperatorKind::kFourierMask:
      return make_fourier_mask(spec.side, draw_frequency_mask(spec.side, spec.fourier_acceleration, rng));
    case OperatorKind::kMulticoil: {
      Rng coil_rng = Rng(spec.seed).stream(stream_tag::kInit, 0);
      auto coils = synthetic_coils(spec.side, spec.num_coils, coil_rng);
      return make_fourier_mask(spec.side, draw_frequency_mask(spec.side, spec.fourier_acceleration, rng), coils);
    }
  }
  throw ContractError("unhandled operator kind");
}

}  // namespace

OperatorSample::OperatorSample(OperatorSpec spec)
    : spec_(std::move(spec)), fixed_(build(spec_, Rng(spec_.seed).stream(stream_tag::kMask, ~std::uint64_t{0}))) {}

CorruptionOperator OperatorSample::at(std::uint64_t index) const {
  if (!spec_.per_sample) return fixed_;
  Rng rng = Rng(spec_.seed).stream(stream_tag::kMask, index);
  switch (spec_.kind) {
    case OperatorKind::kRandomMask: return CorruptionOperator::mask(draw_mask_bits(spec_.dim, spec_.missing_rate, rng));
    case OperatorKind::kFourierMask:
    case OperatorKind::kMulticoil:
      return fixed_.with_mask(draw_frequency_mask(spec_.side, spec_.fourier_acceleration, rng));
    default: return fixed_;
  }
}

}  // namespace rsd
