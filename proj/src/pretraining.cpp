#include "rsd/pretraining.hpp"

#include <cmath>

namespace rsd {

void NoiseSchedule::validate() const {
  RSD_REQUIRE(sigma_min > 0.0 && sigma_max >= sigma_min, "noise schedule: need 0 < sigma_min <= sigma_max, got ",
              sigma_min, ", ", sigma_max);
  RSD_REQUIRE(static_cast<bool>(weight), "noise schedule: missing weighting function");
}

double NoiseSchedule::draw(Rng& rng) const {
  const double lo = std::log(sigma_min);
  const double hi = std::log(sigma_max);
  return std::exp(lo + (hi - lo) * rng.uniform());
}

NoiseDraw draw_noise(const NoiseSchedule& schedule, Index dim, Index batch, Rng& rng) {
  NoiseDraw d;
  d.sigma.resize(batch);
  d.eps.resize(dim, batch);
  for (Index j = 0; j < batch; ++j) {
    d.sigma(j) = schedule.draw(rng);
    for (Index i = 0; i < dim; ++i) d.eps(i, j) = rng.normal();
  }
  return d;
}

namespace {

void check_draw(const Matrix& y, const NoiseDraw& draw) {
  RSD_REQUIRE(y.cols() >= 1, "loss: empty batch");
  RSD_REQUIRE(draw.sigma.size() == y.cols() && draw.eps.rows() == y.rows() && draw.eps.cols() == y.cols(),
              "loss: noise draw does not match the batch shape");
}

Matrix default_cond(const Denoiser& model, Index batch) {
  if (model.cond_dim() == 0) return Matrix();
  return Matrix::Ones(model.cond_dim(), batch);
}

// Shared driver: forward on `input`, then per-column loss terms computed by
// `column` which also writes dLoss/d(output) for that column.
template <typename ColumnLoss>
double run_loss(const Denoiser& model, const Matrix& input, const Matrix& cond, const Vector& sigma, Vector* grad,
                ColumnLoss&& column) {
  const double inv_batch = 1.0 / static_cast<double>(input.cols());
  OutputLoss loss = [&](const Matrix& out, Matrix& grad_out) {
    double total = 0.0;
    for (Index j = 0; j < out.cols(); ++j) total += column(j, out, grad_out);
    grad_out *= inv_batch;
    return total * inv_batch;
  };
  if (grad) {
    LossGrad lg = loss_and_grad(model, input, cond, sigma, loss);
    *grad = std::move(lg.grad);
    return lg.loss;
  }
  const Matrix out = model.forward(input, cond, sigma);
  Matrix scratch = Matrix::Zero(out.rows(), out.cols());
  return loss(out, scratch);
}

}  // namespace

double loss_standard(const Denoiser& model, const Matrix& y, const NoiseSchedule& schedule, const NoiseDraw& draw,
                     Vector* grad) {
  check_draw(y, draw);
  const Matrix input = y + draw.eps * Eigen::DiagonalMatrix<double, Eigen::Dynamic>(draw.sigma);
  return run_loss(model, input, default_cond(model, y.cols()), draw.sigma, grad,
                  [&](Index j, const Matrix& out, Matrix& g) {
                    const double lambda = schedule.weight(draw.sigma(j));
                    const Vector r = out.col(j) - y.col(j);
                    g.col(j) = 2.0 * lambda * r;
                    return lambda * r.squaredNorm();
                  });
}

double loss_standard(const Denoiser& model, const Matrix& y, const NoiseSchedule& schedule, Rng& rng, Vector* grad) {
  return loss_standard(model, y, schedule, draw_noise(schedule, y.rows(), y.cols(), rng), grad);
}

double loss_ambient_tweedie(const Denoiser& model, const Matrix& y, double sigma, const NoiseSchedule& schedule,
                            const NoiseDraw& draw, Vector* grad) {
  RSD_REQUIRE(sigma >= 0.0 && std::isfinite(sigma), "loss_ambient_tweedie: sigma must be >= 0, got ", sigma);
  check_draw(y, draw);
  const Index batch = y.cols();
  Vector st(batch);
  Matrix w(y.rows(), batch);
  for (Index j = 0; j < batch; ++j) {
    st(j) = std::max(sigma, draw.sigma(j));
    w.col(j) = y.col(j) + std::sqrt(st(j) * st(j) - sigma * sigma) * draw.eps.col(j);
  }
  return run_loss(model, w, default_cond(model, batch), st, grad, [&](Index j, const Matrix& out, Matrix& g) {
    const double s2 = st(j) * st(j);
    const double a = (s2 - sigma * sigma) / s2;
    const double b = sigma * sigma / s2;
    const double lambda = schedule.weight(st(j));
    const Vector r = a * out.col(j) + b * w.col(j) - y.col(j);
    g.col(j) = 2.0 * lambda * a * r;
    return lambda * r.squaredNorm();
  });
}

double loss_ambient_tweedie(const Denoiser& model, const Matrix& y, double sigma, const NoiseSchedule& schedule,
                            Rng& rng, Vector* grad) {
  return loss_ambient_tweedie(model, y, sigma, schedule, draw_noise(schedule, y.rows(), y.cols(), rng), grad);
}

double loss_ambient_inpaint(const Denoiser& model, const Matrix& y, const Matrix& masks, const Matrix& further,
                            const NoiseSchedule& schedule, const NoiseDraw& draw, Vector* grad) {
  check_draw(y, draw);
  RSD_REQUIRE(masks.rows() == y.rows() && masks.cols() == y.cols() && further.rows() == y.rows() &&
                  further.cols() == y.cols(),
              "loss_ambient_inpaint: masks must match the batch shape");
  for (Index j = 0; j < y.cols(); ++j) {
    for (Index i = 0; i < y.rows(); ++i) {
      RSD_REQUIRE(further(i, j) <= masks(i, j), "loss_ambient_inpaint: further mask is not a sub-mask (entry ", i,
                  " of column ", j, ")");
    }
  }
  RSD_REQUIRE(model.cond_dim() == y.rows(), "loss_ambient_inpaint: model needs ", y.rows(),
              " mask conditioning channels, has ", model.cond_dim());
  const Matrix noisy = y + draw.eps * Eigen::DiagonalMatrix<double, Eigen::Dynamic>(draw.sigma);
  const Matrix input = further.cwiseProduct(noisy);
  return run_loss(model, input, further, draw.sigma, grad, [&](Index j, const Matrix& out, Matrix& g) {
    const double lambda = schedule.weight(draw.sigma(j));
    const Vector r = masks.col(j).cwiseProduct(out.col(j) - y.col(j));
    g.col(j) = 2.0 * lambda * masks.col(j).cwiseProduct(r);
    return lambda * r.squaredNorm();
  });
}

double loss_ambient_inpaint(const Denoiser& model, const Matrix& y, const Matrix& masks, const Matrix& further,
                            const NoiseSchedule& schedule, Rng& rng, Vector* grad) {
  return loss_ambient_inpaint(model, y, masks, further, schedule, draw_noise(schedule, y.rows(), y.cols(), rng), grad);
}

double loss_fourier_ambient(const Denoiser& model, const Matrix& y, const std::vector<CorruptionOperator>& ops,
                            const std::vector<CorruptionOperator>& further_ops, const NoiseSchedule& schedule,
                            const NoiseDraw& draw, Vector* grad) {
  check_draw(y, draw);
  const Index batch = y.cols();
  RSD_REQUIRE(ops.size() == 1 || static_cast<Index>(ops.size()) == batch,
              "loss_fourier_ambient: need one shared operator or one per column");
  RSD_REQUIRE(further_ops.size() == ops.size(), "loss_fourier_ambient: further operators must pair with operators");
  auto op_at = [&](const std::vector<CorruptionOperator>& v, Index j) -> const CorruptionOperator& {
    return v.size() == 1 ? v[0] : v[static_cast<std::size_t>(j)];
  };
  for (std::size_t k = 0; k < ops.size(); ++k) {
    const auto& a = ops[k];
    const auto& at = further_ops[k];
    RSD_REQUIRE(a.kind() == OperatorKind::kFourierMask || a.kind() == OperatorKind::kMulticoil,
                "loss_fourier_ambient: operator must be a Fourier mask");
    RSD_REQUIRE(a.input_dim() == a.output_dim() && a.input_dim() == y.rows(),
                "loss_fourier_ambient: operator must be square with dimension ", y.rows());
    RSD_REQUIRE(at.kind() == a.kind() && at.input_dim() == a.input_dim() && at.output_dim() == a.output_dim(),
                "loss_fourier_ambient: further operator is incompatible");
    const MaskBits& m = a.mask_bits();
    const MaskBits& mt = at.mask_bits();
    RSD_REQUIRE(m.size() == mt.size(), "loss_fourier_ambient: mask sizes differ");
    for (std::size_t i = 0; i < m.size(); ++i) {
      RSD_REQUIRE(mt[i] <= m[i], "loss_fourier_ambient: further mask is not a sub-mask at frequency ", i);
    }
  }
  const auto mask_len = static_cast<Index>(ops[0].mask_bits().size());
  RSD_REQUIRE(model.cond_dim() == mask_len, "loss_fourier_ambient: model needs ", mask_len,
              " mask conditioning channels, has ", model.cond_dim());
  Matrix input(y.rows(), batch);
  Matrix cond(mask_len, batch);
  for (Index j = 0; j < batch; ++j) {
    const auto& at = op_at(further_ops, j);
    input.col(j) = at.apply(y.col(j)) + draw.sigma(j) * draw.eps.col(j);
    for (Index i = 0; i < mask_len; ++i) cond(i, j) = at.mask_bits()[i];
  }
  return run_loss(model, input, cond, draw.sigma, grad, [&](Index j, const Matrix& out, Matrix& g) {
    const auto& a = op_at(ops, j);
    const double lambda = schedule.weight(draw.sigma(j));
    const Vector r = a.apply(out.col(j) - y.col(j));
    g.col(j) = 2.0 * lambda * a.adjoint(r);
    return lambda * r.squaredNorm();
  });
}

double loss_fourier_ambient(const Denoiser& model, const Matrix& y, const std::vector<CorruptionOperator>& ops,
                            const std::vector<CorruptionOperator>& further_ops, const NoiseSchedule& schedule, Rng& rng,
                            Vector* grad) {
  return loss_fourier_ambient(model, y, ops, further_ops, schedule, draw_noise(schedule, y.rows(), y.cols(), rng),
                              grad);
}

MaskBits sample_secondary_mask(const MaskBits& mask, double further_rate, Rng& rng) {
  RSD_REQUIRE(further_rate >= 0.0 && further_rate < 1.0, "sample_secondary_mask: rate must lie in [0, 1), got ",
              further_rate);
  MaskBits out(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    // One uniform per kept entry, so the draw sequence depends only on M.
    out[i] = mask[i] && rng.uniform() >= further_rate ? 1 : 0;
  }
  return out;
}

std::string to_string(Objective objective) {
  switch (objective) {
    case Objective::kStandard: return "standard";
    case Objective::kAmbientTweedie: return "ambient_tweedie";
    case Objective::kAmbientInpaint: return "ambient_inpaint";
    case Objective::kFourierAmbient: return "fourier_ambient";
  }
  return "unknown";
}

Objective parse_objective(const std::string& name) {
  if (name == "standard") return Objective::kStandard;
  if (name == "ambient_tweedie") return Objective::kAmbientTweedie;
  if (name == "ambient_inpaint") return Objective::kAmbientInpaint;
  if (name == "fourier_ambient") return Objective::kFourierAmbient;
  throw ContractError("unknown objective '" + name + "'");
}

void validate_training(const TrainConfig& c, const TrainingData& data, const Denoiser& model) {
  c.schedule.validate();
  RSD_REQUIRE(data.observations != nullptr && data.observations->rows() >= 1, "train: no observations");
  RSD_REQUIRE(c.batch >= 1, "train: batch must be >= 1");
  RSD_REQUIRE(c.steps >= 0, "train: steps must be >= 0");
  RSD_REQUIRE(c.lr > 0.0, "train: lr must be positive");
  RSD_REQUIRE(c.ema_decay >= 0.0 && c.ema_decay <= 1.0, "train: ema_decay must lie in [0, 1]");
  RSD_REQUIRE(c.trace_every >= 1, "train: trace_every must be >= 1");
  RSD_REQUIRE(data.observations->cols() == model.data_dim(), "train: observations have dimension ",
              data.observations->cols(), ", model expects ", model.data_dim());
  switch (c.objective) {
    case Objective::kStandard: break;
    case Objective::kAmbientTweedie:
      RSD_REQUIRE(c.sigma >= 0.0, "train: ambient_tweedie needs sigma >= 0");
      break;
    case Objective::kAmbientInpaint:
      RSD_REQUIRE(data.operators && data.operators->spec().kind == OperatorKind::kRandomMask,
                  "train: ambient_inpaint requires a random_mask operator");
      RSD_REQUIRE(c.further_rate >= 0.0 && c.further_rate < 1.0, "train: further_rate must lie in [0, 1)");
      break;
    case Objective::kFourierAmbient:
      RSD_REQUIRE(data.operators && data.operators->spec().kind == OperatorKind::kMulticoil,
                  "train: fourier_ambient requires a multicoil operator");
      RSD_REQUIRE(c.further_rate >= 0.0 && c.further_rate < 1.0, "train: further_rate must lie in [0, 1)");
      break;
  }
}

double objective_loss(const TrainConfig& c, const Denoiser& model, const ObjectiveBatch& batch, Rng& rng,
                      Vector* grad) {
  const Index b = batch.y.cols();
  switch (c.objective) {
    case Objective::kStandard: return loss_standard(model, batch.y, c.schedule, rng, grad);
    case Objective::kAmbientTweedie: return loss_ambient_tweedie(model, batch.y, c.sigma, c.schedule, rng, grad);
    case Objective::kAmbientInpaint: {
      RSD_REQUIRE(batch.ops.size() == static_cast<std::size_t>(b), "objective_loss: need one mask per column");
      Matrix masks(batch.y.rows(), b);
      Matrix further(batch.y.rows(), b);
      for (Index j = 0; j < b; ++j) {
        const MaskBits& m = batch.ops[static_cast<std::size_t>(j)].mask_bits();
        const MaskBits mt = sample_secondary_mask(m, c.further_rate, rng);
        for (Index i = 0; i < batch.y.rows(); ++i) {
          masks(i, j) = m[i];
          further(i, j) = mt[i];
        }
      }
      return loss_ambient_inpaint(model, batch.y, masks, further, c.schedule, rng, grad);
    }
    case Objective::kFourierAmbient: {
      RSD_REQUIRE(!batch.ops.empty(), "objective_loss: missing operators");
      // Shared operator: one further operator per step. Per-sample operators:
      // one further operator per column.
      std::vector<CorruptionOperator> further;
      further.reserve(batch.ops.size());
      for (const auto& op : batch.ops) {
        further.push_back(op.with_mask(sample_secondary_mask(op.mask_bits(), c.further_rate, rng)));
      }
      return loss_fourier_ambient(model, batch.y, batch.ops, further, c.schedule, rng, grad);
    }
  }
  throw ContractError("unhandled objective");
}

TrainResult train(const TrainConfig& c, const TrainingData& data, Denoiser& model) {
  validate_training(c, data, model);
  const Samples& obs = *data.observations;
  const auto n = static_cast<std::uint64_t>(obs.rows());
  const bool masked = c.objective == Objective::kAmbientInpaint || c.objective == Objective::kFourierAmbient;
  const bool shared_op = masked && !data.operators->per_sample();

  AdamState adam;
  adam.lr = c.lr;
  TrainResult result;
  result.ema_model = model.clone();
  const Rng master(c.seed);
  double smoothed = 0.0;
  for (std::int64_t step = 0; step < c.steps; ++step) {
    Rng rng = master.stream(stream_tag::kTrain, static_cast<std::uint64_t>(step));
    ObjectiveBatch batch;
    batch.y.resize(obs.cols(), c.batch);
    for (Index j = 0; j < c.batch; ++j) {
      const std::uint64_t idx = rng.below(n);
      batch.y.col(j) = obs.row(static_cast<Index>(idx)).transpose();
      if (masked && !shared_op) batch.ops.push_back(data.operators->at(idx));
    }
    if (shared_op) {
      if (c.objective == Objective::kFourierAmbient) {
        batch.ops.push_back(data.operators->fixed());
      } else {
        batch.ops.assign(static_cast<std::size_t>(c.batch), data.operators->fixed());
      }
    }
    Vector grad;
    double loss = 0.0;
    try {
      loss = objective_loss(c, model, batch, rng, &grad);
    } catch (const NumericalError& e) {
      throw TrainingAborted(detail::concat("training diverged at step ", step, ": ", e.what()), step, model.params());
    }
    if (!grad.allFinite()) {
      throw TrainingAborted(detail::concat("non-finite gradient at step ", step), step, model.params());
    }
    adam_step(adam, model.params(), grad);
    ema_update(result.ema_model->params(), model.params(), c.ema_decay);
    smoothed = step == 0 ? loss : 0.98 * smoothed + 0.02 * loss;
    if (step % c.trace_every == 0 || step + 1 == c.steps) result.trace.push_back({step, loss, smoothed});
  }
  return result;
}

std::vector<double> tweedie_grid(double sigma_max, double sigma_min, int steps) {
  RSD_REQUIRE(steps >= 1, "tweedie_grid: need at least one step");
  RSD_REQUIRE(sigma_min > 0.0 && sigma_max > sigma_min, "tweedie_grid: need 0 < sigma_min < sigma_max");
  std::vector<double> grid(static_cast<std::size_t>(steps) + 1);
  for (int i = 0; i <= steps; ++i) {
    grid[i] = sigma_max * std::pow(sigma_min / sigma_max, static_cast<double>(i) / steps);
  }
  grid.back() = sigma_min;
  return grid;
}

Matrix sample_ambient_tweedie(const Denoiser& model, double sigma, const std::vector<double>& grid, bool truncate,
                              Index n, const Rng& rng, par::Mode mode) {
  RSD_REQUIRE(!grid.empty(), "sample_ambient_tweedie: empty grid");
  RSD_REQUIRE(n >= 1, "sample_ambient_tweedie: n must be >= 1");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    RSD_REQUIRE(grid[i] > 0.0, "sample_ambient_tweedie: grid levels must be positive");
    RSD_REQUIRE(i == 0 || grid[i] < grid[i - 1], "sample_ambient_tweedie: grid must be strictly decreasing");
  }
  const Index d = model.data_dim();
  Matrix out(d, n);
  const Index blocks = (n + kBlockColumns - 1) / kBlockColumns;
  par::for_each_index(
      blocks,
      [&](std::int64_t blk) {
        const Index start = blk * kBlockColumns;
        const Index cols = std::min(kBlockColumns, n - start);
        Matrix x(d, cols);
        for (Index j = 0; j < cols; ++j) {
          Rng local = rng.stream(stream_tag::kSample, static_cast<std::uint64_t>(start + j));
          for (Index i = 0; i < d; ++i) x(i, j) = grid[0] * local.normal();
        }
        const Matrix cond = model.cond_dim() > 0 ? Matrix(Matrix::Ones(model.cond_dim(), cols)) : Matrix();
        for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
          const double s = grid[i];
          const double next = grid[i + 1];
          const Matrix denoised = model.forward(x, cond, Vector::Constant(cols, s));
          if (truncate && next < sigma) {
            x = denoised;
            break;
          }
          x -= ((s - next) / s) * (x - denoised);
        }
        out.middleCols(start, cols) = x;
      },
      mode);
  return out;
}

}  // namespace rsd
