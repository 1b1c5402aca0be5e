#include "rsd/distillation.hpp"

#include <chrono>
#include <cmath>

#include "rsd/checkpoint.hpp"
#include "rsd/io.hpp"

namespace rsd {

MlpGenerator::MlpGenerator(const Mlp& network, double sigma_init) : net_(network), sigma_init_(sigma_init) {
  RSD_REQUIRE(sigma_init > 0.0, "MlpGenerator: sigma_init must be positive");
}

Matrix MlpGenerator::forward(const Matrix& z, Tape* tape) const {
  RSD_REQUIRE(z.rows() == latent_dim(), "MlpGenerator: latent has ", z.rows(), " rows, expected ", latent_dim());
  const Matrix cond = net_.cond_dim() > 0 ? Matrix(Matrix::Ones(net_.cond_dim(), z.cols())) : Matrix();
  return net_.forward(z, cond, Vector::Constant(z.cols(), sigma_init_), tape);
}

void MlpGenerator::backward(const Tape& tape, const Matrix& grad_out, Vector* grad_params) const {
  net_.backward(tape, grad_out, grad_params, nullptr);
}

nlohmann::json MlpGenerator::header() const {
  nlohmann::json h;
  h["kind"] = kind();
  h["sigma_init"] = sigma_init_;
  h["network"] = net_.header();
  return h;
}

LinearGenerator::LinearGenerator(const Matrix& w) : output_(w.rows()), latent_(w.cols()) {
  RSD_REQUIRE(w.size() > 0, "LinearGenerator: empty weight");
  params_ = Eigen::Map<const Vector>(w.data(), w.size());
}

Matrix LinearGenerator::forward(const Matrix& z, Tape* tape) const {
  RSD_REQUIRE(z.rows() == latent_, "LinearGenerator: latent has ", z.rows(), " rows, expected ", latent_);
  if (tape) tape->x = z;
  return weight() * z;
}

void LinearGenerator::backward(const Tape& tape, const Matrix& grad_out, Vector* grad_params) const {
  if (!grad_params) return;
  grad_params->resize(params_.size());
  Eigen::Map<Matrix>(grad_params->data(), output_, latent_) = grad_out * tape.x.transpose();
}

nlohmann::json LinearGenerator::header() const {
  return {{"kind", kind()}, {"output_dim", output_}, {"latent_dim", latent_}};
}

std::optional<Matrix> LinearGenerator::output_covariance() const {
  const Matrix w = weight();
  return Matrix(w * w.transpose());
}

LowRankLinearGenerator::LowRankLinearGenerator(const Matrix& u, const Matrix& v)
    : output_(u.rows()), latent_(v.rows()), rank_(u.cols()) {
  RSD_REQUIRE(u.cols() == v.cols() && rank_ >= 1, "LowRankLinearGenerator: U and V need the same positive rank");
  params_.resize(u.size() + v.size());
  params_.head(u.size()) = Eigen::Map<const Vector>(u.data(), u.size());
  params_.tail(v.size()) = Eigen::Map<const Vector>(v.data(), v.size());
}

LowRankLinearGenerator LowRankLinearGenerator::from_map(const Matrix& map, Index rank) {
  RSD_REQUIRE(rank >= 1 && rank <= std::min(map.rows(), map.cols()), "from_map: bad rank ", rank);
  Eigen::JacobiSVD<Matrix> svd(map, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Matrix u = svd.matrixU().leftCols(rank);
  Matrix v = svd.matrixV().leftCols(rank);
  for (Index k = 0; k < rank; ++k) {
    const double s = std::sqrt(svd.singularValues()(k));
    u.col(k) *= s;
    v.col(k) *= s;
  }
  return LowRankLinearGenerator(u, v);
}

Matrix LowRankLinearGenerator::forward(const Matrix& z, Tape* tape) const {
  RSD_REQUIRE(z.rows() == latent_, "LowRankLinearGenerator: latent has ", z.rows(), " rows, expected ", latent_);
  const Matrix proj = v().transpose() * z;  // r x B
  if (tape) {
    tape->x = z;
    tape->post = {proj};
  }
  return u() * proj;
}

void LowRankLinearGenerator::backward(const Tape& tape, const Matrix& grad_out, Vector* grad_params) const {
  if (!grad_params) return;
  const Matrix& proj = tape.post.at(0);
  grad_params->resize(params_.size());
  const Matrix gu = grad_out * proj.transpose();                    // output x r
  const Matrix gv = tape.x * (grad_out.transpose() * u());          // latent x r
  grad_params->head(gu.size()) = Eigen::Map<const Vector>(gu.data(), gu.size());
  grad_params->tail(gv.size()) = Eigen::Map<const Vector>(gv.data(), gv.size());
}

nlohmann::json LowRankLinearGenerator::header() const {
  return {{"kind", kind()}, {"output_dim", output_}, {"latent_dim", latent_}, {"rank", rank_}};
}

std::optional<Matrix> LowRankLinearGenerator::output_covariance() const {
  const Matrix m = map();
  return Matrix(m * m.transpose());
}

std::unique_ptr<Generator> make_generator(const nlohmann::json& h) {
  const std::string kind = h.at("kind").get<std::string>();
  if (kind == "mlp_generator") {
    auto net = make_denoiser(h.at("network"));
    auto* mlp = dynamic_cast<Mlp*>(net.get());
    if (!mlp) throw ContractError("mlp_generator: network must be an mlp");
    return std::make_unique<MlpGenerator>(*mlp, h.at("sigma_init").get<double>());
  }
  if (kind == "linear_generator") {
    return std::make_unique<LinearGenerator>(
        Matrix::Zero(h.at("output_dim").get<Index>(), h.at("latent_dim").get<Index>()));
  }
  if (kind == "low_rank_generator") {
    const auto r = h.at("rank").get<Index>();
    return std::make_unique<LowRankLinearGenerator>(Matrix::Zero(h.at("output_dim").get<Index>(), r),
                                                    Matrix::Zero(h.at("latent_dim").get<Index>(), r));
  }
  throw ContractError("unknown generator kind '" + kind + "'");
}

void save_generator(const std::string& path, const Generator& g) { write_checkpoint(path, g.header(), g.params()); }

std::unique_ptr<Generator> load_generator(const std::string& path) {
  RawCheckpoint ck = read_checkpoint(path);
  auto g = make_generator(ck.header);
  if (g->num_params() != ck.params.size()) throw IoError("checkpoint " + path + " does not match its architecture");
  g->params() = ck.params;
  return g;
}

namespace {

Matrix cond_for(const Denoiser& model, const Matrix& cond, Index batch) {
  if (model.cond_dim() == 0) return Matrix();
  if (cond.size() == 0) return Matrix::Ones(model.cond_dim(), batch);
  RSD_REQUIRE(cond.rows() == model.cond_dim() && cond.cols() == batch, "sid: conditioning shape mismatch");
  return cond;
}

}  // namespace

SidResult sid_generator_loss(const Denoiser& teacher, const Denoiser& fake, const SidBatch& b, double alpha,
                             const std::function<double(double)>& weight, Vector* teacher_param_grads,
                             Vector* fake_param_grads) {
  const Index d = b.w_g.rows();
  const Index batch = b.w_g.cols();
  RSD_REQUIRE(batch >= 1, "sid_generator_loss: empty batch");
  RSD_REQUIRE(std::isfinite(alpha), "sid_generator_loss: alpha must be finite");
  RSD_REQUIRE(b.sigma.size() == batch && b.eps.rows() == d && b.eps.cols() == batch,
              "sid_generator_loss: noise draw does not match the batch");
  RSD_REQUIRE(teacher.data_dim() == d && fake.data_dim() == d, "sid_generator_loss: denoisers expect dimension ",
              teacher.data_dim(), ", batch has ", d);
  const bool masked_input = b.input_mask.size() > 0;
  if (masked_input) {
    RSD_REQUIRE(b.input_mask.rows() == d && b.input_mask.cols() == batch, "sid_generator_loss: input mask shape");
  }
  RSD_REQUIRE(b.projection.size() <= 1 || static_cast<Index>(b.projection.size()) == batch,
              "sid_generator_loss: need zero, one, or one-per-column projections");

  Matrix w_t = b.w_g + b.eps * Eigen::DiagonalMatrix<double, Eigen::Dynamic>(b.sigma);
  if (masked_input) w_t = w_t.cwiseProduct(b.input_mask);
  Tape t_tape, f_tape;
  const Matrix t_out = teacher.forward(w_t, cond_for(teacher, b.cond, batch), b.sigma, &t_tape);
  const Matrix f_out = fake.forward(w_t, cond_for(fake, b.cond, batch), b.sigma, &f_tape);

  auto project = [&](Index j, const Vector& v) -> Vector {
    if (b.projection.empty()) return v;
    const auto& op = b.projection.size() == 1 ? b.projection[0] : b.projection[static_cast<std::size_t>(j)];
    return op.apply(v);
  };
  auto project_adjoint = [&](Index j, const Vector& v) -> Vector {
    if (b.projection.empty()) return v;
    const auto& op = b.projection.size() == 1 ? b.projection[0] : b.projection[static_cast<std::size_t>(j)];
    return op.adjoint(v);
  };

  const double inv_batch = 1.0 / static_cast<double>(batch);
  SidResult res;
  res.grad_w.resize(d, batch);
  Matrix g_teacher(d, batch);
  Matrix g_fake(d, batch);
  double total = 0.0;
  for (Index j = 0; j < batch; ++j) {
    const double lambda = weight(b.sigma(j));
    const Vector pt = project(j, t_out.col(j));
    const Vector pf = project(j, f_out.col(j));
    const Vector diff = pt - pf;
    const Vector resid = pf - b.w_g.col(j);
    total += (1.0 - alpha) * lambda * diff.squaredNorm() + lambda * diff.dot(resid);
    const Vector g_diff = 2.0 * (1.0 - alpha) * lambda * diff + lambda * resid;
    // Cotangents on the (projected) denoiser outputs.
    g_teacher.col(j) = inv_batch * project_adjoint(j, g_diff);
    g_fake.col(j) = inv_batch * project_adjoint(j, lambda * diff - g_diff);
    res.grad_w.col(j) = -inv_batch * lambda * diff;
  }
  res.loss = total * inv_batch;

  Matrix gx_teacher, gx_fake;
  teacher.backward(t_tape, g_teacher, teacher_param_grads, &gx_teacher);
  fake.backward(f_tape, g_fake, fake_param_grads, &gx_fake);
  Matrix through_inputs = gx_teacher + gx_fake;
  if (masked_input) through_inputs = through_inputs.cwiseProduct(b.input_mask);
  res.grad_w += through_inputs;
  return res;
}

double sid_generator_loss(const Denoiser& teacher, const Denoiser& fake, const Vector& w_g, double sigma_t,
                          const Vector& eps, double alpha, double lambda) {
  SidBatch b;
  b.w_g = w_g;
  b.sigma = Vector::Constant(1, sigma_t);
  b.eps = eps;
  return sid_generator_loss(teacher, fake, b, alpha, [lambda](double) { return lambda; }).loss;
}

Distiller::Distiller(const Denoiser& teacher, std::unique_ptr<Generator> generator, DistillConfig config,
                     DistillContext context)
    : Distiller(teacher, teacher.clone(), std::move(generator), std::move(config), context) {}

Distiller::Distiller(const Denoiser& teacher, std::unique_ptr<Denoiser> fake, std::unique_ptr<Generator> generator,
                     DistillConfig config, DistillContext context)
    : teacher_(teacher.clone()),
      fake_(std::move(fake)),
      generator_(std::move(generator)),
      config_(std::move(config)),
      context_(context) {
  RSD_REQUIRE(context_.operators != nullptr, "distill: an operator source is required");
  RSD_REQUIRE(fake_ && generator_, "distill: missing fake model or generator");
  RSD_REQUIRE(std::isfinite(config_.alpha), "distill: alpha must be finite");
  RSD_REQUIRE(config_.steps >= 0 && config_.fake_updates >= 0 && config_.batch >= 1,
              "distill: step counts and batch must be non-negative");
  RSD_REQUIRE(config_.generator_lr > 0.0 && config_.fake_lr > 0.0, "distill: learning rates must be positive");
  RSD_REQUIRE(config_.final_lr_factor > 0.0, "distill: final_lr_factor must be positive");
  RSD_REQUIRE(config_.metric_every >= 1, "distill: metric_every must be >= 1");
  config_.schedule.validate();
  const CorruptionOperator& op = context_.operators->fixed();
  RSD_REQUIRE(generator_->output_dim() == op.input_dim(), "distill: generator output dimension ",
              generator_->output_dim(), " does not match operator input ", op.input_dim());
  RSD_REQUIRE(teacher_->data_dim() == op.output_dim() && fake_->data_dim() == op.output_dim(),
              "distill: denoisers must act on the operator's output space (", op.output_dim(), ")");
  RSD_REQUIRE(fake_->num_params() == teacher_->num_params() || fake_->kind() != teacher_->kind(),
              "distill: fake model does not match the teacher architecture");
  fake_train_.objective = config_.objective;
  fake_train_.sigma = config_.sigma;
  fake_train_.batch = config_.batch;
  fake_train_.lr = config_.fake_lr;
  fake_train_.further_rate = config_.further_rate;
  fake_train_.schedule = config_.schedule;
  fake_adam_.lr = config_.fake_lr;
  gen_adam_.lr = config_.generator_lr;
}

double Distiller::lr_scale() const {
  if (config_.final_lr_factor == 1.0 || config_.steps == 0) return 1.0;
  return std::pow(config_.final_lr_factor, static_cast<double>(step_) / static_cast<double>(config_.steps));
}

CorruptionOperator Distiller::draw_operator(Rng& rng) const {
  if (!context_.operators->per_sample()) return context_.operators->fixed();
  return context_.operators->at(rng.next_u64());
}

double Distiller::fake_model_step(Rng& rng) {
  const Index batch = config_.batch;
  Matrix z(generator_->latent_dim(), batch);
  for (Index j = 0; j < batch; ++j) {
    for (Index i = 0; i < z.rows(); ++i) z(i, j) = rng.normal();
  }
  const Matrix x = generator_->forward(z);
  ObjectiveBatch ob;
  ob.y.resize(fake_->data_dim(), batch);
  const bool masked =
      config_.objective == Objective::kAmbientInpaint || config_.objective == Objective::kFourierAmbient;
  const bool shared = !context_.operators->per_sample();
  for (Index j = 0; j < batch; ++j) {
    const CorruptionOperator op = draw_operator(rng);
    Vector y = op.apply(x.col(j));
    if (config_.fake_observation_noise && config_.sigma > 0.0) {
      for (Index i = 0; i < y.size(); ++i) y(i) += config_.sigma * rng.normal();
    }
    ob.y.col(j) = y;
    if (masked && !(shared && config_.objective == Objective::kFourierAmbient)) ob.ops.push_back(op);
  }
  if (masked && ob.ops.empty()) ob.ops.push_back(context_.operators->fixed());
  Vector grad;
  const double loss = objective_loss(fake_train_, *fake_, ob, rng, &grad);
  fake_adam_.lr = config_.fake_lr * lr_scale();
  adam_step(fake_adam_, fake_->params(), grad);
  return loss;
}

double Distiller::generator_step(Rng& rng) {
  const Index batch = config_.batch;
  Matrix z(generator_->latent_dim(), batch);
  for (Index j = 0; j < batch; ++j) {
    for (Index i = 0; i < z.rows(); ++i) z(i, j) = rng.normal();
  }
  Tape g_tape;
  const Matrix x = generator_->forward(z, &g_tape);
  const Index m = teacher_->data_dim();
  SidBatch sb;
  sb.w_g.resize(m, batch);
  sb.sigma.resize(batch);
  sb.eps.resize(m, batch);
  std::vector<CorruptionOperator> ops;
  ops.reserve(static_cast<std::size_t>(batch));
  for (Index j = 0; j < batch; ++j) {
    ops.push_back(draw_operator(rng));
    sb.w_g.col(j) = ops.back().apply(x.col(j));
    double s = config_.schedule.draw(rng);
    if (config_.objective == Objective::kAmbientTweedie) s = std::max(s, config_.sigma);
    sb.sigma(j) = s;
    for (Index i = 0; i < m; ++i) sb.eps(i, j) = rng.normal();
  }
  if (config_.objective == Objective::kAmbientInpaint || config_.objective == Objective::kFourierAmbient) {
    const auto mask_len = static_cast<Index>(ops[0].mask_bits().size());
    sb.cond.resize(mask_len, batch);
    for (Index j = 0; j < batch; ++j) {
      for (Index i = 0; i < mask_len; ++i) sb.cond(i, j) = ops[static_cast<std::size_t>(j)].mask_bits()[i];
    }
    if (config_.objective == Objective::kAmbientInpaint) sb.input_mask = sb.cond;
    sb.projection = ops;
  }
  const SidResult sid = sid_generator_loss(*teacher_, *fake_, sb, config_.alpha, config_.schedule.weight);
  Matrix grad_x(generator_->output_dim(), batch);
  for (Index j = 0; j < batch; ++j) grad_x.col(j) = ops[static_cast<std::size_t>(j)].adjoint(sid.grad_w.col(j));
  Vector grad;
  generator_->backward(g_tape, grad_x, &grad);
  if (!std::isfinite(sid.loss) || !grad.allFinite()) {
    throw NumericalError(detail::concat("distillation diverged at step ", step_, " (loss ", sid.loss, ")"));
  }
  gen_adam_.lr = config_.generator_lr * lr_scale();
  adam_step(gen_adam_, generator_->params(), grad);
  return sid.loss;
}

void Distiller::advance() {
  const Rng master = Rng(config_.seed).stream(stream_tag::kDistill, static_cast<std::uint64_t>(step_));
  for (int k = 0; k < config_.fake_updates; ++k) {
    Rng rng = master.stream(0, static_cast<std::uint64_t>(k));
    last_fake_ = fake_model_step(rng);
  }
  Rng rng = master.stream(1, 0);
  last_sid_ = generator_step(rng);
  ++step_;
}

MetricRow Distiller::evaluate(double sid_loss, double fake_loss) const {
  const auto start = std::chrono::steady_clock::now();
  MetricRow row;
  row.step = step_;
  row.sid_loss = sid_loss;
  row.fake_loss = fake_loss;
  const Rng eval = Rng(config_.seed).stream(stream_tag::kEval, 0);
  if (config_.eval_samples > 0) {
    // Same latents and corruption noise at every evaluation.
    const Samples x = generate(*generator_, config_.eval_samples, eval.stream(0, 0));
    if (context_.corrupted_reference) {
      row.proximal_frechet =
          proximal_frechet(x, *context_.corrupted_reference, *context_.operators, config_.sigma, eval.stream(1, 0));
    }
    if (context_.clean_law) {
      const Matrix clean_cov = context_.clean_law->covariance();
      const Vector zero = Vector::Zero(clean_cov.rows());
      if (auto cov = generator_->output_covariance()) {
        row.true_frechet = frechet_distance(zero, *cov, zero, clean_cov);
      } else {
        const MomentFit fit = fit_moments(x);
        row.true_frechet = frechet_distance(fit.mean, fit.covariance, zero, clean_cov);
      }
      try {
        const auto angles = eigenspace_alignment(x, context_.clean_law->factor());
        row.max_angle_degrees = angles.back();
      } catch (const NumericalError&) {
        row.max_angle_degrees.reset();
      }
    }
  }
  row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return row;
}

void Distiller::run() {
  auto record = [&] {
    report_.rows.push_back(evaluate(last_sid_, last_fake_));
    report_.rows.back().step = step_;
    snapshots_.push_back({step_, generator_->params()});
  };
  if (step_ == 0) record();
  const std::int64_t end = step_ + config_.steps;
  while (step_ < end) {
    advance();
    if (step_ % config_.metric_every == 0 || step_ == end) record();
  }
}

std::unique_ptr<Generator> initial_generator(const Denoiser& teacher, Index output_dim, double sigma_init,
                                             Index linear_rank, std::uint64_t seed) {
  RSD_REQUIRE(sigma_init > 0.0, "initial_generator: sigma_init must be positive");
  if (const auto* mlp = dynamic_cast<const Mlp*>(&teacher)) {
    if (mlp->data_dim() == output_dim) return std::make_unique<MlpGenerator>(*mlp, sigma_init);
    MlpConfig c;
    c.data_dim = output_dim;
    c.hidden = mlp->config().hidden;
    c.embed_dim = mlp->config().embed_dim;
    c.sigma_data = mlp->config().sigma_data;
    c.seed = seed;
    Mlp fresh(c);
    return std::make_unique<MlpGenerator>(fresh, sigma_init);
  }
  if (const auto* lin = dynamic_cast<const LinearGaussianDenoiser*>(&teacher)) {
    if (lin->data_dim() == output_dim) {
      return std::make_unique<LowRankLinearGenerator>(LowRankLinearGenerator::from_map(lin->map_at(sigma_init), linear_rank));
    }
  }
  MlpConfig c;
  c.data_dim = output_dim;
  c.seed = seed;
  return std::make_unique<MlpGenerator>(Mlp(c), sigma_init);
}

Samples generate(const Generator& g, Index n, const Rng& rng, par::Mode mode) {
  RSD_REQUIRE(n >= 1, "generate: n must be >= 1");
  const Index k = g.latent_dim();
  Samples out(n, g.output_dim());
  const Index blocks = (n + kBlockColumns - 1) / kBlockColumns;
  par::for_each_index(
      blocks,
      [&](std::int64_t blk) {
        const Index start = blk * kBlockColumns;
        const Index cols = std::min(kBlockColumns, n - start);
        Matrix z(k, cols);
        for (Index j = 0; j < cols; ++j) {
          Rng local = rng.stream(stream_tag::kSample, static_cast<std::uint64_t>(start + j));
          for (Index i = 0; i < k; ++i) z(i, j) = local.normal();
        }
        out.middleRows(start, cols) = g.forward(z).transpose();
      },
      mode);
  return out;
}

Vector generate(const Generator& g, const Vector& z) { return g.forward(Matrix(z)).col(0); }

}  // namespace rsd
