#include "rsd/nn.hpp"

#include <cmath>

namespace rsd {

namespace {

double silu(double z) { return z / (1.0 + std::exp(-z)); }

double silu_prime(double z) {
  const double s = 1.0 / (1.0 + std::exp(-z));
  return s * (1.0 + z * (1.0 - s));
}

void check_batch(const Denoiser& model, const Matrix& x, const Matrix& cond, const Vector& sigma) {
  RSD_REQUIRE(x.rows() == model.data_dim(), model.kind(), ": input has ", x.rows(), " rows, expected ",
              model.data_dim());
  RSD_REQUIRE(sigma.size() == x.cols(), model.kind(), ": need one sigma per column");
  RSD_REQUIRE(model.cond_dim() == 0 || (cond.rows() == model.cond_dim() && cond.cols() == x.cols()), model.kind(),
              ": conditioning must be ", model.cond_dim(), " x ", x.cols());
  for (Index j = 0; j < sigma.size(); ++j) {
    RSD_REQUIRE(sigma(j) > 0.0, model.kind(), ": sigma must be positive, got ", sigma(j));
  }
}

}  // namespace

Vector Denoiser::forward_one(const Vector& x, double sigma, const Vector& cond) const {
  Matrix c;
  if (cond_dim() > 0) c = cond.size() > 0 ? Matrix(cond) : Matrix::Ones(cond_dim(), 1);
  return forward(Matrix(x), c, Vector::Constant(1, sigma)).col(0);
}

Mlp::Mlp(MlpConfig config) : config_(std::move(config)) {
  RSD_REQUIRE(config_.data_dim >= 1, "Mlp: data_dim must be positive");
  RSD_REQUIRE(config_.cond_dim >= 0, "Mlp: cond_dim must be >= 0");
  RSD_REQUIRE(config_.embed_dim >= 0 && config_.embed_dim % 2 == 0, "Mlp: embed_dim must be even");
  RSD_REQUIRE(config_.sigma_data > 0.0, "Mlp: sigma_data must be positive");
  pre_.sigma_data = config_.sigma_data;
  std::vector<Index> widths;
  widths.push_back(input_width());
  for (Index h : config_.hidden) {
    RSD_REQUIRE(h >= 1, "Mlp: hidden widths must be positive");
    widths.push_back(h);
  }
  widths.push_back(config_.data_dim);
  Index offset = 0;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    layers_.push_back({widths[l], widths[l + 1], offset});
    offset += widths[l] * widths[l + 1] + widths[l + 1];
  }
  params_ = Vector::Zero(offset);

  Rng rng = Rng(config_.seed).stream(stream_tag::kInit, 0);
  for (std::size_t l = 0; l + 1 < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    const Index big = std::max(layer.in, layer.out);
    const Index small = std::min(layer.in, layer.out);
    Matrix g(big, small);
    for (Index j = 0; j < small; ++j) {
      for (Index i = 0; i < big; ++i) g(i, j) = rng.normal();
    }
    Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ() * Matrix::Identity(big, small);
    // Orthonormal rows or columns; the gain keeps activations O(1) through SiLU.
    Matrix w = layer.out >= layer.in ? q : Matrix(q.transpose());
    Eigen::Map<Matrix>(params_.data() + layer.offset, layer.out, layer.in) = std::sqrt(2.0) * w;
  }
}

Eigen::Map<const Matrix> Mlp::weight(const Layer& l) const {
  return Eigen::Map<const Matrix>(params_.data() + l.offset, l.out, l.in);
}

Eigen::Map<const Vector> Mlp::bias(const Layer& l) const {
  return Eigen::Map<const Vector>(params_.data() + l.offset + l.in * l.out, l.out);
}

Matrix Mlp::embed(const Vector& sigma) const {
  const Index half = config_.embed_dim / 2;
  Matrix out(config_.embed_dim, sigma.size());
  for (Index j = 0; j < sigma.size(); ++j) {
    const double c = pre_.c_noise(sigma(j));
    for (Index k = 0; k < half; ++k) {
      out(k, j) = std::cos(static_cast<double>(k + 1) * c);
      out(half + k, j) = std::sin(static_cast<double>(k + 1) * c);
    }
  }
  return out;
}

Matrix Mlp::forward(const Matrix& x, const Matrix& cond, const Vector& sigma, Tape* tape) const {
  check_batch(*this, x, cond, sigma);
  const Index d = config_.data_dim;
  const Index c = config_.cond_dim;
  const Index batch = x.cols();
  Matrix h(input_width(), batch);
  for (Index j = 0; j < batch; ++j) h.col(j).head(d) = pre_.c_in(sigma(j)) * x.col(j);
  if (c > 0) h.middleRows(d, c) = cond;
  if (config_.embed_dim > 0) h.bottomRows(config_.embed_dim) = embed(sigma);
  if (tape) {
    tape->x = x;
    tape->sigma = sigma;
    tape->pre.clear();
    tape->post.clear();
  }
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Matrix z = weight(layers_[l]) * h;
    z.colwise() += bias(layers_[l]);
    if (tape) tape->post.push_back(h);
    if (l + 1 < layers_.size()) {
      if (tape) tape->pre.push_back(z);
      h = z.unaryExpr([](double v) { return silu(v); });
    } else {
      h = std::move(z);
    }
  }
  Matrix out(d, batch);
  for (Index j = 0; j < batch; ++j) {
    out.col(j) = pre_.c_skip(sigma(j)) * x.col(j) + pre_.c_out(sigma(j)) * h.col(j);
  }
  return out;
}

void Mlp::backward(const Tape& tape, const Matrix& grad_out, Vector* grad_params, Matrix* grad_x) const {
  const Index d = config_.data_dim;
  const Index batch = tape.x.cols();
  RSD_REQUIRE(grad_out.rows() == d && grad_out.cols() == batch, "Mlp::backward: gradient shape mismatch");
  RSD_REQUIRE(tape.post.size() == layers_.size(), "Mlp::backward: tape does not match this model");
  Matrix dz(d, batch);
  for (Index j = 0; j < batch; ++j) dz.col(j) = pre_.c_out(tape.sigma(j)) * grad_out.col(j);
  if (grad_params) grad_params->setZero(params_.size());
  for (std::size_t l = layers_.size(); l-- > 0;) {
    const Layer& layer = layers_[l];
    if (grad_params) {
      Eigen::Map<Matrix>(grad_params->data() + layer.offset, layer.out, layer.in).noalias() =
          dz * tape.post[l].transpose();
      Eigen::Map<Vector>(grad_params->data() + layer.offset + layer.in * layer.out, layer.out) = dz.rowwise().sum();
    }
    if (l == 0 && !grad_x) break;
    Matrix dh = weight(layer).transpose() * dz;
    if (l == 0) {
      Matrix& gx = *grad_x;
      gx.resize(d, batch);
      for (Index j = 0; j < batch; ++j) {
        gx.col(j) = pre_.c_skip(tape.sigma(j)) * grad_out.col(j) + pre_.c_in(tape.sigma(j)) * dh.col(j).head(d);
      }
      break;
    }
    const Matrix& z = tape.pre[l - 1];
    dz = dh.cwiseProduct(z.unaryExpr([](double v) { return silu_prime(v); }));
  }
}

nlohmann::json Mlp::header() const {
  nlohmann::json h;
  h["kind"] = kind();
  h["data_dim"] = config_.data_dim;
  h["cond_dim"] = config_.cond_dim;
  h["hidden"] = config_.hidden;
  h["embed_dim"] = config_.embed_dim;
  h["activation"] = "silu";
  h["sigma_data"] = config_.sigma_data;
  h["seed"] = config_.seed;
  return h;
}

LinearGaussianDenoiser::LinearGaussianDenoiser(Index data_dim, Index rank, Index cond_dim)
    : data_dim_(data_dim), rank_(rank), cond_dim_(cond_dim) {
  RSD_REQUIRE(data_dim >= 1 && rank >= 1 && rank <= data_dim, "LinearGaussianDenoiser: need 1 <= rank <= d");
  RSD_REQUIRE(cond_dim >= 0, "LinearGaussianDenoiser: cond_dim must be >= 0");
  params_ = Vector::Zero(data_dim * rank);
  for (Index i = 0; i < rank; ++i) params_(i * data_dim + i) = 0.1;
}

LinearGaussianDenoiser::LinearGaussianDenoiser(const Matrix& factor, Index cond_dim)
    : LinearGaussianDenoiser(factor.rows(), factor.cols(), cond_dim) {
  Eigen::Map<Matrix>(params_.data(), data_dim_, rank_) = factor;
}

LinearGaussianDenoiser LinearGaussianDenoiser::exact(const Matrix& covariance, Index cond_dim) {
  RSD_REQUIRE(covariance.rows() == covariance.cols() && covariance.rows() >= 1,
              "LinearGaussianDenoiser::exact: covariance must be square");
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (covariance + covariance.transpose()));
  const Vector& lambda = eig.eigenvalues();
  const double top = lambda.maxCoeff();
  RSD_REQUIRE(top > 0.0, "LinearGaussianDenoiser::exact: covariance is zero");
  std::vector<Index> keep;
  for (Index i = lambda.size(); i-- > 0;) {
    if (lambda(i) < -1e-8 * top) throw NumericalError("LinearGaussianDenoiser::exact: covariance is not PSD");
    if (lambda(i) > 1e-12 * top) keep.push_back(i);
  }
  Matrix factor(covariance.rows(), static_cast<Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) {
    factor.col(static_cast<Index>(k)) = std::sqrt(lambda(keep[k])) * eig.eigenvectors().col(keep[k]);
  }
  return LinearGaussianDenoiser(factor, cond_dim);
}

Matrix LinearGaussianDenoiser::map_at(double s) const {
  RSD_REQUIRE(s > 0.0, "LinearGaussianDenoiser: sigma must be positive");
  const Matrix l = factor();
  const Matrix cov = l * l.transpose();
  const Matrix k = (cov + s * s * Matrix::Identity(data_dim_, data_dim_)).llt().solve(Matrix::Identity(data_dim_, data_dim_));
  return Matrix::Identity(data_dim_, data_dim_) - s * s * k;
}

namespace {

// Eigen-decomposition of L L^T, shared by every column of a batch:
// (L L^T + s^2 I)^{-1} v = Q diag(1 / (lambda + s^2)) Q^T v.
struct GramEigen {
  Matrix q;
  Vector lambda;
  Vector solve(const Vector& v, double s2) const {
    Vector c = q.transpose() * v;
    for (Index i = 0; i < c.size(); ++i) c(i) /= lambda(i) + s2;
    return q * c;
  }
};

GramEigen gram_eigen(const Matrix& l) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(l * l.transpose());
  return {eig.eigenvectors(), eig.eigenvalues().cwiseMax(0.0)};
}

}  // namespace

Matrix LinearGaussianDenoiser::forward(const Matrix& x, const Matrix& cond, const Vector& sigma, Tape* tape) const {
  check_batch(*this, x, cond, sigma);
  const GramEigen ge = gram_eigen(factor());
  Matrix out(data_dim_, x.cols());
  for (Index j = 0; j < x.cols(); ++j) {
    const double s2 = sigma(j) * sigma(j);
    out.col(j) = x.col(j) - s2 * ge.solve(x.col(j), s2);
  }
  if (tape) {
    tape->x = x;
    tape->sigma = sigma;
    tape->pre.clear();
    tape->post.clear();
  }
  return out;
}

void LinearGaussianDenoiser::backward(const Tape& tape, const Matrix& grad_out, Vector* grad_params,
                                      Matrix* grad_x) const {
  RSD_REQUIRE(grad_out.rows() == data_dim_ && grad_out.cols() == tape.x.cols(),
              "LinearGaussianDenoiser::backward: gradient shape mismatch");
  const Matrix l = factor();
  const GramEigen ge = gram_eigen(l);
  Matrix outer = Matrix::Zero(data_dim_, data_dim_);
  if (grad_x) grad_x->resize(data_dim_, tape.x.cols());
  for (Index j = 0; j < tape.x.cols(); ++j) {
    const double s2 = tape.sigma(j) * tape.sigma(j);
    const Vector p = ge.solve(grad_out.col(j), s2);
    if (grad_params) {
      const Vector q = ge.solve(tape.x.col(j), s2);
      outer.noalias() += s2 * (p * q.transpose() + q * p.transpose());
    }
    if (grad_x) grad_x->col(j) = grad_out.col(j) - s2 * p;
  }
  if (grad_params) {
    grad_params->resize(params_.size());
    Eigen::Map<Matrix>(grad_params->data(), data_dim_, rank_) = outer * l;
  }
}

nlohmann::json LinearGaussianDenoiser::header() const {
  nlohmann::json h;
  h["kind"] = kind();
  h["data_dim"] = data_dim_;
  h["rank"] = rank_;
  h["cond_dim"] = cond_dim_;
  return h;
}

LossGrad loss_and_grad(const Denoiser& model, const Matrix& x, const Matrix& cond, const Vector& sigma,
                       const OutputLoss& loss) {
  Tape tape;
  const Matrix out = model.forward(x, cond, sigma, &tape);
  Matrix grad_out = Matrix::Zero(out.rows(), out.cols());
  LossGrad res;
  res.loss = loss(out, grad_out);
  if (!std::isfinite(res.loss)) {
    throw NumericalError(detail::concat("non-finite loss ", res.loss, " (batch ", x.cols(), ", |x|max ",
                                        x.cwiseAbs().maxCoeff(), ", |out|max ", out.cwiseAbs().maxCoeff(), ")"));
  }
  model.backward(tape, grad_out, &res.grad, nullptr);
  return res;
}

void adam_step(AdamState& s, Vector& params, const Vector& grads) {
  RSD_REQUIRE(params.size() == grads.size(), "adam_step: parameter/gradient size mismatch");
  if (s.m.size() != params.size()) {
    s.m = Vector::Zero(params.size());
    s.v = Vector::Zero(params.size());
  }
  ++s.step;
  const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (Index i = 0; i < params.size(); ++i) {
    s.m(i) = s.beta1 * s.m(i) + (1.0 - s.beta1) * grads(i);
    s.v(i) = s.beta2 * s.v(i) + (1.0 - s.beta2) * grads(i) * grads(i);
    const double mhat = s.m(i) / bc1;
    const double vhat = s.v(i) / bc2;
    params(i) -= s.lr * mhat / (std::sqrt(vhat) + s.eps);
  }
}

void ema_update(Vector& ema, const Vector& params, double decay) {
  RSD_REQUIRE(decay >= 0.0 && decay <= 1.0, "ema_update: decay must lie in [0, 1], got ", decay);
  RSD_REQUIRE(ema.size() == params.size(), "ema_update: size mismatch");
  ema = decay * ema + (1.0 - decay) * params;
}

std::uint64_t params_hash(const Vector& params) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(params.data());
  for (std::size_t i = 0; i < sizeof(double) * static_cast<std::size_t>(params.size()); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::unique_ptr<Denoiser> make_denoiser(const nlohmann::json& h) {
  const std::string kind = h.at("kind").get<std::string>();
  if (kind == "mlp") {
    MlpConfig c;
    c.data_dim = h.at("data_dim").get<Index>();
    c.cond_dim = h.at("cond_dim").get<Index>();
    c.hidden = h.at("hidden").get<std::vector<Index>>();
    c.embed_dim = h.at("embed_dim").get<Index>();
    c.sigma_data = h.at("sigma_data").get<double>();
    c.seed = h.at("seed").get<std::uint64_t>();
    if (h.value("activation", std::string("silu")) != "silu") throw ContractError("unsupported activation");
    return std::make_unique<Mlp>(c);
  }
  if (kind == "linear_gaussian") {
    return std::make_unique<LinearGaussianDenoiser>(h.at("data_dim").get<Index>(), h.at("rank").get<Index>(),
                                                    h.at("cond_dim").get<Index>());
  }
  throw ContractError("unknown model kind '" + kind + "'");
}

}  // namespace rsd
