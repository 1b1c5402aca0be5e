#include <gtest/gtest.h>

#include <filesystem>

#include "gradcheck.hpp"
#include "rsd/checkpoint.hpp"
#include "rsd/gaussian_model.hpp"

namespace rsd {
namespace {

MlpConfig small_config(Index d = 4) {
  MlpConfig c;
  c.data_dim = d;
  c.hidden = {64, 64};
  c.seed = 3;
  return c;
}

TEST(Nn, ZeroFinalLayerGivesSkipMap) {
  const Mlp net(small_config());
  Rng rng(1);
  const Vector x = oracle::random_vector(4, rng);
  const Preconditioner pre;
  for (double s : {0.02, 0.3, 1.0, 10.0}) {
    const Vector out = net.forward_one(x, s);
    ASSERT_EQ(out.size(), 4);
    EXPECT_LT((out - pre.c_skip(s) * x).norm(), 1e-15);
  }
}

TEST(Nn, ForwardDeterministic) {
  const Mlp a(small_config()), b(small_config());
  EXPECT_EQ(a.params(), b.params());
  Mlp c(small_config());
  Rng rng(2);
  gradcheck::randomize(c.params(), rng, 0.3);
  const Matrix x = oracle::random_matrix(4, 5, rng);
  const Vector s = Vector::Constant(5, 0.7);
  EXPECT_EQ(c.forward(x, Matrix(0, 5), s), c.forward(x, Matrix(0, 5), s));
}

TEST(Nn, PreconditionerConstants) {
  const Preconditioner p;
  const double s = 0.8, sd = 0.5;
  EXPECT_DOUBLE_EQ(p.c_in(s), 1.0 / std::sqrt(s * s + sd * sd));
  EXPECT_DOUBLE_EQ(p.c_skip(s), sd * sd / (s * s + sd * sd));
  EXPECT_DOUBLE_EQ(p.c_out(s), s * sd / std::sqrt(s * s + sd * sd));
}

TEST(Nn, HiddenLayersOrthogonal) {
  MlpConfig c = small_config();
  c.hidden = {32, 32};
  const Mlp net(c);
  // Second hidden layer: 32 x 32 block after the first layer's weights and bias.
  const Index first = net.input_width() * 32 + 32;
  const Eigen::Map<const Matrix> w(net.params().data() + first, 32, 32);
  EXPECT_LT((w.transpose() * w - 2.0 * Matrix::Identity(32, 32)).norm(), 1e-10);
}

TEST(Nn, ConstantLossGivesZeroGradient) {
  Mlp net(small_config());
  Rng rng(3);
  gradcheck::randomize(net.params(), rng, 0.3);
  const auto r = loss_and_grad(net, oracle::random_matrix(4, 6, rng), Matrix(0, 6), Vector::Constant(6, 1.0),
                               [](const Matrix& out, Matrix& g) {
                                 g = Matrix::Zero(out.rows(), out.cols());
                                 return 3.0;
                               });
  EXPECT_EQ(r.loss, 3.0);
  EXPECT_EQ(r.grad.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Nn, LinearLeastSquaresGradient) {
  // No hidden layers and no embedding: out = c_skip x + c_out (W c_in x + b).
  MlpConfig c;
  c.data_dim = 3;
  c.hidden = {};
  c.embed_dim = 0;
  Mlp net(c);
  Rng rng(4);
  gradcheck::randomize(net.params(), rng, 0.5);
  const Index b = 7;
  const double s = 0.6;
  const Matrix x = oracle::random_matrix(3, b, rng), y = oracle::random_matrix(3, b, rng);
  const Preconditioner pre;
  const Matrix w = Eigen::Map<const Matrix>(net.params().data(), 3, 3);
  const Vector bias = net.params().tail(3);
  const Matrix out = pre.c_skip(s) * x + pre.c_out(s) * ((w * (pre.c_in(s) * x)).colwise() + bias);
  const Matrix r = out - y;
  // d/dW sum |r|^2 = 2 c_out r (c_in x)^T; d/db = 2 c_out sum_cols r.
  const Matrix gw = 2.0 * pre.c_out(s) * r * (pre.c_in(s) * x).transpose();
  const Vector gb = 2.0 * pre.c_out(s) * r.rowwise().sum();
  const auto lg = loss_and_grad(net, x, Matrix(0, b), Vector::Constant(b, s), [&](const Matrix& o, Matrix& g) {
    g = 2.0 * (o - y);
    return (o - y).squaredNorm();
  });
  EXPECT_NEAR(lg.loss, r.squaredNorm(), 1e-12);
  EXPECT_LT((lg.grad.head(9) - Eigen::Map<const Vector>(gw.data(), 9)).norm(), 1e-12);
  EXPECT_LT((lg.grad.tail(3) - gb).norm(), 1e-12);
}

TEST(Nn, NonFiniteLossThrows) {
  Mlp net(small_config());
  EXPECT_THROW(loss_and_grad(net, Matrix::Ones(4, 2), Matrix(0, 2), Vector::Ones(2),
                             [](const Matrix& o, Matrix& g) {
                               g = Matrix::Zero(o.rows(), o.cols());
                               return std::nan("");
                             }),
               NumericalError);
}

TEST(Nn, MlpGradientCheck) {
  for (int i = 0; i < 25; ++i) EXPECT_LT(gradcheck::mlp_check(i), 1e-4) << "check " << i;
}

TEST(Nn, LinearGaussianGradientCheck) {
  for (int i = 0; i < 25; ++i) EXPECT_LT(gradcheck::linear_gaussian_check(i), 1e-4) << "check " << i;
}

TEST(Nn, GeneratorGradientCheck) {
  for (int i = 0; i < 24; ++i) EXPECT_LT(gradcheck::generator_check(i), 1e-4) << "check " << i;
}

TEST(Nn, LinearGaussianIsPosteriorMean) {
  Rng rng(5);
  const auto law = LowRankGaussian::random(6, 2, rng);
  const auto model = LinearGaussianDenoiser::exact(law.covariance());
  EXPECT_EQ(model.rank(), 2);
  for (double s : {0.05, 0.5, 3.0}) {
    const Vector x = oracle::random_vector(6, rng);
    const Vector expect = law.covariance() * (law.covariance() + s * s * Matrix::Identity(6, 6)).inverse() * x;
    EXPECT_LT((model.forward_one(x, s) - expect).norm(), 1e-12);
    EXPECT_LT((model.map_at(s) * x - expect).norm(), 1e-12);
  }
}

TEST(Nn, AdamExamples) {
  AdamState st;
  st.lr = 0.1;
  Vector w = Vector::Constant(1, 2.0);
  adam_step(st, w, Vector::Zero(1));
  EXPECT_EQ(w(0), 2.0);

  AdamState one;
  one.lr = 0.1;
  Vector p = Vector::Zero(1);
  adam_step(one, p, Vector::Ones(1));
  EXPECT_NEAR(p(0), -0.1, 1e-6);

  AdamState quad;
  quad.lr = 0.05;
  Vector q = Vector::Ones(1);
  for (int i = 0; i < 100; ++i) adam_step(quad, q, 2.0 * q);
  EXPECT_LT(std::abs(q(0)), 0.1);
}

TEST(Nn, EmaExamples) {
  const Vector p = Vector::LinSpaced(3, 1, 3);
  Vector e = Vector::Zero(3);
  ema_update(e, p, 1.0);
  EXPECT_EQ(e, Vector::Zero(3));
  ema_update(e, p, 0.0);
  EXPECT_EQ(e, p);
  Vector g = Vector::Constant(3, 10.0);
  const double decay = 0.9;
  for (int k = 1; k <= 30; ++k) {
    ema_update(g, p, decay);
    const Vector expect = p + std::pow(decay, k) * (Vector::Constant(3, 10.0) - p);
    EXPECT_LT((g - expect).norm(), 1e-12);
  }
  EXPECT_THROW(ema_update(g, p, 1.5), ContractError);
  EXPECT_THROW(ema_update(g, p, -0.1), ContractError);
}

TEST(Nn, ForwardFiniteOnBoundedInputs) {
  Mlp net(small_config(6));
  Rng rng(6);
  gradcheck::randomize(net.params(), rng, 0.5);
  for (int t = 0; t < 50; ++t) {
    const Vector x = oracle::random_vector(6, rng).normalized() * 1e3 * rng.uniform();
    const double s = 0.02 * std::pow(500.0, rng.uniform());
    EXPECT_TRUE(net.forward_one(x, s).allFinite());
  }
}

TEST(Nn, CheckpointRoundTripBitExact) {
  const auto dir = std::filesystem::temp_directory_path() / "rsd_nn_ckpt";
  std::filesystem::create_directories(dir);
  MlpConfig c = small_config(5);
  c.cond_dim = 2;
  Mlp net(c);
  Rng rng(7);
  gradcheck::randomize(net.params(), rng, 0.3);
  save_denoiser((dir / "m.ckpt").string(), net);
  const auto back = load_denoiser((dir / "m.ckpt").string());
  EXPECT_EQ(back->kind(), "mlp");
  EXPECT_EQ(back->params(), net.params());
  const Matrix x = oracle::random_matrix(5, 3, rng), cond = oracle::random_matrix(2, 3, rng);
  const Vector s = Vector::Constant(3, 0.4);
  EXPECT_EQ(back->forward(x, cond, s), net.forward(x, cond, s));

  LinearGaussianDenoiser lin(oracle::random_matrix(4, 2, rng));
  save_denoiser((dir / "l.ckpt").string(), lin);
  EXPECT_EQ(load_denoiser((dir / "l.ckpt").string())->params(), lin.params());
  EXPECT_EQ(params_hash(lin.params()), params_hash(load_denoiser((dir / "l.ckpt").string())->params()));
  std::filesystem::remove_all(dir);
}

TEST(Nn, ParamsHashSensitive) {
  Vector a = Vector::Ones(5), b = a;
  b(3) = std::nextafter(1.0, 2.0);
  EXPECT_NE(params_hash(a), params_hash(b));
  EXPECT_EQ(params_hash(a), params_hash(Vector::Ones(5)));
}

}  // namespace
}  // namespace rsd
