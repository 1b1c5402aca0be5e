#include <gtest/gtest.h>

#include "oracles.hpp"
#include "rsd/linear_theory.hpp"

namespace rsd {
namespace {

constexpr double kTinySigma = 1e-9;

TheoryProblem axis_problem(Index d, double sigma, TheorySchedule schedule) {
  return TheoryProblem(CorruptionOperator::identity(d), Vector::Unit(d, 0), sigma, std::move(schedule));
}

// A scaled so that |Ae|^2 = ae2 with e = e_1.
TheoryProblem scaled_problem(double ae2, double sigma, TheorySchedule schedule) {
  Matrix a = Matrix::Identity(2, 2);
  a(0, 0) = std::sqrt(ae2);
  return TheoryProblem(CorruptionOperator::dense(a), Vector::Unit(2, 0), sigma, std::move(schedule));
}

TheorySchedule one_node(double sigma_t) { return TheorySchedule::from_nodes({sigma_t}, {1.0}); }

TEST(LinearTheory, EtaExamples) {
  EXPECT_NEAR(eta(1.0 + kTinySigma * kTinySigma, 1.0), 0.75, 1e-12);
  EXPECT_DOUBLE_EQ(eta(2.0, 2.0), 0.09375);
  const auto p = scaled_problem(2.0, 1.0, one_node(1.0));
  EXPECT_DOUBLE_EQ(eta(p, 0), 0.09375);
}

TEST(LinearTheory, ReducedLossExamples) {
  Rng rng(1);
  const auto p = random_theory_problem(6, 3, 0.3, rng);
  // Au = 0: a kernel vector.
  const Vector q = p.kernel_projector() * oracle::random_vector(6, rng);
  EXPECT_NEAR(reduced_loss(p, q), 0.0, 1e-12);
  const auto ax = axis_problem(3, kTinySigma, one_node(1.0));
  EXPECT_NEAR(reduced_loss(ax, Vector::Unit(3, 0)), -0.25, 1e-12);
}

TEST(LinearTheory, ReducedLossMatchesOracle) {
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    const auto p = random_theory_problem(2 + t % 7, 1 + t % 2, 0.05 + rng.uniform(), rng);
    const Vector u = oracle::random_vector(p.dim(), rng);
    EXPECT_NEAR(reduced_loss(p, u),
                oracle::rank_one_loss(p.a(), p.e(), p.sigma(), p.schedule().sigma, p.schedule().weight, u),
                1e-9 * std::max(1.0, std::abs(reduced_loss(p, u))));
  }
}

TEST(LinearTheory, ValueAtOptimumIsPsiOfGStar) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const auto p = random_theory_problem(8, 4, 0.1 + 0.2 * (t % 3), rng);
    const Vector u = lambda_star(p) * p.e();
    // Psi from its definition: Delta g - E_t[g / (a_t (a_t + g))].
    const double g = g_star(p);
    double d = 0.0, phi = 0.0;
    for (std::size_t k = 0; k < p.schedule().size(); ++k) {
      const double w = p.schedule().weight[k], a = p.a_t(k), c = p.c_t(k);
      d += w / ((c + p.ae2()) * (c + p.ae2()));
      phi += w * g / (a * (a + g));
    }
    EXPECT_NEAR(reduced_loss(p, u), d * g - phi, 1e-10 * std::max(1.0, std::abs(d * g - phi)));
    EXPECT_NEAR(psi(p, g), d * g - phi, 1e-10 * std::max(1.0, std::abs(d * g - phi)));
  }
}

TEST(LinearTheory, GradientAtOrigin) {
  Rng rng(4);
  const auto p = random_theory_problem(5, 5, 0.2, rng);
  EXPECT_EQ(reduced_loss_grad(p, Vector::Zero(5)).norm(), 0.0);
}

TEST(LinearTheory, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    const auto p = random_theory_problem(2 + t % 7, 1 + t % 2, 0.05 + rng.uniform(), rng);
    const Vector u = oracle::random_vector(p.dim(), rng);
    const Vector num = oracle::numeric_gradient([&](const Vector& v) { return reduced_loss(p, v); }, u, 1e-5);
    EXPECT_LT(oracle::relative_error(reduced_loss_grad(p, u), num), 1e-5) << "trial " << t;
  }
}

TEST(LinearTheory, GradientVanishesOnOptimumSet) {
  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    const auto p = random_theory_problem(8, 4, 0.1 + 0.1 * (t % 4), rng);
    const Vector q = p.kernel_projector() * oracle::random_vector(8, rng);
    const double sign = t % 2 ? 1.0 : -1.0;
    EXPECT_LT(reduced_loss_grad(p, sign * lambda_star(p) * p.e() + q).norm(), 1e-8);
  }
}

TEST(LinearTheory, DeltaExamples) {
  EXPECT_NEAR(delta(axis_problem(2, kTinySigma, one_node(1.0))), 0.25, 1e-12);
  EXPECT_NEAR(delta(axis_problem(2, kTinySigma, TheorySchedule::from_nodes({1.0, 2.0}, {0.5, 0.5}))), 0.145, 1e-12);
  Rng rng(7);
  for (int t = 0; t < 1000; ++t) {
    const auto p = random_theory_problem(3 + t % 4, 1 + t % 3, 0.01 + rng.uniform(), rng,
                                         TheorySchedule::geometric(8));
    EXPECT_GT(delta(p), 0.0);
  }
}

TEST(LinearTheory, GStarAndLambdaExamples) {
  EXPECT_DOUBLE_EQ(g_star(scaled_problem(2.0, 0.5, one_node(1.0))), 2.25);
  EXPECT_NEAR(g_star(axis_problem(2, kTinySigma, one_node(1.0))), 1.0, 1e-15);
  EXPECT_NEAR(lambda_star(axis_problem(2, kTinySigma, one_node(1.0))), 1.0, 1e-15);
  EXPECT_NEAR(lambda_star(axis_problem(2, 0.2, one_node(1.0))), std::sqrt(1.04), 1e-15);
  EXPECT_NEAR(lambda_star(axis_problem(2, 0.2, one_node(1.0))), 1.019804, 1e-6);
  EXPECT_NEAR(lambda_star(axis_problem(2, 1.0, one_node(1.0))), std::sqrt(2.0), 1e-15);
}

TEST(LinearTheory, PsiSignAnalysis) {
  Rng rng(8);
  for (int t = 0; t < 1000; ++t) {
    const auto p = random_theory_problem(3 + t % 6, 1 + t % 3, 0.01 + rng.uniform(), rng,
                                         TheorySchedule::geometric(16));
    EXPECT_EQ(psi(p, 0.0), 0.0);
    EXPECT_LT(psi_prime(p, 0.0), 0.0);
    const double g = p.sigma() * p.sigma() + p.ae2();
    EXPECT_GT(psi_prime(p, g + 1.0), 0.0);
    EXPECT_GT(psi_prime(p, g * (1.0 + 1e-3)), 0.0);
    EXPECT_NEAR(psi_prime(p, g_star(p)), 0.0, 1e-9 * std::max(1.0, std::abs(psi_prime(p, 0.0))));
  }
}

TEST(LinearTheory, PsiStrictlyConvex) {
  Rng rng(9);
  const auto p = random_theory_problem(8, 4, 0.2, rng);
  const double top = 3.0 * g_star(p), h = top / 200.0;
  for (int i = 1; i <= 100; ++i) {
    const double g = i * h;
    EXPECT_GT(psi(p, g + h) - 2.0 * psi(p, g) + psi(p, g - h), 0.0) << "g = " << g;
  }
}

TEST(LinearTheory, LossBoundedBelowByPsi) {
  Rng rng(10);
  for (int t = 0; t < 100; ++t) {
    const auto p = random_theory_problem(6, 3, 0.05 + rng.uniform(), rng);
    const Vector u = oracle::random_vector(6, rng);
    const double g = (p.a() * u).squaredNorm();
    EXPECT_GE(reduced_loss(p, u), psi(p, g) - 1e-12 * std::max(1.0, std::abs(psi(p, g))));
    // Collinear Au: equality.
    const Vector c = (0.3 + rng.uniform()) * p.e() + p.kernel_projector() * oracle::random_vector(6, rng);
    const double gc = (p.a() * c).squaredNorm();
    EXPECT_NEAR(reduced_loss(p, c), psi(p, gc), 1e-10 * std::max(1.0, std::abs(psi(p, gc))));
  }
}

TEST(LinearTheory, KernelShiftInvariance) {
  Rng rng(11);
  for (int t = 0; t < 50; ++t) {
    const auto p = random_theory_problem(7, 3, 0.3, rng);
    const Vector u = oracle::random_vector(7, rng);
    const Vector q = p.kernel_projector() * oracle::random_vector(7, rng);
    EXPECT_NEAR(reduced_loss(p, u + q), reduced_loss(p, u), 1e-10 * std::max(1.0, std::abs(reduced_loss(p, u))));
  }
}

TEST(LinearTheory, DistanceToOptimumSet) {
  Rng rng(12);
  const auto p = random_theory_problem(6, 3, 0.2, rng);
  EXPECT_NEAR(distance_to_optimum_set(p, lambda_star(p) * p.e()), 0.0, 1e-12);
  const Vector q = p.kernel_projector() * oracle::random_vector(6, rng);
  EXPECT_NEAR(distance_to_optimum_set(p, -lambda_star(p) * p.e() + q), 0.0, 1e-12);
  const Vector row_e = p.row_projector() * p.e();
  EXPECT_NEAR(distance_to_optimum_set(p, Vector::Zero(6)), lambda_star(p) * row_e.norm(), 1e-12);
}

TEST(LinearTheory, MinimizeFromOptimum) {
  Rng rng(13);
  const auto p = random_theory_problem(8, 4, 0.2, rng);
  MinimizeOptions o;
  const auto r = minimize(p, lambda_star(p) * p.e(), o, rng);
  EXPECT_LE(r.iterations, 1);
  EXPECT_LT(distance_to_optimum_set(p, r.u), 1e-8);
}

TEST(LinearTheory, MinimizeRecoversOptimumSet) {
  Rng rng(14);
  for (int t = 0; t < 10; ++t) {
    const auto p = random_theory_problem(8, 4, 0.1 + 0.2 * (t % 3), rng);
    MinimizeOptions o;
    o.ridge = 1e-6;
    o.project_row_space = true;
    const auto r = minimize(p, oracle::random_vector(8, rng), o, rng);
    EXPECT_LT(distance_to_optimum_set(p, r.u), 1e-3);
    EXPECT_LT((p.kernel_projector() * r.u).norm(), 1e-3);
    MinimizeOptions plain;
    const auto r0 = minimize(p, oracle::random_vector(8, rng), plain, rng);
    EXPECT_NEAR(reduced_loss(p, r0.u), psi(p, g_star(p)), 1e-8);
  }
}

TEST(LinearTheory, MinimizePerturbsZeroStart) {
  Rng rng(15);
  const auto p = random_theory_problem(8, 4, 0.2, rng);
  MinimizeOptions o;
  const auto r = minimize(p, Vector::Zero(8), o, rng);
  EXPECT_TRUE(r.perturbed_start);
  EXPECT_LT(distance_to_optimum_set(p, r.u), 1e-3);
  EXPECT_FALSE(r.trace.empty());
}

TEST(LinearTheory, MonteCarloMatchesLossDifferences) {
  Rng rng(16);
  const auto p = random_theory_problem(6, 3, 0.3, rng, TheorySchedule::geometric(16, 0.1, 3.0));
  const Vector u1 = oracle::random_vector(6, rng), u2 = oracle::random_vector(6, rng);
  const auto m1 = mc_fisher_divergence(p, u1, 40000, Rng(1));
  const auto m2 = mc_fisher_divergence(p, u2, 40000, Rng(2));
  const double se = std::hypot(m1.std_error, m2.std_error);
  EXPECT_LT(std::abs((m1.estimate - m2.estimate) - (reduced_loss(p, u1) - reduced_loss(p, u2))), 3.0 * se);
}

TEST(LinearTheory, MonteCarloMinimizedAtOptimum) {
  const auto p = axis_problem(3, 0.3, one_node(0.8));
  const Vector star = lambda_star(p) * p.e();
  const auto at = mc_fisher_divergence(p, star, 40000, Rng(3));
  for (double s : {0.6, 0.8, 1.25, 1.5}) {
    const auto other = mc_fisher_divergence(p, s * star, 40000, Rng(3));
    EXPECT_GT(other.estimate, at.estimate - 3.0 * std::hypot(at.std_error, other.std_error)) << "scale " << s;
  }
}

TEST(LinearTheory, MonteCarloErrorScaling) {
  Rng rng(17);
  const auto p = random_theory_problem(5, 2, 0.3, rng);
  const Vector u = oracle::random_vector(5, rng);
  const auto a = mc_fisher_divergence(p, u, 20000, Rng(4));
  const auto b = mc_fisher_divergence(p, u, 80000, Rng(4));
  EXPECT_NEAR(b.std_error / a.std_error, 0.5, 0.1);
}

TEST(LinearTheory, MonteCarloParallelMatchesSerial) {
  Rng rng(18);
  const auto p = random_theory_problem(5, 2, 0.3, rng);
  const Vector u = oracle::random_vector(5, rng);
  const auto a = mc_fisher_divergence(p, u, 3000, Rng(5), par::Mode::kSerial);
  const auto b = mc_fisher_divergence(p, u, 3000, Rng(5), par::Mode::kParallel);
  EXPECT_EQ(a.estimate, b.estimate);
  EXPECT_EQ(a.std_error, b.std_error);
}

TEST(LinearTheory, VerifyTheoremExamples) {
  const auto tiny = axis_problem(4, 1e-6, TheorySchedule::geometric());
  const auto r0 = verify_theorem(tiny, 1, Rng(6));
  EXPECT_NEAR(r0.trials[0].w2, 0.0, 1e-4);

  const auto p = axis_problem(4, 0.2, TheorySchedule::geometric());
  const auto r = verify_theorem(p, 2, Rng(7));
  ASSERT_EQ(r.trials.size(), 2u);
  for (const auto& t : r.trials) {
    EXPECT_NEAR(t.w2_expected, std::pow(std::sqrt(1.04) - 1.0, 2), 1e-15);
    // Four-digit reference value, within the recovery tolerance.
    EXPECT_NEAR(t.w2_expected, 3.9223e-4, 1e-7);
    EXPECT_NEAR(t.w2, 3.9223e-4, 1e-4);
    EXPECT_LT(t.kernel_norm, 1e-3);
  }
  EXPECT_TRUE(r.all_pass());
}

TEST(LinearTheory, VerifyTheoremParallelMatchesSerial) {
  Rng rng(19);
  const auto p = random_theory_problem(8, 4, 0.2, rng);
  const auto a = verify_theorem(p, 3, Rng(8), par::Mode::kSerial);
  const auto b = verify_theorem(p, 3, Rng(8), par::Mode::kParallel);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(a.trials[static_cast<std::size_t>(i)].final_loss, b.trials[static_cast<std::size_t>(i)].final_loss);
    EXPECT_EQ(a.trials[static_cast<std::size_t>(i)].w2, b.trials[static_cast<std::size_t>(i)].w2);
  }
}

TEST(LinearTheory, ContractChecks) {
  EXPECT_THROW(TheoryProblem(CorruptionOperator::identity(2), Vector::Ones(2), 0.2), ContractError);
  EXPECT_THROW(TheoryProblem(CorruptionOperator::identity(2), Vector::Unit(2, 0), 0.0), ContractError);
  EXPECT_THROW(TheoryProblem(CorruptionOperator::dense(Matrix::Zero(1, 2)), Vector::Unit(2, 0), 0.2), ContractError);
  EXPECT_THROW(TheorySchedule::geometric(8, 0.0, 1.0), ContractError);
}

}  // namespace
}  // namespace rsd
