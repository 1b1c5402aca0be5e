#pragma once

// The rank-one linear model: data x = e z, observations y = A x + sigma eps,
// generator x = u (v.z) with v = u/|u|. With perfect scores the distillation
// objective, as a function of u, differs by a u-independent constant from
//
//   L(u) = E_t[ c_t^-2 g - eta_t h^2 - g / (a_t (a_t + g)) ],
//   g = |Au|^2, h = e^T A^T A u, a_t = sigma_t^2, c_t = a_t + sigma^2,
//
// whose minimizers are {+-lambda* e} + ker(A), lambda* = sqrt(1 + sigma^2/|Ae|^2).
// Expectations over t use a Gauss-Legendre rule on [0, 1].

#include <string>
#include <vector>

#include "rsd/common.hpp"
#include "rsd/operators.hpp"
#include "rsd/parallel.hpp"
#include "rsd/rng.hpp"

namespace rsd {

struct TheorySchedule {
  std::vector<double> t;
  std::vector<double> sigma;   // sigma_t at each node
  std::vector<double> weight;  // sums to 1

  std::size_t size() const { return t.size(); }
  // sigma_t = sigma_min (sigma_max / sigma_min)^t on an n-node rule.
  static TheorySchedule geometric(int nodes = 64, double sigma_min = 0.02, double sigma_max = 10.0);
  // Explicit nodes; weights are normalized to sum to 1.
  static TheorySchedule from_nodes(std::vector<double> sigma, std::vector<double> weight);
};

class TheoryProblem {
 public:
  TheoryProblem(const CorruptionOperator& a, Vector e, double sigma, TheorySchedule schedule = TheorySchedule::geometric());

  const Matrix& a() const { return a_; }
  const Vector& e() const { return e_; }
  double sigma() const { return sigma_; }
  const TheorySchedule& schedule() const { return schedule_; }
  Index dim() const { return a_.cols(); }
  Index measurements() const { return a_.rows(); }
  const Matrix& gram() const { return gram_; }
  const Vector& gram_e() const { return gram_e_; }
  // |Ae|^2
  double ae2() const { return ae2_; }
  const Matrix& kernel_projector() const { return p_ker_; }
  Matrix row_projector() const { return Matrix::Identity(dim(), dim()) - p_ker_; }

  double a_t(std::size_t node) const { return schedule_.sigma[node] * schedule_.sigma[node]; }
  double c_t(std::size_t node) const { return a_t(node) + sigma_ * sigma_; }

 private:
  Matrix a_;
  Vector e_;
  double sigma_;
  TheorySchedule schedule_;
  Matrix gram_;
  Vector gram_e_;
  double ae2_;
  Matrix p_ker_;
};

// Random full-row-rank Gaussian A (m x d) and a unit e in Im(A^T).
TheoryProblem random_theory_problem(Index d, Index m, double sigma, Rng& rng,
                                    TheorySchedule schedule = TheorySchedule::geometric());

double eta(double c_t, double ae2);
double eta(const TheoryProblem& p, std::size_t node);

double reduced_loss(const TheoryProblem& p, const Vector& u);
Vector reduced_loss_grad(const TheoryProblem& p, const Vector& u);

double delta(const TheoryProblem& p);
double g_star(const TheoryProblem& p);
double psi(const TheoryProblem& p, double g);
double psi_prime(const TheoryProblem& p, double g);
double lambda_star(const TheoryProblem& p);
double distance_to_optimum_set(const TheoryProblem& p, const Vector& u);

struct MinimizeOptions {
  double ridge = 0.0;
  int max_iters = 20000;
  double tol = 1e-10;        // on the gradient norm of L + ridge |u|^2
  double initial_step = 0.1;
  double armijo_c = 1e-4;
  double shrink = 0.5;
  // Project the result onto the row space of A (drops the ker(A) part).
  bool project_row_space = false;
};

struct MinimizeResult {
  Vector u;
  std::vector<double> trace;  // objective value per iteration, starting at u0
  int iterations = 0;
  bool converged = false;
  bool perturbed_start = false;
  double grad_norm = 0.0;
};

// Gradient descent with Armijo backtracking. The first trial step is
// initial_step, later ones use the Barzilai-Borwein length. A zero start is
// replaced by a 1e-3-scaled random unit vector drawn from rng.
MinimizeResult minimize(const TheoryProblem& p, const Vector& u0, const MinimizeOptions& options, Rng& rng);

struct McEstimate {
  double estimate = 0.0;
  double std_error = 0.0;
};

// Monte-Carlo Fisher divergence between the corrupted data score and the
// corrupted generator score at matched noise levels, under the generator's
// corrupted law. t is drawn from the schedule weights. Draw i uses stream
// (kTheory, i) of rng.
McEstimate mc_fisher_divergence(const TheoryProblem& p, const Vector& u, Index n, const Rng& rng,
                                par::Mode mode = par::Mode::kParallel);

struct TheoremTrial {
  int trial = 0;
  double final_loss = 0.0;
  double psi_g_star = 0.0;
  double dist_to_optimum = 0.0;
  double kernel_norm = 0.0;  // |P_ker u_hat|
  double w2 = 0.0;           // w2_rank_one(e, u_hat)
  double w2_expected = 0.0;  // (lambda* - 1)^2
  int iterations = 0;
  bool converged = false;
  double wall_seconds = 0.0;
};

struct TheoremReport {
  std::vector<TheoremTrial> trials;
  // All trials meet: dist < 1e-3, |loss - Psi(g*)| < 1e-8, |w2 - expected| < 1e-4.
  bool all_pass() const;
};

bool trial_passes(const TheoremTrial& trial);

// Trial k starts from a Gaussian u0 drawn from stream (kTheory, k) and runs
// minimize with ridge 1e-6 followed by the row-space projection.
TheoremReport verify_theorem(const TheoryProblem& p, int trials, const Rng& rng,
                             par::Mode mode = par::Mode::kParallel);

}  // namespace rsd
