#include "rsd/linear_theory.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "rsd/gaussian_model.hpp"
#include "rsd/quadrature.hpp"

namespace rsd {

TheorySchedule TheorySchedule::geometric(int nodes, double sigma_min, double sigma_max) {
  RSD_REQUIRE(sigma_min > 0.0 && sigma_max >= sigma_min, "schedule: need 0 < sigma_min <= sigma_max");
  const QuadratureRule rule = gauss_legendre_unit(nodes);
  TheorySchedule s;
  s.t = rule.nodes;
  s.weight = rule.weights;
  s.sigma.reserve(rule.nodes.size());
  for (double t : rule.nodes) s.sigma.push_back(sigma_min * std::pow(sigma_max / sigma_min, t));
  return s;
}

TheorySchedule TheorySchedule::from_nodes(std::vector<double> sigma, std::vector<double> weight) {
  RSD_REQUIRE(!sigma.empty() && sigma.size() == weight.size(), "schedule: need matching non-empty node lists");
  double total = 0.0;
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    RSD_REQUIRE(sigma[i] > 0.0, "schedule: sigma_t must be positive");
    RSD_REQUIRE(weight[i] > 0.0, "schedule: weights must be positive");
    total += weight[i];
  }
  TheorySchedule s;
  s.sigma = std::move(sigma);
  for (double w : weight) s.weight.push_back(w / total);
  s.t.resize(s.sigma.size(), 0.0);
  return s;
}

TheoryProblem::TheoryProblem(const CorruptionOperator& a, Vector e, double sigma, TheorySchedule schedule)
    : a_(a.as_matrix()), e_(std::move(e)), sigma_(sigma), schedule_(std::move(schedule)) {
  RSD_REQUIRE(e_.size() == a_.cols(), "TheoryProblem: e has dimension ", e_.size(), ", A has ", a_.cols(), " columns");
  RSD_REQUIRE(std::abs(e_.norm() - 1.0) < 1e-10, "TheoryProblem: e must be a unit vector");
  RSD_REQUIRE(sigma_ > 0.0 && std::isfinite(sigma_), "TheoryProblem: sigma must be positive");
  RSD_REQUIRE(schedule_.size() >= 1, "TheoryProblem: empty schedule");
  double wsum = 0.0;
  for (std::size_t i = 0; i < schedule_.size(); ++i) {
    RSD_REQUIRE(schedule_.sigma[i] > 0.0, "TheoryProblem: sigma_t must be positive");
    wsum += schedule_.weight[i];
  }
  RSD_REQUIRE(std::abs(wsum - 1.0) < 1e-12, "TheoryProblem: schedule weights sum to ", wsum);
  gram_ = a_.transpose() * a_;
  gram_e_ = gram_ * e_;
  ae2_ = (a_ * e_).squaredNorm();
  RSD_REQUIRE(std::sqrt(ae2_) > 1e-8, "TheoryProblem: Ae must be nonzero");
  p_ker_ = rsd::kernel_projector(a);
}

TheoryProblem random_theory_problem(Index d, Index m, double sigma, Rng& rng, TheorySchedule schedule) {
  RSD_REQUIRE(m >= 1 && m <= d, "random_theory_problem: need 1 <= m <= d");
  Matrix a(m, d);
  for (;;) {
    for (Index i = 0; i < m; ++i) {
      for (Index j = 0; j < d; ++j) a(i, j) = rng.normal() / std::sqrt(static_cast<double>(d));
    }
    Eigen::JacobiSVD<Matrix> svd(a);
    if (svd.singularValues()(m - 1) > 1e-3 * svd.singularValues()(0)) break;
  }
  Vector coeff(m);
  for (Index i = 0; i < m; ++i) coeff(i) = rng.normal();
  Vector e = a.transpose() * coeff;
  e /= e.norm();
  return TheoryProblem(CorruptionOperator::dense(a), std::move(e), sigma, std::move(schedule));
}

double eta(double c_t, double ae2) {
  const double s = c_t + ae2;
  return (2.0 * c_t + ae2) / (c_t * c_t * s * s);
}

double eta(const TheoryProblem& p, std::size_t node) {
  RSD_REQUIRE(node < p.schedule().size(), "eta: node index out of range");
  return eta(p.c_t(node), p.ae2());
}

double reduced_loss(const TheoryProblem& p, const Vector& u) {
  RSD_REQUIRE(u.size() == p.dim(), "reduced_loss: dimension mismatch");
  const double g = (p.a() * u).squaredNorm();
  const double h = p.gram_e().dot(u);
  double total = 0.0;
  for (std::size_t k = 0; k < p.schedule().size(); ++k) {
    const double a = p.a_t(k);
    const double c = p.c_t(k);
    const double term = g / (c * c) - eta(c, p.ae2()) * h * h - g / (a * (a + g));
    total += p.schedule().weight[k] * term;
  }
  return total;
}

Vector reduced_loss_grad(const TheoryProblem& p, const Vector& u) {
  RSD_REQUIRE(u.size() == p.dim(), "reduced_loss_grad: dimension mismatch");
  const Vector gu = p.gram() * u;
  const double g = u.dot(gu);
  const double h = p.gram_e().dot(u);
  double coef_u = 0.0;
  double coef_e = 0.0;
  for (std::size_t k = 0; k < p.schedule().size(); ++k) {
    const double a = p.a_t(k);
    const double c = p.c_t(k);
    const double w = p.schedule().weight[k];
    coef_u += w * (1.0 / (c * c) - 1.0 / ((a + g) * (a + g)));
    coef_e += w * eta(c, p.ae2());
  }
  return 2.0 * coef_u * gu - 2.0 * coef_e * h * p.gram_e();
}

double delta(const TheoryProblem& p) {
  double total = 0.0;
  for (std::size_t k = 0; k < p.schedule().size(); ++k) {
    const double s = p.c_t(k) + p.ae2();
    total += p.schedule().weight[k] / (s * s);
  }
  return total;
}

double g_star(const TheoryProblem& p) { return p.sigma() * p.sigma() + p.ae2(); }

double psi(const TheoryProblem& p, double g) {
  RSD_REQUIRE(g >= 0.0, "psi: g must be >= 0");
  double phi = 0.0;
  for (std::size_t k = 0; k < p.schedule().size(); ++k) {
    const double a = p.a_t(k);
    phi += p.schedule().weight[k] * g / (a * (a + g));
  }
  return delta(p) * g - phi;
}

double psi_prime(const TheoryProblem& p, double g) {
  RSD_REQUIRE(g >= 0.0, "psi_prime: g must be >= 0");
  double total = delta(p);
  for (std::size_t k = 0; k < p.schedule().size(); ++k) {
    const double s = p.a_t(k) + g;
    total -= p.schedule().weight[k] / (s * s);
  }
  return total;
}

double lambda_star(const TheoryProblem& p) { return std::sqrt(1.0 + p.sigma() * p.sigma() / p.ae2()); }

double distance_to_optimum_set(const TheoryProblem& p, const Vector& u) {
  RSD_REQUIRE(u.size() == p.dim(), "distance_to_optimum_set: dimension mismatch");
  const Matrix p_row = p.row_projector();
  const Vector pu = p_row * u;
  const Vector target = lambda_star(p) * (p_row * p.e());
  return std::min((pu - target).norm(), (pu + target).norm());
}

MinimizeResult minimize(const TheoryProblem& p, const Vector& u0, const MinimizeOptions& opt, Rng& rng) {
  RSD_REQUIRE(u0.size() == p.dim(), "minimize: dimension mismatch");
  RSD_REQUIRE(opt.ridge >= 0.0, "minimize: ridge must be >= 0");
  RSD_REQUIRE(opt.initial_step > 0.0 && opt.shrink > 0.0 && opt.shrink < 1.0, "minimize: bad line-search settings");
  MinimizeResult res;
  res.u = u0;
  if (u0.squaredNorm() == 0.0) {
    Vector dir(p.dim());
    for (Index i = 0; i < dir.size(); ++i) dir(i) = rng.normal();
    res.u = 1e-3 * dir / dir.norm();
    res.perturbed_start = true;
  }
  auto objective = [&](const Vector& u) { return reduced_loss(p, u) + opt.ridge * u.squaredNorm(); };
  auto gradient = [&](const Vector& u) { Vector g = reduced_loss_grad(p, u); g += 2.0 * opt.ridge * u; return g; };

  double f = objective(res.u);
  Vector grad = gradient(res.u);
  if (!std::isfinite(f)) throw NumericalError("minimize: non-finite objective at the start point");
  res.trace.push_back(f);
  double step = opt.initial_step;
  Vector prev_u, prev_grad;
  for (int it = 0; it < opt.max_iters; ++it) {
    res.grad_norm = grad.norm();
    if (res.grad_norm < opt.tol) {
      res.converged = true;
      break;
    }
    if (it > 0) {
      const Vector s = res.u - prev_u;
      const Vector y = grad - prev_grad;
      const double sy = s.dot(y);
      step = sy > 0.0 ? s.squaredNorm() / sy : opt.initial_step;
    }
    const double gg = grad.squaredNorm();
    Vector candidate;
    double f_new = 0.0;
    bool accepted = false;
    for (int bt = 0; bt < 200; ++bt) {
      candidate = res.u - step * grad;
      f_new = objective(candidate);
      if (std::isfinite(f_new) && f_new <= f - opt.armijo_c * step * gg) {
        accepted = true;
        break;
      }
      step *= opt.shrink;
    }
    if (!accepted) {
      // No decrease representable at this precision: the iterate is as good as it gets.
      break;
    }
    prev_u = res.u;
    prev_grad = grad;
    res.u = candidate;
    f = f_new;
    grad = gradient(res.u);
    res.trace.push_back(f);
    res.iterations = it + 1;
  }
  res.grad_norm = grad.norm();
  if (res.grad_norm < opt.tol) res.converged = true;
  if (!std::isfinite(f)) throw NumericalError("minimize: objective became non-finite");
  if (opt.project_row_space) res.u = p.row_projector() * res.u;
  return res;
}

McEstimate mc_fisher_divergence(const TheoryProblem& p, const Vector& u, Index n, const Rng& rng, par::Mode mode) {
  RSD_REQUIRE(n >= 100, "mc_fisher_divergence: n must be >= 100");
  RSD_REQUIRE(u.size() == p.dim(), "mc_fisher_divergence: dimension mismatch");
  RSD_REQUIRE(u.norm() > 0.0, "mc_fisher_divergence: u = 0 leaves the generator direction undefined");
  const std::size_t nodes = p.schedule().size();
  const Matrix ae = p.a() * p.e();
  const Matrix au = p.a() * u;
  std::vector<Matrix> diff(nodes);
  for (std::size_t k = 0; k < nodes; ++k) {
    diff[k] = woodbury_inverse(p.c_t(k), ae) - woodbury_inverse(p.a_t(k), au);
  }
  std::vector<double> cumulative(nodes);
  double acc = 0.0;
  for (std::size_t k = 0; k < nodes; ++k) cumulative[k] = (acc += p.schedule().weight[k]);

  const Index m = p.measurements();
  const Vector au_vec = au;
  std::vector<double> terms(static_cast<std::size_t>(n));
  par::for_each_index(
      n,
      [&](std::int64_t i) {
        Rng local = rng.stream(stream_tag::kTheory, static_cast<std::uint64_t>(i));
        const double r = local.uniform() * acc;
        auto node = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), r) -
                                             cumulative.begin());
        node = std::min(node, nodes - 1);
        const double xi = local.normal();
        const double st = p.schedule().sigma[node];
        Vector y(m);
        for (Index j = 0; j < m; ++j) y(j) = au_vec(j) * xi + st * local.normal();
        terms[static_cast<std::size_t>(i)] = (diff[node] * y).squaredNorm();
      },
      mode);
  const double mean = par::ordered_sum(terms) / static_cast<double>(n);
  double ss = 0.0;
  for (double t : terms) ss += (t - mean) * (t - mean);
  const double var = ss / static_cast<double>(n - 1);
  return {mean, std::sqrt(var / static_cast<double>(n))};
}

bool trial_passes(const TheoremTrial& t) {
  return t.dist_to_optimum < 1e-3 && std::abs(t.final_loss - t.psi_g_star) < 1e-8 &&
         std::abs(t.w2 - t.w2_expected) < 1e-4;
}

bool TheoremReport::all_pass() const {
  return !trials.empty() && std::all_of(trials.begin(), trials.end(), trial_passes);
}

TheoremReport verify_theorem(const TheoryProblem& p, int trials, const Rng& rng, par::Mode mode) {
  RSD_REQUIRE(trials >= 1, "verify_theorem: need at least one trial");
  RSD_REQUIRE((p.kernel_projector() * p.e()).norm() < 1e-8, "verify_theorem: e must lie in Im(A^T) for the W2 check");
  TheoremReport report;
  report.trials.resize(static_cast<std::size_t>(trials));
  const double psi_star = psi(p, g_star(p));
  const double lam = lambda_star(p);
  par::for_each_index(
      trials,
      [&](std::int64_t k) {
        const auto start = std::chrono::steady_clock::now();
        Rng local = rng.stream(stream_tag::kTheory, static_cast<std::uint64_t>(k));
        Vector u0(p.dim());
        for (Index i = 0; i < u0.size(); ++i) u0(i) = local.normal();
        MinimizeOptions opt;
        opt.ridge = 1e-6;
        opt.project_row_space = true;
        const MinimizeResult res = minimize(p, u0, opt, local);
        TheoremTrial& row = report.trials[static_cast<std::size_t>(k)];
        row.trial = static_cast<int>(k);
        row.final_loss = reduced_loss(p, res.u);
        row.psi_g_star = psi_star;
        row.dist_to_optimum = distance_to_optimum_set(p, res.u);
        row.kernel_norm = (p.kernel_projector() * res.u).norm();
        row.w2 = w2_rank_one(p.e(), res.u);
        row.w2_expected = (lam - 1.0) * (lam - 1.0);
        row.iterations = res.iterations;
        row.converged = res.converged;
        row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      },
      mode);
  return report;
}

}  // namespace rsd
