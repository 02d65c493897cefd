#include <doctest.h>

#include <cmath>
#include <random>

#include "gpssm/model.hpp"

using namespace gpssm;

namespace {

Vec vec1(double x) {
  Vec v(1);
  v[0] = x;
  return v;
}

GpssmModel tiny_model_1d(double ls = 1.0, double sv = 1.0, double q = 0.5) {
  GpssmModel m;
  m.kernels = {make_kernel(KernelFamily::SquaredExponential, vec1(ls), sv)};
  m.process_noise = vec1(q);
  m.likelihood = gaussian_likelihood(vec1(1.0));
  m.x0_prior = {Vec::Zero(1), Vec::Ones(1)};
  m.inducing_inputs = Mat::Zero(1, 1);
  return m;
}

}  // namespace

TEST_CASE("validate catches the documented invariants") {
  GpssmModel m = tiny_model_1d();
  CHECK_NOTHROW(validate(m));

  SUBCASE("non-positive process noise") {
    m.process_noise[0] = 0.0;
    CHECK_THROWS_AS(validate(m), std::invalid_argument);
  }
  SUBCASE("duplicate inducing inputs") {
    m.inducing_inputs = Mat::Zero(2, 1);
    CHECK_THROWS_AS(validate(m), std::invalid_argument);
  }
  SUBCASE("second order requires D = 2") {
    m.structure = LatentStructure::SecondOrder;
    CHECK_THROWS_AS(validate(m), std::invalid_argument);
  }
  SUBCASE("poisson state index in range") {
    m.likelihood = poisson_likelihood(1.0, 0.0, 3);
    CHECK_THROWS_AS(validate(m), std::invalid_argument);
  }
}

TEST_CASE("log_likelihood closed forms") {
  // Unit-variance Gaussian at its mean: -log sqrt(2 pi).
  const LikelihoodSpec gauss = gaussian_likelihood(vec1(1.0));
  CHECK(log_likelihood(gauss, vec1(0.7), vec1(0.7)) ==
        doctest::Approx(-0.5 * std::log(2.0 * M_PI)).epsilon(1e-12));

  // Poisson with rate e^0 = 1 at count 0: log P = -1.
  const LikelihoodSpec pois0 = poisson_likelihood(0.0, 0.0, 0);
  CHECK(log_likelihood(pois0, vec1(0.0), vec1(0.3)) == doctest::Approx(-1.0).epsilon(1e-12));

  // alpha=1, beta=0, x^(2)=ln 2, y=3: log(2^3 e^-2 / 3!) = 3 ln 2 - 2 - ln 6.
  const LikelihoodSpec pois = poisson_likelihood(1.0, 0.0, 1);
  Vec x(2);
  x << 0.0, std::log(2.0);
  CHECK(log_likelihood(pois, vec1(3.0), x) ==
        doctest::Approx(3.0 * std::log(2.0) - 2.0 - std::log(6.0)).epsilon(1e-12));

  CHECK_THROWS_AS(log_likelihood(pois, vec1(-1.0), x), std::invalid_argument);
  CHECK_THROWS_AS(log_likelihood(pois, vec1(1.5), x), std::invalid_argument);
}

TEST_CASE("apply_structure") {
  GpssmModel m = tiny_model_1d();
  SUBCASE("free mode passes the sample through") {
    CHECK(apply_structure(m, vec1(2.0), vec1(-0.4))[0] == -0.4);
  }
  SUBCASE("second order integrates deterministically") {
    GpssmModel so;
    so.structure = LatentStructure::SecondOrder;
    so.dt = 1.0;
    so.kernels = {make_kernel(KernelFamily::SquaredExponential, Vec::Ones(2), 1.0)};
    so.process_noise = vec1(0.5);
    so.likelihood = poisson_likelihood(1.0, 0.0, 1);
    so.x0_prior = {Vec::Zero(2), Vec::Ones(2)};
    so.inducing_inputs = Mat::Random(4, 2);
    Vec x(2);
    x << 1.0, 2.0;
    const Vec next = apply_structure(so, x, vec1(0.5));
    CHECK(next[0] == doctest::Approx(3.0));
    CHECK(next[1] == doctest::Approx(0.5));

    x << 5.0, 0.0;
    CHECK(apply_structure(so, x, vec1(0.2))[0] == doctest::Approx(5.0));
  }
}

TEST_CASE("gp_predictive_conditional marginal case t=1") {
  const GpssmModel m = tiny_model_1d(1.0, 2.3, 0.5);
  Mat x_hist(1, 1);
  x_hist << 0.7;
  const DiagGaussian g = gp_predictive_conditional(m, Mat(0, 1), x_hist);
  CHECK(g.mean[0] == doctest::Approx(0.0));
  CHECK(g.var[0] == doctest::Approx(2.3).epsilon(1e-12));
}

TEST_CASE("gp_predictive_conditional t=2 matches the hand-computed 1x1 case") {
  const GpssmModel m = tiny_model_1d(1.2, 1.8, 0.5);
  Mat x_hist(2, 1);
  x_hist << 0.3, 1.1;
  Mat f_hist(1, 1);
  f_hist << 0.9;
  const DiagGaussian g = gp_predictive_conditional(m, f_hist, x_hist);
  const double k10 = kernel_value(m.kernels[0], vec1(1.1), vec1(0.3));
  const double k00 = kernel_value(m.kernels[0], vec1(0.3), vec1(0.3));
  CHECK(g.mean[0] == doctest::Approx(k10 / k00 * 0.9).epsilon(1e-10));
  CHECK(g.var[0] == doctest::Approx(1.8 - k10 * k10 / k00).epsilon(1e-8));
}

TEST_CASE("conditioning at a history point with noiseless history has zero variance") {
  const GpssmModel m = tiny_model_1d(0.9, 1.5, 0.5);
  Mat x_hist(3, 1);
  x_hist << -0.4, 0.8, -0.4;  // query equals the first history input
  Mat f_hist(2, 1);
  f_hist << 0.25, -0.6;
  const DiagGaussian g = gp_predictive_conditional(m, f_hist, x_hist);
  CHECK(g.var[0] <= 1e-6);
  CHECK(g.mean[0] == doctest::Approx(0.25).epsilon(1e-4));
}

TEST_CASE("predictive conditional is invariant to permuting the history") {
  const GpssmModel m = tiny_model_1d(1.1, 1.3, 0.5);
  Mat x_hist(4, 1);
  x_hist << 0.1, -0.7, 1.4, 0.5;
  Mat f_hist(3, 1);
  f_hist << 0.2, -0.3, 0.9;
  const DiagGaussian a = gp_predictive_conditional(m, f_hist, x_hist);

  Mat x_perm = x_hist;
  Mat f_perm = f_hist;
  std::swap(x_perm(0, 0), x_perm(2, 0));  // swap history points 0 and 2
  std::swap(f_perm(0, 0), f_perm(2, 0));  // f_{i} pairs with x_{i-1}
  const DiagGaussian b = gp_predictive_conditional(m, f_perm, x_perm);
  CHECK(a.mean[0] == doctest::Approx(b.mean[0]).epsilon(1e-10));
  CHECK(a.var[0] == doctest::Approx(b.var[0]).epsilon(1e-10));
}

TEST_CASE("sample_prior_trajectory is bit-reproducible and degenerate-prior exact") {
  GpssmModel m = tiny_model_1d(1.0, 1.0, 0.3);
  const Trajectory a = sample_prior_trajectory(m, 25, 99);
  const Trajectory b = sample_prior_trajectory(m, 25, 99);
  CHECK((a.states - b.states).cwiseAbs().maxCoeff() == 0.0);
  CHECK((a.observations - b.observations).cwiseAbs().maxCoeff() == 0.0);

  // Vanishing signal variance and process noise force x_t -> 0 for t >= 1.
  GpssmModel flat = tiny_model_1d(1.0, 1e-30, 1e-30);
  const Trajectory c = sample_prior_trajectory(flat, 10, 5);
  for (Index t = 1; t <= 10; ++t) {
    CHECK(std::abs(c.states(t, 0)) < 1e-10);
  }
}

TEST_CASE("empirical marginal: Var(x_1) approximates signal variance plus Q" *
          doctest::timeout(120)) {
  // Monte-Carlo oracle: over many seeds, x_1 = f_1 + v has variance
  // signal_variance + Q (f_1 ~ N(0, k(x0, x0))).
  GpssmModel m = tiny_model_1d(1.0, 1.7, 0.2);
  const int n = 10000;
  double sum = 0, sum2 = 0;
  for (int s = 0; s < n; ++s) {
    const Trajectory t = sample_prior_trajectory(m, 1, static_cast<std::uint64_t>(s));
    sum += t.states(1, 0);
    sum2 += t.states(1, 0) * t.states(1, 0);
  }
  const double mean = sum / n;
  const double var = sum2 / n - mean * mean;
  const double expected = 1.7 + 0.2;
  // 3 standard errors of a variance estimate: var * sqrt(2/n) * 3.
  const double tol = 3.0 * expected * std::sqrt(2.0 / n);
  CHECK(std::abs(var - expected) < tol);
}

TEST_CASE("product of conditionals equals the joint noiseless GP conditional") {
  // For T = 3, D = 1, starting from an augmented joint over (u, f_1:3), the
  // sequential conditionals multiply into
  // N(K_xu K_uu^-1 u, K - K_xu K_uu^-1 K_xu^T), verified against dense
  // Gaussian conditioning.
  const KernelSpec spec = make_kernel(KernelFamily::SquaredExponential, vec1(1.1), 1.4);
  Mat z(2, 1);
  z << -0.5, 1.0;
  Mat x(3, 1);
  x << 0.2, 0.9, -0.8;  // conditioning inputs x_0, x_1, x_2
  Vec u(2);
  u << 0.6, -0.2;

  const Mat kuu = kernel_gram(spec, z, z);
  const Mat kxu = kernel_gram(spec, x, z);
  const Mat kxx = kernel_gram(spec, x, x);

  // Closed form of the product.
  const Mat kuu_inv = kuu.inverse();
  const Vec mean_closed = kxu * kuu_inv * u;
  const Mat cov_closed = kxx - kxu * kuu_inv * kxu.transpose();

  // Dense oracle: condition the Gaussian joint over (u, f_1:3) on u.
  Mat pts(5, 1);
  pts << z(0, 0), z(1, 0), x(0, 0), x(1, 0), x(2, 0);
  const Mat joint = kernel_gram(spec, pts, pts);
  const Mat s_uu = joint.topLeftCorner(2, 2);
  const Mat s_fu = joint.bottomLeftCorner(3, 2);
  const Mat s_ff = joint.bottomRightCorner(3, 3);
  const Vec mean_seq = s_fu * s_uu.inverse() * u;
  const Mat cov_seq = s_ff - s_fu * s_uu.inverse() * s_fu.transpose();

  CHECK((mean_seq - mean_closed).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((cov_seq - cov_closed).cwiseAbs().maxCoeff() < 1e-10);

  // Marginal of each f_t from the product matches the per-step formula.
  for (Index t = 0; t < 3; ++t) {
    const Vec kxu_t = kxu.row(t);
    CHECK(mean_seq[t] == doctest::Approx(kxu_t.dot(kuu_inv * u)).epsilon(1e-10));
    CHECK(cov_seq(t, t) ==
          doctest::Approx(kxx(t, t) - kxu_t.dot(kuu_inv * kxu_t)).epsilon(1e-10));
  }
}
