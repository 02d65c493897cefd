#include <doctest.h>

#include <cmath>

#include "gpssm/rng.hpp"
#include "gpssm/smoothing.hpp"
#include "support/oracles.hpp"

using namespace gpssm;

namespace {

Vec vec1(double x) {
  Vec v(1);
  v[0] = x;
  return v;
}

// Linear-Gaussian auxiliary model x' = f*x + c + w, y = x + v.
AuxiliaryModel linear_aux(double f, double c, double q, double r, double m0 = 0.0,
                          double p0 = 1.0) {
  AuxiliaryModel aux;
  aux.state_dim = 1;
  aux.noise_diag = vec1(q);
  aux.stochastic_dims = {0};
  aux.transition_mean = [f, c](const Vec& x) { return Vec(vec1(f * x[0] + c)); };
  aux.extra_log_weight = [](const Vec&) { return 0.0; };
  aux.obs_log_density = [r](const Vec& y, const Vec& x) {
    const double resid = y[0] - x[0];
    return -0.5 * std::log(2.0 * M_PI * r) - 0.5 * resid * resid / r;
  };
  aux.x0_prior = {vec1(m0), vec1(p0)};
  return aux;
}

Mat simulate_linear(double f, double c, double q, double r, Index T, std::uint64_t seed) {
  RngStream rng(seed);
  Mat y(T, 1);
  double x = rng.normal();
  for (Index t = 0; t < T; ++t) {
    x = f * x + c + std::sqrt(q) * rng.normal();
    y(t, 0) = x + std::sqrt(r) * rng.normal();
  }
  return y;
}

oracles::LinearSsm to_oracle(double f, double c, double q, double r, double m0, double p0) {
  oracles::LinearSsm ssm;
  ssm.F = Mat::Constant(1, 1, f);
  ssm.c = vec1(c);
  ssm.Q = Mat::Constant(1, 1, q);
  ssm.H = Mat::Identity(1, 1);
  ssm.R = Mat::Constant(1, 1, r);
  ssm.m0 = vec1(m0);
  ssm.P0 = Mat::Constant(1, 1, p0);
  return ssm;
}

GpssmModel model_1d(Index m_inducing, double ls = 1.0, double sv = 1.5, double q = 0.4) {
  GpssmModel m;
  m.kernels = {make_kernel(KernelFamily::SquaredExponential, vec1(ls), sv)};
  m.process_noise = vec1(q);
  m.likelihood = gaussian_likelihood(vec1(1.0));
  m.x0_prior = {Vec::Zero(1), Vec::Ones(1)};
  m.inducing_inputs.resize(m_inducing, 1);
  for (Index i = 0; i < m_inducing; ++i) {
    m.inducing_inputs(i, 0) = -2.0 + 4.0 * static_cast<double>(i) /
                                         static_cast<double>(std::max<Index>(1, m_inducing - 1));
  }
  return m;
}

Vec smoothed_mean(const ParticleTrajectories& traj, Index k) {
  const Vec w = traj.normalized_weights();
  Vec mean = Vec::Zero(traj.states[0].cols());
  for (Index l = 0; l < w.size(); ++l) {
    mean += w[l] * traj.states[static_cast<std::size_t>(k)].row(l).transpose();
  }
  return mean;
}

}  // namespace

TEST_CASE("build_auxiliary: extra term vanishes at an inducing input when Sigma ~ 0") {
  const GpssmModel m = model_1d(4);
  const SparseGp gp(m);
  InducingPosterior q;
  const Mat prec = 1e12 * Mat::Identity(4, 4);
  Vec mu(4);
  mu << 0.5, -0.5, 1.0, 0.0;
  q.dims.push_back(natural_to_moments(prec * mu, -0.5 * prec));

  const AuxiliaryModel aux = build_auxiliary(gp, q);
  CHECK(std::abs(aux.extra_log_weight(vec1(m.inducing_inputs(1, 0)))) < 1e-7);
  // Away from the inducing set the term is strictly negative.
  CHECK(aux.extra_log_weight(vec1(10.0)) < -1e-3);
}

TEST_CASE("build_auxiliary: prior q(u) far from the inducing set reverts to N(0, Q)") {
  const GpssmModel m = model_1d(4, 0.5, 2.0, 0.7);
  const SparseGp gp(m);
  const InducingPosterior q = prior_posterior(gp);
  const AuxiliaryModel aux = build_auxiliary(gp, q);
  const Vec far = vec1(60.0);
  CHECK(std::abs(aux.transition_mean(far)[0]) < 1e-10);
  // b + a Sigma a' -> signal variance, so extra -> -sv / (2 q) per GP dim.
  CHECK(aux.extra_log_weight(far) == doctest::Approx(-0.5 * 2.0 / 0.7).epsilon(1e-9));
}

TEST_CASE("extra_log_weight is never positive") {
  const GpssmModel m = model_1d(5);
  const SparseGp gp(m);
  RngStream rng(3);
  InducingPosterior q = prior_posterior(gp);
  const AuxiliaryModel aux = build_auxiliary(gp, q);
  for (int i = 0; i < 100; ++i) {
    CHECK(aux.extra_log_weight(vec1(3.0 * rng.normal())) <= 0.0);
  }
}

TEST_CASE("extra_log_weight is translation covariant with the inducing set") {
  const GpssmModel m = model_1d(4, 0.8, 1.3, 0.5);
  GpssmModel shifted = m;
  const double delta = 2.7;
  shifted.inducing_inputs.array() += delta;
  const SparseGp gp(m), gp_shifted(shifted);
  // Stationarity makes K_uu identical, so the same natural parameters apply.
  const InducingPosterior q = prior_posterior(gp);
  const AuxiliaryModel aux = build_auxiliary(gp, q);
  const AuxiliaryModel aux_shifted = build_auxiliary(gp_shifted, q);
  RngStream rng(5);
  for (int i = 0; i < 50; ++i) {
    const double x = 2.0 * rng.normal();
    CHECK(aux.extra_log_weight(vec1(x)) ==
          doctest::Approx(aux_shifted.extra_log_weight(vec1(x + delta))).epsilon(1e-10));
  }
}

TEST_CASE("smoother rejects bad particle counts and lags") {
  const AuxiliaryModel aux = linear_aux(0.9, 0.0, 0.3, 0.4);
  const Mat y = simulate_linear(0.9, 0.0, 0.3, 0.4, 5, 1);
  CHECK_THROWS_AS(bootstrap_fixed_lag_smoother(aux, y, 1, 10, 0), std::invalid_argument);
  CHECK_THROWS_AS(bootstrap_fixed_lag_smoother(aux, y, 100, 0, 0), std::invalid_argument);
}

TEST_CASE("smoother is deterministic given the seed") {
  const AuxiliaryModel aux = linear_aux(0.9, 0.1, 0.3, 0.4);
  const Mat y = simulate_linear(0.9, 0.1, 0.3, 0.4, 30, 2);
  const ParticleTrajectories a = bootstrap_fixed_lag_smoother(aux, y, 200, 10, 42);
  const ParticleTrajectories b = bootstrap_fixed_lag_smoother(aux, y, 200, 10, 42);
  CHECK((a.log_weights - b.log_weights).cwiseAbs().maxCoeff() == 0.0);
  for (std::size_t k = 0; k < a.states.size(); ++k) {
    CHECK((a.states[k] - b.states[k]).cwiseAbs().maxCoeff() == 0.0);
  }
  CHECK(a.log_normalizer == b.log_normalizer);
}

TEST_CASE("weights normalize and ESS stays within [1, L]") {
  const AuxiliaryModel aux = linear_aux(0.8, 0.0, 0.3, 0.5);
  const Mat y = simulate_linear(0.8, 0.0, 0.3, 0.5, 40, 3);
  const ParticleTrajectories traj = bootstrap_fixed_lag_smoother(aux, y, 300, 10, 9);
  CHECK(traj.normalized_weights().sum() == doctest::Approx(1.0).epsilon(1e-8));
  CHECK(traj.ess >= 1.0);
  CHECK(traj.ess <= 300.0);
  CHECK(traj.ess_min >= 1.0);
  for (const Mat& slice : traj.states) CHECK(slice.allFinite());
}

TEST_CASE("fixed-lag smoothed means match the RTS oracle on a linear-Gaussian model") {
  const double f = 0.85, c = 0.3, q = 0.3, r = 0.4;
  const Index T = 50, L = 1000;
  const AuxiliaryModel aux = linear_aux(f, c, q, r);
  const oracles::LinearSsm ssm = to_oracle(f, c, q, r, 0.0, 1.0);

  for (std::uint64_t seed : {11u, 12u, 13u, 14u, 15u}) {
    const Mat y = simulate_linear(f, c, q, r, T, 1000 + seed);
    const oracles::KalmanResult kal = oracles::kalman_rts(ssm, y);
    const ParticleTrajectories traj = bootstrap_fixed_lag_smoother(aux, y, L, 10, seed);
    for (Index t = 0; t <= T; ++t) {
      const double sd = std::sqrt(kal.smooth_cov[static_cast<std::size_t>(t)](0, 0));
      const double tol = 4.0 * sd / std::sqrt(static_cast<double>(L));
      CHECK(std::abs(smoothed_mean(traj, t)[0] -
                     kal.smooth_mean[static_cast<std::size_t>(t)][0]) < tol);
    }
  }
}

TEST_CASE("single step reduces to importance sampling from the transition prior") {
  const double f = 0.7, c = 0.2, q = 0.4, r = 0.3;
  const AuxiliaryModel aux = linear_aux(f, c, q, r);
  Mat y(1, 1);
  y(0, 0) = 1.1;
  const Index L = 20000;
  const ParticleTrajectories traj = bootstrap_fixed_lag_smoother(aux, y, L, 5, 21);

  // Exact 1D posterior mean oracle by Kalman algebra.
  const oracles::KalmanResult kal = oracles::kalman_rts(to_oracle(f, c, q, r, 0.0, 1.0), y);
  const double post_mean = kal.smooth_mean[1][0];
  const double post_sd = std::sqrt(kal.smooth_cov[1](0, 0));
  CHECK(std::abs(smoothed_mean(traj, 1)[0] - post_mean) <
        4.0 * post_sd / std::sqrt(static_cast<double>(traj.ess)));
}

TEST_CASE("lag >= T fully reindexes: identical output for lag = T and lag = 10T") {
  const AuxiliaryModel aux = linear_aux(0.9, 0.0, 0.25, 0.4);
  const Mat y = simulate_linear(0.9, 0.0, 0.25, 0.4, 25, 4);
  const ParticleTrajectories a = bootstrap_fixed_lag_smoother(aux, y, 150, 25, 31);
  const ParticleTrajectories b = bootstrap_fixed_lag_smoother(aux, y, 150, 250, 31);
  for (std::size_t k = 0; k < a.states.size(); ++k) {
    CHECK((a.states[k] - b.states[k]).cwiseAbs().maxCoeff() == 0.0);
  }
  // A short lag freezes differently.
  const ParticleTrajectories d = bootstrap_fixed_lag_smoother(aux, y, 150, 2, 31);
  double diff = 0;
  for (std::size_t k = 0; k + 1 < a.states.size(); ++k) {
    diff = std::max(diff, (a.states[k] - d.states[k]).cwiseAbs().maxCoeff());
  }
  CHECK(diff > 0.0);
}

TEST_CASE("more particles reduce the variance of the Psi1 estimate") {
  const GpssmModel m = model_1d(3, 1.0, 1.2, 0.5);
  const SparseGp gp(m);
  const InducingPosterior q = prior_posterior(gp);
  const AuxiliaryModel aux = build_auxiliary(gp, q);
  const Mat y = simulate_linear(0.8, 0.0, 0.5, 1.0, 20, 8);

  auto psi1_first = [&](Index L, std::uint64_t seed) {
    const ParticleTrajectories traj = bootstrap_fixed_lag_smoother(aux, y, L, 10, seed);
    return accumulate_stats(gp, traj).psi1[0][1];
  };
  auto variance_over_seeds = [&](Index L) {
    const int n = 50;
    double sum = 0, sum2 = 0;
    for (int s = 0; s < n; ++s) {
      const double v = psi1_first(L, 100 + static_cast<std::uint64_t>(s));
      sum += v;
      sum2 += v * v;
    }
    const double mean = sum / n;
    return sum2 / n - mean * mean;
  };
  const double var_small = variance_over_seeds(100);
  const double var_large = variance_over_seeds(1000);
  // One-sided comparison with a decisive margin (expected ratio ~ 10).
  CHECK(var_small > 2.0 * var_large);
}

TEST_CASE("smoother cross-covariance matches the RTS lag-one oracle") {
  const double f = 0.8, c = 0.0, q = 0.35, r = 0.4;
  const AuxiliaryModel aux = linear_aux(f, c, q, r);
  const oracles::LinearSsm ssm = to_oracle(f, c, q, r, 0.0, 1.0);
  const Index T = 30;
  const Mat y = simulate_linear(f, c, q, r, T, 17);
  const oracles::KalmanResult kal = oracles::kalman_rts(ssm, y);

  double oracle_sum = 0;
  for (Index t = 1; t <= T; ++t) {
    oracle_sum += kal.lag_one_cov[static_cast<std::size_t>(t)](0, 0) +
                  kal.smooth_mean[static_cast<std::size_t>(t)][0] *
                      kal.smooth_mean[static_cast<std::size_t>(t) - 1][0];
  }

  const int n_seeds = 30;
  double sum = 0, sum2 = 0;
  for (int s = 0; s < n_seeds; ++s) {
    const ParticleTrajectories traj =
        bootstrap_fixed_lag_smoother(aux, y, 1000, 10, 500 + static_cast<std::uint64_t>(s));
    const Vec w = traj.normalized_weights();
    double acc = 0;
    for (Index t = 1; t <= T; ++t) {
      for (Index l = 0; l < w.size(); ++l) {
        acc += w[l] * traj.states[static_cast<std::size_t>(t)](l, 0) *
               traj.states[static_cast<std::size_t>(t) - 1](l, 0);
      }
    }
    sum += acc;
    sum2 += acc * acc;
  }
  const double mean = sum / n_seeds;
  const double se = std::sqrt((sum2 / n_seeds - mean * mean) / n_seeds);
  CHECK(std::abs(mean - oracle_sum) < 3.0 * se + 1e-6);
}

TEST_CASE("degenerate weights raise an error naming the step") {
  AuxiliaryModel aux = linear_aux(0.9, 0.0, 0.3, 0.4);
  aux.obs_log_density = [](const Vec&, const Vec&) {
    return -std::numeric_limits<double>::infinity();
  };
  const Mat y = simulate_linear(0.9, 0.0, 0.3, 0.4, 5, 6);
  CHECK_THROWS_AS(bootstrap_fixed_lag_smoother(aux, y, 50, 5, 0), DegenerateWeightsError);
  try {
    bootstrap_fixed_lag_smoother(aux, y, 50, 5, 0);
  } catch (const DegenerateWeightsError& e) {
    CHECK(e.time_index() == 1);
  }
}

// ---- grid oracle ----

TEST_CASE("grid smoother: point-mass transition and likelihood give a delta path") {
  GridSpec grid;
  grid.lo = vec1(0.0);
  grid.hi = vec1(5.0);
  grid.n = Eigen::VectorXi::Constant(1, 5);  // centers 0.5, 1.5, ..., 4.5

  AuxiliaryModel aux;
  aux.state_dim = 1;
  aux.noise_diag = vec1(1e-10);
  aux.stochastic_dims = {0};
  aux.transition_mean = [](const Vec& x) { return Vec(vec1(x[0] + 1.0)); };
  aux.extra_log_weight = [](const Vec&) { return 0.0; };
  aux.obs_log_density = [](const Vec& y, const Vec& x) {
    const double r = y[0] - x[0];
    return -0.5 * r * r / 1e-10;
  };
  aux.x0_prior = {vec1(0.5), vec1(1e-10)};

  Mat y(3, 1);
  y << 1.5, 2.5, 3.5;  // the deterministic path from 0.5
  const GridSmoothingResult res = grid_smoother(aux, y, grid);
  for (Index k = 0; k <= 3; ++k) {
    const Vec marg = res.marginal(k);
    CHECK(marg.sum() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(marg[k] == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("grid smoother marginals sum to one at every step") {
  const AuxiliaryModel aux = linear_aux(0.8, 0.1, 0.4, 0.5);
  const Mat y = simulate_linear(0.8, 0.1, 0.4, 0.5, 6, 7);
  GridSpec grid;
  grid.lo = vec1(-5.0);
  grid.hi = vec1(5.0);
  grid.n = Eigen::VectorXi::Constant(1, 120);
  const GridSmoothingResult res = grid_smoother(aux, y, grid);
  for (Index k = 0; k <= 6; ++k) {
    CHECK(res.marginal(k).sum() == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(res.marginal(k).minCoeff() >= 0.0);
  }
  // Pair marginals are consistent with the one-step marginals.
  const Mat xi = res.pair_marginal(2);
  CHECK((xi.rowwise().sum() - res.marginal(2)).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((xi.colwise().sum().transpose() - res.marginal(3)).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("grid smoother agrees with the Kalman smoother on a linear model") {
  const double f = 0.75, c = 0.2, q = 0.4, r = 0.5;
  const AuxiliaryModel aux = linear_aux(f, c, q, r);
  const Index T = 12;
  const Mat y = simulate_linear(f, c, q, r, T, 9);
  GridSpec grid;
  grid.lo = vec1(-7.0);
  grid.hi = vec1(7.0);
  grid.n = Eigen::VectorXi::Constant(1, 400);
  const GridSmoothingResult res = grid_smoother(aux, y, grid);
  const oracles::KalmanResult kal = oracles::kalman_rts(to_oracle(f, c, q, r, 0.0, 1.0), y);

  for (Index t = 0; t <= T; ++t) {
    const Vec marg = res.marginal(t);
    double mean = 0;
    for (Index i = 0; i < marg.size(); ++i) mean += marg[i] * res.grid().center(i)[0];
    CHECK(mean == doctest::Approx(kal.smooth_mean[static_cast<std::size_t>(t)][0]).epsilon(5e-4).scale(1.0));
  }
  // The discretized normalizer approximates the exact log evidence.
  CHECK(res.log_normalizer() == doctest::Approx(kal.log_evidence).epsilon(1e-6));
}

TEST_CASE("grid smoother matches the bootstrap smoother on a 1D toy problem") {
  const GpssmModel m = model_1d(4, 1.0, 1.0, 0.5);
  const SparseGp gp(m);
  RngStream rng(23);
  Vec mu(4);
  for (Index i = 0; i < 4; ++i) mu[i] = rng.normal();
  InducingPosterior q;
  const Mat prec = 25.0 * Mat::Identity(4, 4);
  q.dims.push_back(natural_to_moments(prec * mu, -0.5 * prec));
  const AuxiliaryModel aux = build_auxiliary(gp, q);

  const Mat y = simulate_linear(0.7, 0.0, 0.5, 1.0, 20, 24);
  GridSpec grid;
  grid.lo = vec1(-8.0);
  grid.hi = vec1(8.0);
  grid.n = Eigen::VectorXi::Constant(1, 320);
  const GridSmoothingResult res = grid_smoother(aux, y, grid);

  const Index L = 4000;
  const ParticleTrajectories traj = bootstrap_fixed_lag_smoother(aux, y, L, 20, 77);
  for (Index t = 0; t <= 20; ++t) {
    const Vec marg = res.marginal(t);
    double mean = 0, second = 0;
    for (Index i = 0; i < marg.size(); ++i) {
      const double ci = res.grid().center(i)[0];
      mean += marg[i] * ci;
      second += marg[i] * ci * ci;
    }
    const double sd = std::sqrt(std::max(1e-12, second - mean * mean));
    CHECK(std::abs(smoothed_mean(traj, t)[0] - mean) <
          5.0 * sd / std::sqrt(static_cast<double>(L)) + 2e-2);
  }
}

TEST_CASE("grid resource guard") {
  const AuxiliaryModel aux = linear_aux(0.9, 0.0, 0.3, 0.4);
  GridSpec grid;
  grid.lo = vec1(-1.0);
  grid.hi = vec1(1.0);
  grid.n = Eigen::VectorXi::Constant(1, 3000);  // 9e6 transition entries
  const Mat y = simulate_linear(0.9, 0.0, 0.3, 0.4, 4, 10);
  CHECK_THROWS_AS(grid_smoother(aux, y, grid), ResourceError);
}

TEST_CASE("auxiliary normalizer is bounded by the heteroscedastic-model evidence") {
  // With q(u) = p(u): log int q~(x) dx <= log evidence of the Markov model
  // whose transitions are N(x' | A(x) u-marginal mean, B(x) + Q + A Sigma A').
  const GpssmModel m = model_1d(6, 1.2, 1.1, 0.5);
  const SparseGp gp(m);
  const InducingPosterior q = prior_posterior(gp);
  const AuxiliaryModel aux = build_auxiliary(gp, q);
  const Mat y = simulate_linear(0.6, 0.0, 0.5, 1.0, 3, 11);

  GridSpec grid;
  grid.lo = vec1(-8.0);
  grid.hi = vec1(8.0);
  grid.n = Eigen::VectorXi::Constant(1, 400);
  const GridSmoothingResult res = grid_smoother(aux, y, grid);

  // Independent nested-quadrature oracle for the Markov-model evidence.
  const Index n = 400;
  const double h = 16.0 / static_cast<double>(n);
  Vec alpha(n);
  Vec centers(n);
  for (Index i = 0; i < n; ++i) {
    centers[i] = -8.0 + (static_cast<double>(i) + 0.5) * h;
    alpha[i] = std::exp(log_density(m.x0_prior, vec1(centers[i]))) * h;
  }
  auto lik = [&](double yv, double x) {
    const double r = yv - x;
    return std::exp(-0.5 * std::log(2.0 * M_PI) - 0.5 * r * r);
  };
  for (Index t = 0; t < 3; ++t) {
    Vec next = Vec::Zero(n);
    for (Index i = 0; i < n; ++i) {
      if (alpha[i] <= 0) continue;
      const TransitionOperators ops = transition_operators(gp, vec1(centers[i]));
      const double mean = ops.a.row(0).dot(q.dims[0].mu);
      const Vec a = ops.a.row(0).transpose();
      const double var = ops.b[0] + 0.5 + a.dot(q.dims[0].sigma * a);
      for (Index j = 0; j < n; ++j) {
        const double rr = centers[j] - mean;
        next[j] += alpha[i] * std::exp(-0.5 * std::log(2.0 * M_PI * var) - 0.5 * rr * rr / var) * h;
      }
    }
    for (Index j = 0; j < n; ++j) next[j] *= lik(y(t, 0), centers[j]);
    alpha = next;
  }
  const double log_markov = std::log(alpha.sum());
  CHECK(res.log_normalizer() <= log_markov + 1e-9);

  // Near-degenerate case: Sigma ~ 0 and dense inducing coverage make the
  // two quantities agree.
  GpssmModel dense = m;
  dense.inducing_inputs.resize(25, 1);
  for (Index i = 0; i < 25; ++i) dense.inducing_inputs(i, 0) = -8.0 + 16.0 * i / 24.0;
  dense.kernels[0].lengthscales[0] = 4.0;
  const SparseGp gp2(dense);
  RngStream rng(12);
  Vec mu(25);
  for (Index i = 0; i < 25; ++i) mu[i] = 0.3 * rng.normal();
  InducingPosterior q2;
  const Mat prec2 = 1e9 * Mat::Identity(25, 25);
  q2.dims.push_back(natural_to_moments(prec2 * mu, -0.5 * prec2));
  const AuxiliaryModel aux2 = build_auxiliary(gp2, q2);
  const GridSmoothingResult res2 = grid_smoother(aux2, y, grid);

  Vec alpha2(n);
  for (Index i = 0; i < n; ++i) {
    alpha2[i] = std::exp(log_density(m.x0_prior, vec1(centers[i]))) * h;
  }
  for (Index t = 0; t < 3; ++t) {
    Vec next = Vec::Zero(n);
    for (Index i = 0; i < n; ++i) {
      if (alpha2[i] <= 0) continue;
      const TransitionOperators ops = transition_operators(gp2, vec1(centers[i]));
      const double mean = ops.a.row(0).dot(mu);
      const double var = ops.b[0] + 0.5;
      for (Index j = 0; j < n; ++j) {
        const double rr = centers[j] - mean;
        next[j] +=
            alpha2[i] * std::exp(-0.5 * std::log(2.0 * M_PI * var) - 0.5 * rr * rr / var) * h;
      }
    }
    for (Index j = 0; j < n; ++j) next[j] *= lik(y(t, 0), centers[j]);
    alpha2 = next;
  }
  CHECK(res2.log_normalizer() == doctest::Approx(std::log(alpha2.sum())).epsilon(1e-4));
}
