#pragma once

#include <cstdint>
#include <vector>

#include "gpssm/sparse.hpp"

namespace gpssm {

struct BenchmarkReport {
  double test_rmse = 0;
  double mean_pred_loglik = 0;
  double train_time_s = 0;
  double test_time_s = 0;
  std::string config_fingerprint;
  std::vector<std::uint64_t> seeds;
};

// Piecewise-linear 1D benchmark transition: x + 1 below 4, -4x + 21 from 4 up
// (continuous at the kink). Dynamics N(f(x), 1), observations N(x, 1).
double kink_true_f(double x);

// Simulates the benchmark system exactly: x0 ~ N(0, 1), unit process and
// observation noise. Deterministic given the seed.
Trajectory kink_system_generate(Index T, std::uint64_t seed);

struct TransitionMetrics {
  double rmse = 0;
  double mean_loglik = 0;
};

// RMSE of the one-step predictive mean and the average predictive log-density
// log N(x_next | A mu, B + A Sigma A' + Q) over held-out latent transition
// pairs. test_pairs packs (x_t, x_{t+1}) as rows of width 2D.
TransitionMetrics transition_metrics(const SparseGp& gp, const InducingPosterior& q,
                                     const Mat& test_pairs);

// Least-squares linear AR baseline on the observation sequence. Falls back to
// a ridge-regularized fit (and sets ridge_fallback) when the normal equations
// are rank deficient.
struct LinearArPredictor {
  Vec weights;  // [w_1..w_order, bias]
  double residual_var = 1.0;
  Index order = 1;
  bool ridge_fallback = false;

  // history holds the most recent `order` values, newest last.
  double predict(const Vec& history) const;
};

LinearArPredictor linear_baseline(const Mat& observations, Index order);

// Baseline evaluated with the same semantics as transition_metrics on
// (x_t, x_{t+1}) pairs; supports order 1 pairs directly.
TransitionMetrics evaluate_baseline(const LinearArPredictor& baseline, const Mat& test_pairs);

// Builds (x_t, x_{t+1}) pairs from a simulated latent trajectory.
Mat transition_pairs(const Trajectory& traj);

}  // namespace gpssm
