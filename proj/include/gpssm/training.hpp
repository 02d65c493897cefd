#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gpssm/smoothing.hpp"

namespace gpssm {

// Step-size schedule s_i = a * (b + i)^(-kappa), i starting at 0.
struct ScheduleSpec {
  double a = 1.0;
  double b = 1.0;
  double kappa = 0.7;

  double operator()(Index i) const;
};

enum class TrainingMode { Batch, Svi, Online };
enum class SmootherBackend { Particle, Grid };

struct TrainingConfig {
  TrainingMode mode = TrainingMode::Batch;
  Index segment_length = 0;  // S; Svi mode only (Batch behaves as S = T)
  Index segments_per_iter = 1;
  Index n_particles = 1000;
  Index lag = 10;
  ScheduleSpec rho{1.0, 1.0, 0.7};
  ScheduleSpec lambda{1e-2, 1.0, 0.51};
  Index max_iters = 100;
  double elbo_rel_tol = 1e-3;
  Index elbo_window = 5;
  std::uint64_t master_seed = 0;
  bool learn_hyperparams = true;
  bool learn_inducing = true;
  // Re-place the inducing inputs over the empirical range of the smoothed
  // states after the first smoothing pass.
  bool reinit_inducing = true;
  SmootherBackend smoother = SmootherBackend::Particle;
  GridSpec grid;  // Grid backend only
};

// Validates the configuration: rho must satisfy the stochastic-approximation
// conditions within the built-in schedule family (kappa in (0.5, 1], a in
// (0, 1]), lambda must be positive; Svi requires a segment length.
void validate(const TrainingConfig& config, Index series_length);

struct ProgressRecord {
  Index iteration = 0;
  double elbo = 0;
  double ess_min = 0;
  std::string theta_digest;
};

using ProgressSink = std::function<void(const ProgressRecord&)>;

struct TrainingState {
  GpssmModel model;
  InducingPosterior q_u;
  Index iteration = 0;
  std::vector<double> elbo_trace;
  std::uint64_t master_seed = 0;
  bool converged = false;
  // Carry-over for online mode: the filtered state cloud summary after the
  // last processed segment; the next segment warm-starts from it.
  std::optional<DiagGaussian> filter_carry;
};

// --- log-space hyperparameter vector ------------------------------------

// Flattened view of theta = {log kernel params, log Q, likelihood params,
// inducing inputs}. Used by the gradient-ascent step and by the
// finite-difference checks.
struct ParamVector {
  std::vector<std::string> names;
  Vec values;

  Index size() const { return values.size(); }
};

struct ParamFlags {
  bool hyperparams = true;  // kernel, Q, likelihood
  bool inducing = true;     // z
};

ParamVector pack_theta(const GpssmModel& model, const ParamFlags& flags);
GpssmModel apply_theta(const GpssmModel& model, const ParamFlags& flags, const Vec& values);

// --- ELBO and gradient ----------------------------------------------------

// Monte-Carlo estimate of the bound for a window of observations, decomposed
// term by term. The entropy of q(x) is estimated from the smoother's frozen
// byproducts (log-normalizer estimate minus the mean path log-density), so
// the estimate responds to (model, q) while q(x) stays fixed. When (model, q)
// are exactly the ones the trajectories were smoothed under, the estimate
// reduces to log_normalizer - KL(q(u) || p(u)).
double elbo_estimate(const SparseGp& gp, const InducingPosterior& q,
                     const ParticleTrajectories& traj, const Mat& y);

// Exact-q(x) version of the bound via the grid oracle.
double elbo_estimate(const SparseGp& gp, const InducingPosterior& q,
                     const GridSmoothingResult& grid, const Mat& y);

// Analytic gradient of elbo_estimate with respect to pack_theta(model, flags),
// holding the particle set and q(u) fixed. data_term_scale multiplies the
// per-transition terms (T/S for a subsequence estimate) but not the prior
// term. Throws NumericalError naming the parameter if any component is
// non-finite.
Vec theta_gradient(const SparseGp& gp, const InducingPosterior& q,
                   const ParticleTrajectories& traj, const Mat& y, const ParamFlags& flags,
                   double data_term_scale = 1.0);

// --- statistics estimators --------------------------------------------------

// Scales a segment's sufficient statistics by T/S so that the expectation
// over uniformly chosen segments matches the batch statistics (up to the
// boundary effect: transitions near the ends of the series are covered by
// fewer segments).
SufficientStats svi_stats(const SufficientStats& segment_stats, Index T_total, Index S);

// --- training loops ---------------------------------------------------------

TrainingState train(const Mat& observations, const TrainingConfig& config, GpssmModel init,
                    const ProgressSink& progress = nullptr);

// Accumulates the new segment into the natural parameters (prior = current
// posterior); theta stays fixed. Smoothing runs only on the new segment,
// warm-started from the carried filter state.
TrainingState online_update(TrainingState state, const Mat& new_observations,
                            const TrainingConfig& config);

// Test seam for the exact-additivity contract: per-transition expectations
// supplied by a deterministic provider instead of the particle smoother.
TrainingState online_update_with_stats(TrainingState state, const SufficientStats& stats);

// Damped natural-parameter step q <- q + rho (q_star - q); rho == 1 assigns
// q_star exactly.
InducingPosterior damped_natural_update(const InducingPosterior& q,
                                        const InducingPosterior& q_star, double rho);

std::string theta_digest(const GpssmModel& model);

}  // namespace gpssm
