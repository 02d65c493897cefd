#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "gpssm/sparse.hpp"

namespace gpssm {

// The auxiliary Markovian state-space model whose smoothing distribution is
// the optimal q(x): Gaussian transition N(x_t | A(x_{t-1}) mu, Q) with an
// extra multiplicative likelihood term exp(extra_log_weight(x_{t-1})).
// Deterministic dimensions (the integrator component in SecondOrder mode)
// carry no transition density; they are propagated exactly.
struct AuxiliaryModel {
  Index state_dim = 0;
  std::function<Vec(const Vec&)> transition_mean;           // full next-state mean
  Vec noise_diag;                                           // per stochastic dim
  std::vector<Index> stochastic_dims;                       // indices into the state
  std::function<double(const Vec&)> extra_log_weight;       // <= 0 always
  std::function<double(const Vec& y, const Vec& x)> obs_log_density;
  DiagGaussian x0_prior;

  // log N(x_next | transition_mean(x_prev), Q) over the stochastic dims.
  double transition_log_density(const Vec& x_prev, const Vec& x_next) const;
};

AuxiliaryModel build_auxiliary(const SparseGp& gp, const InducingPosterior& q);

// L weighted latent trajectories over a smoothing window. states is
// time-major: entry k is an L x D matrix of particle states at window
// position k; position 0 is the pre-state (x_{tau-1}, or x_0 for a window
// starting at the series head). log_weights are the final unnormalized filter
// weights; normalized_weights() exposes the simplex form.
//
// step_log_weights[k] snapshots the (unnormalized) filter weights right after
// window step k, once any resampling at that step has been applied. Position
// k of the trajectory buffer is last reindexed at step k + lag, so the
// snapshot at min(k + lag, n) is the freeze-time weighting that the fixed-lag
// marginal and statistics estimators use.
struct ParticleTrajectories {
  std::vector<Mat> states;
  Vec log_weights;
  std::vector<Vec> step_log_weights;
  double ess = 0;      // at the final step
  double ess_min = 0;  // minimum over the window
  Index lag = 0;
  std::uint64_t seed = 0;

  // Byproducts frozen at smoothing time, used by the ELBO estimate:
  // the SMC estimate of the auxiliary model's log-normalizer over the stored
  // window, and each trajectory's log-density under the auxiliary model.
  double log_normalizer = 0;
  Vec log_path_density;
  // True when the pre-state column was drawn directly from the x0 prior
  // (window at the series head, no warm-up).
  bool prestate_from_prior = true;

  Index n_particles() const { return log_weights.size(); }
  Index n_transitions() const {
    return states.empty() ? 0 : static_cast<Index>(states.size()) - 1;
  }
  Vec normalized_weights() const;
  // Freeze-time weights for window position k.
  Vec freeze_weights(Index k) const;
  // Fixed-lag smoothed marginal mean at window position k.
  Vec smoothed_mean(Index k) const;
  double min_ess() const { return ess_min; }
};

struct SmootherOptions {
  Index n_particles = 1000;
  Index lag = 10;
  std::uint64_t seed = 0;
  // Number of warm-up filter steps before the stored window; warm-up
  // particles start from the auxiliary model's x0 prior unless
  // warm_start_states is set (then rows are resampled as the pre-state pool).
  Index warmup_steps = 0;
  const Mat* warm_start_states = nullptr;
  const Vec* warm_start_log_weights = nullptr;
  // Observations for the warm-up steps (warmup_steps rows), optional.
  const Mat* warmup_observations = nullptr;
};

// Bootstrap particle filter with fixed-lag trajectory freezing and
// ESS-triggered systematic resampling (threshold L/2). Weights combine the
// observation density with exp(extra_log_weight). Throws
// DegenerateWeightsError when every particle weight underflows at some step.
ParticleTrajectories bootstrap_fixed_lag_smoother(const AuxiliaryModel& aux, const Mat& y,
                                                  Index n_particles, Index lag,
                                                  std::uint64_t seed);
ParticleTrajectories bootstrap_fixed_lag_smoother(const AuxiliaryModel& aux, const Mat& y,
                                                  const SmootherOptions& opts);

// Convenience wrapper matching the statistics contract.
SufficientStats accumulate_stats(const SparseGp& gp, const ParticleTrajectories& traj);

// ---- exact discretized smoothing (test oracle for D <= 2) ----

struct GridSpec {
  Vec lo;
  Vec hi;
  Eigen::VectorXi n;  // cells per dimension

  Index n_cells() const;
  Vec center(Index flat_index) const;
  double cell_volume() const;
};

// Exact forward-backward smoothing of the auxiliary model on a regular grid
// (midpoint discretization: densities evaluated at cell centers). Exposes
// smoothed marginals, pairwise marginals, the log-normalizer of the
// discretized unnormalized density, and the Markov-chain entropy of the
// discrete smoothing distribution.
class GridSmoothingResult {
 public:
  GridSmoothingResult(GridSpec grid, const AuxiliaryModel& aux, const Mat& y);

  const GridSpec& grid() const { return grid_; }
  Index n_steps() const { return n_steps_; }

  // Smoothed marginal over cells at window position k (0 = pre-state).
  Vec marginal(Index k) const;
  // Pairwise smoothed marginal over (x_{k}, x_{k+1}) cells; (i, j) indexing.
  Mat pair_marginal(Index k) const;

  double log_normalizer() const { return log_normalizer_; }
  double entropy() const;

  SufficientStats accumulate_stats(const SparseGp& gp) const;

  // Expectation of a function of (x_prev, x_next) summed over transitions,
  // and of a function of x at one position.
  double expect_pairs(const std::function<double(Index t, const Vec&, const Vec&)>& f) const;
  double expect_at(Index k, const std::function<double(const Vec&)>& f) const;

 private:
  // Time-homogeneous log transition weights (extra term folded in), row = source.
  Mat build_transition_matrix() const;

  GridSpec grid_;
  AuxiliaryModel aux_;
  Mat y_;
  Index n_steps_ = 0;
  Mat log_alpha_;  // (n_steps+1) x n_cells, filtered (log-space, normalized per row)
  Mat log_beta_;   // backward messages
  Mat log_trans_;
  Vec row_log_norm_;
  double log_normalizer_ = 0;
  std::vector<Vec> centers_;
};

GridSmoothingResult grid_smoother(const AuxiliaryModel& aux, const Mat& y, const GridSpec& grid);

}  // namespace gpssm
