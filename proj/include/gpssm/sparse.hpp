#pragma once

#include <cstdint>
#include <vector>

#include "gpssm/model.hpp"

namespace gpssm {

// Gaussian over one output dimension's inducing values, kept simultaneously
// in natural parameters (eta1, eta2) and moments (mu, sigma). All damped
// updates happen in natural-parameter space; moments are re-derived so that
// mu = sigma * eta1 and sigma = (-2 eta2)^{-1} always hold.
struct NatGaussian {
  Vec eta1;
  Mat eta2;
  Vec mu;
  Mat sigma;
};

struct InducingPosterior {
  std::vector<NatGaussian> dims;

  Index num_inducing() const { return dims.empty() ? 0 : dims[0].eta1.size(); }
};

// Rebuilds (mu, sigma) from (eta1, eta2) and enforces the consistency
// invariant. Throws SingularMatrixError when -2*eta2 is not positive definite.
NatGaussian natural_to_moments(Vec eta1, Mat eta2);

void check_consistency(const InducingPosterior& q);

// Monte-Carlo estimates of the expectations the optimal q(u) depends on,
// summed over a window's transitions:
//   psi1[d] = sum_t < k_u(x_{t-1}) * x_t[d] >,
//   psi2[d] = sum_t < k_u(x_{t-1}) k_u(x_{t-1})^T >.
struct SufficientStats {
  std::vector<Vec> psi1;
  std::vector<Mat> psi2;
  double effective_count = 0;  // number of transition terms accumulated

  SufficientStats& operator+=(const SufficientStats& other);
  SufficientStats& scale(double factor);
};

SufficientStats zero_stats(Index gp_dims, Index num_inducing);

// A(x) rows per GP output dimension (K_{x,u} K_{uu}^{-1}) and the residual
// conditional variances B(x).
struct TransitionOperators {
  Mat a;  // G x M
  Vec b;  // G
};

// Model plus cached inducing-point factorizations; the workhorse handle for
// all sparse-GP operations. Rebuild after any change to kernels or z.
class SparseGp {
 public:
  explicit SparseGp(GpssmModel model);

  const GpssmModel& model() const { return model_; }
  const PsdMatrix& kuu(Index d) const { return kuu_[static_cast<std::size_t>(d)]; }
  const Mat& kuu_inv(Index d) const { return kuu_inv_[static_cast<std::size_t>(d)]; }
  Index gp_output_dim() const { return model_.gp_output_dim(); }
  Index num_inducing() const { return model_.num_inducing(); }

  // k_u(x) for dimension d: M-vector of kernel values against the inducing inputs.
  Vec ku(Index d, const Vec& x) const;

 private:
  GpssmModel model_;
  std::vector<PsdMatrix> kuu_;
  std::vector<Mat> kuu_inv_;
};

TransitionOperators transition_operators(const SparseGp& gp, const Vec& x_prev);

// q(u) equal to the prior p(u) = N(0, K_uu): eta1 = 0, eta2 = -1/2 K_uu^{-1}.
InducingPosterior prior_posterior(const SparseGp& gp);

// Analytic inner integral Phi(x_t, x_{t-1}, u) = -1/2 tr(Q^{-1} B) +
// log N(gp_targets(x_t) | A u, Q), and its expectation under q(u).
// u_point holds one column of inducing values per GP output dimension.
double phi(const SparseGp& gp, const Vec& x_t, const Vec& x_prev, const Mat& u_point);
double phi(const SparseGp& gp, const Vec& x_t, const Vec& x_prev, const InducingPosterior& q);

// Operator-level forms, used for the trace-monotonicity property and by the
// training internals. targets holds the GP-driven components of x_t.
double phi_from_operators(const TransitionOperators& ops, const Vec& q_diag, const Vec& targets,
                          const Mat& u_point);
double phi_from_operators(const TransitionOperators& ops, const Vec& q_diag, const Vec& targets,
                          const InducingPosterior& q);

// Weighted accumulation of the sufficient statistics over explicit particle
// states: states[k] is an L x D matrix giving each particle's state at window
// position k (position 0 is the pre-state). Weights must be normalized;
// throws std::invalid_argument when they do not sum to 1 within 1e-8.
// Compensated summation keeps long-window accumulation associative to ~1e-10.
// The second overload takes one weight vector per transition.
SufficientStats accumulate_stats_weighted(const SparseGp& gp, const std::vector<Mat>& states,
                                          const Vec& weights);
SufficientStats accumulate_stats_weighted(const SparseGp& gp, const std::vector<Mat>& states,
                                          const std::vector<Vec>& transition_weights);

// Optimal q(u) per output dimension from the sufficient statistics:
//   eta1 = Q^{-1} K_uu^{-1} Psi1,
//   eta2 = -1/2 (K_uu^{-1} + Q^{-1} K_uu^{-1} Psi2 K_uu^{-1}).
InducingPosterior optimal_qu(const SparseGp& gp, const SufficientStats& stats);

// KL(q(u) || p(u)) with p(u) = N(0, K_uu), summed over output dimensions.
double kl_qu_pu(const SparseGp& gp, const InducingPosterior& q);

// Per-(gp, q) cache so predictions cost O(M) for the mean and O(M^2) for the
// variance: alpha = K_uu^{-1} mu and W = K_uu^{-1} Sigma K_uu^{-1}.
struct PredictorCache {
  std::vector<Vec> alpha;
  std::vector<Mat> w;
};

PredictorCache make_predictor_cache(const SparseGp& gp, const InducingPosterior& q);

// Predictive distribution over the GP output at x_star:
// N(A_* mu, B_* + A_* Sigma A_*^T), diagonal across output dimensions.
DiagGaussian predict_transition(const SparseGp& gp, const InducingPosterior& q, const Vec& x_star);
DiagGaussian predict_transition(const SparseGp& gp, const PredictorCache& cache, const Vec& x_star);

enum class RolloutMode {
  MeanOnly,            // propagate predictive means
  NoiseFree,           // one inducing-value draw held for the whole rollout,
                       // per-step residual-B sampling, no process noise
  SampleFunctionFree,  // per-step independent draws from the full predictive,
                       // no process noise; successive draws are treated as
                       // conditionally independent given the inducing values
};

struct RolloutResult {
  Mat states;  // (horizon+1) x D, row 0 = x0
};

RolloutResult rollout(const SparseGp& gp, const InducingPosterior& q, const Vec& x0,
                      Index horizon, RolloutMode mode, std::uint64_t seed);

}  // namespace gpssm
