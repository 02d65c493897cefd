#pragma once

#include <cstdint>
#include <vector>

#include "gpssm/kernel.hpp"
#include "gpssm/types.hpp"

namespace gpssm {

// Free: the GP drives every latent dimension.
// SecondOrder: D = 2; the first state integrates the second
// (x1' = x1 + dt * x2) and a single scalar GP drives the second.
enum class LatentStructure { Free, SecondOrder };

enum class LikelihoodFamily { GaussianDiag, PoissonExp };

// Parametric observation model p(y_t | x_t, theta_y).
//   GaussianDiag: y = x + e, e ~ N(0, diag(r_diag)); requires E = D.
//   PoissonExp:   y ~ Poisson(exp(alpha * x[observed_state_index] + beta)),
//                 scalar counts.
struct LikelihoodSpec {
  LikelihoodFamily family = LikelihoodFamily::GaussianDiag;
  Vec r_diag;
  double alpha = 1.0;
  double beta = 0.0;
  Index observed_state_index = 0;

  Index obs_dim() const {
    return family == LikelihoodFamily::GaussianDiag ? r_diag.size() : 1;
  }
};

LikelihoodSpec gaussian_likelihood(Vec r_diag);
LikelihoodSpec poisson_likelihood(double alpha, double beta, Index observed_state_index);

// The full GP-SSM: per-output-dimension transition kernels, diagonal process
// noise over the GP-driven dimensions, observation likelihood, initial-state
// prior, shared inducing inputs and the latent structure mode.
struct GpssmModel {
  std::vector<KernelSpec> kernels;
  bool shared_kernel = true;
  Vec process_noise;  // one entry per GP-driven dimension
  LikelihoodSpec likelihood;
  DiagGaussian x0_prior;
  Mat inducing_inputs;  // M x D
  LatentStructure structure = LatentStructure::Free;
  double dt = 1.0;

  Index latent_dim() const { return x0_prior.mean.size(); }
  Index gp_output_dim() const {
    return structure == LatentStructure::Free ? latent_dim() : 1;
  }
  Index num_inducing() const { return inducing_inputs.rows(); }

  // Components of a full state that the GP drives (all for Free, the second
  // for SecondOrder).
  Vec gp_components(const Vec& x) const;
};

void validate(const GpssmModel& model);

// Minimum pairwise distance between inducing inputs, after normalizing each
// coordinate by its spread. Used by the distinctness invariant.
double min_inducing_separation(const Mat& inducing_inputs);

struct Trajectory {
  Mat states;        // (T+1) x D, row 0 is x0
  Mat observations;  // T x E; row t-1 holds y_t
};

// Exact log-density / log-mass of one observation.
double log_likelihood(const LikelihoodSpec& lik, const Vec& y, const Vec& x);

// Next-state mean given the current state and a GP output sample:
// Free passes f through; SecondOrder integrates the first component
// deterministically and places the scalar GP output in the second.
Vec apply_structure(const GpssmModel& model, const Vec& x_t, const Vec& f_sample);

// GP predictive conditional p(f_t | f_{1:t-1}, x_{0:t-1}) of the sequential
// prior: x_history holds x_0..x_{t-1} (one per row), f_history holds
// f_1..f_{t-1} where f_i = f(x_{i-1}). Returns the Gaussian over f_t = f(x_{t-1}),
// diagonal across GP output dimensions. For t = 1 this is the GP marginal at x_0.
DiagGaussian gp_predictive_conditional(const GpssmModel& model, const Mat& f_history,
                                       const Mat& x_history);

// Sequential exact sampling from the GP-SSM prior. O(t^3) kernel solves over
// the trajectory so far; intended for illustration-scale T (a few hundred).
Trajectory sample_prior_trajectory(const GpssmModel& model, Index T, std::uint64_t seed);

}  // namespace gpssm
