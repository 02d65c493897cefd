#include "gpssm/model.hpp"

#include <cmath>
#include <limits>

#include "gpssm/errors.hpp"
#include "gpssm/rng.hpp"

namespace gpssm {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

}  // namespace

double log_density(const DiagGaussian& g, const Vec& x) {
  double out = 0;
  for (Index i = 0; i < g.mean.size(); ++i) {
    const double r = x[i] - g.mean[i];
    out += -0.5 * (kLog2Pi + std::log(g.var[i])) - 0.5 * r * r / g.var[i];
  }
  return out;
}

LikelihoodSpec gaussian_likelihood(Vec r_diag) {
  LikelihoodSpec lik;
  lik.family = LikelihoodFamily::GaussianDiag;
  lik.r_diag = std::move(r_diag);
  for (Index i = 0; i < lik.r_diag.size(); ++i) {
    if (!(lik.r_diag[i] > 0)) {
      throw std::invalid_argument("likelihood: observation-noise variances must be positive");
    }
  }
  return lik;
}

LikelihoodSpec poisson_likelihood(double alpha, double beta, Index observed_state_index) {
  LikelihoodSpec lik;
  lik.family = LikelihoodFamily::PoissonExp;
  lik.alpha = alpha;
  lik.beta = beta;
  lik.observed_state_index = observed_state_index;
  return lik;
}

Vec GpssmModel::gp_components(const Vec& x) const {
  if (structure == LatentStructure::Free) return x;
  Vec out(1);
  out[0] = x[1];
  return out;
}

void validate(const GpssmModel& model) {
  const Index d = model.latent_dim();
  if (d < 1) throw std::invalid_argument("model: latent dimension must be >= 1");
  if (model.structure == LatentStructure::SecondOrder && d != 2) {
    throw std::invalid_argument("model: SecondOrder structure requires D = 2");
  }
  if (model.x0_prior.var.size() != d) {
    throw std::invalid_argument("model: x0 prior variance size mismatch");
  }
  if (!(model.x0_prior.var.array() > 0).all()) {
    throw std::invalid_argument("model: x0 prior variances must be positive");
  }
  const Index g = model.gp_output_dim();
  if (static_cast<Index>(model.kernels.size()) != g) {
    throw std::invalid_argument("model: one kernel per GP output dimension required");
  }
  for (const auto& k : model.kernels) {
    validate(k);
    if (k.lengthscales.size() != d) {
      throw std::invalid_argument("model: kernel lengthscale count must equal latent dim");
    }
  }
  if (model.process_noise.size() != g || !(model.process_noise.array() > 0).all()) {
    throw std::invalid_argument("model: process noise must be positive per GP output dim");
  }
  if (model.num_inducing() < 1) {
    throw std::invalid_argument("model: at least one inducing input required");
  }
  if (model.inducing_inputs.cols() != d) {
    throw std::invalid_argument("model: inducing inputs must live in the latent space");
  }
  if (model.num_inducing() > 1 && min_inducing_separation(model.inducing_inputs) <= 1e-8) {
    throw std::invalid_argument("model: inducing inputs must be pairwise distinct");
  }
  if (model.likelihood.family == LikelihoodFamily::GaussianDiag &&
      model.likelihood.obs_dim() != d) {
    throw std::invalid_argument("model: GaussianDiag likelihood requires E = D");
  }
  if (model.likelihood.family == LikelihoodFamily::PoissonExp &&
      (model.likelihood.observed_state_index < 0 || model.likelihood.observed_state_index >= d)) {
    throw std::invalid_argument("model: observed_state_index out of range");
  }
  if (!(model.dt > 0)) throw std::invalid_argument("model: dt must be positive");
}

double min_inducing_separation(const Mat& z) {
  Vec spread = Vec::Ones(z.cols());
  for (Index c = 0; c < z.cols(); ++c) {
    const double s = z.col(c).maxCoeff() - z.col(c).minCoeff();
    if (s > 0) spread[c] = s;
  }
  double best = std::numeric_limits<double>::infinity();
  for (Index i = 0; i < z.rows(); ++i) {
    for (Index j = i + 1; j < z.rows(); ++j) {
      const double d = ((z.row(i) - z.row(j)).transpose().array() / spread.array())
                           .matrix()
                           .norm();
      best = std::min(best, d);
    }
  }
  return best;
}

double log_likelihood(const LikelihoodSpec& lik, const Vec& y, const Vec& x) {
  switch (lik.family) {
    case LikelihoodFamily::GaussianDiag: {
      double out = 0;
      for (Index e = 0; e < lik.r_diag.size(); ++e) {
        const double r = y[e] - x[e];
        out += -0.5 * (kLog2Pi + std::log(lik.r_diag[e])) - 0.5 * r * r / lik.r_diag[e];
      }
      return out;
    }
    case LikelihoodFamily::PoissonExp: {
      const double count = y[0];
      if (count < 0 || std::floor(count) != count) {
        throw std::invalid_argument("log_likelihood: Poisson counts must be non-negative integers");
      }
      const double log_rate = lik.alpha * x[lik.observed_state_index] + lik.beta;
      return count * log_rate - std::exp(log_rate) - std::lgamma(count + 1.0);
    }
  }
  throw std::invalid_argument("log_likelihood: unknown family");
}

Vec apply_structure(const GpssmModel& model, const Vec& x_t, const Vec& f_sample) {
  if (model.structure == LatentStructure::Free) return f_sample;
  if (x_t.size() != 2) {
    throw ConfigError("apply_structure: SecondOrder structure requires D = 2", "model.structure");
  }
  Vec out(2);
  out[0] = x_t[0] + model.dt * x_t[1];
  out[1] = f_sample[0];
  return out;
}

DiagGaussian gp_predictive_conditional(const GpssmModel& model, const Mat& f_history,
                                       const Mat& x_history) {
  const Index t = x_history.rows();
  if (t < 1) throw std::invalid_argument("gp_predictive_conditional: empty state history");
  if (f_history.rows() != t - 1) {
    throw std::invalid_argument("gp_predictive_conditional: history lengths inconsistent");
  }
  const Index g = model.gp_output_dim();
  const Vec x_query = x_history.row(t - 1);

  DiagGaussian out{Vec::Zero(g), Vec::Zero(g)};
  if (t == 1) {
    for (Index d = 0; d < g; ++d) {
      out.var[d] = kernel_value(model.kernels[d], x_query, x_query);
    }
    return out;
  }

  const Mat inputs = x_history.topRows(t - 1);  // x_0..x_{t-2}
  for (Index d = 0; d < g; ++d) {
    const KernelSpec& spec = model.kernels[d];
    const PsdMatrix k_hist = robust_factor(kernel_gram(spec, inputs, inputs));
    const Mat cross = kernel_gram(spec, inputs, x_query.transpose());  // (t-1) x 1
    const Vec alpha = k_hist.solve(Vec(cross.col(0)));
    out.mean[d] = alpha.dot(f_history.col(d));
    out.var[d] = std::max(0.0, kernel_value(spec, x_query, x_query) - cross.col(0).dot(alpha));
  }
  return out;
}

Trajectory sample_prior_trajectory(const GpssmModel& model, Index T, std::uint64_t seed) {
  if (T < 1) throw std::invalid_argument("sample_prior_trajectory: T must be >= 1");
  validate(model);
  const Index d = model.latent_dim();
  const Index g = model.gp_output_dim();

  RngStream rng(mix_seed(seed, 0x7261ECULL));
  Trajectory traj;
  traj.states.resize(T + 1, d);
  traj.observations.resize(T, model.likelihood.obs_dim());

  for (Index i = 0; i < d; ++i) {
    traj.states(0, i) = model.x0_prior.mean[i] + std::sqrt(model.x0_prior.var[i]) * rng.normal();
  }

  Mat f_history(0, g);
  for (Index t = 1; t <= T; ++t) {
    const DiagGaussian pred =
        gp_predictive_conditional(model, f_history, traj.states.topRows(t));
    Vec f_t(g);
    for (Index k = 0; k < g; ++k) {
      f_t[k] = pred.mean[k] + std::sqrt(std::max(0.0, pred.var[k])) * rng.normal();
    }
    f_history.conservativeResize(t, g);
    f_history.row(t - 1) = f_t;

    const Vec mean_next = apply_structure(model, traj.states.row(t - 1), f_t);
    Vec x_t = mean_next;
    if (model.structure == LatentStructure::Free) {
      for (Index k = 0; k < d; ++k) {
        x_t[k] += std::sqrt(model.process_noise[k]) * rng.normal();
      }
    } else {
      x_t[1] += std::sqrt(model.process_noise[0]) * rng.normal();
    }
    traj.states.row(t) = x_t;

    if (model.likelihood.family == LikelihoodFamily::GaussianDiag) {
      for (Index e = 0; e < d; ++e) {
        traj.observations(t - 1, e) = x_t[e] + std::sqrt(model.likelihood.r_diag[e]) * rng.normal();
      }
    } else {
      const double rate =
          std::exp(model.likelihood.alpha * x_t[model.likelihood.observed_state_index] +
                   model.likelihood.beta);
      std::poisson_distribution<long> pois(rate);
      traj.observations(t - 1, 0) = static_cast<double>(pois(rng.engine()));
    }
  }
  return traj;
}

}  // namespace gpssm
