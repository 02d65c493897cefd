#include "gpssm/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <memory>
#include <sstream>

#include "gpssm/errors.hpp"
#include "gpssm/rng.hpp"

namespace gpssm {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Per-dimension cached quantities for the Phi-term math at one input point.
struct PointOps {
  Vec k;        // k_u(x_prev)
  Vec v;        // K_uu^{-1} k
  double b = 0;
  double smear = 0;  // v' Sigma v
  double mean = 0;   // k' alpha = A mu
};

struct DimCache {
  Mat kinv;
  Mat sigma;
  Vec mu;
  Vec alpha;  // K_uu^{-1} mu
  double kappa = 0;
  double q = 0;
};

std::vector<DimCache> make_dim_caches(const SparseGp& gp, const InducingPosterior& q) {
  std::vector<DimCache> out;
  for (Index d = 0; d < gp.gp_output_dim(); ++d) {
    DimCache c;
    c.kinv = gp.kuu_inv(d);
    c.sigma = q.dims[static_cast<std::size_t>(d)].sigma;
    c.mu = q.dims[static_cast<std::size_t>(d)].mu;
    c.alpha = gp.kuu(d).solve(c.mu);
    c.kappa = gp.model().kernels[static_cast<std::size_t>(d)].signal_variance;
    c.q = gp.model().process_noise[d];
    out.push_back(std::move(c));
  }
  return out;
}

PointOps point_ops(const SparseGp& gp, const DimCache& c, Index d, const Vec& x_prev) {
  PointOps o;
  o.k = gp.ku(d, x_prev);
  o.v = c.kinv * o.k;
  o.b = std::max(0.0, c.kappa - o.k.dot(o.v));
  o.smear = o.v.dot(c.sigma * o.v);
  o.mean = o.k.dot(c.alpha);
  return o;
}

double phi_expected(const DimCache& c, const PointOps& o, double target) {
  const double r = target - o.mean;
  return -0.5 * (o.b + o.smear) / c.q - 0.5 * (kLog2Pi + std::log(c.q)) - 0.5 * r * r / c.q;
}

}  // namespace

double ScheduleSpec::operator()(Index i) const {
  return a * std::pow(b + static_cast<double>(i), -kappa);
}

void validate(const TrainingConfig& config, Index series_length) {
  auto fail = [](const std::string& what, const std::string& path) {
    throw ConfigError("training config: " + what, path);
  };
  if (config.n_particles < 2) fail("n_particles must be >= 2", "training.n_particles");
  if (config.lag < 1) fail("lag must be >= 1", "training.lag");
  if (config.max_iters < 1) fail("max_iters must be >= 1", "training.max_iters");
  if (config.elbo_window < 1) fail("elbo_window must be >= 1", "training.elbo_window");
  if (!(config.elbo_rel_tol > 0)) fail("elbo_rel_tol must be positive", "training.elbo_rel_tol");
  if (!(config.rho.a > 0) || !(config.rho.b > 0)) fail("rho schedule needs a, b > 0", "training.rho");
  if (config.rho(0) > 1.0 + 1e-12) fail("rho_0 must lie in (0, 1]", "training.rho");
  const bool rm_ok = config.rho.kappa > 0.5 && config.rho.kappa <= 1.0;
  if (config.mode == TrainingMode::Svi) {
    // Robbins-Monro conditions for the built-in family.
    if (!rm_ok) fail("Svi mode requires rho kappa in (0.5, 1]", "training.rho.kappa");
    if (config.segment_length < 1) fail("Svi mode requires a segment length", "training.segment_length");
    if (series_length > 0 && config.segment_length > series_length) {
      fail("segment length exceeds the series", "training.segment_length");
    }
    if (config.segments_per_iter < 1) fail("segments_per_iter must be >= 1", "training.segments_per_iter");
  } else {
    if (!(config.rho.kappa == 0.0 || rm_ok)) {
      fail("rho kappa must be 0 (constant) or in (0.5, 1]", "training.rho.kappa");
    }
  }
  if (!(config.lambda.a > 0)) fail("lambda schedule needs a > 0", "training.lambda");
}

// --- theta packing -----------------------------------------------------------

ParamVector pack_theta(const GpssmModel& model, const ParamFlags& flags) {
  ParamVector p;
  std::vector<double> vals;
  auto push = [&](const std::string& name, double v) {
    p.names.push_back(name);
    vals.push_back(v);
  };

  if (flags.hyperparams) {
    const Index kernel_blocks = model.shared_kernel ? 1 : static_cast<Index>(model.kernels.size());
    for (Index d = 0; d < kernel_blocks; ++d) {
      const KernelSpec& k = model.kernels[static_cast<std::size_t>(d)];
      const std::string prefix =
          model.shared_kernel ? "kernel" : "kernel[" + std::to_string(d) + "]";
      for (Index j = 0; j < k.lengthscales.size(); ++j) {
        push(prefix + ".log_lengthscale[" + std::to_string(j) + "]", std::log(k.lengthscales[j]));
      }
      push(prefix + ".log_signal_variance", std::log(k.signal_variance));
    }
    for (Index d = 0; d < model.process_noise.size(); ++d) {
      push("log_q[" + std::to_string(d) + "]", std::log(model.process_noise[d]));
    }
    if (model.likelihood.family == LikelihoodFamily::GaussianDiag) {
      for (Index e = 0; e < model.likelihood.r_diag.size(); ++e) {
        push("likelihood.log_r[" + std::to_string(e) + "]", std::log(model.likelihood.r_diag[e]));
      }
    } else {
      push("likelihood.alpha", model.likelihood.alpha);
      push("likelihood.beta", model.likelihood.beta);
    }
  }
  if (flags.inducing) {
    for (Index m = 0; m < model.num_inducing(); ++m) {
      for (Index c = 0; c < model.inducing_inputs.cols(); ++c) {
        push("z[" + std::to_string(m) + "][" + std::to_string(c) + "]",
             model.inducing_inputs(m, c));
      }
    }
  }
  p.values = Eigen::Map<Vec>(vals.data(), static_cast<Index>(vals.size()));
  return p;
}

GpssmModel apply_theta(const GpssmModel& model, const ParamFlags& flags, const Vec& values) {
  GpssmModel out = model;
  Index pos = 0;
  auto next = [&]() { return values[pos++]; };

  if (flags.hyperparams) {
    const Index kernel_blocks = model.shared_kernel ? 1 : static_cast<Index>(model.kernels.size());
    for (Index d = 0; d < kernel_blocks; ++d) {
      KernelSpec k = model.kernels[static_cast<std::size_t>(d)];
      for (Index j = 0; j < k.lengthscales.size(); ++j) k.lengthscales[j] = std::exp(next());
      k.signal_variance = std::exp(next());
      if (model.shared_kernel) {
        for (auto& kd : out.kernels) kd = k;
      } else {
        out.kernels[static_cast<std::size_t>(d)] = k;
      }
    }
    for (Index d = 0; d < out.process_noise.size(); ++d) out.process_noise[d] = std::exp(next());
    if (out.likelihood.family == LikelihoodFamily::GaussianDiag) {
      for (Index e = 0; e < out.likelihood.r_diag.size(); ++e) {
        out.likelihood.r_diag[e] = std::exp(next());
      }
    } else {
      out.likelihood.alpha = next();
      out.likelihood.beta = next();
    }
  }
  if (flags.inducing) {
    for (Index m = 0; m < out.num_inducing(); ++m) {
      for (Index c = 0; c < out.inducing_inputs.cols(); ++c) {
        out.inducing_inputs(m, c) = next();
      }
    }
  }
  if (pos != values.size()) {
    throw std::invalid_argument("apply_theta: parameter vector size mismatch");
  }
  return out;
}

// --- ELBO --------------------------------------------------------------------

double elbo_estimate(const SparseGp& gp, const InducingPosterior& q,
                     const ParticleTrajectories& traj, const Mat& y) {
  const Vec w = traj.normalized_weights();
  const auto caches = make_dim_caches(gp, q);
  const Index g = gp.gp_output_dim();

  double x0_term = 0;
  if (traj.prestate_from_prior) {
    for (Index l = 0; l < w.size(); ++l) {
      x0_term += w[l] * log_density(gp.model().x0_prior, traj.states[0].row(l));
    }
  }

  double phi_term = 0;
  double lik_term = 0;
  for (Index k = 1; k <= traj.n_transitions(); ++k) {
    const Mat& prev = traj.states[static_cast<std::size_t>(k) - 1];
    const Mat& cur = traj.states[static_cast<std::size_t>(k)];
    for (Index l = 0; l < w.size(); ++l) {
      if (w[l] == 0) continue;
      const Vec x_prev = prev.row(l);
      const Vec x_cur = cur.row(l);
      const Vec targets = gp.model().gp_components(x_cur);
      for (Index d = 0; d < g; ++d) {
        const PointOps o = point_ops(gp, caches[static_cast<std::size_t>(d)], d, x_prev);
        phi_term += w[l] * phi_expected(caches[static_cast<std::size_t>(d)], o, targets[d]);
      }
      lik_term += w[l] * log_likelihood(gp.model().likelihood, y.row(k - 1), x_cur);
    }
  }

  const double entropy = traj.log_normalizer - w.dot(traj.log_path_density);
  return -kl_qu_pu(gp, q) + x0_term + phi_term + lik_term + entropy;
}

double elbo_estimate(const SparseGp& gp, const InducingPosterior& q,
                     const GridSmoothingResult& grid, const Mat& y) {
  const Index n = grid.grid().n_cells();
  const Index g = gp.gp_output_dim();
  const auto caches = make_dim_caches(gp, q);

  // Per-cell Phi ingredients.
  std::vector<Vec> b_plus_smear(static_cast<std::size_t>(g), Vec(n));
  std::vector<Vec> means(static_cast<std::size_t>(g), Vec(n));
  Mat targets(n, g);
  std::vector<Vec> centers;
  centers.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) centers.push_back(grid.grid().center(i));
  for (Index d = 0; d < g; ++d) {
    for (Index i = 0; i < n; ++i) {
      const PointOps o = point_ops(gp, caches[static_cast<std::size_t>(d)], d,
                                   centers[static_cast<std::size_t>(i)]);
      b_plus_smear[static_cast<std::size_t>(d)][i] = o.b + o.smear;
      means[static_cast<std::size_t>(d)][i] = o.mean;
    }
  }
  for (Index j = 0; j < n; ++j) {
    targets.row(j) = gp.model().gp_components(centers[static_cast<std::size_t>(j)]).transpose();
  }

  double x0_term = grid.expect_at(0, [&](const Vec& x) {
    return log_density(gp.model().x0_prior, x);
  });

  double phi_term = 0;
  double lik_term = 0;
  for (Index k = 0; k < grid.n_steps(); ++k) {
    const Mat xi = grid.pair_marginal(k);
    for (Index d = 0; d < g; ++d) {
      const double qd = caches[static_cast<std::size_t>(d)].q;
      for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < n; ++j) {
          const double p = xi(i, j);
          if (p <= 0) continue;
          const double r = targets(j, d) - means[static_cast<std::size_t>(d)][i];
          phi_term += p * (-0.5 * b_plus_smear[static_cast<std::size_t>(d)][i] / qd -
                           0.5 * (kLog2Pi + std::log(qd)) - 0.5 * r * r / qd);
        }
      }
    }
    const Vec gk = grid.marginal(k + 1);
    for (Index j = 0; j < n; ++j) {
      if (gk[j] > 0) {
        lik_term += gk[j] * log_likelihood(gp.model().likelihood, y.row(k),
                                           centers[static_cast<std::size_t>(j)]);
      }
    }
  }

  return -kl_qu_pu(gp, q) + x0_term + phi_term + lik_term + grid.entropy();
}

// --- gradient ----------------------------------------------------------------

Vec theta_gradient(const SparseGp& gp, const InducingPosterior& q,
                   const ParticleTrajectories& traj, const Mat& y, const ParamFlags& flags,
                   double data_term_scale) {
  const GpssmModel& model = gp.model();
  const Vec w = traj.normalized_weights() * data_term_scale;
  const Index g = gp.gp_output_dim();
  const Index m = gp.num_inducing();
  const Index d_lat = model.latent_dim();
  const auto caches = make_dim_caches(gp, q);

  // Accumulators, per GP output dimension.
  std::vector<Vec> grad_log_ls(static_cast<std::size_t>(g), Vec::Zero(d_lat));
  Vec grad_log_sv = Vec::Zero(g);
  Vec grad_log_q = Vec::Zero(g);
  Mat grad_z = Mat::Zero(m, d_lat);
  Vec grad_lik;
  if (model.likelihood.family == LikelihoodFamily::GaussianDiag) {
    grad_lik = Vec::Zero(model.likelihood.r_diag.size());
  } else {
    grad_lik = Vec::Zero(2);  // alpha, beta
  }

  // Adjoints with respect to the (jittered) K_uu, per dimension; seeded with
  // the prior term <d/dtheta log p(u)>_{q(u)}.
  std::vector<Mat> gbar_k(static_cast<std::size_t>(g));
  for (Index d = 0; d < g; ++d) {
    const auto& c = caches[static_cast<std::size_t>(d)];
    const Mat s_mat = c.sigma + c.mu * c.mu.transpose();
    gbar_k[static_cast<std::size_t>(d)] = -0.5 * c.kinv + 0.5 * c.kinv * s_mat * c.kinv;
  }

  for (Index k = 1; k <= traj.n_transitions(); ++k) {
    const Mat& prev = traj.states[static_cast<std::size_t>(k) - 1];
    const Mat& cur = traj.states[static_cast<std::size_t>(k)];
    for (Index l = 0; l < w.size(); ++l) {
      const double wl = w[l];
      if (wl == 0) continue;
      const Vec x_prev = prev.row(l);
      const Vec x_cur = cur.row(l);
      const Vec targets = model.gp_components(x_cur);

      for (Index d = 0; d < g; ++d) {
        const std::size_t sd = static_cast<std::size_t>(d);
        const auto& c = caches[sd];
        const KernelSpec& spec = model.kernels[sd];

        // Kernel values and derivatives against every inducing input.
        Vec k_u(m);
        Mat dk_logl(m, d_lat);
        Mat dk_z(m, d_lat);
        for (Index i = 0; i < m; ++i) {
          const KernelGrad kg = kernel_value_grad(spec, model.inducing_inputs.row(i), x_prev);
          k_u[i] = kg.value;
          dk_logl.row(i) = kg.d_log_lengthscales.transpose();
          dk_z.row(i) = kg.d_first_arg.transpose();
        }
        const Vec v = c.kinv * k_u;
        const Vec sigma_v = c.sigma * v;
        const double r = targets[d] - k_u.dot(c.alpha);

        grad_log_q[d] += wl * (0.5 * (std::max(0.0, c.kappa - k_u.dot(v)) + v.dot(sigma_v)) / c.q -
                               0.5 + 0.5 * r * r / c.q);

        const Vec g_a = wl * (-sigma_v / c.q + (r / c.q) * c.mu);
        const double gbar_b = -wl / (2.0 * c.q);
        const Vec kinv_ga = c.kinv * g_a;
        const Vec gbar_ku = kinv_ga - 2.0 * gbar_b * v;

        // kappa = k(x, x) responds only to the signal variance.
        grad_log_sv[d] += gbar_ku.dot(k_u) + gbar_b * c.kappa;
        grad_log_ls[sd] += dk_logl.transpose() * gbar_ku;
        grad_z += (gbar_ku.asDiagonal() * dk_z);

        gbar_k[sd] += -kinv_ga * v.transpose() + gbar_b * (v * v.transpose());
      }

      // Likelihood term.
      if (model.likelihood.family == LikelihoodFamily::GaussianDiag) {
        for (Index e = 0; e < grad_lik.size(); ++e) {
          const double re = model.likelihood.r_diag[e];
          const double res = y(k - 1, e) - x_cur[e];
          grad_lik[e] += wl * (-0.5 + 0.5 * res * res / re);
        }
      } else {
        const double xg = x_cur[model.likelihood.observed_state_index];
        const double rate = std::exp(model.likelihood.alpha * xg + model.likelihood.beta);
        const double diff = y(k - 1, 0) - rate;
        grad_lik[0] += wl * xg * diff;
        grad_lik[1] += wl * diff;
      }
    }
  }

  // Contract the K_uu adjoints with the matrix derivatives.
  for (Index d = 0; d < g; ++d) {
    const std::size_t sd = static_cast<std::size_t>(d);
    const KernelSpec& spec = model.kernels[sd];
    const Mat& gbar = gbar_k[sd];
    grad_log_sv[d] += (gbar.array() * gp.kuu(d).matrix().array()).sum();
    for (Index i = 0; i < m; ++i) {
      for (Index j = 0; j < m; ++j) {
        if (i == j) continue;
        const KernelGrad kg =
            kernel_value_grad(spec, model.inducing_inputs.row(i), model.inducing_inputs.row(j));
        grad_log_ls[sd] += gbar(i, j) * kg.d_log_lengthscales;
        grad_z.row(i) += gbar(i, j) * kg.d_first_arg.transpose();
        grad_z.row(j) -= gbar(i, j) * kg.d_first_arg.transpose();
      }
    }
  }

  // Assemble in pack_theta order.
  std::vector<double> out;
  if (flags.hyperparams) {
    if (model.shared_kernel) {
      Vec ls = Vec::Zero(d_lat);
      double sv = 0;
      for (Index d = 0; d < g; ++d) {
        ls += grad_log_ls[static_cast<std::size_t>(d)];
        sv += grad_log_sv[d];
      }
      for (Index j = 0; j < d_lat; ++j) out.push_back(ls[j]);
      out.push_back(sv);
    } else {
      for (Index d = 0; d < g; ++d) {
        for (Index j = 0; j < d_lat; ++j) out.push_back(grad_log_ls[static_cast<std::size_t>(d)][j]);
        out.push_back(grad_log_sv[d]);
      }
    }
    for (Index d = 0; d < g; ++d) out.push_back(grad_log_q[d]);
    for (Index e = 0; e < grad_lik.size(); ++e) out.push_back(grad_lik[e]);
  }
  if (flags.inducing) {
    for (Index i = 0; i < m; ++i) {
      for (Index c = 0; c < d_lat; ++c) out.push_back(grad_z(i, c));
    }
  }

  Vec result = Eigen::Map<Vec>(out.data(), static_cast<Index>(out.size()));
  const ParamVector names = pack_theta(model, flags);
  for (Index i = 0; i < result.size(); ++i) {
    if (!std::isfinite(result[i])) {
      throw NumericalError("theta_gradient: non-finite gradient for " + names.names[static_cast<std::size_t>(i)],
                           names.names[static_cast<std::size_t>(i)]);
    }
  }
  return result;
}

// --- statistics estimators ----------------------------------------------------

SufficientStats svi_stats(const SufficientStats& segment_stats, Index T_total, Index S) {
  if (S < 1 || T_total < 1) throw std::invalid_argument("svi_stats: S and T must be positive");
  if (S > T_total) throw std::invalid_argument("svi_stats: segment length exceeds the series");
  SufficientStats out = segment_stats;
  out.scale(static_cast<double>(T_total) / static_cast<double>(S));
  out.effective_count = segment_stats.effective_count * static_cast<double>(T_total) /
                        static_cast<double>(S);
  return out;
}

InducingPosterior damped_natural_update(const InducingPosterior& q,
                                        const InducingPosterior& q_star, double rho) {
  if (!(rho > 0) || rho > 1.0) throw std::invalid_argument("damped update: rho must be in (0, 1]");
  if (rho == 1.0) return q_star;
  InducingPosterior out;
  for (std::size_t d = 0; d < q.dims.size(); ++d) {
    Vec eta1 = q.dims[d].eta1 + rho * (q_star.dims[d].eta1 - q.dims[d].eta1);
    Mat eta2 = q.dims[d].eta2 + rho * (q_star.dims[d].eta2 - q.dims[d].eta2);
    eta2 = 0.5 * (eta2 + eta2.transpose());
    out.dims.push_back(natural_to_moments(std::move(eta1), std::move(eta2)));
  }
  check_consistency(out);
  return out;
}

std::string theta_digest(const GpssmModel& model) {
  const ParamVector p = pack_theta(model, ParamFlags{true, true});
  const std::uint64_t h =
      fnv1a(p.values.data(), static_cast<std::size_t>(p.values.size()) * sizeof(double));
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

// --- training loop -------------------------------------------------------------

namespace {

struct Window {
  Index start = 1;  // first transition index t covered (1-based)
  Mat y;            // observations y_t for t in [start, start + S - 1]
  Index warmup = 0;
  Mat warmup_y;
};

// Re-place inducing inputs over the empirical range (1%..99% quantiles) of
// the smoothed states: a line for D = 1, a near-square grid for D = 2.
Mat place_inducing(const std::vector<Mat>& states, Index m_points, Index d_lat) {
  Vec lo(d_lat), hi(d_lat);
  std::vector<double> pool;
  for (Index c = 0; c < d_lat; ++c) {
    pool.clear();
    for (const Mat& slice : states) {
      for (Index l = 0; l < slice.rows(); ++l) pool.push_back(slice(l, c));
    }
    const std::size_t n = pool.size();
    const std::size_t i_lo = static_cast<std::size_t>(0.01 * static_cast<double>(n - 1));
    const std::size_t i_hi = static_cast<std::size_t>(0.99 * static_cast<double>(n - 1));
    std::nth_element(pool.begin(), pool.begin() + static_cast<long>(i_lo), pool.end());
    lo[c] = pool[i_lo];
    std::nth_element(pool.begin(), pool.begin() + static_cast<long>(i_hi), pool.end());
    hi[c] = pool[i_hi];
    if (!(hi[c] > lo[c])) {
      lo[c] -= 0.5;
      hi[c] += 0.5;
    }
  }
  Mat z(m_points, d_lat);
  if (d_lat == 1) {
    for (Index i = 0; i < m_points; ++i) {
      z(i, 0) = lo[0] + (hi[0] - lo[0]) * static_cast<double>(i) /
                            static_cast<double>(std::max<Index>(1, m_points - 1));
    }
  } else {
    const Index cols = static_cast<Index>(std::ceil(std::sqrt(static_cast<double>(m_points))));
    const Index rows = (m_points + cols - 1) / cols;
    Index idx = 0;
    for (Index r = 0; r < rows && idx < m_points; ++r) {
      for (Index cc = 0; cc < cols && idx < m_points; ++cc, ++idx) {
        z(idx, 0) = lo[0] + (hi[0] - lo[0]) * (static_cast<double>(cc) + 0.5) /
                                static_cast<double>(cols);
        z(idx, 1) = lo[1] + (hi[1] - lo[1]) * (static_cast<double>(r) + 0.5) /
                                static_cast<double>(rows);
      }
    }
  }
  return z;
}

ParticleTrajectories smooth_window(const AuxiliaryModel& aux, const Window& win,
                                   const TrainingConfig& config, std::uint64_t seed) {
  SmootherOptions opts;
  opts.n_particles = config.n_particles;
  opts.lag = config.lag;
  opts.seed = seed;
  opts.warmup_steps = win.warmup;
  opts.warmup_observations = win.warmup > 0 ? &win.warmup_y : nullptr;
  try {
    return bootstrap_fixed_lag_smoother(aux, win.y, opts);
  } catch (const DegenerateWeightsError&) {
    // One retry with four times the particles, then give up.
    opts.n_particles = 4 * config.n_particles;
    opts.seed = mix_seed(seed, 0x4444ULL);
    return bootstrap_fixed_lag_smoother(aux, win.y, opts);
  }
}

}  // namespace

TrainingState train(const Mat& observations, const TrainingConfig& config, GpssmModel init,
                    const ProgressSink& progress) {
  const Index T = observations.rows();
  if (T < 2) throw std::invalid_argument("train: need at least two observations");
  validate(config, T);
  validate(init);

  const Index S = config.mode == TrainingMode::Svi ? config.segment_length : T;

  TrainingState state;
  state.model = std::move(init);
  state.master_seed = config.master_seed;

  auto gp = std::make_unique<SparseGp>(state.model);
  state.q_u = prior_posterior(*gp);

  ParamFlags flags{config.learn_hyperparams, config.learn_inducing};
  const bool learn_any = config.learn_hyperparams || config.learn_inducing;
  bool inducing_placed = !config.reinit_inducing;

  std::vector<double> window_means;  // trailing-window convergence bookkeeping

  for (Index iter = 0; iter < config.max_iters; ++iter) {
    const std::uint64_t iter_seed = mix_seed(config.master_seed, 0x17e4ULL,
                                             static_cast<std::uint64_t>(state.iteration));

    // Minibatch selection. Batch mode is the S = T single-window case.
    std::vector<Window> windows;
    if (config.mode == TrainingMode::Svi) {
      RngStream pick(mix_seed(iter_seed, 0x5e1eULL));
      for (Index s = 0; s < config.segments_per_iter; ++s) {
        const Index max_start = T - S + 1;
        const Index tau =
            1 + static_cast<Index>(pick.uniform() * static_cast<double>(max_start));
        Window win;
        win.start = std::min(tau, max_start);
        win.y = observations.middleRows(win.start - 1, S);
        win.warmup = std::min<Index>(config.lag, win.start - 1);
        if (win.warmup > 0) {
          win.warmup_y = observations.middleRows(win.start - 1 - win.warmup, win.warmup);
        }
        windows.push_back(std::move(win));
      }
    } else {
      Window win;
      win.start = 1;
      win.y = observations;
      windows.push_back(std::move(win));
    }

    AuxiliaryModel aux = build_auxiliary(*gp, state.q_u);
    std::vector<ParticleTrajectories> trajs;
    for (std::size_t wi = 0; wi < windows.size(); ++wi) {
      trajs.push_back(smooth_window(aux, windows[wi], config,
                                    mix_seed(iter_seed, 0x3117ULL, static_cast<std::uint64_t>(wi))));
    }

    if (!inducing_placed) {
      // Preliminary pass: relocate the inducing inputs onto the smoothed
      // state range, reset q(u), and redo the smoothing under the new set.
      state.model.inducing_inputs =
          place_inducing(trajs[0].states, state.model.num_inducing(), state.model.latent_dim());
      gp = std::make_unique<SparseGp>(state.model);
      state.q_u = prior_posterior(*gp);
      inducing_placed = true;
      aux = build_auxiliary(*gp, state.q_u);
      trajs.clear();
      for (std::size_t wi = 0; wi < windows.size(); ++wi) {
        trajs.push_back(smooth_window(aux, windows[wi], config,
                                      mix_seed(iter_seed, 0x3117ULL, static_cast<std::uint64_t>(wi))));
      }
    }

    // Sufficient statistics (scaled for Svi) and the theta gradient, both
    // from the same smoothing pass.
    SufficientStats stats = zero_stats(gp->gp_output_dim(), gp->num_inducing());
    Vec grad;
    double elbo_val = 0;
    double ess_min = std::numeric_limits<double>::infinity();
    const double data_scale = static_cast<double>(T) / static_cast<double>(S);
    for (std::size_t wi = 0; wi < windows.size(); ++wi) {
      SufficientStats seg = accumulate_stats(*gp, trajs[wi]);
      if (config.mode == TrainingMode::Svi) seg = svi_stats(seg, T, S);
      stats += seg;

      const double kl = kl_qu_pu(*gp, state.q_u);
      const double e = elbo_estimate(*gp, state.q_u, trajs[wi], windows[wi].y);
      elbo_val += (e + kl) * data_scale - kl;

      if (learn_any) {
        const Vec gw = theta_gradient(*gp, state.q_u, trajs[wi], windows[wi].y, flags,
                                      config.mode == TrainingMode::Svi ? data_scale : 1.0);
        grad = (grad.size() == 0) ? gw : Vec(grad + gw);
      }
      ess_min = std::min(ess_min, trajs[wi].ess_min);
    }
    const double n_windows = static_cast<double>(windows.size());
    stats.scale(1.0 / n_windows);
    stats.effective_count /= n_windows;
    elbo_val /= n_windows;
    if (learn_any) grad /= n_windows;

    state.elbo_trace.push_back(elbo_val);
    if (progress) {
      progress({state.iteration, elbo_val, ess_min, theta_digest(state.model)});
    }

    // Natural-parameter step, then the hyperparameter step.
    const InducingPosterior q_star = optimal_qu(*gp, stats);
    state.q_u = damped_natural_update(state.q_u, q_star, config.rho(state.iteration));

    if (learn_any) {
      // Ascend the per-transition average so step sizes transfer across T.
      const Vec step = config.lambda(state.iteration) * grad / static_cast<double>(T);
      const ParamVector theta = pack_theta(state.model, flags);
      const GpssmModel proposed = apply_theta(state.model, flags, theta.values + step);
      try {
        auto proposed_gp = std::make_unique<SparseGp>(proposed);
        state.model = proposed;
        gp = std::move(proposed_gp);
      } catch (const std::exception&) {
        // Step produced an invalid model (e.g. colliding inducing inputs);
        // skip the theta update this iteration.
      }
    }

    state.iteration += 1;

    // Convergence: relative change of the trailing-window mean.
    const Index w = config.elbo_window;
    const Index n_tr = static_cast<Index>(state.elbo_trace.size());
    if (n_tr >= 2 * w) {
      double m1 = 0, m0 = 0;
      for (Index i = 0; i < w; ++i) {
        m1 += state.elbo_trace[static_cast<std::size_t>(n_tr - 1 - i)];
        m0 += state.elbo_trace[static_cast<std::size_t>(n_tr - 1 - w - i)];
      }
      m1 /= static_cast<double>(w);
      m0 /= static_cast<double>(w);
      if (std::abs(m1 - m0) <= config.elbo_rel_tol * (1.0 + std::abs(m1))) {
        state.converged = true;
        break;
      }
    }
  }
  return state;
}

TrainingState online_update_with_stats(TrainingState state, const SufficientStats& stats) {
  SparseGp gp(state.model);
  const Index g = gp.gp_output_dim();
  if (static_cast<Index>(stats.psi1.size()) != g) {
    throw std::invalid_argument("online_update: statistics dimension mismatch");
  }
  InducingPosterior updated;
  for (Index d = 0; d < g; ++d) {
    const std::size_t sd = static_cast<std::size_t>(d);
    const double qd = state.model.process_noise[d];
    const Mat& kinv = gp.kuu_inv(d);
    Vec eta1 = state.q_u.dims[sd].eta1 + gp.kuu(d).solve(stats.psi1[sd]) / qd;
    Mat inner = gp.kuu(d).solve(stats.psi2[sd]);
    Mat eta2 = state.q_u.dims[sd].eta2 - 0.5 * (kinv * inner.transpose()) / qd;
    eta2 = 0.5 * (eta2 + eta2.transpose());
    updated.dims.push_back(natural_to_moments(std::move(eta1), std::move(eta2)));
  }
  check_consistency(updated);
  state.q_u = std::move(updated);
  return state;
}

TrainingState online_update(TrainingState state, const Mat& new_observations,
                            const TrainingConfig& config) {
  if (new_observations.rows() == 0) return state;
  if (new_observations.cols() != state.model.likelihood.obs_dim()) {
    throw std::invalid_argument("online_update: observation dimension mismatch");
  }
  SparseGp gp(state.model);
  const AuxiliaryModel aux = build_auxiliary(gp, state.q_u);

  SmootherOptions opts;
  opts.n_particles = config.n_particles;
  opts.lag = config.lag;
  opts.seed = mix_seed(config.master_seed, 0x011eULL, static_cast<std::uint64_t>(state.iteration));

  Mat warm_pool;
  if (state.filter_carry.has_value()) {
    // Pre-states sampled from the carried filtered-state summary.
    RngStream rng(mix_seed(opts.seed, 0xca11ULL));
    warm_pool.resize(config.n_particles, state.model.latent_dim());
    for (Index l = 0; l < config.n_particles; ++l) {
      for (Index c = 0; c < state.model.latent_dim(); ++c) {
        warm_pool(l, c) = state.filter_carry->mean[c] +
                          std::sqrt(state.filter_carry->var[c]) * rng.normal();
      }
    }
    opts.warm_start_states = &warm_pool;
  }

  ParticleTrajectories traj = bootstrap_fixed_lag_smoother(aux, new_observations, opts);
  const SufficientStats stats = accumulate_stats(gp, traj);
  state = online_update_with_stats(std::move(state), stats);

  // Carry the filtered endpoint for the next segment.
  const Vec w = traj.normalized_weights();
  const Mat& last = traj.states.back();
  Vec mean = Vec::Zero(state.model.latent_dim());
  for (Index l = 0; l < w.size(); ++l) mean += w[l] * last.row(l).transpose();
  Vec var = Vec::Zero(state.model.latent_dim());
  for (Index l = 0; l < w.size(); ++l) {
    var += w[l] * (last.row(l).transpose() - mean).array().square().matrix();
  }
  var = var.cwiseMax(1e-12);
  state.filter_carry = DiagGaussian{mean, var};
  state.iteration += 1;
  return state;
}

}  // namespace gpssm
