#include "gpssm/smoothing.hpp"

#include <cmath>
#include <limits>
#include <memory>
#include <sstream>

#include "gpssm/errors.hpp"
#include "gpssm/rng.hpp"

namespace gpssm {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_sum_exp(const Vec& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

double ess_from_log_weights(const Vec& logw) {
  const double m = logw.maxCoeff();
  if (!std::isfinite(m)) return 0;
  const Eigen::ArrayXd w = (logw.array() - m).exp();
  const double s1 = w.sum();
  const double s2 = w.square().sum();
  return s1 * s1 / s2;
}

// Shared precomputation behind the auxiliary model closures.
struct AuxState {
  GpssmModel model;
  std::vector<Mat> kuu_inv;
  std::vector<Vec> alpha;   // K_uu^{-1} mu
  std::vector<Mat> sigma;   // q(u) covariance
  std::vector<double> kappa;  // k(x, x), constant for stationary kernels
};

}  // namespace

double AuxiliaryModel::transition_log_density(const Vec& x_prev, const Vec& x_next) const {
  const Vec mean = transition_mean(x_prev);
  double out = 0;
  for (std::size_t k = 0; k < stochastic_dims.size(); ++k) {
    const Index d = stochastic_dims[k];
    const double q = noise_diag[static_cast<Index>(k)];
    const double r = x_next[d] - mean[d];
    out += -0.5 * (kLog2Pi + std::log(q)) - 0.5 * r * r / q;
  }
  return out;
}

AuxiliaryModel build_auxiliary(const SparseGp& gp, const InducingPosterior& q) {
  auto state = std::make_shared<AuxState>();
  state->model = gp.model();
  const Index g = gp.gp_output_dim();
  for (Index d = 0; d < g; ++d) {
    state->kuu_inv.push_back(gp.kuu_inv(d));
    state->alpha.push_back(gp.kuu(d).solve(q.dims[static_cast<std::size_t>(d)].mu));
    state->sigma.push_back(q.dims[static_cast<std::size_t>(d)].sigma);
    state->kappa.push_back(state->model.kernels[static_cast<std::size_t>(d)].signal_variance);
  }

  auto ku = [state](Index d, const Vec& x) {
    const Mat& z = state->model.inducing_inputs;
    const KernelSpec& spec = state->model.kernels[static_cast<std::size_t>(d)];
    Vec out(z.rows());
    for (Index m = 0; m < z.rows(); ++m) out[m] = kernel_value(spec, z.row(m), x);
    return out;
  };

  AuxiliaryModel aux;
  aux.state_dim = state->model.latent_dim();
  aux.noise_diag = state->model.process_noise;
  if (state->model.structure == LatentStructure::Free) {
    for (Index d = 0; d < aux.state_dim; ++d) aux.stochastic_dims.push_back(d);
  } else {
    aux.stochastic_dims.push_back(1);
  }
  aux.x0_prior = state->model.x0_prior;

  aux.transition_mean = [state, ku, g](const Vec& x) {
    Vec f(g);
    for (Index d = 0; d < g; ++d) {
      f[d] = ku(d, x).dot(state->alpha[static_cast<std::size_t>(d)]);
    }
    return apply_structure(state->model, x, f);
  };

  aux.extra_log_weight = [state, ku, g](const Vec& x) {
    double out = 0;
    for (Index d = 0; d < g; ++d) {
      const std::size_t sd = static_cast<std::size_t>(d);
      const Vec k = ku(d, x);
      const Vec v = state->kuu_inv[sd] * k;
      const double b = std::max(0.0, state->kappa[sd] - k.dot(v));
      const double smear = v.dot(state->sigma[sd] * v);
      out += -0.5 * (b + smear) / state->model.process_noise[d];
    }
    return std::min(0.0, out);
  };

  aux.obs_log_density = [state](const Vec& y, const Vec& x) {
    return log_likelihood(state->model.likelihood, y, x);
  };
  return aux;
}

Vec ParticleTrajectories::normalized_weights() const {
  const double lse = log_sum_exp(log_weights);
  return (log_weights.array() - lse).exp();
}

ParticleTrajectories bootstrap_fixed_lag_smoother(const AuxiliaryModel& aux, const Mat& y,
                                                  Index n_particles, Index lag,
                                                  std::uint64_t seed) {
  SmootherOptions opts;
  opts.n_particles = n_particles;
  opts.lag = lag;
  opts.seed = seed;
  return bootstrap_fixed_lag_smoother(aux, y, opts);
}

ParticleTrajectories bootstrap_fixed_lag_smoother(const AuxiliaryModel& aux, const Mat& y,
                                                  const SmootherOptions& opts) {
  const Index L = opts.n_particles;
  const Index lag = opts.lag;
  if (L < 2) throw std::invalid_argument("smoother: at least 2 particles required");
  if (lag < 1) throw std::invalid_argument("smoother: lag must be >= 1");
  const Index d = aux.state_dim;
  const Index n_warm = opts.warmup_steps;
  const Index n_obs = y.rows();
  const Index n_total = n_warm + n_obs;

  std::vector<RngStream> streams;
  streams.reserve(static_cast<std::size_t>(L));
  for (Index l = 0; l < L; ++l) {
    streams.emplace_back(mix_seed(opts.seed, 0x5111ULL, static_cast<std::uint64_t>(l)));
  }
  RngStream resample_rng(mix_seed(opts.seed, 0x0e5aULL));

  // Columns 0..n_total; column n_warm is the window pre-state.
  std::vector<Mat> cols(static_cast<std::size_t>(n_total) + 1, Mat(L, d));

  const bool warm_started = opts.warm_start_states != nullptr;
  if (warm_started) {
    // Resample the provided pool into L equally-weighted starters.
    const Mat& pool = *opts.warm_start_states;
    Vec pw;
    if (opts.warm_start_log_weights != nullptr) {
      const double lse = log_sum_exp(*opts.warm_start_log_weights);
      pw = (opts.warm_start_log_weights->array() - lse).exp();
    } else {
      pw = Vec::Constant(pool.rows(), 1.0 / static_cast<double>(pool.rows()));
    }
    Vec cum(pool.rows());
    double acc = 0;
    for (Index i = 0; i < pool.rows(); ++i) {
      acc += pw[i];
      cum[i] = acc;
    }
    const double u0 = resample_rng.uniform();
    Index j = 0;
    for (Index l = 0; l < L; ++l) {
      const double target = (static_cast<double>(l) + u0) / static_cast<double>(L);
      while (j < pool.rows() - 1 && cum[j] < target) ++j;
      cols[0].row(l) = pool.row(j);
    }
  } else {
    for (Index l = 0; l < L; ++l) {
      for (Index k = 0; k < d; ++k) {
        cols[0](l, k) =
            aux.x0_prior.mean[k] + std::sqrt(aux.x0_prior.var[k]) * streams[l].normal();
      }
    }
  }

  Vec logw = Vec::Zero(L);
  double log_normalizer = 0;
  double ess = static_cast<double>(L);
  double ess_min = static_cast<double>(L);
  std::vector<Vec> snapshots(static_cast<std::size_t>(n_total) + 1, Vec::Zero(L));

  for (Index step = 1; step <= n_total; ++step) {
    const Mat& prev = cols[static_cast<std::size_t>(step) - 1];
    Mat& cur = cols[static_cast<std::size_t>(step)];
    const bool in_window = step > n_warm;
    const Index obs_row = in_window ? (step - n_warm - 1) : (step - 1);
    const Mat* obs_src = in_window ? &y : opts.warmup_observations;

    Vec incr(L);
    for (Index l = 0; l < L; ++l) {
      const Vec x_prev = prev.row(l);
      const Vec mean = aux.transition_mean(x_prev);
      Vec x_new = mean;
      for (std::size_t k = 0; k < aux.stochastic_dims.size(); ++k) {
        const Index sd = aux.stochastic_dims[k];
        x_new[sd] += std::sqrt(aux.noise_diag[static_cast<Index>(k)]) * streams[l].normal();
      }
      cur.row(l) = x_new;
      double w = aux.extra_log_weight(x_prev);
      if (obs_src != nullptr && obs_row < obs_src->rows()) {
        w += aux.obs_log_density(obs_src->row(obs_row), x_new);
      }
      incr[l] = w;
    }

    const double before = log_sum_exp(logw);
    logw += incr;
    const double after = log_sum_exp(logw);
    if (!std::isfinite(after)) {
      std::ostringstream msg;
      msg << "smoother: all particle weights degenerate at window step " << (step - n_warm);
      throw DegenerateWeightsError(msg.str(), step - n_warm);
    }
    if (in_window) log_normalizer += after - before;

    ess = ess_from_log_weights(logw);
    ess_min = std::min(ess_min, ess);

    if (ess < static_cast<double>(L) / 2.0 && step < n_total) {
      // Systematic resampling; trajectory history is reindexed only within
      // the lag window behind the filter front, so position k is frozen after
      // step k + lag.
      const Vec w = (logw.array() - logw.maxCoeff()).exp();
      Vec cum(L);
      double acc = 0;
      for (Index l = 0; l < L; ++l) {
        acc += w[l];
        cum[l] = acc;
      }
      const double total = acc;
      const double u0 = resample_rng.uniform();
      std::vector<Index> ancestor(static_cast<std::size_t>(L));
      Index j = 0;
      for (Index l = 0; l < L; ++l) {
        const double target = total * (static_cast<double>(l) + u0) / static_cast<double>(L);
        while (j < L - 1 && cum[j] < target) ++j;
        ancestor[static_cast<std::size_t>(l)] = j;
      }
      const Index first_col = std::max<Index>(0, step - lag);
      for (Index c = first_col; c <= step; ++c) {
        Mat reordered(L, d);
        for (Index l = 0; l < L; ++l) {
          reordered.row(l) = cols[static_cast<std::size_t>(c)].row(ancestor[static_cast<std::size_t>(l)]);
        }
        cols[static_cast<std::size_t>(c)] = std::move(reordered);
      }
      logw.setZero();
      ess = static_cast<double>(L);
    }
    snapshots[static_cast<std::size_t>(step)] = logw;
  }

  ParticleTrajectories out;
  out.states.assign(cols.begin() + n_warm, cols.end());
  out.log_weights = logw;
  out.step_log_weights.assign(snapshots.begin() + n_warm, snapshots.end());
  out.ess = ess_from_log_weights(logw);
  out.ess_min = ess_min;
  out.lag = lag;
  out.seed = opts.seed;
  out.log_normalizer = log_normalizer;

  // Density of each stored path under the auxiliary model, recomputed over
  // the final (possibly lag-truncated) trajectories.
  const bool prestate_from_prior = !warm_started && n_warm == 0;
  out.prestate_from_prior = prestate_from_prior;
  out.log_path_density = Vec::Zero(L);
  for (Index l = 0; l < L; ++l) {
    double lp = 0;
    if (prestate_from_prior) lp += log_density(aux.x0_prior, out.states[0].row(l));
    for (Index k = 1; k < static_cast<Index>(out.states.size()); ++k) {
      const Vec xp = out.states[static_cast<std::size_t>(k) - 1].row(l);
      const Vec xn = out.states[static_cast<std::size_t>(k)].row(l);
      lp += aux.extra_log_weight(xp) + aux.transition_log_density(xp, xn) +
            aux.obs_log_density(y.row(k - 1), xn);
    }
    out.log_path_density[l] = lp;
  }
  return out;
}

SufficientStats accumulate_stats(const SparseGp& gp, const ParticleTrajectories& traj) {
  return accumulate_stats_weighted(gp, traj.states, traj.normalized_weights());
}

// ---- grid oracle ----

Index GridSpec::n_cells() const {
  Index out = 1;
  for (Index d = 0; d < n.size(); ++d) out *= n[d];
  return out;
}

Vec GridSpec::center(Index flat_index) const {
  Vec c(n.size());
  Index rem = flat_index;
  for (Index d = 0; d < n.size(); ++d) {
    const Index i = rem % n[d];
    rem /= n[d];
    const double h = (hi[d] - lo[d]) / static_cast<double>(n[d]);
    c[d] = lo[d] + (static_cast<double>(i) + 0.5) * h;
  }
  return c;
}

double GridSpec::cell_volume() const {
  double v = 1;
  for (Index d = 0; d < n.size(); ++d) {
    v *= (hi[d] - lo[d]) / static_cast<double>(n[d]);
  }
  return v;
}

GridSmoothingResult::GridSmoothingResult(GridSpec grid, const AuxiliaryModel& aux, const Mat& y)
    : grid_(std::move(grid)), aux_(aux), y_(y), n_steps_(y.rows()) {
  const Index n = grid_.n_cells();
  if (n * (n_steps_ + 1) > 10'000'000) {
    throw ResourceError("grid_smoother: grid resolution x horizon exceeds 1e7 cells");
  }
  if (n * n > 4'000'000) {
    throw ResourceError("grid_smoother: transition matrix would exceed 4e6 entries");
  }

  centers_.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) centers_.push_back(grid_.center(i));

  log_alpha_.resize(n_steps_ + 1, n);
  log_beta_.resize(n_steps_ + 1, n);
  row_log_norm_.resize(n_steps_ + 1);

  // Initial distribution, midpoint rule.
  Vec a0(n);
  const double log_vol_full = std::log(grid_.cell_volume());
  for (Index i = 0; i < n; ++i) {
    a0[i] = log_density(aux_.x0_prior, centers_[static_cast<std::size_t>(i)]) + log_vol_full;
  }
  double norm = log_sum_exp(a0);
  log_alpha_.row(0) = (a0.array() - norm).matrix().transpose();
  log_normalizer_ = norm;

  log_trans_ = build_transition_matrix();
  const Mat& trans = log_trans_;

  for (Index k = 1; k <= n_steps_; ++k) {
    Vec next(n);
    for (Index j = 0; j < n; ++j) {
      Vec terms = log_alpha_.row(k - 1).transpose() + trans.col(j);
      next[j] = log_sum_exp(terms) +
                aux_.obs_log_density(y_.row(k - 1), centers_[static_cast<std::size_t>(j)]);
    }
    norm = log_sum_exp(next);
    if (!std::isfinite(norm)) {
      throw DegenerateWeightsError("grid_smoother: zero mass at step " + std::to_string(k), k);
    }
    log_alpha_.row(k) = (next.array() - norm).matrix().transpose();
    log_normalizer_ += norm;
  }

  log_beta_.row(n_steps_).setZero();
  for (Index k = n_steps_ - 1; k >= 0; --k) {
    Vec row(n);
    for (Index i = 0; i < n; ++i) {
      Vec terms(n);
      for (Index j = 0; j < n; ++j) {
        terms[j] = trans(i, j) +
                   aux_.obs_log_density(y_.row(k), centers_[static_cast<std::size_t>(j)]) +
                   log_beta_(k + 1, j);
      }
      row[i] = log_sum_exp(terms);
    }
    log_beta_.row(k) = (row.array() - log_sum_exp(row)).matrix().transpose();
  }
}

Mat GridSmoothingResult::build_transition_matrix() const {
  const Index n = grid_.n_cells();
  const Index dims = grid_.n.size();
  Mat trans(n, n);
  trans.setConstant(kNegInf);

  std::vector<bool> stochastic(static_cast<std::size_t>(dims), false);
  double log_vol_stoch = 0;
  std::vector<double> h(static_cast<std::size_t>(dims));
  for (Index d = 0; d < dims; ++d) {
    h[static_cast<std::size_t>(d)] = (grid_.hi[d] - grid_.lo[d]) / static_cast<double>(grid_.n[d]);
  }
  for (std::size_t k = 0; k < aux_.stochastic_dims.size(); ++k) {
    stochastic[static_cast<std::size_t>(aux_.stochastic_dims[k])] = true;
    log_vol_stoch += std::log(h[static_cast<std::size_t>(aux_.stochastic_dims[k])]);
  }

  for (Index i = 0; i < n; ++i) {
    const Vec& ci = centers_[static_cast<std::size_t>(i)];
    const Vec mean = aux_.transition_mean(ci);
    const double extra = aux_.extra_log_weight(ci);

    // Deterministic dims pin the target cell index along that dimension.
    std::vector<Index> snap(static_cast<std::size_t>(dims), -1);
    bool feasible = true;
    for (Index d = 0; d < dims; ++d) {
      if (stochastic[static_cast<std::size_t>(d)]) continue;
      const double pos = (mean[d] - grid_.lo[d]) / h[static_cast<std::size_t>(d)] - 0.5;
      const Index idx = static_cast<Index>(std::lround(pos));
      if (idx < 0 || idx >= grid_.n[d]) {
        feasible = false;
        break;
      }
      snap[static_cast<std::size_t>(d)] = idx;
    }
    if (!feasible) continue;

    for (Index j = 0; j < n; ++j) {
      const Vec& cj = centers_[static_cast<std::size_t>(j)];
      bool match = true;
      Index rem = j;
      for (Index d = 0; d < dims; ++d) {
        const Index idx = rem % grid_.n[d];
        rem /= grid_.n[d];
        if (!stochastic[static_cast<std::size_t>(d)] && idx != snap[static_cast<std::size_t>(d)]) {
          match = false;
          break;
        }
      }
      if (!match) continue;
      double lp = extra + log_vol_stoch;
      for (std::size_t k = 0; k < aux_.stochastic_dims.size(); ++k) {
        const Index d = aux_.stochastic_dims[k];
        const double q = aux_.noise_diag[static_cast<Index>(k)];
        const double r = cj[d] - mean[d];
        lp += -0.5 * (kLog2Pi + std::log(q)) - 0.5 * r * r / q;
      }
      trans(i, j) = lp;
    }
  }
  return trans;
}

Vec GridSmoothingResult::marginal(Index k) const {
  Vec lg = log_alpha_.row(k).transpose() + log_beta_.row(k).transpose();
  const double norm = log_sum_exp(lg);
  return (lg.array() - norm).exp();
}

Mat GridSmoothingResult::pair_marginal(Index k) const {
  const Index n = grid_.n_cells();
  const Mat& trans = log_trans_;
  Mat lg(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      lg(i, j) = log_alpha_(k, i) + trans(i, j) +
                 aux_.obs_log_density(y_.row(k), centers_[static_cast<std::size_t>(j)]) +
                 log_beta_(k + 1, j);
    }
  }
  const double m = lg.maxCoeff();
  Mat out = (lg.array() - m).exp();
  out /= out.sum();
  return out;
}

double GridSmoothingResult::entropy() const {
  // Entropy of the discrete Markov chain plus the volume terms that convert
  // cell probabilities into a piecewise-constant density.
  double h_disc = 0;
  const Vec g0 = marginal(0);
  for (Index i = 0; i < g0.size(); ++i) {
    if (g0[i] > 0) h_disc -= g0[i] * std::log(g0[i]);
  }
  for (Index k = 0; k < n_steps_; ++k) {
    const Mat xi = pair_marginal(k);
    const Vec gk = xi.rowwise().sum();
    for (Index i = 0; i < xi.rows(); ++i) {
      if (gk[i] <= 0) continue;
      for (Index j = 0; j < xi.cols(); ++j) {
        if (xi(i, j) > 0) h_disc -= xi(i, j) * std::log(xi(i, j) / gk[i]);
      }
    }
  }
  double log_vol_stoch = 0;
  for (std::size_t k = 0; k < aux_.stochastic_dims.size(); ++k) {
    const Index d = aux_.stochastic_dims[k];
    log_vol_stoch += std::log((grid_.hi[d] - grid_.lo[d]) / static_cast<double>(grid_.n[d]));
  }
  return h_disc + std::log(grid_.cell_volume()) +
         static_cast<double>(n_steps_) * log_vol_stoch;
}

SufficientStats GridSmoothingResult::accumulate_stats(const SparseGp& gp) const {
  const Index g = gp.gp_output_dim();
  const Index m = gp.num_inducing();
  const Index n = grid_.n_cells();

  std::vector<Mat> ku_all(static_cast<std::size_t>(g), Mat(n, m));
  for (Index d = 0; d < g; ++d) {
    for (Index i = 0; i < n; ++i) {
      ku_all[static_cast<std::size_t>(d)].row(i) =
          gp.ku(d, centers_[static_cast<std::size_t>(i)]).transpose();
    }
  }

  SufficientStats out = zero_stats(g, m);
  for (Index k = 0; k < n_steps_; ++k) {
    const Mat xi = pair_marginal(k);
    const Vec src = xi.rowwise().sum();
    for (Index d = 0; d < g; ++d) {
      const Mat& ku = ku_all[static_cast<std::size_t>(d)];
      Vec target(n);
      for (Index j = 0; j < n; ++j) {
        target[j] = gp.model().gp_components(centers_[static_cast<std::size_t>(j)])[d];
      }
      out.psi1[static_cast<std::size_t>(d)] += ku.transpose() * (xi * target);
      Mat p2 = ku.transpose() * src.asDiagonal() * ku;
      out.psi2[static_cast<std::size_t>(d)] += 0.5 * (p2 + p2.transpose());
    }
  }
  out.effective_count = static_cast<double>(n_steps_);
  return out;
}

double GridSmoothingResult::expect_pairs(
    const std::function<double(Index t, const Vec&, const Vec&)>& f) const {
  double out = 0;
  for (Index k = 0; k < n_steps_; ++k) {
    const Mat xi = pair_marginal(k);
    for (Index i = 0; i < xi.rows(); ++i) {
      for (Index j = 0; j < xi.cols(); ++j) {
        if (xi(i, j) > 0) {
          out += xi(i, j) * f(k + 1, centers_[static_cast<std::size_t>(i)],
                              centers_[static_cast<std::size_t>(j)]);
        }
      }
    }
  }
  return out;
}

double GridSmoothingResult::expect_at(Index k, const std::function<double(const Vec&)>& f) const {
  const Vec g = marginal(k);
  double out = 0;
  for (Index i = 0; i < g.size(); ++i) {
    if (g[i] > 0) out += g[i] * f(centers_[static_cast<std::size_t>(i)]);
  }
  return out;
}

GridSmoothingResult grid_smoother(const AuxiliaryModel& aux, const Mat& y, const GridSpec& grid) {
  if (grid.n.size() > 2) {
    throw std::invalid_argument("grid_smoother: supports at most two state dimensions");
  }
  return GridSmoothingResult(grid, aux, y);
}

}  // namespace gpssm
