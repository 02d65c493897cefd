#include "gpssm/sparse.hpp"

#include <cmath>
#include <sstream>

#include "gpssm/errors.hpp"
#include "gpssm/rng.hpp"

namespace gpssm {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

// Kahan-compensated accumulator over an Eigen array-compatible type.
template <typename T>
class KahanSum {
 public:
  explicit KahanSum(T zero) : sum_(std::move(zero)), comp_(sum_) { comp_.setZero(); }

  void add(const T& value) {
    T y = value - comp_;
    T t = sum_ + y;
    comp_ = (t - sum_) - y;
    sum_ = std::move(t);
  }

  const T& value() const { return sum_; }

 private:
  T sum_;
  T comp_;
};

void check_dims(const SparseGp& gp, const InducingPosterior& q) {
  if (static_cast<Index>(q.dims.size()) != gp.gp_output_dim() ||
      q.num_inducing() != gp.num_inducing()) {
    throw std::invalid_argument("inducing posterior does not match model dimensions");
  }
}

}  // namespace

NatGaussian natural_to_moments(Vec eta1, Mat eta2) {
  Mat prec = -2.0 * eta2;
  PsdMatrix factor = robust_factor(0.5 * (prec + prec.transpose()));
  // Rounding-level jitter is tolerated; anything larger means -2*eta2 was
  // genuinely indefinite.
  if (factor.jitter_applied() > 1e-8 * std::max(1e-300, prec.diagonal().mean())) {
    throw SingularMatrixError("natural_to_moments: -2*eta2 is not positive definite",
                              factor.jitter_applied());
  }
  NatGaussian out;
  out.sigma = factor.inverse();
  out.sigma = 0.5 * (out.sigma + out.sigma.transpose());
  out.mu = factor.solve(eta1);
  out.eta1 = std::move(eta1);
  out.eta2 = std::move(eta2);
  return out;
}

void check_consistency(const InducingPosterior& q) {
  for (const auto& d : q.dims) {
    const double err = (d.mu - d.sigma * d.eta1).norm();
    if (!(err <= 1e-8 * (1.0 + d.mu.norm()))) {
      throw NumericalError("inducing posterior moments inconsistent with natural parameters",
                           "eta1");
    }
  }
}

SufficientStats& SufficientStats::operator+=(const SufficientStats& other) {
  for (std::size_t d = 0; d < psi1.size(); ++d) {
    psi1[d] += other.psi1[d];
    psi2[d] += other.psi2[d];
  }
  effective_count += other.effective_count;
  return *this;
}

SufficientStats& SufficientStats::scale(double factor) {
  for (std::size_t d = 0; d < psi1.size(); ++d) {
    psi1[d] *= factor;
    psi2[d] *= factor;
  }
  return *this;
}

SufficientStats zero_stats(Index gp_dims, Index num_inducing) {
  SufficientStats s;
  s.psi1.assign(static_cast<std::size_t>(gp_dims), Vec::Zero(num_inducing));
  s.psi2.assign(static_cast<std::size_t>(gp_dims), Mat::Zero(num_inducing, num_inducing));
  return s;
}

SparseGp::SparseGp(GpssmModel model) : model_(std::move(model)) {
  validate(model_);
  const Index g = model_.gp_output_dim();
  kuu_.reserve(static_cast<std::size_t>(g));
  kuu_inv_.reserve(static_cast<std::size_t>(g));
  const Mat& z = model_.inducing_inputs;
  for (Index d = 0; d < g; ++d) {
    Mat gram = kernel_gram(model_.kernels[static_cast<std::size_t>(d)], z, z);
    try {
      kuu_.push_back(robust_factor(0.5 * (gram + gram.transpose())));
    } catch (const SingularMatrixError& e) {
      // Name the closest inducing pair; near-duplicates are the usual cause.
      Index bi = 0, bj = 1;
      double best = std::numeric_limits<double>::infinity();
      for (Index i = 0; i < z.rows(); ++i) {
        for (Index j = i + 1; j < z.rows(); ++j) {
          const double dist = (z.row(i) - z.row(j)).norm();
          if (dist < best) {
            best = dist;
            bi = i;
            bj = j;
          }
        }
      }
      std::ostringstream msg;
      msg << "K_uu singular beyond jitter; closest inducing pair is (" << bi << ", " << bj
          << ") at distance " << best;
      throw SingularMatrixError(msg.str(), e.attempted_jitter());
    }
    kuu_inv_.push_back(kuu_.back().inverse());
  }
}

Vec SparseGp::ku(Index d, const Vec& x) const {
  const KernelSpec& spec = model_.kernels[static_cast<std::size_t>(d)];
  const Mat& z = model_.inducing_inputs;
  Vec out(z.rows());
  for (Index m = 0; m < z.rows(); ++m) {
    out[m] = kernel_value(spec, z.row(m), x);
  }
  return out;
}

TransitionOperators transition_operators(const SparseGp& gp, const Vec& x_prev) {
  const Index g = gp.gp_output_dim();
  const Index m = gp.num_inducing();
  TransitionOperators ops;
  ops.a.resize(g, m);
  ops.b.resize(g);
  for (Index d = 0; d < g; ++d) {
    const Vec k = gp.ku(d, x_prev);
    const Vec a = gp.kuu(d).solve(k);
    const double kxx = kernel_value(gp.model().kernels[static_cast<std::size_t>(d)], x_prev, x_prev);
    ops.a.row(d) = a.transpose();
    ops.b[d] = std::max(0.0, kxx - k.dot(a));
  }
  return ops;
}

InducingPosterior prior_posterior(const SparseGp& gp) {
  InducingPosterior q;
  const Index m = gp.num_inducing();
  for (Index d = 0; d < gp.gp_output_dim(); ++d) {
    NatGaussian n;
    n.eta1 = Vec::Zero(m);
    n.eta2 = -0.5 * gp.kuu_inv(d);
    n.mu = Vec::Zero(m);
    n.sigma = gp.kuu(d).matrix();
    q.dims.push_back(std::move(n));
  }
  return q;
}

double phi_from_operators(const TransitionOperators& ops, const Vec& q_diag, const Vec& targets,
                          const Mat& u_point) {
  double out = 0;
  for (Index d = 0; d < q_diag.size(); ++d) {
    const double mean = ops.a.row(d).dot(u_point.col(d));
    const double r = targets[d] - mean;
    out += -0.5 * ops.b[d] / q_diag[d] - 0.5 * (kLog2Pi + std::log(q_diag[d])) -
           0.5 * r * r / q_diag[d];
  }
  return out;
}

double phi_from_operators(const TransitionOperators& ops, const Vec& q_diag, const Vec& targets,
                          const InducingPosterior& q) {
  double out = 0;
  for (Index d = 0; d < q_diag.size(); ++d) {
    const auto& nd = q.dims[static_cast<std::size_t>(d)];
    const Vec a = ops.a.row(d).transpose();
    const double smear = a.dot(nd.sigma * a);
    const double r = targets[d] - a.dot(nd.mu);
    out += -0.5 * (ops.b[d] + smear) / q_diag[d] - 0.5 * (kLog2Pi + std::log(q_diag[d])) -
           0.5 * r * r / q_diag[d];
  }
  return out;
}

double phi(const SparseGp& gp, const Vec& x_t, const Vec& x_prev, const Mat& u_point) {
  const TransitionOperators ops = transition_operators(gp, x_prev);
  return phi_from_operators(ops, gp.model().process_noise, gp.model().gp_components(x_t), u_point);
}

double phi(const SparseGp& gp, const Vec& x_t, const Vec& x_prev, const InducingPosterior& q) {
  check_dims(gp, q);
  const TransitionOperators ops = transition_operators(gp, x_prev);
  return phi_from_operators(ops, gp.model().process_noise, gp.model().gp_components(x_t), q);
}

SufficientStats accumulate_stats_weighted(const SparseGp& gp, const std::vector<Mat>& states,
                                          const std::vector<Vec>& transition_weights) {
  if (states.size() < 2) {
    return zero_stats(gp.gp_output_dim(), gp.num_inducing());
  }
  const Index n_particles = states[0].rows();
  if (transition_weights.size() != states.size() - 1) {
    throw std::invalid_argument("accumulate_stats: one weight vector per transition required");
  }
  for (const Vec& w : transition_weights) {
    if (w.size() != n_particles) {
      throw std::invalid_argument("accumulate_stats: weight count mismatch");
    }
    const double wsum = w.sum();
    if (!std::isfinite(wsum) || std::abs(wsum - 1.0) > 1e-8) {
      throw std::invalid_argument("accumulate_stats: weights must be normalized to 1");
    }
  }

  const Index g = gp.gp_output_dim();
  const Index m = gp.num_inducing();
  std::vector<KahanSum<Vec>> psi1(static_cast<std::size_t>(g), KahanSum<Vec>(Vec::Zero(m)));
  std::vector<KahanSum<Mat>> psi2(static_cast<std::size_t>(g), KahanSum<Mat>(Mat::Zero(m, m)));

  for (std::size_t k = 0; k + 1 < states.size(); ++k) {
    const Mat& prev = states[k];
    const Mat& next = states[k + 1];
    const Vec& w = transition_weights[k];
    for (Index l = 0; l < n_particles; ++l) {
      if (w[l] == 0.0) continue;
      const Vec x_prev = prev.row(l);
      const Vec targets = gp.model().gp_components(next.row(l));
      for (Index d = 0; d < g; ++d) {
        const Vec k_u = gp.ku(d, x_prev);
        psi1[static_cast<std::size_t>(d)].add(Vec(w[l] * targets[d] * k_u));
        psi2[static_cast<std::size_t>(d)].add(Mat(w[l] * (k_u * k_u.transpose())));
      }
    }
  }

  SufficientStats out = zero_stats(g, m);
  for (Index d = 0; d < g; ++d) {
    out.psi1[static_cast<std::size_t>(d)] = psi1[static_cast<std::size_t>(d)].value();
    Mat p2 = psi2[static_cast<std::size_t>(d)].value();
    out.psi2[static_cast<std::size_t>(d)] = 0.5 * (p2 + p2.transpose());
  }
  out.effective_count = static_cast<double>(states.size() - 1);
  return out;
}

SufficientStats accumulate_stats_weighted(const SparseGp& gp, const std::vector<Mat>& states,
                                          const Vec& weights) {
  const std::size_t n_trans = states.size() < 2 ? 0 : states.size() - 1;
  return accumulate_stats_weighted(gp, states, std::vector<Vec>(n_trans, weights));
}

InducingPosterior optimal_qu(const SparseGp& gp, const SufficientStats& stats) {
  const Index g = gp.gp_output_dim();
  if (static_cast<Index>(stats.psi1.size()) != g ||
      stats.psi1[0].size() != gp.num_inducing()) {
    throw std::invalid_argument("optimal_qu: statistics do not match model dimensions");
  }
  InducingPosterior q;
  for (Index d = 0; d < g; ++d) {
    const double qd = gp.model().process_noise[d];
    const Mat& kinv = gp.kuu_inv(d);
    Vec eta1 = gp.kuu(d).solve(stats.psi1[static_cast<std::size_t>(d)]) / qd;
    Mat inner = gp.kuu(d).solve(stats.psi2[static_cast<std::size_t>(d)]);
    Mat eta2 = -0.5 * (kinv + kinv * inner.transpose() / qd);
    eta2 = 0.5 * (eta2 + eta2.transpose());
    q.dims.push_back(natural_to_moments(std::move(eta1), std::move(eta2)));
  }
  check_consistency(q);
  return q;
}

double kl_qu_pu(const SparseGp& gp, const InducingPosterior& q) {
  check_dims(gp, q);
  double out = 0;
  const Index m = gp.num_inducing();
  for (Index d = 0; d < gp.gp_output_dim(); ++d) {
    const auto& nd = q.dims[static_cast<std::size_t>(d)];
    const PsdMatrix& kuu = gp.kuu(d);
    const double trace = (gp.kuu_inv(d) * nd.sigma).trace();
    const double maha = nd.mu.dot(kuu.solve(nd.mu));
    const PsdMatrix sig = robust_factor(nd.sigma);
    out += 0.5 * (trace + maha - static_cast<double>(m) + kuu.log_det() - sig.log_det());
  }
  return std::max(0.0, out);
}

PredictorCache make_predictor_cache(const SparseGp& gp, const InducingPosterior& q) {
  check_dims(gp, q);
  PredictorCache cache;
  for (Index d = 0; d < gp.gp_output_dim(); ++d) {
    const auto& nd = q.dims[static_cast<std::size_t>(d)];
    cache.alpha.push_back(gp.kuu(d).solve(nd.mu));
    Mat w = gp.kuu(d).solve(Mat(gp.kuu(d).solve(nd.sigma).transpose()));
    cache.w.push_back(0.5 * (w + w.transpose()));
  }
  return cache;
}

DiagGaussian predict_transition(const SparseGp& gp, const PredictorCache& cache,
                                const Vec& x_star) {
  const Index g = gp.gp_output_dim();
  DiagGaussian out{Vec::Zero(g), Vec::Zero(g)};
  for (Index d = 0; d < g; ++d) {
    const Vec k = gp.ku(d, x_star);
    const double kxx =
        kernel_value(gp.model().kernels[static_cast<std::size_t>(d)], x_star, x_star);
    const Vec kinv_k = gp.kuu(d).solve(k);
    const double b = std::max(0.0, kxx - k.dot(kinv_k));
    out.mean[d] = k.dot(cache.alpha[static_cast<std::size_t>(d)]);
    out.var[d] = b + k.dot(cache.w[static_cast<std::size_t>(d)] * k);
  }
  return out;
}

DiagGaussian predict_transition(const SparseGp& gp, const InducingPosterior& q,
                                const Vec& x_star) {
  return predict_transition(gp, make_predictor_cache(gp, q), x_star);
}

RolloutResult rollout(const SparseGp& gp, const InducingPosterior& q, const Vec& x0,
                      Index horizon, RolloutMode mode, std::uint64_t seed) {
  if (horizon < 1) throw std::invalid_argument("rollout: horizon must be >= 1");
  check_dims(gp, q);
  const Index d_lat = gp.model().latent_dim();
  const Index g = gp.gp_output_dim();
  const PredictorCache cache = make_predictor_cache(gp, q);

  RngStream rng(mix_seed(seed, 0x7011ULL));
  RolloutResult out;
  out.states.resize(horizon + 1, d_lat);
  out.states.row(0) = x0;

  // One function draw held across the rollout for NoiseFree mode.
  Mat u_draw;
  if (mode == RolloutMode::NoiseFree) {
    u_draw.resize(gp.num_inducing(), g);
    for (Index d = 0; d < g; ++d) {
      const auto& nd = q.dims[static_cast<std::size_t>(d)];
      const PsdMatrix sig = robust_factor(nd.sigma);
      Vec xi(gp.num_inducing());
      for (Index i = 0; i < xi.size(); ++i) xi[i] = rng.normal();
      u_draw.col(d) = nd.mu + sig.chol_lower() * xi;
    }
  }

  Vec x = x0;
  for (Index t = 1; t <= horizon; ++t) {
    Vec f(g);
    switch (mode) {
      case RolloutMode::MeanOnly: {
        f = predict_transition(gp, cache, x).mean;
        break;
      }
      case RolloutMode::NoiseFree: {
        const TransitionOperators ops = transition_operators(gp, x);
        for (Index d = 0; d < g; ++d) {
          f[d] = ops.a.row(d).dot(u_draw.col(d)) + std::sqrt(ops.b[d]) * rng.normal();
        }
        break;
      }
      case RolloutMode::SampleFunctionFree: {
        const DiagGaussian pred = predict_transition(gp, cache, x);
        for (Index d = 0; d < g; ++d) {
          f[d] = pred.mean[d] + std::sqrt(std::max(0.0, pred.var[d])) * rng.normal();
        }
        break;
      }
    }
    x = apply_structure(gp.model(), x, f);
    out.states.row(t) = x;
  }
  return out;
}

}  // namespace gpssm
