#include "gpssm/eval.hpp"

#include <cmath>

#include "gpssm/rng.hpp"

namespace gpssm {

namespace {
constexpr double kLog2Pi = 1.8378770664093453;
}

double kink_true_f(double x) { return x < 4.0 ? x + 1.0 : -4.0 * x + 21.0; }

Trajectory kink_system_generate(Index T, std::uint64_t seed) {
  if (T < 1) throw std::invalid_argument("kink_system_generate: T must be >= 1");
  RngStream rng(mix_seed(seed, 0x414bULL));
  Trajectory traj;
  traj.states.resize(T + 1, 1);
  traj.observations.resize(T, 1);
  traj.states(0, 0) = rng.normal();
  for (Index t = 1; t <= T; ++t) {
    const double x = kink_true_f(traj.states(t - 1, 0)) + rng.normal();
    traj.states(t, 0) = x;
    traj.observations(t - 1, 0) = x + rng.normal();
  }
  return traj;
}

Mat transition_pairs(const Trajectory& traj) {
  const Index T = traj.states.rows() - 1;
  const Index d = traj.states.cols();
  Mat pairs(T, 2 * d);
  for (Index t = 0; t < T; ++t) {
    pairs.row(t).head(d) = traj.states.row(t);
    pairs.row(t).tail(d) = traj.states.row(t + 1);
  }
  return pairs;
}

TransitionMetrics transition_metrics(const SparseGp& gp, const InducingPosterior& q,
                                     const Mat& test_pairs) {
  if (test_pairs.rows() == 0) {
    throw std::invalid_argument("transition_metrics: empty test set");
  }
  const Index d = gp.model().latent_dim();
  const PredictorCache cache = make_predictor_cache(gp, q);

  double sq_sum = 0;
  double ll_sum = 0;
  for (Index i = 0; i < test_pairs.rows(); ++i) {
    const Vec x_t = test_pairs.row(i).head(d);
    const Vec x_next = test_pairs.row(i).tail(d);
    const DiagGaussian pred = predict_transition(gp, cache, x_t);
    const Vec mean_next = apply_structure(gp.model(), x_t, pred.mean);
    sq_sum += (x_next - mean_next).squaredNorm();

    // Predictive density of the next state: GP variance plus process noise on
    // the GP-driven components.
    const Vec targets = gp.model().gp_components(x_next);
    for (Index k = 0; k < targets.size(); ++k) {
      const double var = pred.var[k] + gp.model().process_noise[k];
      const double r = targets[k] - pred.mean[k];
      ll_sum += -0.5 * (kLog2Pi + std::log(var)) - 0.5 * r * r / var;
    }
  }
  TransitionMetrics out;
  out.rmse = std::sqrt(sq_sum / static_cast<double>(test_pairs.rows() * d));
  out.mean_loglik = ll_sum / static_cast<double>(test_pairs.rows());
  return out;
}

double LinearArPredictor::predict(const Vec& history) const {
  double out = weights[order];  // bias
  for (Index k = 0; k < order; ++k) {
    out += weights[k] * history[history.size() - order + k];
  }
  return out;
}

LinearArPredictor linear_baseline(const Mat& observations, Index order) {
  const Index T = observations.rows();
  if (order < 1) throw std::invalid_argument("linear_baseline: order must be >= 1");
  if (T <= 10 * order) {
    throw std::invalid_argument("linear_baseline: need T > 10 * order observations");
  }
  if (observations.cols() != 1) {
    throw std::invalid_argument("linear_baseline: univariate observations only");
  }

  const Index n = T - order;
  Mat design(n, order + 1);
  Vec target(n);
  for (Index i = 0; i < n; ++i) {
    for (Index k = 0; k < order; ++k) design(i, k) = observations(i + k, 0);
    design(i, order) = 1.0;
    target[i] = observations(i + order, 0);
  }

  LinearArPredictor out;
  out.order = order;
  const Mat gram = design.transpose() * design;
  Eigen::LLT<Mat> llt(gram);
  bool full_rank = llt.info() == Eigen::Success;
  if (full_rank) {
    const Mat lower = llt.matrixL();
    full_rank = lower.allFinite() &&
                (lower.diagonal().array() > 1e-10 * std::sqrt(std::max(1.0, gram.trace()))).all();
  }
  if (full_rank) {
    out.weights = llt.solve(design.transpose() * target);
  } else {
    const Mat ridge = gram + 1e-6 * std::max(1.0, gram.trace()) /
                                 static_cast<double>(order + 1) *
                                 Mat::Identity(order + 1, order + 1);
    out.weights = ridge.llt().solve(design.transpose() * target);
    out.ridge_fallback = true;
  }
  const Vec resid = target - design * out.weights;
  out.residual_var = std::max(1e-12, resid.squaredNorm() / static_cast<double>(n));
  return out;
}

TransitionMetrics evaluate_baseline(const LinearArPredictor& baseline, const Mat& test_pairs) {
  if (test_pairs.rows() == 0) {
    throw std::invalid_argument("evaluate_baseline: empty test set");
  }
  if (baseline.order != 1 || test_pairs.cols() != 2) {
    throw std::invalid_argument("evaluate_baseline: transition pairs support order-1 prediction");
  }
  double sq_sum = 0;
  double ll_sum = 0;
  for (Index i = 0; i < test_pairs.rows(); ++i) {
    Vec hist(1);
    hist[0] = test_pairs(i, 0);
    const double mean = baseline.predict(hist);
    const double r = test_pairs(i, 1) - mean;
    sq_sum += r * r;
    ll_sum += -0.5 * (kLog2Pi + std::log(baseline.residual_var)) -
              0.5 * r * r / baseline.residual_var;
  }
  TransitionMetrics out;
  out.rmse = std::sqrt(sq_sum / static_cast<double>(test_pairs.rows()));
  out.mean_loglik = ll_sum / static_cast<double>(test_pairs.rows());
  return out;
}

}  // namespace gpssm
