// Test-only oracles: Gauss-Hermite quadrature and a dense Kalman/RTS
// smoother for linear-Gaussian reference solutions. Independent of the
// library's inference code paths on purpose.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

namespace oracles {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

// Nodes and weights for int e^{-t^2} f(t) dt via the Golub-Welsch
// tridiagonal eigenvalue construction.
struct GaussHermite {
  Vec nodes;
  Vec weights;
};

inline GaussHermite gauss_hermite(Index n) {
  Mat jac = Mat::Zero(n, n);
  for (Index i = 1; i < n; ++i) {
    const double off = std::sqrt(static_cast<double>(i) / 2.0);
    jac(i, i - 1) = off;
    jac(i - 1, i) = off;
  }
  Eigen::SelfAdjointEigenSolver<Mat> eig(jac);
  GaussHermite out;
  out.nodes = eig.eigenvalues();
  out.weights.resize(n);
  const double sqrt_pi = std::sqrt(M_PI);
  for (Index i = 0; i < n; ++i) {
    const double v0 = eig.eigenvectors()(0, i);
    out.weights[i] = sqrt_pi * v0 * v0;
  }
  return out;
}

// Expectation of f under N(mean, var) by Gauss-Hermite quadrature.
template <typename F>
double gh_expect(F f, double mean, double var, Index n = 40) {
  const GaussHermite gh = gauss_hermite(n);
  double out = 0;
  for (Index i = 0; i < n; ++i) {
    out += gh.weights[i] / std::sqrt(M_PI) * f(mean + std::sqrt(2.0 * var) * gh.nodes[i]);
  }
  return out;
}

// Linear-Gaussian SSM: x_t = F x_{t-1} + c + w, w ~ N(0, Q);
// y_t = H x_t + v, v ~ N(0, R); x_0 ~ N(m0, P0). Time steps t = 1..T.
struct LinearSsm {
  Mat F, Q, H, R;
  Vec c;
  Vec m0;
  Mat P0;
};

struct KalmanResult {
  std::vector<Vec> filt_mean;    // x_t | y_{1:t}, t = 0..T (t=0 is the prior)
  std::vector<Mat> filt_cov;
  std::vector<Vec> pred_mean;    // x_t | y_{1:t-1}, t = 1..T
  std::vector<Mat> pred_cov;
  std::vector<Vec> smooth_mean;  // x_t | y_{1:T}
  std::vector<Mat> smooth_cov;
  std::vector<Mat> lag_one_cov;  // Cov(x_t, x_{t-1} | y_{1:T}), t = 1..T
  double log_evidence = 0;
};

inline KalmanResult kalman_rts(const LinearSsm& ssm, const Mat& y) {
  const Index T = y.rows();
  const Index d = ssm.m0.size();
  KalmanResult r;
  r.filt_mean.resize(T + 1);
  r.filt_cov.resize(T + 1);
  r.pred_mean.resize(T + 1);
  r.pred_cov.resize(T + 1);
  r.filt_mean[0] = ssm.m0;
  r.filt_cov[0] = ssm.P0;

  for (Index t = 1; t <= T; ++t) {
    const Vec mp = ssm.F * r.filt_mean[t - 1] + ssm.c;
    const Mat pp = ssm.F * r.filt_cov[t - 1] * ssm.F.transpose() + ssm.Q;
    r.pred_mean[t] = mp;
    r.pred_cov[t] = pp;

    const Vec resid = y.row(t - 1).transpose() - ssm.H * mp;
    const Mat s = ssm.H * pp * ssm.H.transpose() + ssm.R;
    const Mat s_inv = s.inverse();
    const Mat gain = pp * ssm.H.transpose() * s_inv;
    r.filt_mean[t] = mp + gain * resid;
    r.filt_cov[t] = pp - gain * ssm.H * pp;

    const double quad = resid.dot(s_inv * resid);
    r.log_evidence += -0.5 * (static_cast<double>(y.cols()) * std::log(2.0 * M_PI) +
                              std::log(s.determinant()) + quad);
  }

  r.smooth_mean.resize(T + 1);
  r.smooth_cov.resize(T + 1);
  r.lag_one_cov.resize(T + 1);
  r.smooth_mean[T] = r.filt_mean[T];
  r.smooth_cov[T] = r.filt_cov[T];
  std::vector<Mat> gains(T + 1, Mat::Zero(d, d));
  for (Index t = T - 1; t >= 0; --t) {
    const Mat j = r.filt_cov[t] * ssm.F.transpose() * r.pred_cov[t + 1].inverse();
    gains[t] = j;
    r.smooth_mean[t] = r.filt_mean[t] + j * (r.smooth_mean[t + 1] - r.pred_mean[t + 1]);
    r.smooth_cov[t] =
        r.filt_cov[t] + j * (r.smooth_cov[t + 1] - r.pred_cov[t + 1]) * j.transpose();
    if (t == 0) break;
  }
  for (Index t = 1; t <= T; ++t) {
    // Cov(x_t, x_{t-1} | y_{1:T}) = P_t^s J_{t-1}^T.
    r.lag_one_cov[t] = r.smooth_cov[t] * gains[t - 1].transpose();
  }
  return r;
}

}  // namespace oracles
