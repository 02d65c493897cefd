#include "gpssm/kernel.hpp"

#include <cmath>
#include <sstream>

namespace gpssm {

namespace {

constexpr double kSqrt3 = 1.7320508075688772;
constexpr double kSqrt5 = 2.2360679774997896;

void check_finite_point(const Vec& p, const char* name) {
  if (!p.allFinite()) {
    throw std::invalid_argument(std::string("kernel: non-finite input point ") + name);
  }
}

// Squared ARD distance s = sum_j (a_j - b_j)^2 / l_j^2.
double scaled_sq_dist(const KernelSpec& spec, const Vec& a, const Vec& b) {
  return ((a - b).array() / spec.lengthscales.array()).square().sum();
}

// Kernel value and dk/ds as functions of the squared scaled distance s.
// Both are smooth in s (no r = sqrt(s) singularity at zero).
struct RadialEval {
  double value;
  double d_value_d_s;
};

RadialEval radial_eval(KernelFamily family, double signal_variance, double s) {
  const double r = std::sqrt(s);
  switch (family) {
    case KernelFamily::SquaredExponential: {
      const double v = signal_variance * std::exp(-0.5 * s);
      return {v, -0.5 * v};
    }
    case KernelFamily::Matern32: {
      const double e = std::exp(-kSqrt3 * r);
      return {signal_variance * (1.0 + kSqrt3 * r) * e, -1.5 * signal_variance * e};
    }
    case KernelFamily::Matern52: {
      const double e = std::exp(-kSqrt5 * r);
      return {signal_variance * (1.0 + kSqrt5 * r + 5.0 / 3.0 * s) * e,
              -(5.0 / 6.0) * signal_variance * (1.0 + kSqrt5 * r) * e};
    }
  }
  throw std::invalid_argument("kernel: unknown family");
}

}  // namespace

KernelSpec make_kernel(KernelFamily family, Vec lengthscales, double signal_variance) {
  KernelSpec spec{family, std::move(lengthscales), signal_variance};
  validate(spec);
  return spec;
}

void validate(const KernelSpec& spec) {
  if (spec.lengthscales.size() == 0) {
    throw std::invalid_argument("kernel: empty lengthscale vector");
  }
  for (Index j = 0; j < spec.lengthscales.size(); ++j) {
    const double l = spec.lengthscales[j];
    if (!(l > 0) || !std::isfinite(l)) {
      throw std::invalid_argument("kernel: lengthscales must be positive and finite");
    }
  }
  if (!(spec.signal_variance > 0) || !std::isfinite(spec.signal_variance)) {
    throw std::invalid_argument("kernel: signal_variance must be positive and finite");
  }
}

double kernel_value(const KernelSpec& spec, const Vec& a, const Vec& b) {
  check_finite_point(a, "a");
  check_finite_point(b, "b");
  return radial_eval(spec.family, spec.signal_variance, scaled_sq_dist(spec, a, b)).value;
}

KernelGrad kernel_value_grad(const KernelSpec& spec, const Vec& a, const Vec& b) {
  check_finite_point(a, "a");
  check_finite_point(b, "b");
  const Vec diff = a - b;
  const Vec inv_l2 = spec.lengthscales.array().square().inverse();
  const double s = (diff.array().square() * inv_l2.array()).sum();
  const RadialEval e = radial_eval(spec.family, spec.signal_variance, s);

  KernelGrad g;
  g.value = e.value;
  // ds/dlog(l_j) = -2 d_j^2 / l_j^2, ds/da_j = 2 d_j / l_j^2
  g.d_log_lengthscales = e.d_value_d_s * (-2.0) * diff.array().square() * inv_l2.array();
  g.d_log_signal_variance = e.value;
  g.d_first_arg = e.d_value_d_s * 2.0 * diff.array() * inv_l2.array();
  return g;
}

Mat eval_kernel(const KernelSpec& spec, const Vec& a, const Vec& b) {
  const Index d = a.size();
  return kernel_value(spec, a, b) * Mat::Identity(d, d);
}

Mat eval_kernel(std::span<const KernelSpec> specs, const Vec& a, const Vec& b) {
  const Index d = a.size();
  Mat out = Mat::Zero(d, d);
  if (static_cast<Index>(specs.size()) != d) {
    throw std::invalid_argument("eval_kernel: one KernelSpec per output dimension required");
  }
  for (Index i = 0; i < d; ++i) {
    out(i, i) = kernel_value(specs[static_cast<std::size_t>(i)], a, b);
  }
  return out;
}

Mat kernel_gram(const KernelSpec& spec, const Mat& rows, const Mat& cols) {
  Mat out(rows.rows(), cols.rows());
  for (Index i = 0; i < rows.rows(); ++i) {
    for (Index j = 0; j < cols.rows(); ++j) {
      out(i, j) = kernel_value(spec, rows.row(i), cols.row(j));
    }
  }
  return out;
}

Mat kernel_matrix(const KernelSpec& spec, const Mat& rows, const Mat& cols) {
  if (rows.rows() == 0 || cols.rows() == 0) {
    return Mat(0, 0);
  }
  const Index d = rows.cols();
  const Mat gram = kernel_gram(spec, rows, cols);
  Mat out = Mat::Zero(rows.rows() * d, cols.rows() * d);
  for (Index i = 0; i < rows.rows(); ++i) {
    for (Index j = 0; j < cols.rows(); ++j) {
      out.block(i * d, j * d, d, d) = gram(i, j) * Mat::Identity(d, d);
    }
  }
  return out;
}

PsdMatrix::PsdMatrix(Mat matrix, Mat chol_lower, double jitter_applied)
    : matrix_(std::move(matrix)), chol_(std::move(chol_lower)), jitter_(jitter_applied) {}

Vec PsdMatrix::solve(const Vec& rhs) const {
  Vec y = chol_.triangularView<Eigen::Lower>().solve(rhs);
  return chol_.transpose().triangularView<Eigen::Upper>().solve(y);
}

Mat PsdMatrix::solve(const Mat& rhs) const {
  Mat y = chol_.triangularView<Eigen::Lower>().solve(rhs);
  return chol_.transpose().triangularView<Eigen::Upper>().solve(y);
}

Mat PsdMatrix::inverse() const { return solve(Mat(Mat::Identity(size(), size()))); }

double PsdMatrix::log_det() const {
  return 2.0 * chol_.diagonal().array().log().sum();
}

PsdMatrix robust_factor(const Mat& m) {
  if (m.rows() != m.cols()) {
    throw std::invalid_argument("robust_factor: matrix must be square");
  }
  const double scale = m.cwiseAbs().maxCoeff();
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, scale)) {
    throw std::invalid_argument("robust_factor: matrix is not symmetric");
  }

  double diag_mean = m.diagonal().mean();
  if (!(diag_mean > 0)) diag_mean = 1.0;

  double jitter = 0.0;
  for (int attempt = 0;; ++attempt) {
    Mat shifted = m;
    if (jitter > 0) shifted.diagonal().array() += jitter;
    Eigen::LLT<Mat> llt(shifted);
    if (llt.info() == Eigen::Success) {
      Mat lower = llt.matrixL();
      if (lower.allFinite() && (lower.diagonal().array() > 0).all()) {
        return PsdMatrix(std::move(shifted), std::move(lower), jitter);
      }
    }
    if (attempt == 0) {
      jitter = 1e-10 * diag_mean;
    } else {
      jitter *= 10.0;
    }
    if (jitter > 1e-4 * diag_mean * (1.0 + 1e-12)) {
      std::ostringstream msg;
      msg << "robust_factor: Cholesky failed at maximum jitter " << jitter / 10.0;
      throw SingularMatrixError(msg.str(), jitter / 10.0);
    }
  }
}

}  // namespace gpssm
