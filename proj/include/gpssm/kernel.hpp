#pragma once

#include <span>
#include <vector>

#include "gpssm/errors.hpp"
#include "gpssm/types.hpp"

namespace gpssm {

enum class KernelFamily { Matern32, Matern52, SquaredExponential };

// A stationary scalar covariance function with ARD lengthscales (one per
// input dimension) and a zero mean function. Under the independent-output
// convention a vector-valued GP uses one KernelSpec per output dimension.
struct KernelSpec {
  KernelFamily family = KernelFamily::SquaredExponential;
  Vec lengthscales;
  double signal_variance = 1.0;
};

KernelSpec make_kernel(KernelFamily family, Vec lengthscales, double signal_variance);

// Throws std::invalid_argument unless all lengthscales and the signal
// variance are positive and finite.
void validate(const KernelSpec& spec);

// Scalar kernel evaluation k(a, b). Throws on non-finite inputs.
double kernel_value(const KernelSpec& spec, const Vec& a, const Vec& b);

// Kernel value together with the derivatives used by hyperparameter and
// inducing-input gradients. d_first_arg is dk/da (the gradient with respect
// to the first argument); by stationarity dk/db = -dk/da.
struct KernelGrad {
  double value = 0;
  Vec d_log_lengthscales;
  double d_log_signal_variance = 0;
  Vec d_first_arg;
};

KernelGrad kernel_value_grad(const KernelSpec& spec, const Vec& a, const Vec& b);

// D x D cross-covariance block between two points in R^D: diagonal with one
// scalar kernel per output dimension. The single-spec overload shares
// hyperparameters across output dimensions.
Mat eval_kernel(const KernelSpec& spec, const Vec& a, const Vec& b);
Mat eval_kernel(std::span<const KernelSpec> specs, const Vec& a, const Vec& b);

// Scalar Gram matrix: entry (i, j) = k(rows.row(i), cols.row(j)).
// Points are stored one per row.
Mat kernel_gram(const KernelSpec& spec, const Mat& rows, const Mat& cols);

// Block cross-covariance matrix of size (n*D) x (m*D); block (i, j) equals
// eval_kernel(spec, rows.row(i), cols.row(j)). Empty point sets give an
// empty matrix.
Mat kernel_matrix(const KernelSpec& spec, const Mat& rows, const Mat& cols);

// Symmetric positive-semidefinite matrix with a cached Cholesky factor.
// jitter_applied is the diagonal inflation that made the factorization
// succeed (0 when none was needed).
class PsdMatrix {
 public:
  PsdMatrix() = default;
  PsdMatrix(Mat matrix, Mat chol_lower, double jitter_applied);

  const Mat& matrix() const { return matrix_; }
  const Mat& chol_lower() const { return chol_; }
  double jitter_applied() const { return jitter_; }
  Index size() const { return matrix_.rows(); }

  Vec solve(const Vec& rhs) const;
  Mat solve(const Mat& rhs) const;
  Mat inverse() const;
  double log_det() const;

 private:
  Mat matrix_;
  Mat chol_;
  double jitter_ = 0;
};

// Cholesky factorization with geometric jitter escalation: first attempt is
// jitter-free, then 1e-10..1e-4 times mean(diag) in decade steps. Throws
// SingularMatrixError (carrying the last attempted jitter) if all fail, and
// std::invalid_argument if m is not symmetric to 1e-12 relative tolerance.
PsdMatrix robust_factor(const Mat& m);

}  // namespace gpssm
