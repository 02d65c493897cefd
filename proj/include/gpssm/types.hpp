#pragma once

#include <Eigen/Dense>

namespace gpssm {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

// Gaussian with diagonal covariance, stored as per-dimension variances.
struct DiagGaussian {
  Vec mean;
  Vec var;

  Index dim() const { return mean.size(); }
};

double log_density(const DiagGaussian& g, const Vec& x);

}  // namespace gpssm
