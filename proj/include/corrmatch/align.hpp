#pragma once

#include <vector>

#include <Eigen/Core>

#include "corrmatch/correspondence.hpp"
#include "corrmatch/geom.hpp"

namespace corrmatch {

struct AlignmentResult {
  RigidTransform transform;
  /// RMS (weighted, where weights apply) of ||R x_i + t - y_i|| after alignment.
  double residual = 0.0;
  /// Sum of the weights that entered the fit; N for unweighted alignment.
  double effective_weight = 0.0;
};

/// Closed-form least-squares rigid fit of paired points (SVD of the
/// cross-covariance with the determinant correction, so det(R) = +1).
/// Throws std::invalid_argument for fewer than 3 pairs and NumericalError
/// when the cross-covariance has rank <= 1.
AlignmentResult horn_align(const PointCloud& x, const PointCloud& y_paired);

/// Weighted variant of horn_align. Weights must be nonnegative.
AlignmentResult weighted_procrustes(const PointCloud& x, const PointCloud& y_paired, const Eigen::VectorXd& weights);

/// Forms the probability-weighted targets Y C and aligns X onto them.
AlignmentResult weighted_align(const PointCloud& x, const PointCloud& y, const CorrespondenceMatrix& c);

/// Uses 1 - (outlier row) as per-source weights and the renormalized inlier
/// rows as targets. Throws NumericalError if the weights sum to less than 3.
AlignmentResult weighted_align_outlier(const PointCloud& x, const PointCloud& y, const CorrespondenceMatrix& c_outlier);

struct IcpOptions {
  int max_iters = 50;
  double tol = 1e-6;
};

struct IcpIteration {
  RigidTransform transform;
  double residual = 0.0;
  double rotation_change = 0.0;     // radians
  double translation_change = 0.0;
};

struct IcpResult {
  AlignmentResult alignment;
  std::vector<IcpIteration> trace;
  bool converged = false;
};

/// Point-to-point ICP. Each iteration pairs the transformed source with its
/// nearest targets and refits from scratch; it stops once both parameter
/// changes drop below tol.
IcpResult icp(const PointCloud& x, const PointCloud& y, const RigidTransform& init, const IcpOptions& options = {});

}  // namespace corrmatch
