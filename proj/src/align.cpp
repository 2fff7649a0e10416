#include "corrmatch/align.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

#include "corrmatch/error.hpp"

namespace corrmatch {

namespace {

constexpr double kMinWeight = 1e-12;

AlignmentResult fit(const PointCloud& x, const PointCloud& y, const Eigen::VectorXd& w) {
  const double total = w.sum();
  if (!(total >= kMinWeight)) throw NumericalError("alignment weights sum to zero");

  const Eigen::Vector3d x_mean = (x * w) / total;
  const Eigen::Vector3d y_mean = (y * w) / total;
  const PointCloud xc = x.colwise() - x_mean;
  const PointCloud yc = y.colwise() - y_mean;
  const Eigen::Matrix3d h = xc * w.asDiagonal() * yc.transpose();

  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d s = svd.singularValues();
  const double scale = std::max(xc.cwiseAbs().maxCoeff(), yc.cwiseAbs().maxCoeff());
  if (!(s[1] > 1e-12 * std::max(s[0], total * scale * scale))) {
    throw NumericalError("degenerate configuration: cross-covariance rank <= 1");
  }
  const Eigen::Matrix3d& u = svd.matrixU();
  const Eigen::Matrix3d& v = svd.matrixV();
  Eigen::Vector3d d(1.0, 1.0, (v * u.transpose()).determinant() < 0.0 ? -1.0 : 1.0);

  AlignmentResult out;
  out.transform.rotation = v * d.asDiagonal() * u.transpose();
  out.transform.translation = y_mean - out.transform.rotation * x_mean;
  const Eigen::VectorXd sq = (apply_transform(out.transform, x) - y).colwise().squaredNorm();
  out.residual = std::sqrt(std::max(0.0, sq.dot(w) / total));
  out.effective_weight = total;
  return out;
}

void check_pairs(const PointCloud& x, const PointCloud& y) {
  if (x.cols() != y.cols()) {
    throw std::invalid_argument("paired clouds differ in size: " + std::to_string(x.cols()) + " vs " +
                                std::to_string(y.cols()));
  }
  if (x.cols() < 3) throw std::invalid_argument("alignment is underdetermined with fewer than 3 pairs");
  validate_cloud(x, "source cloud");
  validate_cloud(y, "target cloud");
}

}  // namespace

AlignmentResult horn_align(const PointCloud& x, const PointCloud& y_paired) {
  check_pairs(x, y_paired);
  return fit(x, y_paired, Eigen::VectorXd::Ones(x.cols()));
}

AlignmentResult weighted_procrustes(const PointCloud& x, const PointCloud& y_paired, const Eigen::VectorXd& weights) {
  check_pairs(x, y_paired);
  if (weights.size() != x.cols()) throw std::invalid_argument("weight count does not match point count");
  if (!weights.allFinite() || weights.minCoeff() < 0.0) throw std::invalid_argument("weights must be nonnegative");
  return fit(x, y_paired, weights);
}

AlignmentResult weighted_align(const PointCloud& x, const PointCloud& y, const CorrespondenceMatrix& c) {
  if (c.outlier_augmented()) throw std::invalid_argument("weighted_align expects a matrix without outlier row");
  if (c.target_count() != y.cols() || c.source_count() != x.cols()) {
    throw std::invalid_argument("correspondence matrix shape does not match the clouds");
  }
  const PointCloud y_hat = y * c.values();
  return horn_align(x, y_hat);
}

AlignmentResult weighted_align_outlier(const PointCloud& x, const PointCloud& y, const CorrespondenceMatrix& c_outlier) {
  if (!c_outlier.outlier_augmented()) throw std::invalid_argument("weighted_align_outlier expects an outlier row");
  if (c_outlier.target_count() != y.cols() || c_outlier.source_count() != x.cols()) {
    throw std::invalid_argument("correspondence matrix shape does not match the clouds");
  }
  validate_cloud(x, "source cloud");
  validate_cloud(y, "target cloud");
  const Eigen::Index ny = y.cols();
  const Eigen::MatrixXd& c = c_outlier.values();

  Eigen::VectorXd w(x.cols());
  PointCloud y_hat = PointCloud::Zero(3, x.cols());
  for (Eigen::Index i = 0; i < x.cols(); ++i) {
    const auto inlier = c.col(i).head(ny);
    const double mass = inlier.sum();
    if (mass < kMinWeight) {
      w[i] = 0.0;
      continue;
    }
    w[i] = std::max(0.0, 1.0 - c(ny, i));
    y_hat.col(i) = y * inlier / mass;
  }
  if (w.sum() < 3.0) {
    throw NumericalError("insufficient inliers: weights sum to " + std::to_string(w.sum()) + " < 3");
  }
  return fit(x, y_hat, w);
}

IcpResult icp(const PointCloud& x, const PointCloud& y, const RigidTransform& init, const IcpOptions& options) {
  if (options.max_iters < 1) throw std::invalid_argument("icp needs max_iters >= 1");
  if (!(options.tol > 0.0)) throw std::invalid_argument("icp tolerance must be positive");
  validate_cloud(x, "source cloud");
  validate_cloud(y, "target cloud");

  IcpResult out;
  RigidTransform current = init;
  PointCloud paired(3, x.cols());
  for (int it = 0; it < options.max_iters; ++it) {
    const auto nn = nearest_neighbors(apply_transform(current, x), y);
    for (Eigen::Index i = 0; i < x.cols(); ++i) paired.col(i) = y.col(nn[static_cast<std::size_t>(i)].index);
    const AlignmentResult step = horn_align(x, paired);

    IcpIteration rec;
    rec.transform = step.transform;
    rec.residual = step.residual;
    rec.rotation_change = rotation_angle(step.transform.rotation * current.rotation.transpose());
    rec.translation_change = (step.transform.translation - current.translation).norm();
    out.trace.push_back(rec);

    current = step.transform;
    out.alignment = step;
    if (rec.rotation_change < options.tol && rec.translation_change < options.tol) {
      out.converged = true;
      break;
    }
  }
  return out;
}

}  // namespace corrmatch
