#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "corrmatch/rng.hpp"

namespace corrmatch {

/// Points are stored column-wise; the column index is the point's identity.
using PointCloud = Eigen::Matrix3Xd;
/// Axis-angle vector: direction is the axis, norm the angle in radians.
using RotationVector = Eigen::Vector3d;

inline constexpr double kRotationTolerance = 1e-9;

struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static RigidTransform identity() { return {}; }

  RigidTransform inverse() const;
  /// (this * other)(x) = this(other(x)).
  RigidTransform operator*(const RigidTransform& other) const;
  Eigen::Vector3d operator()(const Eigen::Vector3d& x) const { return rotation * x + translation; }
};

bool is_rotation(const Eigen::Matrix3d& r, double tol = kRotationTolerance);

/// Throws std::invalid_argument if the cloud is empty or has a non-finite coordinate.
void validate_cloud(const PointCloud& cloud, std::string_view what = "point cloud");

// ---------------------------------------------------------------------------
// Rotation parameterizations
// ---------------------------------------------------------------------------

/// Rodrigues formula. The zero vector maps to the identity.
Eigen::Matrix3d rotvec_to_matrix(const RotationVector& v);

/// Inverse of rotvec_to_matrix with the angle wrapped into [0, pi]. At exactly
/// pi the axis is taken from the symmetric part of R and its sign chosen so
/// the first nonzero component is positive.
RotationVector matrix_to_rotvec(const Eigen::Matrix3d& r);

/// Relative rotation angle in radians, accurate near 0 and pi.
double rotation_angle(const Eigen::Matrix3d& r);

/// Intrinsic ZYX Euler angles (yaw about z, pitch about y, roll about x) in
/// radians, so that r = Rz(yaw) * Ry(pitch) * Rx(roll).
Eigen::Vector3d euler_zyx(const Eigen::Matrix3d& r);

// ---------------------------------------------------------------------------
// Sampling and synthetic data
// ---------------------------------------------------------------------------

/// Axis uniform on the sphere, angle uniform in [-theta0, theta0], each
/// translation component uniform in [-t_bound, t_bound].
RigidTransform sample_misalignment(Rng& rng, double theta0, double t_bound);

/// Same recipe with the angle magnitude drawn uniformly from [lo, hi].
RigidTransform sample_misalignment_range(Rng& rng, double angle_lo, double angle_hi, double t_bound);

PointCloud apply_transform(const RigidTransform& t, const PointCloud& x);

struct CropResult {
  PointCloud cloud;
  /// Indices into the input cloud, increasing.
  std::vector<Eigen::Index> survivors;
  Eigen::Vector3d normal;
};

/// Number of points crop_partial keeps: keep_fraction * n rounded to nearest.
Eigen::Index crop_count(Eigen::Index n, double keep_fraction);

/// Cuts the cloud with a random plane through its centroid and keeps the
/// points with the largest signed distance along the plane normal.
CropResult crop_partial(const PointCloud& x, double keep_fraction, Rng& rng);

enum class ShapeKind { asymmetric_blob, box_surface, helix, l_bracket };

ShapeKind parse_shape_kind(std::string_view name);
std::string_view to_string(ShapeKind kind);

/// Desk-scale synthetic shapes, centered near the origin with extent of
/// roughly one unit. The box surface and L-bracket keep their discrete
/// mirror symmetries; the blob and helix have none.
PointCloud generate_shape(ShapeKind kind, Eigen::Index n, Rng& rng);

/// n points uniform in the axis-aligned unit cube [-0.5, 0.5]^3.
PointCloud sample_unit_cube(Eigen::Index n, Rng& rng);

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

enum class RotationMetric { geodesic, euler_mae, euler_rmse };

RotationMetric parse_rotation_metric(std::string_view name);

/// Rotation error in degrees. The Euler metrics are the mean absolute value
/// and the RMS of the three ZYX angles of R_pred^T R_true.
double rotation_error(const Eigen::Matrix3d& r_pred, const Eigen::Matrix3d& r_true, RotationMetric metric);

double translation_error(const Eigen::Vector3d& t_pred, const Eigen::Vector3d& t_true);

/// Root mean square of per-sample translation errors.
double translation_rmse(const std::vector<Eigen::Vector3d>& t_pred, const std::vector<Eigen::Vector3d>& t_true);

/// Mean nearest-neighbor distance from X to Y plus from Y to X (not squared).
double chamfer_distance(const PointCloud& x, const PointCloud& y);

// ---------------------------------------------------------------------------
// ASCII XYZ files: one "x y z" point per line, '#' comments.
// ---------------------------------------------------------------------------

PointCloud load_xyz(const std::filesystem::path& path);
PointCloud parse_xyz(std::string_view text);
void save_xyz(const PointCloud& cloud, const std::filesystem::path& path);

}  // namespace corrmatch
