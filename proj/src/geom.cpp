#include "corrmatch/geom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <Eigen/Dense>

#include "corrmatch/error.hpp"

namespace corrmatch {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kDeg = 180.0 / kPi;

Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
  Eigen::Matrix3d s;
  s << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return s;
}

Eigen::Vector3d vee_antisymmetric(const Eigen::Matrix3d& r) {
  return {r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1)};
}

void require_rotation(const Eigen::Matrix3d& r, const char* what) {
  if (!is_rotation(r)) throw std::invalid_argument(std::string(what) + " is not a rotation matrix");
}

}  // namespace

RigidTransform RigidTransform::inverse() const {
  RigidTransform inv;
  inv.rotation = rotation.transpose();
  inv.translation = -(inv.rotation * translation);
  return inv;
}

RigidTransform RigidTransform::operator*(const RigidTransform& other) const {
  RigidTransform out;
  out.rotation = rotation * other.rotation;
  out.translation = rotation * other.translation + translation;
  return out;
}

bool is_rotation(const Eigen::Matrix3d& r, double tol) {
  if (!r.allFinite()) return false;
  const Eigen::Matrix3d err = r.transpose() * r - Eigen::Matrix3d::Identity();
  return err.cwiseAbs().maxCoeff() <= tol && std::abs(r.determinant() - 1.0) <= tol;
}

void validate_cloud(const PointCloud& cloud, std::string_view what) {
  if (cloud.cols() < 1) throw std::invalid_argument(std::string(what) + " is empty");
  if (!cloud.allFinite()) throw std::invalid_argument(std::string(what) + " has non-finite coordinates");
}

Eigen::Matrix3d rotvec_to_matrix(const RotationVector& v) {
  const double theta = v.norm();
  const Eigen::Matrix3d k = skew(v);
  if (theta < 1e-8) {
    // Second-order Taylor expansion; exact to double precision here.
    return Eigen::Matrix3d::Identity() + k + 0.5 * k * k;
  }
  const double a = std::sin(theta) / theta;
  const double b = (1.0 - std::cos(theta)) / (theta * theta);
  return Eigen::Matrix3d::Identity() + a * k + b * k * k;
}

double rotation_angle(const Eigen::Matrix3d& r) {
  const double s = 0.5 * vee_antisymmetric(r).norm();
  const double c = 0.5 * (r.trace() - 1.0);
  return std::atan2(s, c);
}

RotationVector matrix_to_rotvec(const Eigen::Matrix3d& r) {
  require_rotation(r, "matrix_to_rotvec input");
  const Eigen::Vector3d w = vee_antisymmetric(r);  // 2 sin(theta) * axis
  const double theta = rotation_angle(r);
  if (theta < 1e-8) return 0.5 * w;
  if (theta < 0.5 * kPi) return theta / (2.0 * std::sin(theta)) * w;

  // Large angles: the axis is the dominant eigenvector of the symmetric part,
  // (R + R^T) / 2 = cos(theta) I + (1 - cos(theta)) a a^T.
  const Eigen::Matrix3d sym = 0.5 * (r + r.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(sym);
  Eigen::Vector3d axis = eig.eigenvectors().col(2).normalized();
  const double dot = axis.dot(w);
  if (std::abs(dot) > 1e-14) {
    if (dot < 0) axis = -axis;
  } else {
    for (int i = 0; i < 3; ++i) {
      if (std::abs(axis[i]) > 1e-12) {
        if (axis[i] < 0) axis = -axis;
        break;
      }
    }
  }
  return theta * axis;
}

Eigen::Vector3d euler_zyx(const Eigen::Matrix3d& r) {
  const double yaw = std::atan2(r(1, 0), r(0, 0));
  const double pitch = std::atan2(-r(2, 0), std::hypot(r(0, 0), r(1, 0)));
  const double roll = std::atan2(r(2, 1), r(2, 2));
  return {yaw, pitch, roll};
}

RigidTransform sample_misalignment(Rng& rng, double theta0, double t_bound) {
  if (!(theta0 >= 0.0 && theta0 <= kPi)) throw std::invalid_argument("theta0 must lie in [0, pi]");
  if (!(t_bound >= 0.0)) throw std::invalid_argument("t_bound must be non-negative");
  const Eigen::Vector3d axis = rng.unit_vector();
  const double angle = rng.uniform(-theta0, theta0);
  RigidTransform t;
  t.rotation = rotvec_to_matrix(angle * axis);
  for (int i = 0; i < 3; ++i) t.translation[i] = rng.uniform(-t_bound, t_bound);
  return t;
}

RigidTransform sample_misalignment_range(Rng& rng, double angle_lo, double angle_hi, double t_bound) {
  if (!(angle_lo >= 0.0 && angle_lo <= angle_hi && angle_hi <= kPi)) {
    throw std::invalid_argument("misalignment range must satisfy 0 <= lo <= hi <= pi");
  }
  if (!(t_bound >= 0.0)) throw std::invalid_argument("t_bound must be non-negative");
  const Eigen::Vector3d axis = rng.unit_vector();
  const double angle = rng.uniform(angle_lo, angle_hi);
  RigidTransform t;
  t.rotation = rotvec_to_matrix(angle * axis);
  for (int i = 0; i < 3; ++i) t.translation[i] = rng.uniform(-t_bound, t_bound);
  return t;
}

PointCloud apply_transform(const RigidTransform& t, const PointCloud& x) {
  PointCloud out = t.rotation * x;
  out.colwise() += t.translation;
  return out;
}

Eigen::Index crop_count(Eigen::Index n, double keep_fraction) {
  // Nearest integer: 0.7 of 512 keeps 358, 0.7 of 1024 keeps 717.
  return static_cast<Eigen::Index>(std::floor(keep_fraction * static_cast<double>(n) + 0.5));
}

CropResult crop_partial(const PointCloud& x, double keep_fraction, Rng& rng) {
  validate_cloud(x, "crop_partial input");
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw std::invalid_argument("keep_fraction must lie in (0, 1]");
  }
  const Eigen::Index n = x.cols();
  const Eigen::Index keep = crop_count(n, keep_fraction);
  if (keep < 3) throw std::invalid_argument("crop_partial would keep fewer than 3 points");

  CropResult out;
  out.normal = rng.unit_vector();
  const Eigen::Vector3d centroid = x.rowwise().mean();
  const Eigen::VectorXd signed_dist = out.normal.transpose() * (x.colwise() - centroid);

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return signed_dist[a] > signed_dist[b]; });
  out.survivors.assign(order.begin(), order.begin() + keep);
  std::sort(out.survivors.begin(), out.survivors.end());

  out.cloud.resize(3, keep);
  for (Eigen::Index i = 0; i < keep; ++i) out.cloud.col(i) = x.col(out.survivors[static_cast<std::size_t>(i)]);
  return out;
}

ShapeKind parse_shape_kind(std::string_view name) {
  if (name == "asymmetric-blob") return ShapeKind::asymmetric_blob;
  if (name == "box-surface") return ShapeKind::box_surface;
  if (name == "helix") return ShapeKind::helix;
  if (name == "L-bracket" || name == "l-bracket") return ShapeKind::l_bracket;
  throw std::invalid_argument("unknown shape kind '" + std::string(name) + "'");
}

std::string_view to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::asymmetric_blob: return "asymmetric-blob";
    case ShapeKind::box_surface: return "box-surface";
    case ShapeKind::helix: return "helix";
    case ShapeKind::l_bracket: return "L-bracket";
  }
  return "?";
}

namespace {

PointCloud blob(Eigen::Index n, Rng& rng) {
  // Star-shaped surface with seed-dependent lobes on an anisotropic ellipsoid.
  const double a1 = rng.uniform(0.15, 0.3), a2 = rng.uniform(0.1, 0.25), a3 = rng.uniform(0.05, 0.15);
  const double p1 = rng.uniform(0, 2 * kPi), p2 = rng.uniform(0, 2 * kPi), p3 = rng.uniform(0, 2 * kPi);
  const Eigen::Vector3d scale(0.5, 0.36, 0.26);
  PointCloud pts(3, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Vector3d u = rng.unit_vector();
    const double r = 1.0 + a1 * std::sin(3.0 * u.x() + p1) + a2 * std::cos(2.0 * u.y() + u.z() + p2) +
                     a3 * std::sin(5.0 * u.z() + 2.0 * u.x() + p3) + 0.2 * std::max(0.0, u.x() + 0.5 * u.y());
    pts.col(i) = r * u.cwiseProduct(scale);
  }
  return pts;
}

PointCloud box_surface(Eigen::Index n, Rng& rng) {
  const Eigen::Vector3d dims(1.0, 0.7, 0.4);
  const double areas[3] = {dims.y() * dims.z(), dims.x() * dims.z(), dims.x() * dims.y()};
  const double total = areas[0] + areas[1] + areas[2];
  PointCloud pts(3, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double pick = rng.uniform(0.0, total);
    int axis = 0;
    while (axis < 2 && pick >= areas[axis]) pick -= areas[axis++];
    Eigen::Vector3d p;
    for (int d = 0; d < 3; ++d) p[d] = rng.uniform(-0.5, 0.5) * dims[d];
    p[axis] = (rng.uniform() < 0.5 ? -0.5 : 0.5) * dims[axis];
    pts.col(i) = p;
  }
  return pts;
}

PointCloud helix(Eigen::Index n, Rng& rng) {
  // Conical helix: the growing radius removes the screw symmetry.
  PointCloud pts(3, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = (static_cast<double>(i) + rng.uniform(0.25, 0.75)) / static_cast<double>(n);
    const double r = 0.15 + 0.3 * t;
    const double phi = 5.0 * kPi * t;
    pts.col(i) = Eigen::Vector3d(r * std::cos(phi), r * std::sin(phi), t - 0.5);
  }
  return pts;
}

PointCloud l_bracket(Eigen::Index n, Rng& rng) {
  // Two plates of unequal size meeting at a right angle, sampled by volume.
  const Eigen::Vector3d lo_a(-0.5, -0.3, 0.0), hi_a(0.5, 0.3, 0.08);
  const Eigen::Vector3d lo_b(-0.5, -0.3, 0.08), hi_b(-0.42, 0.1, 0.6);
  const double vol_a = (hi_a - lo_a).prod(), vol_b = (hi_b - lo_b).prod();
  PointCloud pts(3, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const bool in_a = rng.uniform(0.0, vol_a + vol_b) < vol_a;
    const Eigen::Vector3d& lo = in_a ? lo_a : lo_b;
    const Eigen::Vector3d& hi = in_a ? hi_a : hi_b;
    for (int d = 0; d < 3; ++d) pts(d, i) = rng.uniform(lo[d], hi[d]);
  }
  return pts;
}

}  // namespace

PointCloud generate_shape(ShapeKind kind, Eigen::Index n, Rng& rng) {
  if (n < 8) throw std::invalid_argument("generate_shape needs n >= 8");
  PointCloud pts;
  switch (kind) {
    case ShapeKind::asymmetric_blob: pts = blob(n, rng); break;
    case ShapeKind::box_surface: pts = box_surface(n, rng); break;
    case ShapeKind::helix: pts = helix(n, rng); break;
    case ShapeKind::l_bracket: pts = l_bracket(n, rng); break;
  }
  const Eigen::Vector3d centroid = pts.rowwise().mean();
  pts.colwise() -= centroid;
  return pts;
}

PointCloud sample_unit_cube(Eigen::Index n, Rng& rng) {
  if (n < 1) throw std::invalid_argument("sample_unit_cube needs n >= 1");
  PointCloud pts(3, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int d = 0; d < 3; ++d) pts(d, i) = rng.uniform(-0.5, 0.5);
  return pts;
}

RotationMetric parse_rotation_metric(std::string_view name) {
  if (name == "geodesic") return RotationMetric::geodesic;
  if (name == "euler-mae") return RotationMetric::euler_mae;
  if (name == "euler-rmse") return RotationMetric::euler_rmse;
  throw std::invalid_argument("unknown rotation metric '" + std::string(name) + "'");
}

double rotation_error(const Eigen::Matrix3d& r_pred, const Eigen::Matrix3d& r_true, RotationMetric metric) {
  require_rotation(r_pred, "predicted rotation");
  require_rotation(r_true, "reference rotation");
  const Eigen::Matrix3d rel = r_pred.transpose() * r_true;
  switch (metric) {
    case RotationMetric::geodesic: return rotation_angle(rel) * kDeg;
    case RotationMetric::euler_mae: return euler_zyx(rel).cwiseAbs().mean() * kDeg;
    case RotationMetric::euler_rmse: return std::sqrt(euler_zyx(rel).squaredNorm() / 3.0) * kDeg;
  }
  return std::numeric_limits<double>::quiet_NaN();
}

double translation_error(const Eigen::Vector3d& t_pred, const Eigen::Vector3d& t_true) {
  return (t_pred - t_true).norm();
}

double translation_rmse(const std::vector<Eigen::Vector3d>& t_pred, const std::vector<Eigen::Vector3d>& t_true) {
  if (t_pred.size() != t_true.size()) throw std::invalid_argument("translation batches differ in size");
  if (t_pred.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < t_pred.size(); ++i) sum += (t_pred[i] - t_true[i]).squaredNorm();
  return std::sqrt(sum / static_cast<double>(t_pred.size()));
}

namespace {

double mean_nearest_distance(const PointCloud& from, const PointCloud& to) {
  double sum = 0.0;
  for (Eigen::Index i = 0; i < from.cols(); ++i) {
    sum += std::sqrt((to.colwise() - from.col(i)).colwise().squaredNorm().minCoeff());
  }
  return sum / static_cast<double>(from.cols());
}

}  // namespace

double chamfer_distance(const PointCloud& x, const PointCloud& y) {
  validate_cloud(x, "chamfer source");
  validate_cloud(y, "chamfer target");
  return mean_nearest_distance(x, y) + mean_nearest_distance(y, x);
}

PointCloud parse_xyz(std::string_view text) {
  std::vector<Eigen::Vector3d> pts;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream fields(line);
    Eigen::Vector3d p;
    std::string extra;
    if (!(fields >> p.x() >> p.y() >> p.z()) || (fields >> extra)) {
      throw IoError("malformed XYZ line " + std::to_string(line_no) + ": expected three numbers");
    }
    if (!p.allFinite()) throw IoError("non-finite coordinate on XYZ line " + std::to_string(line_no));
    pts.push_back(p);
  }
  if (pts.empty()) throw IoError("XYZ data contains no points");
  PointCloud cloud(3, static_cast<Eigen::Index>(pts.size()));
  for (std::size_t i = 0; i < pts.size(); ++i) cloud.col(static_cast<Eigen::Index>(i)) = pts[i];
  return cloud;
}

PointCloud load_xyz(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return parse_xyz(buf.str());
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void save_xyz(const PointCloud& cloud, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  char buf[96];
  for (Eigen::Index i = 0; i < cloud.cols(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g\n", cloud(0, i), cloud(1, i), cloud(2, i));
    out << buf;
  }
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace corrmatch
