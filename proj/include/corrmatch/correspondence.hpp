#pragma once

#include <filesystem>
#include <ostream>
#include <vector>

#include <Eigen/Core>

#include "corrmatch/geom.hpp"

namespace corrmatch {

/// Per-point embeddings, one column per point.
using FeatureMatrix = Eigen::MatrixXd;

enum class CorrespondenceKind { hard, soft };

/// Column-stochastic matrix over target points. Column i is the distribution
/// of source point i over the N_y targets, plus one trailing outlier row when
/// outlier-augmented. The constructor enforces the invariants.
class CorrespondenceMatrix {
 public:
  static constexpr double kColumnSumTolerance = 1e-9;

  CorrespondenceMatrix(Eigen::MatrixXd values, CorrespondenceKind kind, bool outlier_augmented = false);

  const Eigen::MatrixXd& values() const { return values_; }
  CorrespondenceKind kind() const { return kind_; }
  bool is_hard() const { return kind_ == CorrespondenceKind::hard; }
  bool outlier_augmented() const { return outlier_augmented_; }

  Eigen::Index rows() const { return values_.rows(); }
  Eigen::Index source_count() const { return values_.cols(); }
  /// N_y, excluding the outlier row.
  Eigen::Index target_count() const { return values_.rows() - (outlier_augmented_ ? 1 : 0); }

  /// Builds a hard matrix from one target row per source column.
  static CorrespondenceMatrix from_indices(const std::vector<Eigen::Index>& rows, Eigen::Index row_count,
                                           bool outlier_augmented = false);

 private:
  Eigen::MatrixXd values_;
  CorrespondenceKind kind_;
  bool outlier_augmented_;
};

/// hard_assign result for a column whose argmax is the outlier row.
inline constexpr Eigen::Index kOutlierIndex = -1;

struct Neighbor {
  Eigen::Index index;
  double distance;
};

/// Exact nearest neighbor in `targets` for every column of `queries`; ties go
/// to the lowest target index.
std::vector<Neighbor> nearest_neighbors(const PointCloud& queries, const PointCloud& targets);

/// One-hot at each source point's nearest neighbor in the aligned target.
CorrespondenceMatrix ground_truth_correspondence(const PointCloud& x, const PointCloud& y_aligned);

/// As above, but sources farther than `threshold` from every target are
/// assigned to the extra outlier row.
CorrespondenceMatrix ground_truth_correspondence_outlier(const PointCloud& x, const PointCloud& y_aligned,
                                                         double threshold);

/// Column-wise softmax with per-column max subtraction.
Eigen::MatrixXd column_softmax(const Eigen::MatrixXd& logits);

/// softmax(F_Y^T F_X), columns over targets.
CorrespondenceMatrix soft_correspondence(const FeatureMatrix& f_x, const FeatureMatrix& f_y);

struct OutlierEmbedding {
  Eigen::VectorXd embedding;
  /// Set when F_Y has no singular value above the cutoff; the embedding is zero.
  bool degenerate = false;
};

inline constexpr double kDefaultOutlierTarget = -1.0;

/// Minimum-norm least-squares solution of F_Y^T f = b 1 via the SVD
/// pseudoinverse (singular values below 1e-10 * sigma_max are dropped).
OutlierEmbedding outlier_embedding(const FeatureMatrix& f_y, double b = kDefaultOutlierTarget);

/// softmax([F_Y, f_O]^T F_X); the last row is the outlier probability.
CorrespondenceMatrix soft_correspondence_outlier(const FeatureMatrix& f_x, const FeatureMatrix& f_y,
                                                 const Eigen::VectorXd& f_outlier);

/// Alternating row/column normalization with eps added up front, `iters`
/// rounds, finishing on columns so the result is column-stochastic.
Eigen::MatrixXd sinkhorn_normalize(const Eigen::MatrixXd& m, int iters = 5, double eps = 1e-9);

/// Per-column argmax, ties to the lowest row. The outlier row decodes to kOutlierIndex.
std::vector<Eigen::Index> hard_assign(const CorrespondenceMatrix& c);

/// Percentage of columns whose argmax agrees.
double correspondence_accuracy(const CorrespondenceMatrix& c_pred, const CorrespondenceMatrix& c_star);

/// Header `j0,...` then one line per row of the matrix. For inspection only.
void write_correspondence_csv(const CorrespondenceMatrix& c, std::ostream& out);
void write_correspondence_csv(const CorrespondenceMatrix& c, const std::filesystem::path& path);

}  // namespace corrmatch
