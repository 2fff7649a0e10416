#include "corrmatch/correspondence.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

#include "corrmatch/error.hpp"

namespace corrmatch {

CorrespondenceMatrix::CorrespondenceMatrix(Eigen::MatrixXd values, CorrespondenceKind kind, bool outlier_augmented)
    : values_(std::move(values)), kind_(kind), outlier_augmented_(outlier_augmented) {
  if (values_.cols() < 1 || values_.rows() < (outlier_augmented_ ? 2 : 1)) {
    throw std::invalid_argument("correspondence matrix is empty");
  }
  if (!values_.allFinite()) throw std::invalid_argument("correspondence matrix has non-finite entries");
  if (values_.minCoeff() < -1e-12 || values_.maxCoeff() > 1.0 + 1e-12) {
    throw std::invalid_argument("correspondence entries must lie in [0, 1]");
  }
  for (Eigen::Index i = 0; i < values_.cols(); ++i) {
    if (std::abs(values_.col(i).sum() - 1.0) > kColumnSumTolerance) {
      throw std::invalid_argument("correspondence column " + std::to_string(i) + " does not sum to 1");
    }
    if (kind_ == CorrespondenceKind::hard) {
      const auto ones = (values_.col(i).array() == 1.0).count();
      const auto zeros = (values_.col(i).array() == 0.0).count();
      if (ones != 1 || zeros != values_.rows() - 1) {
        throw std::invalid_argument("hard correspondence column " + std::to_string(i) + " is not one-hot");
      }
    }
  }
}

CorrespondenceMatrix CorrespondenceMatrix::from_indices(const std::vector<Eigen::Index>& rows, Eigen::Index row_count,
                                                        bool outlier_augmented) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(row_count, static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Eigen::Index r = rows[i] == kOutlierIndex && outlier_augmented ? row_count - 1 : rows[i];
    if (r < 0 || r >= row_count) throw std::invalid_argument("correspondence index out of range");
    m(r, static_cast<Eigen::Index>(i)) = 1.0;
  }
  return {std::move(m), CorrespondenceKind::hard, outlier_augmented};
}

std::vector<Neighbor> nearest_neighbors(const PointCloud& queries, const PointCloud& targets) {
  validate_cloud(queries, "query cloud");
  validate_cloud(targets, "target cloud");
  std::vector<Neighbor> out(static_cast<std::size_t>(queries.cols()));
  for (Eigen::Index i = 0; i < queries.cols(); ++i) {
    Eigen::Index best = 0;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < targets.cols(); ++j) {
      const double d2 = (targets.col(j) - queries.col(i)).squaredNorm();
      if (d2 < best_d2) {
        best_d2 = d2;
        best = j;
      }
    }
    out[static_cast<std::size_t>(i)] = {best, std::sqrt(best_d2)};
  }
  return out;
}

CorrespondenceMatrix ground_truth_correspondence(const PointCloud& x, const PointCloud& y_aligned) {
  const auto nn = nearest_neighbors(x, y_aligned);
  std::vector<Eigen::Index> rows(nn.size());
  for (std::size_t i = 0; i < nn.size(); ++i) rows[i] = nn[i].index;
  return CorrespondenceMatrix::from_indices(rows, y_aligned.cols());
}

CorrespondenceMatrix ground_truth_correspondence_outlier(const PointCloud& x, const PointCloud& y_aligned,
                                                         double threshold) {
  if (!(threshold > 0.0)) throw std::invalid_argument("outlier threshold must be positive");
  const auto nn = nearest_neighbors(x, y_aligned);
  std::vector<Eigen::Index> rows(nn.size());
  for (std::size_t i = 0; i < nn.size(); ++i) rows[i] = nn[i].distance <= threshold ? nn[i].index : kOutlierIndex;
  return CorrespondenceMatrix::from_indices(rows, y_aligned.cols() + 1, true);
}

Eigen::MatrixXd column_softmax(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.cols(); ++i) {
    const double mx = logits.col(i).maxCoeff();
    out.col(i) = (logits.col(i).array() - mx).exp().matrix();
    out.col(i) /= out.col(i).sum();
  }
  return out;
}

namespace {

void check_feature_dims(const FeatureMatrix& f_x, const FeatureMatrix& f_y) {
  if (f_x.rows() != f_y.rows()) {
    throw std::invalid_argument("embedding dimensions differ: " + std::to_string(f_x.rows()) + " vs " +
                                std::to_string(f_y.rows()));
  }
  if (f_x.cols() < 1 || f_y.cols() < 1) throw std::invalid_argument("feature matrix has no points");
}

}  // namespace

CorrespondenceMatrix soft_correspondence(const FeatureMatrix& f_x, const FeatureMatrix& f_y) {
  check_feature_dims(f_x, f_y);
  return {column_softmax(f_y.transpose() * f_x), CorrespondenceKind::soft};
}

OutlierEmbedding outlier_embedding(const FeatureMatrix& f_y, double b) {
  if (f_y.cols() < 1) throw std::invalid_argument("outlier_embedding needs at least one target feature");
  // Solve F_Y^T f = b 1 in the least-squares sense.
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(f_y.transpose(), Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& sigma = svd.singularValues();
  OutlierEmbedding out;
  out.embedding = Eigen::VectorXd::Zero(f_y.rows());
  const double sigma_max = sigma.size() > 0 ? sigma[0] : 0.0;
  if (!(sigma_max > 0.0)) {
    out.degenerate = true;
    return out;
  }
  const Eigen::VectorXd rhs = Eigen::VectorXd::Constant(f_y.cols(), b);
  const Eigen::VectorXd proj = svd.matrixU().transpose() * rhs;
  for (Eigen::Index k = 0; k < sigma.size(); ++k) {
    if (sigma[k] > 1e-10 * sigma_max) out.embedding += svd.matrixV().col(k) * (proj[k] / sigma[k]);
  }
  return out;
}

CorrespondenceMatrix soft_correspondence_outlier(const FeatureMatrix& f_x, const FeatureMatrix& f_y,
                                                 const Eigen::VectorXd& f_outlier) {
  check_feature_dims(f_x, f_y);
  if (f_outlier.size() != f_y.rows()) throw std::invalid_argument("outlier embedding dimension mismatch");
  FeatureMatrix augmented(f_y.rows(), f_y.cols() + 1);
  augmented << f_y, f_outlier;
  return {column_softmax(augmented.transpose() * f_x), CorrespondenceKind::soft, true};
}

Eigen::MatrixXd sinkhorn_normalize(const Eigen::MatrixXd& m, int iters, double eps) {
  if (iters < 1) throw std::invalid_argument("sinkhorn needs at least one iteration");
  if (!(eps > 0.0)) throw std::invalid_argument("sinkhorn eps must be positive");
  if (m.size() == 0 || !m.allFinite() || m.minCoeff() < 0.0) {
    throw std::invalid_argument("sinkhorn input must be a non-empty nonnegative matrix");
  }
  if (m.maxCoeff() == 0.0) throw NumericalError("sinkhorn input is all zeros");
  Eigen::MatrixXd out = m.array() + eps;
  for (int it = 0; it < iters; ++it) {
    out.array().colwise() /= out.rowwise().sum().array();
    out.array().rowwise() /= out.colwise().sum().array();
  }
  return out;
}

std::vector<Eigen::Index> hard_assign(const CorrespondenceMatrix& c) {
  const Eigen::MatrixXd& v = c.values();
  std::vector<Eigen::Index> out(static_cast<std::size_t>(v.cols()));
  for (Eigen::Index i = 0; i < v.cols(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < v.rows(); ++j) {
      if (v(j, i) > v(best, i)) best = j;
    }
    out[static_cast<std::size_t>(i)] = c.outlier_augmented() && best == v.rows() - 1 ? kOutlierIndex : best;
  }
  return out;
}

double correspondence_accuracy(const CorrespondenceMatrix& c_pred, const CorrespondenceMatrix& c_star) {
  if (c_pred.rows() != c_star.rows() || c_pred.source_count() != c_star.source_count()) {
    throw std::invalid_argument("correspondence matrices differ in shape");
  }
  const auto a = hard_assign(c_pred);
  const auto b = hard_assign(c_star);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < a.size(); ++i) hits += a[i] == b[i] ? 1 : 0;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(a.size());
}

void write_correspondence_csv(const CorrespondenceMatrix& c, std::ostream& out) {
  const Eigen::MatrixXd& v = c.values();
  for (Eigen::Index i = 0; i < v.cols(); ++i) out << (i ? "," : "") << 'j' << i;
  out << '\n';
  char buf[32];
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    for (Eigen::Index i = 0; i < v.cols(); ++i) {
      std::snprintf(buf, sizeof buf, "%.9g", v(r, i));
      out << (i ? "," : "") << buf;
    }
    out << '\n';
  }
}

void write_correspondence_csv(const CorrespondenceMatrix& c, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  write_correspondence_csv(c, out);
}

}  // namespace corrmatch
