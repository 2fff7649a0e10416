#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "corrmatch/correspondence.hpp"
#include "corrmatch/geom.hpp"
#include "corrmatch/rng.hpp"

namespace corrmatch {

inline constexpr int kDescriptorDim = 7;

/// Rigid-invariant per-point descriptors (kDescriptorDim x N): distance to
/// the centroid; mean, min and max distance to the k nearest neighbors; the
/// eigenvalues of the neighbors' covariance in descending order.
Eigen::MatrixXd point_descriptors(const PointCloud& x, int k);

struct DenseLayer {
  Eigen::MatrixXd weight;
  Eigen::VectorXd bias;
};

/// MLP embedder applied column-wise to descriptors: tanh hidden layers and a
/// linear output. Inputs are standardized with a fixed shift and scale first.
struct FeatureNet {
  int k = 8;
  Eigen::VectorXd input_shift;
  Eigen::VectorXd input_scale;
  std::vector<DenseLayer> layers;

  int input_dim() const { return static_cast<int>(layers.front().weight.cols()); }
  int embedding_dim() const { return static_cast<int>(layers.back().weight.rows()); }
  std::size_t parameter_count() const;

  /// Glorot-uniform weights, zero biases, identity input standardization.
  static FeatureNet create(int input_dim, const std::vector<int>& hidden, int embedding_dim, int k, Rng& rng);
};

/// Parameter gradients with the same layout as FeatureNet::layers.
struct NetGradient {
  std::vector<DenseLayer> layers;

  static NetGradient zeros_like(const FeatureNet& net);
  NetGradient& operator+=(const NetGradient& other);
  NetGradient& operator*=(double s);
};

/// Activations kept for backpropagation. activations[0] is the standardized input.
struct ForwardCache {
  std::vector<Eigen::MatrixXd> activations;
};

FeatureMatrix featurize_descriptors(const FeatureNet& net, const Eigen::MatrixXd& descriptors,
                                    ForwardCache* cache = nullptr);
FeatureMatrix featurize(const FeatureNet& net, const PointCloud& x);

/// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(features).
void backpropagate(const FeatureNet& net, const ForwardCache& cache, const Eigen::MatrixXd& d_features,
                   NetGradient& grad);

struct CrossEntropy {
  double total = 0.0;
  double mean = 0.0;  // per source point
};

/// -sum_i log softmax(C'_{:,i})[target_i] for a hard target matrix of the
/// same shape (with or without outlier row).
CrossEntropy cross_entropy_loss(const Eigen::MatrixXd& logits, const CorrespondenceMatrix& c_star);

/// d(total loss)/d(logits) = softmax(logits) - C*, column by column.
Eigen::MatrixXd cross_entropy_grad(const Eigen::MatrixXd& logits, const CorrespondenceMatrix& c_star);

/// ||R^T R* - I||_F^2 + ||t - t*||^2.
double dcp_loss(const RigidTransform& pred, const RigidTransform& truth);

/// Mean over points of the L1 distance between T*(x_i) and T(x_i).
double rpmnet_reg_loss(const PointCloud& x, const RigidTransform& pred, const RigidTransform& truth);

/// One registration example: target = pose(shuffled source) and the hard
/// ground-truth correspondence between them.
struct TrainSample {
  PointCloud source;
  PointCloud target;
  CorrespondenceMatrix c_star;
  RigidTransform pose;
  Eigen::MatrixXd source_descriptors;
  Eigen::MatrixXd target_descriptors;
};

TrainSample make_sample(PointCloud source, PointCloud target, CorrespondenceMatrix c_star, const RigidTransform& pose,
                        int k);

struct SampleGradient {
  CrossEntropy loss;
  NetGradient grad;  // of the total loss
  Eigen::MatrixXd logits;
};

/// Forward through both towers (shared weights), bilinear logits F_Y^T F_X,
/// cross-entropy against C*, and backpropagation to every parameter.
SampleGradient sample_loss_and_grad(const FeatureNet& net, const TrainSample& sample);

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainState {
  FeatureNet net;
  NetGradient first_moment;
  NetGradient second_moment;
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  std::uint64_t seed = 0;
  AdamOptions adam;
  int batch_size = 1;

  static TrainState start(FeatureNet net, std::uint64_t seed, const AdamOptions& adam = {}, int batch_size = 1);
};

struct EvalMetrics {
  double mean_loss = 0.0;
  double accuracy = 0.0;           // percent
  double rotation_geodesic = 0.0;  // mean degrees
  double rotation_euler_mae = 0.0; // mean degrees
  double translation_rmse = 0.0;
  double chamfer = 0.0;            // mean chamfer of T_pred(X) against Y
  std::size_t failures = 0;        // samples whose alignment failed
};

/// Evaluates the pipeline featurize -> soft correspondence -> weighted_align.
EvalMetrics evaluate(const FeatureNet& net, const std::vector<TrainSample>& dataset);

/// One pass over the dataset in a seeded shuffled order with Adam updates on
/// the per-point mean loss averaged over each batch. Metrics are collected
/// from the forward passes before each update. Throws NumericalError on a
/// non-finite loss and leaves `state` untouched in that case.
EvalMetrics train_epoch(TrainState& state, const std::vector<TrainSample>& dataset);

void adam_step(TrainState& state, const NetGradient& grad);

void save_checkpoint(const FeatureNet& net, const std::filesystem::path& path);
FeatureNet load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_to_string(const FeatureNet& net);
FeatureNet checkpoint_from_string(const std::string& text);

}  // namespace corrmatch
