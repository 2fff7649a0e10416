#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "corrmatch/correspondence.hpp"
#include "corrmatch/geom.hpp"
#include "corrmatch/learn.hpp"
#include "corrmatch/rng.hpp"

namespace corrmatch {

inline constexpr std::string_view kToolVersion = "corrmatch 0.1.0";

enum class CorrespondenceMode { oracle, learned };

/// Flat key = value configuration shared by every study.
struct ExperimentConfig {
  std::uint64_t seed = 42;
  ShapeKind shape = ShapeKind::asymmetric_blob;
  int points = 512;
  int trials = 100;
  double theta0_deg = 90.0;
  double t_bound = 0.5;
  std::vector<double> corruption_grid{0, 5, 10, 20, 30, 40, 50, 60, 70, 80, 90};
  double keep_fraction = 1.0;
  double outlier_fraction = 0.1;
  double outlier_threshold = 0.1;
  double outlier_b = kDefaultOutlierTarget;
  bool outlier_reject = false;
  CorrespondenceMode mode = CorrespondenceMode::oracle;
  std::string checkpoint;
  int k = 8;
  int hidden = 64;
  int embedding_dim = 32;
  double learning_rate = 1e-3;
  int batch_size = 1;
  int epochs = 50;
  int train_clouds = 200;
  int heldout_clouds = 50;
  int sinkhorn_iters = 0;
  std::string out_dir = "out";

  /// Checks ranges; throws ConfigError.
  void validate() const;
  /// Every field as "key = value" in a fixed order.
  std::vector<std::pair<std::string, std::string>> entries() const;
};

/// Parses the key = value format ('#' comments, blank lines). Unknown keys,
/// duplicates and malformed values raise ConfigError.
ExperimentConfig parse_config(std::string_view text, ExperimentConfig base = {});
ExperimentConfig load_config(const std::filesystem::path& path);

struct TrialRecord {
  std::int64_t trial = 0;
  std::uint64_t seed = 0;
  std::string param;
  std::vector<std::pair<std::string, double>> metrics;
  /// Non-empty for failed trials; such rows carry no metrics.
  std::string error;

  bool failed() const { return !error.empty(); }
  std::optional<double> metric(std::string_view name) const;
};

struct SummaryRow {
  std::string param;
  std::string metric;
  std::size_t count = 0;
  std::size_t excluded = 0;
  double mean = 0.0;
  double stddev = 0.0;
  double rmse = 0.0;
};

struct StudyResult {
  std::string study;
  /// Free-form "key = value" notes appended to the metadata block.
  std::vector<std::pair<std::string, std::string>> notes;
  std::vector<TrialRecord> records;

  /// Mean/std/RMS per (param, metric) over successful trials, in first-seen order.
  std::vector<SummaryRow> summarize() const;
  /// Values of one metric for one param over successful trials.
  std::vector<double> values(std::string_view param, std::string_view metric) const;
};

std::string format_study_csv(const ExperimentConfig& config, const StudyResult& result);
std::string format_summary_csv(const ExperimentConfig& config, const StudyResult& result);
/// Writes <out>/<study>.csv and <out>/<study>_summary.csv.
void write_study(const ExperimentConfig& config, const StudyResult& result, const std::filesystem::path& out_dir);

/// Resamples floor(p N_x / 100) distinct columns of a hard matrix, each to a
/// uniformly chosen different target.
CorrespondenceMatrix corrupt_correspondence(const CorrespondenceMatrix& c_star, double percent, Rng& rng);

/// v* + (p/100) ||v*|| u with u uniform on the sphere.
RotationVector corrupt_rotation(const RotationVector& v_star, double percent, Rng& rng);

/// A generated registration problem: target = pose(shuffled clean source),
/// source optionally cropped, C* from nearest neighbors in the source frame.
struct RegistrationCase {
  PointCloud source;
  PointCloud target;
  PointCloud target_in_source_frame;
  RigidTransform pose;
  CorrespondenceMatrix c_star;
};

RegistrationCase make_registration_case(ShapeKind shape, int points, std::uint64_t shape_seed,
                                        const RigidTransform& pose, double keep_fraction, Rng& rng);

/// Training and held-out sets for run_training, keep_fraction applied to sources.
std::vector<TrainSample> make_dataset(const ExperimentConfig& config, std::string_view split, int count);

/// Soft correspondence from learned features, optionally Sinkhorn-refined.
CorrespondenceMatrix predict_correspondence(const FeatureNet& net, const TrainSample& sample, int sinkhorn_iters);

/// Loads config.checkpoint when the config asks for learned mode.
std::optional<FeatureNet> load_model_for(const ExperimentConfig& config);

StudyResult run_perturbation_study(const ExperimentConfig& config);
StudyResult run_misalignment_sweep(const ExperimentConfig& config, const FeatureNet* net = nullptr);
StudyResult run_partial_experiment(const ExperimentConfig& config, const FeatureNet* net = nullptr);
StudyResult run_outlier_experiment(const ExperimentConfig& config, const FeatureNet* net = nullptr);

struct TrainingRun {
  StudyResult curve;
  FeatureNet net;  // last good parameters
  EvalMetrics heldout;
  bool diverged = false;
  std::string divergence;
};

/// Trains from `init` when given, else from a seeded initialization whose
/// input standardization is fitted to the training descriptors.
TrainingRun run_training(const ExperimentConfig& config, const FeatureNet* init = nullptr);

/// One-shot registration with a trained net: returns the source-to-target transform.
RigidTransform register_clouds(const FeatureNet& net, const PointCloud& source, const PointCloud& target,
                               int sinkhorn_iters = 0);

}  // namespace corrmatch
