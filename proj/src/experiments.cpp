#include "corrmatch/experiments.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "corrmatch/align.hpp"
#include "corrmatch/error.hpp"

namespace corrmatch {

namespace {

constexpr double kRadPerDeg = std::numbers::pi / 180.0;

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not a finite number");
  }
  return out;
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& v) {
  Int out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not an integer");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false");
}

std::string join_grid(const std::vector<double>& grid) {
  std::string out;
  for (std::size_t i = 0; i < grid.size(); ++i) out += (i ? "," : "") + fmt_double(grid[i]);
  return out;
}

std::string mode_name(CorrespondenceMode m) { return m == CorrespondenceMode::oracle ? "oracle" : "learned"; }

}  // namespace

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (points < 8) fail("points must be >= 8");
  if (trials < 0) fail("trials must be >= 0");
  if (!(theta0_deg >= 0.0 && theta0_deg <= 180.0)) fail("theta0_deg must lie in [0, 180]");
  if (!(t_bound >= 0.0)) fail("t_bound must be >= 0");
  for (double p : corruption_grid)
    if (!(p >= 0.0 && p <= 100.0)) fail("corruption_grid percentages must lie in [0, 100]");
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) fail("keep_fraction must lie in (0, 1]");
  if (!(outlier_fraction >= 0.0 && outlier_fraction <= 0.5)) fail("outlier_fraction must lie in [0, 0.5]");
  if (!(outlier_threshold > 0.0)) fail("outlier_threshold must be > 0");
  if (k < 1 || k >= crop_count(points, keep_fraction)) fail("k must satisfy 1 <= k < number of source points");
  if (hidden < 1 || embedding_dim < 1) fail("hidden and embedding_dim must be >= 1");
  if (!(learning_rate >= 0.0)) fail("learning_rate must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (epochs < 0 || train_clouds < 0 || heldout_clouds < 0) fail("epochs and cloud counts must be >= 0");
  if (sinkhorn_iters < 0) fail("sinkhorn_iters must be >= 0");
}

std::vector<std::pair<std::string, std::string>> ExperimentConfig::entries() const {
  return {
      {"seed", std::to_string(seed)},
      {"shape", std::string(to_string(shape))},
      {"points", std::to_string(points)},
      {"trials", std::to_string(trials)},
      {"theta0_deg", fmt_double(theta0_deg)},
      {"t_bound", fmt_double(t_bound)},
      {"corruption_grid", join_grid(corruption_grid)},
      {"keep_fraction", fmt_double(keep_fraction)},
      {"outlier_fraction", fmt_double(outlier_fraction)},
      {"outlier_threshold", fmt_double(outlier_threshold)},
      {"outlier_b", fmt_double(outlier_b)},
      {"outlier_reject", outlier_reject ? "true" : "false"},
      {"mode", mode_name(mode)},
      {"checkpoint", checkpoint},
      {"k", std::to_string(k)},
      {"hidden", std::to_string(hidden)},
      {"embedding_dim", std::to_string(embedding_dim)},
      {"learning_rate", fmt_double(learning_rate)},
      {"batch_size", std::to_string(batch_size)},
      {"epochs", std::to_string(epochs)},
      {"train_clouds", std::to_string(train_clouds)},
      {"heldout_clouds", std::to_string(heldout_clouds)},
      {"sinkhorn_iters", std::to_string(sinkhorn_iters)},
      {"out_dir", out_dir},
  };
}

ExperimentConfig parse_config(std::string_view text, ExperimentConfig base) {
  ExperimentConfig c = std::move(base);
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError("config key '" + key + "' given twice");

    if (key == "seed") c.seed = parse_int<std::uint64_t>(key, v);
    else if (key == "shape") {
      try {
        c.shape = parse_shape_kind(v);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    }
    else if (key == "points") c.points = parse_int<int>(key, v);
    else if (key == "trials") c.trials = parse_int<int>(key, v);
    else if (key == "theta0_deg") c.theta0_deg = parse_double(key, v);
    else if (key == "t_bound") c.t_bound = parse_double(key, v);
    else if (key == "corruption_grid") {
      c.corruption_grid.clear();
      std::istringstream items(v);
      std::string item;
      while (std::getline(items, item, ',')) c.corruption_grid.push_back(parse_double(key, trim(item)));
    }
    else if (key == "keep_fraction") c.keep_fraction = parse_double(key, v);
    else if (key == "outlier_fraction") c.outlier_fraction = parse_double(key, v);
    else if (key == "outlier_threshold") c.outlier_threshold = parse_double(key, v);
    else if (key == "outlier_b") c.outlier_b = parse_double(key, v);
    else if (key == "outlier_reject") c.outlier_reject = parse_bool(key, v);
    else if (key == "mode") {
      if (v == "oracle") c.mode = CorrespondenceMode::oracle;
      else if (v == "learned") c.mode = CorrespondenceMode::learned;
      else throw ConfigError("config key 'mode': expected oracle or learned");
    }
    else if (key == "checkpoint") c.checkpoint = v;
    else if (key == "k") c.k = parse_int<int>(key, v);
    else if (key == "hidden") c.hidden = parse_int<int>(key, v);
    else if (key == "embedding_dim") c.embedding_dim = parse_int<int>(key, v);
    else if (key == "learning_rate") c.learning_rate = parse_double(key, v);
    else if (key == "batch_size") c.batch_size = parse_int<int>(key, v);
    else if (key == "epochs") c.epochs = parse_int<int>(key, v);
    else if (key == "train_clouds") c.train_clouds = parse_int<int>(key, v);
    else if (key == "heldout_clouds") c.heldout_clouds = parse_int<int>(key, v);
    else if (key == "sinkhorn_iters") c.sinkhorn_iters = parse_int<int>(key, v);
    else if (key == "out_dir") c.out_dir = v;
    else throw ConfigError("unknown config key '" + key + "' on line " + std::to_string(line_no));
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::optional<double> TrialRecord::metric(std::string_view name) const {
  for (const auto& [k, v] : metrics)
    if (k == name) return v;
  return std::nullopt;
}

std::vector<SummaryRow> StudyResult::summarize() const {
  std::vector<SummaryRow> rows;
  std::map<std::pair<std::string, std::string>, std::size_t> index;
  std::map<std::string, std::size_t> failed;
  std::map<std::pair<std::string, std::string>, std::vector<double>> vals;
  for (const auto& r : records) {
    if (r.failed()) {
      ++failed[r.param];
      continue;
    }
    for (const auto& [m, v] : r.metrics) {
      const auto key = std::make_pair(r.param, m);
      if (!index.count(key)) {
        index[key] = rows.size();
        rows.push_back({r.param, m});
      }
      vals[key].push_back(v);
    }
  }
  for (auto& row : rows) {
    const auto& v = vals[{row.param, row.metric}];
    row.count = v.size();
    row.excluded = failed.count(row.param) ? failed[row.param] : 0;
    const double n = static_cast<double>(v.size());
    row.mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
    double ss = 0.0, sq = 0.0;
    for (double x : v) {
      ss += (x - row.mean) * (x - row.mean);
      sq += x * x;
    }
    row.stddev = v.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    row.rmse = std::sqrt(sq / n);
  }
  return rows;
}

std::vector<double> StudyResult::values(std::string_view param, std::string_view metric) const {
  std::vector<double> out;
  for (const auto& r : records) {
    if (r.failed() || r.param != param) continue;
    if (auto v = r.metric(metric)) out.push_back(*v);
  }
  return out;
}

namespace {

std::string metadata_block(const ExperimentConfig& config, const StudyResult& result) {
  std::string out = "# tool = " + std::string(kToolVersion) + "\n# study = " + result.study + "\n";
  for (const auto& [k, v] : config.entries()) out += "# " + k + " = " + v + "\n";
  for (const auto& [k, v] : result.notes) out += "# " + k + " = " + v + "\n";
  return out;
}

}  // namespace

std::string format_study_csv(const ExperimentConfig& config, const StudyResult& result) {
  std::string out = metadata_block(config, result);
  out += "study,trial,seed,param,metric,value\n";
  for (const auto& r : result.records) {
    const std::string prefix = result.study + "," + std::to_string(r.trial) + "," + std::to_string(r.seed) + "," +
                               r.param + ",";
    if (r.failed()) {
      out += prefix + "error," + r.error + "\n";
      continue;
    }
    for (const auto& [m, v] : r.metrics) out += prefix + m + "," + fmt_double(v) + "\n";
  }
  return out;
}

std::string format_summary_csv(const ExperimentConfig& config, const StudyResult& result) {
  std::string out = metadata_block(config, result);
  out += "study,param,metric,count,excluded,mean,std,rmse\n";
  for (const auto& s : result.summarize()) {
    out += result.study + "," + s.param + "," + s.metric + "," + std::to_string(s.count) + "," +
           std::to_string(s.excluded) + "," + fmt_double(s.mean) + "," + fmt_double(s.stddev) + "," +
           fmt_double(s.rmse) + "\n";
  }
  return out;
}

void write_study(const ExperimentConfig& config, const StudyResult& result, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  auto put = [](const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw IoError("cannot write " + p.string());
    out << text;
    if (!out) throw IoError("write failed for " + p.string());
  };
  put(out_dir / (result.study + ".csv"), format_study_csv(config, result));
  put(out_dir / (result.study + "_summary.csv"), format_summary_csv(config, result));
}

CorrespondenceMatrix corrupt_correspondence(const CorrespondenceMatrix& c_star, double percent, Rng& rng) {
  if (!c_star.is_hard()) throw std::invalid_argument("corrupt_correspondence expects a hard matrix");
  if (!(percent >= 0.0 && percent <= 100.0)) throw std::invalid_argument("percent must lie in [0, 100]");
  const Eigen::Index nx = c_star.source_count();
  const Eigen::Index rows = c_star.rows();
  const auto count = static_cast<Eigen::Index>(std::floor(percent * static_cast<double>(nx) / 100.0 + 1e-9));
  if (count > 0 && rows < 2) throw std::invalid_argument("cannot corrupt a correspondence with a single target");

  std::vector<Eigen::Index> assign = hard_assign(c_star);
  // Partial Fisher-Yates picks `count` distinct columns.
  std::vector<Eigen::Index> cols(static_cast<std::size_t>(nx));
  std::iota(cols.begin(), cols.end(), Eigen::Index{0});
  for (Eigen::Index s = 0; s < count; ++s) {
    const auto pick = s + static_cast<Eigen::Index>(rng.index(static_cast<std::uint64_t>(nx - s)));
    std::swap(cols[static_cast<std::size_t>(s)], cols[static_cast<std::size_t>(pick)]);
    const Eigen::Index col = cols[static_cast<std::size_t>(s)];
    Eigen::Index original = assign[static_cast<std::size_t>(col)];
    if (original == kOutlierIndex) original = rows - 1;
    Eigen::Index replacement = static_cast<Eigen::Index>(rng.index(static_cast<std::uint64_t>(rows - 1)));
    if (replacement >= original) ++replacement;
    assign[static_cast<std::size_t>(col)] =
        c_star.outlier_augmented() && replacement == rows - 1 ? kOutlierIndex : replacement;
  }
  return CorrespondenceMatrix::from_indices(assign, rows, c_star.outlier_augmented());
}

RotationVector corrupt_rotation(const RotationVector& v_star, double percent, Rng& rng) {
  if (!(percent >= 0.0)) throw std::invalid_argument("percent must be >= 0");
  if (percent == 0.0) return v_star;
  const double norm = v_star.norm();
  if (norm == 0.0) throw NumericalError("cannot scale a corruption relative to a zero rotation vector");
  return v_star + (percent / 100.0) * norm * rng.unit_vector();
}

RegistrationCase make_registration_case(ShapeKind shape, int points, std::uint64_t shape_seed,
                                        const RigidTransform& pose, double keep_fraction, Rng& rng) {
  Rng shape_rng(shape_seed);
  PointCloud clean = generate_shape(shape, points, shape_rng);

  std::vector<Eigen::Index> perm(static_cast<std::size_t>(points));
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
  PointCloud shuffled(3, points);
  for (int i = 0; i < points; ++i) shuffled.col(i) = clean.col(perm[static_cast<std::size_t>(i)]);

  PointCloud source = keep_fraction < 1.0 ? crop_partial(clean, keep_fraction, rng).cloud : clean;
  CorrespondenceMatrix c_star = ground_truth_correspondence(source, shuffled);
  PointCloud target = apply_transform(pose, shuffled);
  return RegistrationCase{std::move(source), std::move(target), std::move(shuffled), pose, std::move(c_star)};
}

std::vector<TrainSample> make_dataset(const ExperimentConfig& config, std::string_view split, int count) {
  std::vector<TrainSample> out;
  out.reserve(static_cast<std::size_t>(std::max(count, 0)));
  const std::string shape_label = std::string(split) + "-shape";
  const std::string pose_label = std::string(split) + "-pose";
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(config.seed, pose_label, static_cast<std::uint64_t>(i)));
    const RigidTransform pose = sample_misalignment(rng, config.theta0_deg * kRadPerDeg, config.t_bound);
    RegistrationCase rc = make_registration_case(config.shape, config.points,
                                                 derive_seed(config.seed, shape_label, static_cast<std::uint64_t>(i)),
                                                 pose, config.keep_fraction, rng);
    out.push_back(make_sample(std::move(rc.source), std::move(rc.target), std::move(rc.c_star), rc.pose, config.k));
  }
  return out;
}

CorrespondenceMatrix predict_correspondence(const FeatureNet& net, const TrainSample& sample, int sinkhorn_iters) {
  const FeatureMatrix f_x = featurize_descriptors(net, sample.source_descriptors);
  const FeatureMatrix f_y = featurize_descriptors(net, sample.target_descriptors);
  CorrespondenceMatrix c = soft_correspondence(f_x, f_y);
  if (sinkhorn_iters > 0) return {sinkhorn_normalize(c.values(), sinkhorn_iters), CorrespondenceKind::soft};
  return c;
}

std::optional<FeatureNet> load_model_for(const ExperimentConfig& config) {
  if (config.mode != CorrespondenceMode::learned) return std::nullopt;
  if (config.checkpoint.empty()) throw ConfigError("learned mode requires a checkpoint");
  return load_checkpoint(config.checkpoint);
}

namespace {

void add_rotation_metrics(TrialRecord& r, const Eigen::Matrix3d& pred, const Eigen::Matrix3d& truth,
                          const std::string& prefix = "rotation_") {
  r.metrics.emplace_back(prefix + "geodesic_deg", rotation_error(pred, truth, RotationMetric::geodesic));
  r.metrics.emplace_back(prefix + "euler_mae_deg", rotation_error(pred, truth, RotationMetric::euler_mae));
  r.metrics.emplace_back(prefix + "euler_rmse_deg", rotation_error(pred, truth, RotationMetric::euler_rmse));
}

template <typename Fn>
TrialRecord guarded_trial(std::int64_t trial, std::uint64_t seed, std::string param, Fn&& fn) {
  TrialRecord r{trial, seed, std::move(param), {}, {}};
  try {
    fn(r);
  } catch (const NumericalError&) {
    r.metrics.clear();
    r.error = "numerical";
  } catch (const std::invalid_argument&) {
    r.metrics.clear();
    r.error = "invalid";
  }
  return r;
}

std::string grid_label(double p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", p);
  return buf;
}

const FeatureNet& require_net(const ExperimentConfig& config, const FeatureNet* net) {
  if (config.mode == CorrespondenceMode::learned && net == nullptr) {
    throw ConfigError("learned mode requires a trained checkpoint");
  }
  return *net;
}

/// Registers one generated case and fills the standard metric set.
void evaluate_case(const ExperimentConfig& config, const FeatureNet* net, RegistrationCase& rc, TrialRecord& r) {
  CorrespondenceMatrix c = rc.c_star;
  if (config.mode == CorrespondenceMode::learned) {
    const TrainSample s = make_sample(rc.source, rc.target, rc.c_star, rc.pose, net->k);
    c = predict_correspondence(*net, s, config.sinkhorn_iters);
  }
  const AlignmentResult a = weighted_align(rc.source, rc.target, c);
  add_rotation_metrics(r, a.transform.rotation, rc.pose.rotation);
  r.metrics.emplace_back("translation_error", translation_error(a.transform.translation, rc.pose.translation));
  r.metrics.emplace_back("correspondence_pct", correspondence_accuracy(c, rc.c_star));
}

}  // namespace

StudyResult run_perturbation_study(const ExperimentConfig& config) {
  config.validate();
  StudyResult out{"perturb", {{"rotation_corruption", "||v_corrupt|| = p/100 * ||v*||, uniform direction"},
                              {"cloud", "uniform in [-0.5,0.5]^3"}}, {}};
  const double theta0 = config.theta0_deg * kRadPerDeg;
  for (int t = 0; t < config.trials; ++t) {
    const std::uint64_t seed = derive_seed(config.seed, "perturb", static_cast<std::uint64_t>(t));
    Rng rng(seed);
    const PointCloud x = sample_unit_cube(config.points, rng);
    const RigidTransform pose = sample_misalignment(rng, theta0, config.t_bound);
    const PointCloud y = apply_transform(pose, x);
    std::vector<Eigen::Index> identity(static_cast<std::size_t>(config.points));
    std::iota(identity.begin(), identity.end(), Eigen::Index{0});
    const CorrespondenceMatrix c_star = CorrespondenceMatrix::from_indices(identity, config.points);
    const RotationVector v_star = matrix_to_rotvec(pose.rotation);

    for (std::size_t g = 0; g < config.corruption_grid.size(); ++g) {
      const double p = config.corruption_grid[g];
      const std::string label = grid_label(p);
      out.records.push_back(guarded_trial(t, seed, "mode=correspondence;p=" + label, [&](TrialRecord& r) {
        Rng crng(derive_seed(seed, "correspondence", g));
        const auto assign = hard_assign(corrupt_correspondence(c_star, p, crng));
        PointCloud paired(3, config.points);
        for (int i = 0; i < config.points; ++i) paired.col(i) = y.col(assign[static_cast<std::size_t>(i)]);
        add_rotation_metrics(r, horn_align(x, paired).transform.rotation, pose.rotation, "");
      }));
      out.records.push_back(guarded_trial(t, seed, "mode=rotation;p=" + label, [&](TrialRecord& r) {
        Rng rrng(derive_seed(seed, "rotation", g));
        const Eigen::Matrix3d r_pert = rotvec_to_matrix(corrupt_rotation(v_star, p, rrng));
        add_rotation_metrics(r, r_pert, pose.rotation, "");
      }));
    }
  }
  return out;
}

namespace {

struct Bucket {
  double lo_deg, hi_deg;
};
constexpr Bucket kBuckets[] = {{0, 30}, {30, 60}, {60, 90}, {90, 120}, {120, 150}, {150, 180}};

}  // namespace

StudyResult run_misalignment_sweep(const ExperimentConfig& config, const FeatureNet* net) {
  config.validate();
  require_net(config, net);
  StudyResult out{"sweep", {{"buckets_deg", "[0,30) [30,60) [60,90) [90,120) [120,150) [150,180]"},
                            {"translation", "zero"}}, {}};
  for (std::size_t b = 0; b < std::size(kBuckets); ++b) {
    const Bucket& bucket = kBuckets[b];
    const std::string param = "bucket=" + grid_label(bucket.lo_deg) + "-" + grid_label(bucket.hi_deg);
    for (int t = 0; t < config.trials; ++t) {
      // Shapes are shared across buckets so buckets differ only in pose.
      const std::uint64_t shape_seed = derive_seed(config.seed, "sweep-shape", static_cast<std::uint64_t>(t));
      const std::uint64_t seed = derive_seed(derive_seed(config.seed, "sweep", b), "trial", static_cast<std::uint64_t>(t));
      out.records.push_back(guarded_trial(t, seed, param, [&](TrialRecord& r) {
        Rng rng(seed);
        const RigidTransform pose =
            sample_misalignment_range(rng, bucket.lo_deg * kRadPerDeg, bucket.hi_deg * kRadPerDeg, 0.0);
        RegistrationCase rc = make_registration_case(config.shape, config.points, shape_seed, pose, 1.0, rng);
        evaluate_case(config, net, rc, r);
      }));
    }
  }
  return out;
}

namespace {

TrialRecord epoch_record(std::int64_t epoch, std::uint64_t seed, const EvalMetrics& train, const EvalMetrics& held) {
  TrialRecord r{epoch, seed, "epoch=" + std::to_string(epoch), {}, {}};
  r.metrics = {
      {"train_loss", train.mean_loss},
      {"train_correspondence_pct", train.accuracy},
      {"heldout_loss", held.mean_loss},
      {"heldout_correspondence_pct", held.accuracy},
      {"heldout_rotation_geodesic_deg", held.rotation_geodesic},
      {"heldout_rotation_euler_mae_deg", held.rotation_euler_mae},
      {"heldout_translation_rmse", held.translation_rmse},
      {"heldout_chamfer", held.chamfer},
  };
  return r;
}

}  // namespace

TrainingRun run_training(const ExperimentConfig& config, const FeatureNet* init) {
  config.validate();
  const std::vector<TrainSample> train = make_dataset(config, "train", config.train_clouds);
  const std::vector<TrainSample> heldout = make_dataset(config, "heldout", config.heldout_clouds);

  FeatureNet net;
  if (init) {
    net = *init;
    if (net.k != config.k) throw ConfigError("checkpoint k does not match config k");
  } else {
    Rng rng(derive_seed(config.seed, "init"));
    net = FeatureNet::create(kDescriptorDim, {config.hidden, config.hidden}, config.embedding_dim, config.k, rng);
    if (!train.empty()) {
      Eigen::MatrixXd all(kDescriptorDim, 0);
      for (const auto& s : train) {
        all.conservativeResize(Eigen::NoChange, all.cols() + s.source_descriptors.cols());
        all.rightCols(s.source_descriptors.cols()) = s.source_descriptors;
      }
      net.input_shift = all.rowwise().mean();
      const Eigen::VectorXd var = (all.colwise() - net.input_shift).rowwise().squaredNorm() / static_cast<double>(all.cols());
      net.input_scale = var.cwiseSqrt().cwiseMax(1e-12).cwiseInverse();
    }
  }

  TrainingRun run;
  run.curve.study = "train";
  AdamOptions adam;
  adam.learning_rate = config.learning_rate;
  TrainState state = TrainState::start(net, derive_seed(config.seed, "train"), adam, config.batch_size);
  if (config.epochs > 0 && train.empty()) throw ConfigError("training needs train_clouds >= 1");
  for (int e = 0; e < config.epochs; ++e) {
    EvalMetrics tm;
    try {
      tm = train_epoch(state, train);
    } catch (const NumericalError& err) {
      run.diverged = true;
      run.divergence = err.what();
      run.curve.records.push_back({e, state.seed, "epoch=" + std::to_string(e), {}, "diverged"});
      break;
    }
    run.curve.records.push_back(epoch_record(e, state.seed, tm, evaluate(state.net, heldout)));
  }
  run.net = state.net;
  run.heldout = evaluate(run.net, heldout);
  return run;
}

StudyResult run_partial_experiment(const ExperimentConfig& config, const FeatureNet* net) {
  config.validate();
  StudyResult out{"partial", {{"crop", "keep round(keep_fraction * N) points on one side of a random centroid plane"}}, {}};
  const double theta0 = config.theta0_deg * kRadPerDeg;

  if (config.mode == CorrespondenceMode::oracle) {
    for (int t = 0; t < config.trials; ++t) {
      const std::uint64_t seed = derive_seed(config.seed, "partial", static_cast<std::uint64_t>(t));
      out.records.push_back(guarded_trial(t, seed, "keep=" + grid_label(config.keep_fraction), [&](TrialRecord& r) {
        Rng rng(seed);
        const RigidTransform pose = sample_misalignment(rng, theta0, config.t_bound);
        RegistrationCase rc = make_registration_case(config.shape, config.points,
                                                     derive_seed(config.seed, "partial-shape", static_cast<std::uint64_t>(t)),
                                                     pose, config.keep_fraction, rng);
        evaluate_case(config, nullptr, rc, r);
        r.metrics.emplace_back("source_points", static_cast<double>(rc.source.cols()));
      }));
    }
    return out;
  }

  // Learned mode trains on partial sources, recording the per-epoch curve,
  // then reports each held-out cloud.
  TrainingRun run = run_training(config, net);
  out.records = std::move(run.curve.records);
  if (run.diverged) throw NumericalError("partial training diverged: " + run.divergence);
  const std::vector<TrainSample> heldout = make_dataset(config, "heldout", config.heldout_clouds);
  for (std::size_t i = 0; i < heldout.size(); ++i) {
    const TrainSample& s = heldout[i];
    out.records.push_back(guarded_trial(static_cast<std::int64_t>(i),
                                        derive_seed(config.seed, "heldout-pose", i), "final", [&](TrialRecord& r) {
      const CorrespondenceMatrix c = predict_correspondence(run.net, s, config.sinkhorn_iters);
      const AlignmentResult a = weighted_align(s.source, s.target, c);
      add_rotation_metrics(r, a.transform.rotation, s.pose.rotation);
      r.metrics.emplace_back("translation_error", translation_error(a.transform.translation, s.pose.translation));
      r.metrics.emplace_back("correspondence_pct", correspondence_accuracy(c, s.c_star));
      r.metrics.emplace_back("source_points", static_cast<double>(s.source.cols()));
    }));
  }
  return out;
}

StudyResult run_outlier_experiment(const ExperimentConfig& config, const FeatureNet* net) {
  config.validate();
  require_net(config, net);
  StudyResult out{"outlier", {{"corruption", "uniform in [-0.5,0.5]^3"},
                              {"weights", "w_i = 1 - outlier probability; inlier rows renormalized"}}, {}};
  const double theta0 = config.theta0_deg * kRadPerDeg;
  const int n = config.points;
  const auto n_corrupt = static_cast<int>(std::floor(config.outlier_fraction * n + 1e-9));

  for (int t = 0; t < config.trials; ++t) {
    const std::uint64_t seed = derive_seed(config.seed, "outlier", static_cast<std::uint64_t>(t));
    out.records.push_back(guarded_trial(t, seed, "fraction=" + grid_label(config.outlier_fraction), [&](TrialRecord& r) {
      Rng rng(seed);
      const RigidTransform pose = sample_misalignment(rng, theta0, config.t_bound);
      RegistrationCase rc = make_registration_case(config.shape, n, derive_seed(seed, "shape"), pose, 1.0, rng);

      // Corrupt a random subset of source points.
      std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
      std::iota(idx.begin(), idx.end(), Eigen::Index{0});
      for (int s = 0; s < n_corrupt; ++s) {
        std::swap(idx[static_cast<std::size_t>(s)], idx[s + rng.index(static_cast<std::uint64_t>(n - s))]);
      }
      std::vector<bool> corrupted(static_cast<std::size_t>(n), false);
      for (int s = 0; s < n_corrupt; ++s) {
        const Eigen::Index i = idx[static_cast<std::size_t>(s)];
        corrupted[static_cast<std::size_t>(i)] = true;
        for (int attempt = 0;; ++attempt) {
          const Eigen::Vector3d p(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
          rc.source.col(i) = p;
          if (!config.outlier_reject) break;
          const double d = std::sqrt((rc.target_in_source_frame.colwise() - p).colwise().squaredNorm().minCoeff());
          if (d > config.outlier_threshold) break;
          if (attempt > 10000) throw NumericalError("could not place an outlier beyond the threshold");
        }
      }
      const CorrespondenceMatrix c_star =
          ground_truth_correspondence_outlier(rc.source, rc.target_in_source_frame, config.outlier_threshold);

      FeatureMatrix f_x, f_y;
      if (config.mode == CorrespondenceMode::learned) {
        f_x = featurize(*net, rc.source);
        f_y = featurize(*net, rc.target);
      } else {
        f_x = point_descriptors(rc.source, config.k);
        f_y = point_descriptors(rc.target, config.k);
      }
      const OutlierEmbedding emb = outlier_embedding(f_y, config.outlier_b);
      const Eigen::VectorXd residual = f_y.transpose() * emb.embedding - Eigen::VectorXd::Constant(f_y.cols(), config.outlier_b);
      const double stationarity = (f_y * residual).norm();

      const CorrespondenceMatrix c = config.mode == CorrespondenceMode::learned
                                         ? soft_correspondence_outlier(f_x, f_y, emb.embedding)
                                         : c_star;
      const AlignmentResult a = weighted_align_outlier(rc.source, rc.target, c);

      const auto flagged = hard_assign(c);
      std::size_t tp = 0, fp = 0, fn = 0;
      for (int i = 0; i < n; ++i) {
        const bool pred = flagged[static_cast<std::size_t>(i)] == kOutlierIndex;
        const bool truth = corrupted[static_cast<std::size_t>(i)];
        tp += pred && truth;
        fp += pred && !truth;
        fn += !pred && truth;
      }
      add_rotation_metrics(r, a.transform.rotation, rc.pose.rotation);
      r.metrics.emplace_back("translation_error", translation_error(a.transform.translation, rc.pose.translation));
      r.metrics.emplace_back("outlier_precision_pct", tp + fp ? 100.0 * tp / static_cast<double>(tp + fp) : 100.0);
      r.metrics.emplace_back("outlier_recall_pct", tp + fn ? 100.0 * tp / static_cast<double>(tp + fn) : 100.0);
      r.metrics.emplace_back("effective_weight", a.effective_weight);
      r.metrics.emplace_back("embedding_stationarity", stationarity);
      r.metrics.emplace_back("correspondence_pct", correspondence_accuracy(c, c_star));
    }));
  }
  return out;
}

RigidTransform register_clouds(const FeatureNet& net, const PointCloud& source, const PointCloud& target,
                               int sinkhorn_iters) {
  const FeatureMatrix f_x = featurize(net, source);
  const FeatureMatrix f_y = featurize(net, target);
  CorrespondenceMatrix c = soft_correspondence(f_x, f_y);
  if (sinkhorn_iters > 0) c = {sinkhorn_normalize(c.values(), sinkhorn_iters), CorrespondenceKind::soft};
  return weighted_align(source, target, c).transform;
}

}  // namespace corrmatch
