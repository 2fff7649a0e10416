#include "corrmatch/learn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <Eigen/Dense>

#include "corrmatch/align.hpp"
#include "corrmatch/error.hpp"

namespace corrmatch {

Eigen::MatrixXd point_descriptors(const PointCloud& x, int k) {
  validate_cloud(x, "descriptor input");
  const Eigen::Index n = x.cols();
  if (k < 1 || k >= n) throw std::invalid_argument("descriptor k must satisfy 1 <= k < N");

  const Eigen::Vector3d centroid = x.rowwise().mean();
  Eigen::MatrixXd desc(kDescriptorDim, n);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd d2 = (x.colwise() - x.col(i)).colwise().squaredNorm();
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::partial_sort(order.begin(), order.begin() + k + 1, order.end(), [&](Eigen::Index a, Eigen::Index b) {
      return d2[a] < d2[b] || (d2[a] == d2[b] && a < b);
    });
    // Drop the point itself; with duplicates it need not sort first.
    Eigen::Matrix3Xd nbrs(3, k);
    Eigen::VectorXd dist(k);
    int filled = 0;
    for (Eigen::Index r = 0; r <= k && filled < k; ++r) {
      const Eigen::Index j = order[static_cast<std::size_t>(r)];
      if (j == i) continue;
      nbrs.col(filled) = x.col(j);
      dist[filled] = std::sqrt(d2[j]);
      ++filled;
    }
    const Eigen::Vector3d mean = nbrs.rowwise().mean();
    const Eigen::Matrix3Xd centered = nbrs.colwise() - mean;
    const Eigen::Matrix3d cov = centered * centered.transpose() / static_cast<double>(k);
    const Eigen::Vector3d eig = Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d>(cov, Eigen::EigenvaluesOnly).eigenvalues();

    desc(0, i) = (x.col(i) - centroid).norm();
    desc(1, i) = dist.mean();
    desc(2, i) = dist.minCoeff();
    desc(3, i) = dist.maxCoeff();
    desc(4, i) = eig[2];
    desc(5, i) = eig[1];
    desc(6, i) = eig[0];
  }
  return desc;
}

std::size_t FeatureNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

FeatureNet FeatureNet::create(int input_dim, const std::vector<int>& hidden, int embedding_dim, int k, Rng& rng) {
  if (input_dim < 1 || embedding_dim < 1) throw std::invalid_argument("network dimensions must be positive");
  FeatureNet net;
  net.k = k;
  net.input_shift = Eigen::VectorXd::Zero(input_dim);
  net.input_scale = Eigen::VectorXd::Ones(input_dim);
  std::vector<int> dims{input_dim};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(embedding_dim);
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    if (dims[l + 1] < 1) throw std::invalid_argument("hidden layer width must be positive");
    const double limit = std::sqrt(6.0 / static_cast<double>(dims[l] + dims[l + 1]));
    DenseLayer layer;
    layer.weight.resize(dims[l + 1], dims[l]);
    for (Eigen::Index c = 0; c < layer.weight.cols(); ++c)
      for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) layer.weight(r, c) = rng.uniform(-limit, limit);
    layer.bias = Eigen::VectorXd::Zero(dims[l + 1]);
    net.layers.push_back(std::move(layer));
  }
  return net;
}

NetGradient NetGradient::zeros_like(const FeatureNet& net) {
  NetGradient g;
  for (const auto& l : net.layers) {
    g.layers.push_back({Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()), Eigen::VectorXd::Zero(l.bias.size())});
  }
  return g;
}

NetGradient& NetGradient::operator+=(const NetGradient& other) {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    layers[l].weight += other.layers[l].weight;
    layers[l].bias += other.layers[l].bias;
  }
  return *this;
}

NetGradient& NetGradient::operator*=(double s) {
  for (auto& l : layers) {
    l.weight *= s;
    l.bias *= s;
  }
  return *this;
}

FeatureMatrix featurize_descriptors(const FeatureNet& net, const Eigen::MatrixXd& descriptors, ForwardCache* cache) {
  if (net.layers.empty()) throw std::invalid_argument("network has no layers");
  if (descriptors.rows() != net.input_dim()) {
    throw std::invalid_argument("descriptor dimension " + std::to_string(descriptors.rows()) +
                                " does not match network input " + std::to_string(net.input_dim()));
  }
  Eigen::MatrixXd a =
      ((descriptors.colwise() - net.input_shift).array().colwise() * net.input_scale.array()).matrix();
  if (cache) {
    cache->activations.clear();
    cache->activations.push_back(a);
  }
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    Eigen::MatrixXd z = net.layers[l].weight * a;
    z.colwise() += net.layers[l].bias;
    a = l + 1 < net.layers.size() ? Eigen::MatrixXd(z.array().tanh()) : z;
    if (cache) cache->activations.push_back(a);
  }
  return a;
}

FeatureMatrix featurize(const FeatureNet& net, const PointCloud& x) {
  return featurize_descriptors(net, point_descriptors(x, net.k));
}

void backpropagate(const FeatureNet& net, const ForwardCache& cache, const Eigen::MatrixXd& d_features,
                   NetGradient& grad) {
  Eigen::MatrixXd delta = d_features;  // d loss / d pre-activation of the current layer
  for (std::size_t l = net.layers.size(); l-- > 0;) {
    const Eigen::MatrixXd& input = cache.activations[l];
    grad.layers[l].weight.noalias() += delta * input.transpose();
    grad.layers[l].bias += delta.rowwise().sum();
    if (l == 0) break;
    Eigen::MatrixXd d_input = net.layers[l].weight.transpose() * delta;
    delta = (d_input.array() * (1.0 - input.array().square())).matrix();
  }
}

namespace {

std::vector<Eigen::Index> hard_targets(const Eigen::MatrixXd& logits, const CorrespondenceMatrix& c_star) {
  if (!c_star.is_hard()) throw std::invalid_argument("cross-entropy target must be a hard correspondence matrix");
  if (logits.rows() != c_star.rows() || logits.cols() != c_star.source_count()) {
    throw std::invalid_argument("logit matrix shape does not match the target correspondence");
  }
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(logits.cols()));
  for (Eigen::Index i = 0; i < logits.cols(); ++i) c_star.values().col(i).maxCoeff(&rows[static_cast<std::size_t>(i)]);
  return rows;
}

}  // namespace

CrossEntropy cross_entropy_loss(const Eigen::MatrixXd& logits, const CorrespondenceMatrix& c_star) {
  const auto rows = hard_targets(logits, c_star);
  CrossEntropy out;
  for (Eigen::Index i = 0; i < logits.cols(); ++i) {
    const double mx = logits.col(i).maxCoeff();
    const double lse = mx + std::log((logits.col(i).array() - mx).exp().sum());
    out.total += lse - logits(rows[static_cast<std::size_t>(i)], i);
  }
  out.mean = out.total / static_cast<double>(logits.cols());
  return out;
}

Eigen::MatrixXd cross_entropy_grad(const Eigen::MatrixXd& logits, const CorrespondenceMatrix& c_star) {
  hard_targets(logits, c_star);
  return column_softmax(logits) - c_star.values();
}

double dcp_loss(const RigidTransform& pred, const RigidTransform& truth) {
  const Eigen::Matrix3d rel = pred.rotation.transpose() * truth.rotation - Eigen::Matrix3d::Identity();
  return rel.squaredNorm() + (pred.translation - truth.translation).squaredNorm();
}

double rpmnet_reg_loss(const PointCloud& x, const RigidTransform& pred, const RigidTransform& truth) {
  validate_cloud(x, "rpmnet_reg_loss input");
  const PointCloud diff = apply_transform(truth, x) - apply_transform(pred, x);
  return diff.cwiseAbs().colwise().sum().mean();
}

TrainSample make_sample(PointCloud source, PointCloud target, CorrespondenceMatrix c_star, const RigidTransform& pose,
                        int k) {
  if (c_star.source_count() != source.cols() || c_star.target_count() != target.cols()) {
    throw std::invalid_argument("sample correspondence does not match its clouds");
  }
  Eigen::MatrixXd sd = point_descriptors(source, k);
  Eigen::MatrixXd td = point_descriptors(target, k);
  return TrainSample{std::move(source), std::move(target), std::move(c_star), pose, std::move(sd), std::move(td)};
}

SampleGradient sample_loss_and_grad(const FeatureNet& net, const TrainSample& sample) {
  ForwardCache cache_x, cache_y;
  const FeatureMatrix f_x = featurize_descriptors(net, sample.source_descriptors, &cache_x);
  const FeatureMatrix f_y = featurize_descriptors(net, sample.target_descriptors, &cache_y);

  SampleGradient out;
  out.logits = f_y.transpose() * f_x;
  out.loss = cross_entropy_loss(out.logits, sample.c_star);
  out.grad = NetGradient::zeros_like(net);
  if (!std::isfinite(out.loss.total)) return out;  // caller decides how to report it
  const Eigen::MatrixXd g = cross_entropy_grad(out.logits, sample.c_star);
  backpropagate(net, cache_x, f_y * g, out.grad);
  backpropagate(net, cache_y, f_x * g.transpose(), out.grad);
  return out;
}

TrainState TrainState::start(FeatureNet net, std::uint64_t seed, const AdamOptions& adam, int batch_size) {
  if (batch_size < 1) throw std::invalid_argument("batch size must be positive");
  TrainState s;
  s.first_moment = NetGradient::zeros_like(net);
  s.second_moment = NetGradient::zeros_like(net);
  s.net = std::move(net);
  s.seed = seed;
  s.adam = adam;
  s.batch_size = batch_size;
  return s;
}

void adam_step(TrainState& state, const NetGradient& grad) {
  ++state.step;
  const AdamOptions& o = state.adam;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  auto update = [&](auto& param, auto& m, auto& v, const auto& g) {
    m = o.beta1 * m + (1.0 - o.beta1) * g;
    v = (o.beta2 * v.array() + (1.0 - o.beta2) * g.array().square()).matrix();
    param.array() -= o.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + o.epsilon);
  };
  for (std::size_t l = 0; l < state.net.layers.size(); ++l) {
    update(state.net.layers[l].weight, state.first_moment.layers[l].weight, state.second_moment.layers[l].weight,
           grad.layers[l].weight);
    update(state.net.layers[l].bias, state.first_moment.layers[l].bias, state.second_moment.layers[l].bias,
           grad.layers[l].bias);
  }
}

namespace {

struct MetricSums {
  double loss = 0, accuracy = 0, geodesic = 0, euler = 0, t_sq = 0, chamfer = 0;
  std::size_t n = 0, aligned = 0, failures = 0;

  void add_pose(const FeatureMatrix& f_x, const FeatureMatrix& f_y, const TrainSample& s, double sample_loss) {
    ++n;
    loss += sample_loss;
    if (!std::isfinite(sample_loss)) {
      ++failures;
      return;
    }
    const CorrespondenceMatrix c = soft_correspondence(f_x, f_y);
    accuracy += correspondence_accuracy(c, s.c_star);
    try {
      const AlignmentResult r = weighted_align(s.source, s.target, c);
      geodesic += rotation_error(r.transform.rotation, s.pose.rotation, RotationMetric::geodesic);
      euler += rotation_error(r.transform.rotation, s.pose.rotation, RotationMetric::euler_mae);
      t_sq += (r.transform.translation - s.pose.translation).squaredNorm();
      chamfer += chamfer_distance(apply_transform(r.transform, s.source), s.target);
      ++aligned;
    } catch (const NumericalError&) {
      ++failures;
    }
  }

  EvalMetrics finish() const {
    EvalMetrics m;
    if (n == 0) return m;
    m.mean_loss = loss / static_cast<double>(n);
    m.accuracy = accuracy / static_cast<double>(n);
    const double na = static_cast<double>(std::max<std::size_t>(aligned, 1));
    m.rotation_geodesic = geodesic / na;
    m.rotation_euler_mae = euler / na;
    m.translation_rmse = std::sqrt(t_sq / na);
    m.chamfer = chamfer / na;
    m.failures = failures;
    return m;
  }
};

}  // namespace

EvalMetrics evaluate(const FeatureNet& net, const std::vector<TrainSample>& dataset) {
  MetricSums sums;
  for (const auto& s : dataset) {
    const FeatureMatrix f_x = featurize_descriptors(net, s.source_descriptors);
    const FeatureMatrix f_y = featurize_descriptors(net, s.target_descriptors);
    sums.add_pose(f_x, f_y, s, cross_entropy_loss(f_y.transpose() * f_x, s.c_star).mean);
  }
  return sums.finish();
}

EvalMetrics train_epoch(TrainState& state, const std::vector<TrainSample>& dataset) {
  if (dataset.empty()) throw std::invalid_argument("training dataset is empty");
  TrainState work = state;

  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(state.seed, "epoch", static_cast<std::uint64_t>(state.epoch)));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);

  MetricSums sums;
  NetGradient batch = NetGradient::zeros_like(work.net);
  int in_batch = 0;
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const TrainSample& s = dataset[order[pos]];
    SampleGradient sg = sample_loss_and_grad(work.net, s);
    if (!std::isfinite(sg.loss.total)) {
      throw NumericalError("non-finite loss at epoch " + std::to_string(state.epoch) + ", sample " +
                           std::to_string(order[pos]));
    }
    const FeatureMatrix f_x = featurize_descriptors(work.net, s.source_descriptors);
    const FeatureMatrix f_y = featurize_descriptors(work.net, s.target_descriptors);
    sums.add_pose(f_x, f_y, s, sg.loss.mean);

    sg.grad *= 1.0 / static_cast<double>(s.source.cols());
    batch += sg.grad;
    if (++in_batch == work.batch_size || pos + 1 == order.size()) {
      batch *= 1.0 / static_cast<double>(in_batch);
      adam_step(work, batch);
      batch = NetGradient::zeros_like(work.net);
      in_batch = 0;
    }
  }
  ++work.epoch;
  state = std::move(work);
  return sums.finish();
}

// Checkpoint: text header "corrmatch-featurenet 1", then named tensors as
// "tensor <name> <rows> <cols>" followed by column-major values.

namespace {

constexpr const char* kCheckpointTag = "corrmatch-featurenet";
constexpr int kCheckpointVersion = 1;

void put_tensor(std::ostream& out, const std::string& name, const Eigen::MatrixXd& m) {
  out << "tensor " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
  char buf[32];
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", m.data()[i]);
    out << buf << (i + 1 == m.size() || (i + 1) % 8 == 0 ? '\n' : ' ');
  }
}

Eigen::MatrixXd get_tensor(std::istream& in, const std::string& name) {
  std::string word, got;
  Eigen::Index rows = 0, cols = 0;
  if (!(in >> word >> got >> rows >> cols) || word != "tensor" || got != name || rows < 0 || cols < 0) {
    throw IoError("checkpoint: expected tensor '" + name + "'");
  }
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    if (!(in >> m.data()[i])) throw IoError("checkpoint: truncated tensor '" + name + "'");
  }
  return m;
}

}  // namespace

std::string checkpoint_to_string(const FeatureNet& net) {
  std::ostringstream out;
  out << kCheckpointTag << ' ' << kCheckpointVersion << '\n';
  out << "k " << net.k << '\n';
  out << "layers " << net.layers.size() << '\n';
  put_tensor(out, "input_shift", net.input_shift);
  put_tensor(out, "input_scale", net.input_scale);
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    put_tensor(out, "layer" + std::to_string(l) + ".weight", net.layers[l].weight);
    put_tensor(out, "layer" + std::to_string(l) + ".bias", net.layers[l].bias);
  }
  out << "end\n";
  return out.str();
}

FeatureNet checkpoint_from_string(const std::string& text) {
  std::istringstream in(text);
  std::string tag, key;
  int version = 0;
  if (!(in >> tag >> version) || tag != kCheckpointTag) throw IoError("not a corrmatch checkpoint");
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  FeatureNet net;
  std::size_t n_layers = 0;
  if (!(in >> key >> net.k) || key != "k") throw IoError("checkpoint: missing k");
  if (!(in >> key >> n_layers) || key != "layers" || n_layers == 0) throw IoError("checkpoint: missing layer count");
  net.input_shift = get_tensor(in, "input_shift");
  net.input_scale = get_tensor(in, "input_scale");
  for (std::size_t l = 0; l < n_layers; ++l) {
    DenseLayer layer;
    layer.weight = get_tensor(in, "layer" + std::to_string(l) + ".weight");
    layer.bias = get_tensor(in, "layer" + std::to_string(l) + ".bias");
    if (layer.bias.size() != layer.weight.rows()) throw IoError("checkpoint: bias/weight shape mismatch");
    if (l > 0 && layer.weight.cols() != net.layers.back().weight.rows()) {
      throw IoError("checkpoint: layer shapes do not chain");
    }
    net.layers.push_back(std::move(layer));
  }
  if (net.input_shift.size() != net.layers.front().weight.cols() || net.input_scale.size() != net.input_shift.size()) {
    throw IoError("checkpoint: input standardization shape mismatch");
  }
  if (!(in >> key) || key != "end") throw IoError("checkpoint: missing end marker");
  return net;
}

void save_checkpoint(const FeatureNet& net, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << checkpoint_to_string(net);
  if (!out) throw IoError("write failed for " + path.string());
}

FeatureNet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return checkpoint_from_string(buf.str());
}

}  // namespace corrmatch
