#include <doctest.h>

#include <cmath>
#include <numbers>
#include <numeric>

#include <Eigen/Dense>

#include "corrmatch/align.hpp"
#include "corrmatch/error.hpp"
#include "corrmatch/learn.hpp"
#include "oracles.hpp"

using namespace corrmatch;
using Eigen::Matrix3d;
using Eigen::MatrixXd;
using Eigen::Vector3d;
using Eigen::VectorXd;

namespace {

constexpr double kPi = std::numbers::pi;

MatrixXd random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

CorrespondenceMatrix random_hard(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(cols));
  for (auto& i : idx) i = static_cast<Eigen::Index>(rng.index(static_cast<std::uint64_t>(rows)));
  return CorrespondenceMatrix::from_indices(idx, rows);
}

/// Registration sample with target = pose(shuffled source).
TrainSample make_case(Rng& rng, int n, int k, double theta0 = kPi) {
  PointCloud x = generate_shape(ShapeKind::asymmetric_blob, n, rng);
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
  PointCloud shuffled(3, n);
  for (int i = 0; i < n; ++i) shuffled.col(i) = x.col(perm[static_cast<std::size_t>(i)]);
  const RigidTransform pose = sample_misalignment(rng, theta0, 0.5);
  CorrespondenceMatrix c = ground_truth_correspondence(x, shuffled);
  return make_sample(x, apply_transform(pose, shuffled), std::move(c), pose, k);
}

/// Plain loop forward pass for comparison with featurize_descriptors.
MatrixXd loop_forward(const FeatureNet& net, const MatrixXd& d) {
  MatrixXd out(net.embedding_dim(), d.cols());
  for (Eigen::Index p = 0; p < d.cols(); ++p) {
    std::vector<double> a(static_cast<std::size_t>(d.rows()));
    for (Eigen::Index r = 0; r < d.rows(); ++r)
      a[static_cast<std::size_t>(r)] = (d(r, p) - net.input_shift[r]) * net.input_scale[r];
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      const auto& w = net.layers[l].weight;
      std::vector<double> z(static_cast<std::size_t>(w.rows()));
      for (Eigen::Index i = 0; i < w.rows(); ++i) {
        double s = net.layers[l].bias[i];
        for (Eigen::Index j = 0; j < w.cols(); ++j) s += w(i, j) * a[static_cast<std::size_t>(j)];
        z[static_cast<std::size_t>(i)] = l + 1 < net.layers.size() ? std::tanh(s) : s;
      }
      a = z;
    }
    for (Eigen::Index i = 0; i < out.rows(); ++i) out(i, p) = a[static_cast<std::size_t>(i)];
  }
  return out;
}

double pipeline_loss(const FeatureNet& net, const TrainSample& s) {
  const MatrixXd fx = loop_forward(net, s.source_descriptors);
  const MatrixXd fy = loop_forward(net, s.target_descriptors);
  return oracle::cross_entropy(fy.transpose() * fx, hard_assign(s.c_star));
}

}  // namespace

TEST_CASE("point_descriptors are rigid invariant") {
  Rng rng(1);
  for (int t = 0; t < 10; ++t) {
    const PointCloud x = generate_shape(ShapeKind::asymmetric_blob, 64, rng);
    const RigidTransform q = sample_misalignment(rng, kPi, 2.0);
    const MatrixXd a = point_descriptors(x, 8), b = point_descriptors(apply_transform(q, x), 8);
    CHECK(a.rows() == kDescriptorDim);
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("point_descriptors on a regular tetrahedron") {
  PointCloud tet(3, 4);
  tet << 1, 1, -1, -1, 1, -1, 1, -1, 1, -1, -1, 1;
  const MatrixXd d = point_descriptors(tet, 3);
  for (Eigen::Index i = 1; i < 4; ++i) CHECK((d.col(i) - d.col(0)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(d(1, 0) == doctest::Approx(std::sqrt(8.0)));
}

TEST_CASE("descriptor eigenvalues match the characteristic polynomial") {
  Rng rng(2);
  const PointCloud x = sample_unit_cube(30, rng);
  const int k = 6;
  const MatrixXd d = point_descriptors(x, k);
  for (Eigen::Index i = 0; i < x.cols(); ++i) {
    // Brute-force k nearest neighbors (excluding the point) and their covariance.
    std::vector<std::pair<double, Eigen::Index>> dist;
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      if (j != i) dist.emplace_back((x.col(j) - x.col(i)).norm(), j);
    std::sort(dist.begin(), dist.end());
    Vector3d mean = Vector3d::Zero();
    for (int n = 0; n < k; ++n) mean += x.col(dist[static_cast<std::size_t>(n)].second);
    mean /= k;
    Matrix3d cov = Matrix3d::Zero();
    for (int n = 0; n < k; ++n) {
      const Vector3d c = x.col(dist[static_cast<std::size_t>(n)].second) - mean;
      cov += c * c.transpose();
    }
    cov /= k;
    const Vector3d eig = oracle::symmetric_eigenvalues(cov);
    for (int e = 0; e < 3; ++e) CHECK(d(4 + e, i) == doctest::Approx(eig[e]).epsilon(1e-9).scale(1e-6));
    CHECK(d(2, i) == doctest::Approx(dist[0].first));
    CHECK(d(3, i) == doctest::Approx(dist[static_cast<std::size_t>(k - 1)].first));
  }
  CHECK_THROWS_AS(point_descriptors(x, 30), std::invalid_argument);
  CHECK_THROWS_AS(point_descriptors(x, 0), std::invalid_argument);
}

TEST_CASE("featurize") {
  Rng rng(3);
  FeatureNet net = FeatureNet::create(kDescriptorDim, {64, 64}, 32, 8, rng);
  CHECK(net.parameter_count() == static_cast<std::size_t>(7 * 64 + 64 + 64 * 64 + 64 + 64 * 32 + 32));
  const MatrixXd d = random_matrix(rng, kDescriptorDim, 20);

  SUBCASE("zero weights leave only the output bias") {
    FeatureNet zero = net;
    for (auto& l : zero.layers) l.weight.setZero();
    zero.layers.back().bias.setConstant(0.25);
    const MatrixXd f = featurize_descriptors(zero, d);
    CHECK((f.array() - 0.25).abs().maxCoeff() == 0.0);
  }
  SUBCASE("identical points give identical columns") {
    MatrixXd dup = d;
    dup.col(5) = dup.col(2);
    const MatrixXd f = featurize_descriptors(net, dup);
    CHECK(f.col(5) == f.col(2));
  }
  SUBCASE("matches an independent loop implementation") {
    net.input_shift = random_matrix(rng, kDescriptorDim, 1);
    net.input_scale = random_matrix(rng, kDescriptorDim, 1).cwiseAbs();
    CHECK((featurize_descriptors(net, d) - loop_forward(net, d)).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("permutation equivariance") {
    const PointCloud x = generate_shape(ShapeKind::asymmetric_blob, 40, rng);
    std::vector<Eigen::Index> perm(40);
    std::iota(perm.begin(), perm.end(), Eigen::Index{0});
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
    PointCloud px(3, 40);
    for (int i = 0; i < 40; ++i) px.col(i) = x.col(perm[static_cast<std::size_t>(i)]);
    const MatrixXd f = featurize(net, x), pf = featurize(net, px);
    for (int i = 0; i < 40; ++i) CHECK((pf.col(i) - f.col(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff() < 1e-12);
  }
  CHECK_THROWS_AS(featurize_descriptors(net, MatrixXd::Zero(5, 3)), std::invalid_argument);
}

TEST_CASE("cross_entropy_loss values") {
  Rng rng(4);
  const CorrespondenceMatrix c = random_hard(rng, 9, 13);
  CHECK(cross_entropy_loss(MatrixXd::Zero(9, 13), c).total == doctest::Approx(13 * std::log(9.0)).epsilon(1e-14));
  CHECK(cross_entropy_loss(MatrixXd::Zero(9, 13), c).mean == doctest::Approx(std::log(9.0)).epsilon(1e-14));

  MatrixXd sat = MatrixXd::Zero(9, 13);
  const auto rows = hard_assign(c);
  for (Eigen::Index i = 0; i < 13; ++i) sat(rows[static_cast<std::size_t>(i)], i) = 1e6;
  CHECK(cross_entropy_loss(sat, c).total < 1e-6);

  const MatrixXd two = MatrixXd::Identity(2, 2);
  const auto id = CorrespondenceMatrix::from_indices({0, 1}, 2);
  CHECK(cross_entropy_loss(two, id).total == doctest::Approx(2.0 * std::log(1.0 + std::exp(-1.0))).epsilon(1e-14));

  CHECK_THROWS_AS(cross_entropy_loss(MatrixXd::Zero(9, 12), c), std::invalid_argument);
  const CorrespondenceMatrix soft(MatrixXd::Constant(2, 2, 0.5), CorrespondenceKind::soft);
  CHECK_THROWS_AS(cross_entropy_loss(two, soft), std::invalid_argument);
  CHECK_THROWS_AS(cross_entropy_grad(two, soft), std::invalid_argument);
}

TEST_CASE("cross_entropy_loss properties") {
  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    const auto rows = static_cast<Eigen::Index>(2 + rng.index(15));
    const auto cols = static_cast<Eigen::Index>(1 + rng.index(16));
    const MatrixXd logits = random_matrix(rng, rows, cols, 2.0);
    const CorrespondenceMatrix c = random_hard(rng, rows, cols);
    const double loss = cross_entropy_loss(logits, c).total;
    CHECK(loss >= 0.0);
    CHECK(loss == doctest::Approx(oracle::cross_entropy(logits, hard_assign(c))).epsilon(1e-12));
    // A small step against the gradient lowers the loss.
    const MatrixXd g = cross_entropy_grad(logits, c);
    CHECK(cross_entropy_loss(logits - 1e-4 * g, c).total < loss);
    CHECK(g.colwise().sum().cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("cross_entropy_grad") {
  Rng rng(6);
  const CorrespondenceMatrix c = random_hard(rng, 6, 5);
  const auto rows = hard_assign(c);

  MatrixXd sat = MatrixXd::Zero(6, 5);
  for (Eigen::Index i = 0; i < 5; ++i) sat(rows[static_cast<std::size_t>(i)], i) = 1e3;
  CHECK(cross_entropy_grad(sat, c).cwiseAbs().maxCoeff() < 1e-12);

  const MatrixXd uniform = cross_entropy_grad(MatrixXd::Zero(6, 5), c);
  CHECK((uniform - (MatrixXd::Constant(6, 5, 1.0 / 6.0) - c.values())).cwiseAbs().maxCoeff() < 1e-15);

  // Central differences on random 8x6 instances.
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    const MatrixXd logits = random_matrix(rng, 8, 6);
    const CorrespondenceMatrix target = random_hard(rng, 8, 6);
    const auto tr = hard_assign(target);
    const MatrixXd g = cross_entropy_grad(logits, target);
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
      const double fd = oracle::cross_entropy_fd(logits, tr, i, 1e-5);
      worst = std::max(worst, oracle::relative_error(g.data()[i], fd));
    }
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("dcp_loss and rpmnet_reg_loss") {
  Rng rng(7);
  const RigidTransform t = sample_misalignment(rng, kPi, 0.5);
  CHECK(dcp_loss(t, t) == doctest::Approx(0.0).scale(1e-12));
  RigidTransform flipped = t;
  flipped.rotation = t.rotation * rotvec_to_matrix(Vector3d(0, 0, kPi));
  CHECK(dcp_loss(flipped, t) == doctest::Approx(8.0).epsilon(1e-12));
  RigidTransform shifted = t;
  shifted.translation += Vector3d(1, 0, 0);
  CHECK(dcp_loss(shifted, t) == doctest::Approx(1.0).epsilon(1e-12));

  const PointCloud x = sample_unit_cube(25, rng);
  CHECK(rpmnet_reg_loss(x, t, t) == 0.0);
  RigidTransform off = t;
  off.translation += Vector3d(0.1, -0.2, 0.3);
  CHECK(rpmnet_reg_loss(x, off, t) == doctest::Approx(0.6).epsilon(1e-12));
  const RigidTransform other = sample_misalignment(rng, kPi, 0.5);
  double expect = 0.0;
  for (Eigen::Index i = 0; i < x.cols(); ++i) expect += (t(x.col(i)) - other(x.col(i))).cwiseAbs().sum();
  CHECK(rpmnet_reg_loss(x, other, t) == doctest::Approx(expect / 25.0).epsilon(1e-12));
}

TEST_CASE("full network gradient matches finite differences") {
  Rng rng(8);
  for (int trial = 0; trial < 3; ++trial) {
    const TrainSample s = make_case(rng, 8, 4);
    FeatureNet net = FeatureNet::create(kDescriptorDim, {16, 16}, 8, 4, rng);
    net.input_shift = s.source_descriptors.rowwise().mean();
    net.input_scale = VectorXd::Constant(kDescriptorDim, 3.0);
    const SampleGradient sg = sample_loss_and_grad(net, s);
    CHECK(sg.loss.total == doctest::Approx(pipeline_loss(net, s)).epsilon(1e-10));

    double worst = 0.0;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      auto probe = [&](double& param, double analytic) {
        const double saved = param;
        param = saved + 1e-5;
        const double up = pipeline_loss(net, s);
        param = saved - 1e-5;
        const double dn = pipeline_loss(net, s);
        param = saved;
        worst = std::max(worst, oracle::relative_error(analytic, (up - dn) / 2e-5, 1e-4));
      };
      for (Eigen::Index i = 0; i < net.layers[l].weight.size(); ++i)
        probe(net.layers[l].weight.data()[i], sg.grad.layers[l].weight.data()[i]);
      for (Eigen::Index i = 0; i < net.layers[l].bias.size(); ++i)
        probe(net.layers[l].bias.data()[i], sg.grad.layers[l].bias.data()[i]);
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("train_epoch") {
  Rng rng(9);
  std::vector<TrainSample> data;
  for (int i = 0; i < 4; ++i) data.push_back(make_case(rng, 32, 8));
  const FeatureNet init = FeatureNet::create(kDescriptorDim, {64, 64}, 32, 8, rng);

  SUBCASE("zero learning rate leaves parameters unchanged") {
    AdamOptions adam;
    adam.learning_rate = 0.0;
    TrainState state = TrainState::start(init, 1, adam);
    const EvalMetrics m = train_epoch(state, data);
    CHECK(checkpoint_to_string(state.net) == checkpoint_to_string(init));
    CHECK(state.step == 4);
    CHECK(state.epoch == 1);
    CHECK(std::isfinite(m.mean_loss));
  }
  SUBCASE("a single sample can be memorized") {
    const std::vector<TrainSample> one{data[0]};
    FeatureNet net = init;
    const MatrixXd& d = data[0].source_descriptors;
    net.input_shift = d.rowwise().mean();
    const VectorXd var = (d.colwise() - net.input_shift).rowwise().squaredNorm() / static_cast<double>(d.cols());
    net.input_scale = var.cwiseSqrt().cwiseMax(1e-12).cwiseInverse();
    AdamOptions adam;
    adam.learning_rate = 1e-3;
    TrainState state = TrainState::start(net, 2, adam);
    for (int step = 0; step < 200; ++step) train_epoch(state, one);
    const EvalMetrics m = evaluate(state.net, one);
    CHECK(m.accuracy == 100.0);
  }
  SUBCASE("non-finite loss aborts without touching the state") {
    FeatureNet broken = init;
    broken.layers[0].weight(0, 0) = std::numeric_limits<double>::quiet_NaN();
    TrainState state = TrainState::start(broken, 3);
    CHECK_THROWS_AS(train_epoch(state, data), NumericalError);
    CHECK(state.step == 0);
    CHECK(state.epoch == 0);
  }
  SUBCASE("batches apply one update each") {
    TrainState state = TrainState::start(init, 4, {}, 3);
    train_epoch(state, data);
    CHECK(state.step == 2);
  }
  CHECK_THROWS_AS(train_epoch(*std::make_unique<TrainState>(TrainState::start(init, 5)), {}), std::invalid_argument);
}

TEST_CASE("training losses are rigid invariant") {
  Rng rng(10);
  const FeatureNet net = FeatureNet::create(kDescriptorDim, {64, 64}, 32, 8, rng);
  for (int t = 0; t < 5; ++t) {
    const TrainSample s = make_case(rng, 48, 8);
    const RigidTransform q = sample_misalignment(rng, kPi, 3.0);
    const TrainSample moved = make_sample(apply_transform(q, s.source), apply_transform(q, s.target), s.c_star,
                                          q * s.pose * q.inverse(), 8);
    CHECK(sample_loss_and_grad(net, s).loss.total ==
          doctest::Approx(sample_loss_and_grad(net, moved).loss.total).epsilon(1e-6));
  }
}

TEST_CASE("oracle features recover the pose") {
  // One-hot feature per true match: F_X = s I, F_Y = s C*^T-permuted identity.
  Rng rng(11);
  for (int t = 0; t < 20; ++t) {
    const TrainSample s = make_case(rng, 64, 8);
    const MatrixXd fx = 40.0 * MatrixXd::Identity(64, 64);
    const MatrixXd fy = 40.0 * s.c_star.values().transpose();
    const AlignmentResult r = weighted_align(s.source, s.target, soft_correspondence(fx, fy));
    CHECK(rotation_error(r.transform.rotation, s.pose.rotation, RotationMetric::geodesic) < 1e-6);
  }
}

TEST_CASE("checkpoints") {
  Rng rng(12);
  FeatureNet net = FeatureNet::create(kDescriptorDim, {10, 6}, 4, 5, rng);
  net.input_shift = random_matrix(rng, kDescriptorDim, 1);
  const std::string text = checkpoint_to_string(net);
  const FeatureNet back = checkpoint_from_string(text);
  CHECK(checkpoint_to_string(back) == text);
  CHECK(back.k == 5);
  CHECK(back.layers[1].weight == net.layers[1].weight);

  const auto path = std::filesystem::temp_directory_path() / "corrmatch_ckpt_test.txt";
  save_checkpoint(net, path);
  CHECK(checkpoint_to_string(load_checkpoint(path)) == text);
  std::filesystem::remove(path);

  CHECK_THROWS_AS(checkpoint_from_string("something else"), IoError);
  CHECK_THROWS_AS(checkpoint_from_string("corrmatch-featurenet 2\n"), IoError);
  CHECK_THROWS_AS(checkpoint_from_string(text.substr(0, text.size() / 2)), IoError);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/ckpt"), IoError);
}
