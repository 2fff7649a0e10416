#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "corrmatch/align.hpp"
#include "corrmatch/error.hpp"
#include "corrmatch/experiments.hpp"
#include "corrmatch/learn.hpp"

namespace py = pybind11;
using namespace corrmatch;

namespace {

py::dict transform_dict(const RigidTransform& t) {
  py::dict d;
  d["rotation"] = Eigen::Matrix3d(t.rotation);
  d["translation"] = Eigen::Vector3d(t.translation);
  return d;
}

RigidTransform make_transform(const Eigen::Matrix3d& r, const Eigen::Vector3d& t) {
  if (!is_rotation(r)) throw std::invalid_argument("rotation must be orthonormal with determinant +1");
  return RigidTransform{r, t};
}

py::dict alignment_dict(const AlignmentResult& a) {
  py::dict d = transform_dict(a.transform);
  d["residual"] = a.residual;
  d["effective_weight"] = a.effective_weight;
  return d;
}

CorrespondenceMatrix as_correspondence(const Eigen::MatrixXd& c, bool outlier_augmented) {
  const bool hard = ((c.array() == 0.0) || (c.array() == 1.0)).all();
  return {c, hard ? CorrespondenceKind::hard : CorrespondenceKind::soft, outlier_augmented};
}

StudyResult run_study(const std::string& name, const ExperimentConfig& cfg) {
  const std::optional<FeatureNet> net = load_model_for(cfg);
  const FeatureNet* p = net ? &*net : nullptr;
  if (name == "perturb") return run_perturbation_study(cfg);
  if (name == "sweep") return run_misalignment_sweep(cfg, p);
  if (name == "partial") return run_partial_experiment(cfg, p);
  if (name == "outlier") return run_outlier_experiment(cfg, p);
  if (name == "train") return run_training(cfg, p).curve;
  throw std::invalid_argument("unknown study '" + name + "'");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Point cloud registration with correspondence-matrix estimation";
  m.attr("__version__") = std::string(kToolVersion.substr(kToolVersion.find(' ') + 1));

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  // geometry
  m.def("rotvec_to_matrix", [](const Eigen::Vector3d& v) { return rotvec_to_matrix(v); }, py::arg("v"));
  m.def("matrix_to_rotvec", [](const Eigen::Matrix3d& r) { return matrix_to_rotvec(r); }, py::arg("r"));
  m.def("euler_zyx", [](const Eigen::Matrix3d& r) { return euler_zyx(r); }, py::arg("r"),
        "(yaw, pitch, roll) in radians for R = Rz(yaw) Ry(pitch) Rx(roll)");
  m.def("rotation_error",
        [](const Eigen::Matrix3d& pred, const Eigen::Matrix3d& truth, const std::string& metric) {
          return rotation_error(pred, truth, parse_rotation_metric(metric));
        },
        py::arg("pred"), py::arg("truth"), py::arg("metric") = "geodesic", "degrees; metric is geodesic, euler-mae or euler-rmse");
  m.def("sample_misalignment",
        [](std::uint64_t seed, double theta0, double t_bound) {
          Rng rng(seed);
          return transform_dict(sample_misalignment(rng, theta0, t_bound));
        },
        py::arg("seed"), py::arg("theta0"), py::arg("t_bound"));
  m.def("apply_transform",
        [](const Eigen::Matrix3d& r, const Eigen::Vector3d& t, const PointCloud& x) {
          return PointCloud(apply_transform(make_transform(r, t), x));
        },
        py::arg("rotation"), py::arg("translation"), py::arg("x"));
  m.def("generate_shape",
        [](const std::string& kind, int n, std::uint64_t seed) {
          Rng rng(seed);
          return PointCloud(generate_shape(parse_shape_kind(kind), n, rng));
        },
        py::arg("kind"), py::arg("n"), py::arg("seed"));
  m.def("crop_partial",
        [](const PointCloud& x, double keep, std::uint64_t seed) {
          Rng rng(seed);
          CropResult c = crop_partial(x, keep, rng);
          return py::make_tuple(PointCloud(c.cloud), c.survivors);
        },
        py::arg("x"), py::arg("keep_fraction"), py::arg("seed"));
  m.def("chamfer_distance", &chamfer_distance, py::arg("x"), py::arg("y"));
  m.def("load_xyz", &load_xyz, py::arg("path"));
  m.def("save_xyz", &save_xyz, py::arg("cloud"), py::arg("path"));

  // correspondence
  m.def("ground_truth_correspondence",
        [](const PointCloud& x, const PointCloud& y) { return Eigen::MatrixXd(ground_truth_correspondence(x, y).values()); },
        py::arg("x"), py::arg("y_aligned"));
  m.def("soft_correspondence",
        [](const Eigen::MatrixXd& fx, const Eigen::MatrixXd& fy) { return Eigen::MatrixXd(soft_correspondence(fx, fy).values()); },
        py::arg("f_x"), py::arg("f_y"));
  m.def("sinkhorn_normalize", &sinkhorn_normalize, py::arg("m"), py::arg("iters") = 5, py::arg("eps") = 1e-9);
  m.def("correspondence_accuracy",
        [](const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth) {
          return correspondence_accuracy(as_correspondence(pred, false), as_correspondence(truth, false));
        },
        py::arg("pred"), py::arg("truth"));

  // alignment
  m.def("horn_align", [](const PointCloud& x, const PointCloud& y) { return alignment_dict(horn_align(x, y)); },
        py::arg("x"), py::arg("y_paired"));
  m.def("weighted_align",
        [](const PointCloud& x, const PointCloud& y, const Eigen::MatrixXd& c) {
          return alignment_dict(weighted_align(x, y, as_correspondence(c, false)));
        },
        py::arg("x"), py::arg("y"), py::arg("c"));
  m.def("icp",
        [](const PointCloud& x, const PointCloud& y, int max_iters, double tol) {
          const IcpResult r = icp(x, y, RigidTransform::identity(), {max_iters, tol});
          py::dict d = alignment_dict(r.alignment);
          d["converged"] = r.converged;
          d["iterations"] = r.trace.size();
          return d;
        },
        py::arg("x"), py::arg("y"), py::arg("max_iters") = 50, py::arg("tol") = 1e-6);

  // learning
  m.def("cross_entropy_loss",
        [](const Eigen::MatrixXd& logits, const Eigen::MatrixXd& c_star) {
          return cross_entropy_loss(logits, as_correspondence(c_star, false)).total;
        },
        py::arg("logits"), py::arg("c_star"));
  m.def("cross_entropy_grad",
        [](const Eigen::MatrixXd& logits, const Eigen::MatrixXd& c_star) {
          return cross_entropy_grad(logits, as_correspondence(c_star, false));
        },
        py::arg("logits"), py::arg("c_star"));
  m.def("point_descriptors", &point_descriptors, py::arg("x"), py::arg("k"));
  m.def("featurize",
        [](const std::filesystem::path& checkpoint, const PointCloud& x) { return featurize(load_checkpoint(checkpoint), x); },
        py::arg("checkpoint"), py::arg("x"));
  m.def("register_clouds",
        [](const std::filesystem::path& checkpoint, const PointCloud& source, const PointCloud& target, int sinkhorn_iters) {
          return transform_dict(register_clouds(load_checkpoint(checkpoint), source, target, sinkhorn_iters));
        },
        py::arg("checkpoint"), py::arg("source"), py::arg("target"), py::arg("sinkhorn_iters") = 0);

  // experiments
  m.def("run_study",
        [](const std::string& name, const std::string& config_text) {
          const ExperimentConfig cfg = parse_config(config_text);
          return format_study_csv(cfg, run_study(name, cfg));
        },
        py::arg("name"), py::arg("config") = "",
        "Runs perturb, sweep, partial, outlier or train and returns the study CSV text.");
  m.def("train",
        [](const std::string& config_text, const std::filesystem::path& checkpoint) {
          const ExperimentConfig cfg = parse_config(config_text);
          const TrainingRun run = run_training(cfg);
          save_checkpoint(run.net, checkpoint);
          if (run.diverged) throw NumericalError("training diverged: " + run.divergence);
          py::dict d;
          d["heldout_correspondence_pct"] = run.heldout.accuracy;
          d["heldout_rotation_geodesic_deg"] = run.heldout.rotation_geodesic;
          d["heldout_rotation_euler_mae_deg"] = run.heldout.rotation_euler_mae;
          d["curve_csv"] = format_study_csv(cfg, run.curve);
          return d;
        },
        py::arg("config"), py::arg("checkpoint"));
}
