// corrmatch command-line front end.
//
//   corrmatch <perturb|sweep|partial|outlier|train> --config <path> [--out <dir>] [--seed <u64>] [--trials <n>]
//   corrmatch register --source a.xyz --target b.xyz --checkpoint net.ckpt
//
// Exit codes: 0 success, 1 config error, 2 numerical failure, 3 I/O error.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "corrmatch/error.hpp"
#include "corrmatch/experiments.hpp"

namespace {

enum ExitCode { kOk = 0, kConfig = 1, kNumerical = 2, kIo = 3 };

struct CommonArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> trials;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required) {
  auto* opt = cmd->add_option("--config", args.config, "key = value experiment config");
  if (config_required) opt->required();
  cmd->add_option("--out", args.out, "output directory (overrides out_dir)");
  cmd->add_option("--seed", args.seed, "base seed (overrides seed)");
  cmd->add_option("--trials", args.trials, "trials per grid point (overrides trials)");
}

corrmatch::ExperimentConfig resolve(const CommonArgs& args) {
  corrmatch::ExperimentConfig cfg = args.config.empty() ? corrmatch::ExperimentConfig{} : corrmatch::load_config(args.config);
  if (!args.out.empty()) cfg.out_dir = args.out;
  if (args.seed) cfg.seed = *args.seed;
  if (args.trials) cfg.trials = *args.trials;
  cfg.validate();
  return cfg;
}

int run(const std::string& sub, const CommonArgs& args, const std::string& source, const std::string& target,
        const std::string& checkpoint) {
  using namespace corrmatch;
  if (sub == "register") {
    ExperimentConfig cfg = resolve(args);
    const FeatureNet net = load_checkpoint(checkpoint);
    const RigidTransform t = register_clouds(net, load_xyz(source), load_xyz(target), cfg.sinkhorn_iters);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) std::printf("%.17g ", t.rotation(r, c));
    std::printf("%.17g %.17g %.17g\n", t.translation.x(), t.translation.y(), t.translation.z());
    return kOk;
  }

  const ExperimentConfig cfg = resolve(args);
  if (sub == "train") {
    const TrainingRun run = run_training(cfg);
    write_study(cfg, run.curve, cfg.out_dir);
    save_checkpoint(run.net, std::filesystem::path(cfg.out_dir) / "featurenet.ckpt");
    std::printf("held-out correspondence %.3f%%  rotation %.4f deg (geodesic)  %.4f deg (euler mae)\n",
                run.heldout.accuracy, run.heldout.rotation_geodesic, run.heldout.rotation_euler_mae);
    if (run.diverged) {
      std::fprintf(stderr, "training diverged: %s (last good checkpoint written)\n", run.divergence.c_str());
      return kNumerical;
    }
    return kOk;
  }

  std::optional<FeatureNet> net = load_model_for(cfg);
  StudyResult result;
  if (sub == "perturb") result = run_perturbation_study(cfg);
  else if (sub == "sweep") result = run_misalignment_sweep(cfg, net ? &*net : nullptr);
  else if (sub == "partial") result = run_partial_experiment(cfg, net ? &*net : nullptr);
  else result = run_outlier_experiment(cfg, net ? &*net : nullptr);
  write_study(cfg, result, cfg.out_dir);
  std::printf("wrote %s/%s.csv (%zu records)\n", cfg.out_dir.c_str(), result.study.c_str(), result.records.size());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Correspondence-driven point cloud registration experiments"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string source, target, checkpoint;
  for (const char* name : {"perturb", "sweep", "partial", "outlier", "train"}) {
    add_common(app.add_subcommand(name), args, true);
  }
  auto* reg = app.add_subcommand("register", "register two XYZ clouds; prints R (row-major) then t");
  add_common(reg, args, false);
  reg->add_option("--source", source, "source XYZ file")->required();
  reg->add_option("--target", target, "target XYZ file")->required();
  reg->add_option("--checkpoint", checkpoint, "trained feature net")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  const std::string sub = app.get_subcommands().front()->get_name();
  try {
    return run(sub, args, source, target, checkpoint);
  } catch (const corrmatch::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const corrmatch::IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const corrmatch::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return kConfig;
  }
}
