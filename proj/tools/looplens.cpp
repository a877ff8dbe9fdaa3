#include "looplens/harness.hpp"
#include "looplens/io.hpp"
#include "looplens/weights_io.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <deque>
#include <iostream>

namespace {

struct CommonOpts {
  std::string spec_path;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int loops = 0;
  bool loops_set = false;
  int threads = 1;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool spec_required = true) {
  auto* spec = cmd->add_option("--spec", opts.spec_path, "experiment spec file (JSON)");
  if (spec_required) spec->required();
  cmd->add_option("--out", opts.out, "output directory (overrides spec out_dir)");
  cmd->add_option("--seed", opts.seed, "replace the spec's seed list with a single seed")
      ->each([&opts](const std::string&) { opts.seed_set = true; });
  cmd->add_option("--loops", opts.loops, "override the number of recurrences")
      ->each([&opts](const std::string&) { opts.loops_set = true; });
  cmd->add_option("--threads", opts.threads, "worker threads for grid experiments");
}

int run_experiment_command(looplens::ExperimentKind kind, const CommonOpts& opts) {
  looplens::ExperimentSpec spec = looplens::load_spec(opts.spec_path);
  if (spec.kind != kind)
    throw looplens::SpecError("spec kind '" + looplens::to_string(spec.kind) +
                              "' does not match subcommand '" + looplens::to_string(kind) + "'");
  if (opts.seed_set) spec.seeds = {opts.seed};
  if (opts.loops_set) spec.loops = opts.loops;
  const std::string dir = !opts.out.empty() ? opts.out : spec.out_dir;
  if (dir.empty()) throw looplens::SpecError("no output directory: pass --out or set out_dir in the spec");
  looplens::run_experiment(spec, dir, opts.threads);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"looplens: looped-transformer latent dynamics analysis"};
  app.require_subcommand(1);

  struct SubCmd {
    looplens::ExperimentKind kind;
    CommonOpts opts;
    CLI::App* cmd;
  };
  // deque: CLI11 keeps pointers to the option targets, so elements must not move
  std::deque<SubCmd> subs;
  auto add_sub = [&](const char* name, looplens::ExperimentKind kind, const char* desc) {
    subs.push_back({kind, {}, app.add_subcommand(name, desc)});
    add_common(subs.back().cmd, subs.back().opts);
  };
  add_sub("stability-grid", looplens::ExperimentKind::StabilityGrid,
          "norm-scheme x input-injection fixed-point stability grid");
  add_sub("dynamics", looplens::ExperimentKind::Dynamics,
          "fixed-point report, pairwise similarity matrices, successive differences");
  add_sub("classify", looplens::ExperimentKind::Classify,
          "per-token limiting-behavior classification and statistics");
  add_sub("metrics", looplens::ExperimentKind::Metrics,
          "attention/residual metric series in all groupings");
  add_sub("trajectory", looplens::ExperimentKind::Trajectory, "2-D PCA latent trajectory");
  add_sub("prop2-audit", looplens::ExperimentKind::Prop2Audit,
          "attention Lipschitz bound audit over recurrences");

  CommonOpts init_opts;
  std::string init_out;
  CLI::App* init_cmd = app.add_subcommand("init-weights", "write a random-init weight file");
  add_common(init_cmd, init_opts);
  init_cmd->add_option("--weights", init_out, "output weight file path")->required();

  std::string inspect_path;
  CLI::App* inspect_cmd = app.add_subcommand("inspect-weights", "print a weight file's header");
  inspect_cmd->add_option("--weights", inspect_path, "weight file path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    for (auto& sub : subs)
      if (sub.cmd->parsed()) return run_experiment_command(sub.kind, sub.opts);

    if (init_cmd->parsed()) {
      looplens::ExperimentSpec spec = looplens::load_spec(init_opts.spec_path);
      if (!spec.weights_path.empty())
        throw looplens::SpecError("init-weights needs an inline model config, not a weight file");
      looplens::ModelConfig cfg = spec.base_config();
      if (init_opts.seed_set)
        cfg.seed = init_opts.seed;
      else if (!spec.model_seed_explicit)
        cfg.seed = spec.seeds.front() + looplens::kModelSeedOffset;
      looplens::save_weights(looplens::init_random(cfg), init_out);
      std::cout << "wrote " << init_out << "\n";
      return 0;
    }
    if (inspect_cmd->parsed()) {
      std::cout << looplens::inspect_weights(inspect_path) << "\n";
      return 0;
    }
  } catch (const looplens::DivergedForwardError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
