// Command-line harness: dataset generation, training, evaluation,
// ablation grids, and the fp/fn loss diagnostic. All outputs are CSV or
// binary files under --out; runs are byte-reproducible per config.
//
// Exit codes: 0 ok, 2 configuration error, 3 numerical failure.

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "remax/config.hpp"
#include "remax/trainer.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir;
  std::string seed;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "Config file (key=value lines)");
  cmd->add_option("--set", args.sets, "Override, e.g. --set model.n_queries=8")
      ->take_all();
  cmd->add_option("--out", args.out_dir, "Output directory");
  cmd->add_option("--seed", args.seed, "Run seed (u64)");
}

remax::RunConfig build_config(const CommonArgs& args) {
  std::vector<std::string> overrides = args.sets;
  if (!args.seed.empty()) overrides.push_back("seed=" + args.seed);
  if (!args.out_dir.empty()) overrides.push_back("out.dir=" + args.out_dir);
  return remax::load_config(args.config_path, overrides);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale panoptic segmentation training lab"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, eval_args, ablate_args, inspect_args;
  std::string eval_checkpoint, inspect_checkpoint;
  std::vector<std::string> grid_specs;
  int inspect_steps = 100;

  CLI::App* gen = app.add_subcommand("gen", "Generate train/val dataset files");
  add_common(gen, gen_args);

  CLI::App* train = app.add_subcommand("train", "Train and write checkpoint + train_log.csv");
  add_common(train, train_args);

  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint (PQ/SQ/RQ/mIoU)");
  add_common(eval, eval_args);
  eval->add_option("--checkpoint", eval_checkpoint, "Checkpoint file")->required();

  CLI::App* ablate = app.add_subcommand("ablate", "Run a config grid and join final PQ");
  add_common(ablate, ablate_args);
  ablate->add_option("--grid", grid_specs, "Grid axis, e.g. --grid relax.eta=0,0.1,0.2")
      ->take_all()
      ->required();

  CLI::App* inspect = app.add_subcommand(
      "inspect-losses", "Log fp/fn mask-loss components, gate on vs off");
  add_common(inspect, inspect_args);
  inspect->add_option("--checkpoint", inspect_checkpoint, "Optional starting checkpoint");
  inspect->add_option("--steps", inspect_steps, "Number of steps to trace");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      const auto cfg = build_config(gen_args);
      const auto paths = remax::cmd_gen(cfg);
      std::printf("wrote %s and %s\n", paths.train.c_str(), paths.val.c_str());
    } else if (train->parsed()) {
      const auto cfg = build_config(train_args);
      const auto out = remax::cmd_train(cfg);
      std::printf("trained %d steps: total %.6f -> %.6f, val PQ %.4f\n", cfg.steps,
                  out.first_total, out.final_total, out.final_val_pq);
      std::printf("checkpoint: %s\nlog: %s\n", out.checkpoint_path.c_str(),
                  out.log_path.c_str());
    } else if (eval->parsed()) {
      const auto cfg = build_config(eval_args);
      const auto out = remax::cmd_eval(cfg, eval_checkpoint);
      std::printf("no_branch   PQ %.4f SQ %.4f RQ %.4f mIoU %.4f\n", out.plain.all.pq,
                  out.plain.all.sq, out.plain.all.rq, out.miou_plain.miou);
      std::printf("with_branch PQ %.4f SQ %.4f RQ %.4f mIoU %.4f\n", out.with_gate.all.pq,
                  out.with_gate.all.sq, out.with_gate.all.rq, out.miou_with_gate.miou);
    } else if (ablate->parsed()) {
      const auto cfg = build_config(ablate_args);
      std::vector<remax::GridAxis> axes;
      for (const auto& spec : grid_specs) axes.push_back(remax::parse_grid_axis(spec));
      const auto cells = remax::cmd_ablate(cfg, axes);
      std::printf("ran %zu cells; summary: %s/ablate_summary.csv\n", cells.size(),
                  cfg.out_dir.c_str());
    } else if (inspect->parsed()) {
      const auto cfg = build_config(inspect_args);
      remax::cmd_inspect_losses(cfg, inspect_checkpoint, inspect_steps);
      std::printf("wrote %s/fpfn_hist.csv\n", cfg.out_dir.c_str());
    }
  } catch (const remax::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const remax::IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 2;
  } catch (const remax::NumericFailure& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const remax::NumericError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
