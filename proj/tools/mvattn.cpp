// mvattn: data generation, training, evaluation, attention maps and gradient checks.
#include "mvattn/cli.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace cli = mvattn::cli;

int main(int argc, char** argv) {
  CLI::App app{"Multi-view attention adapter experiments"};
  app.require_subcommand(1);

  cli::GenDataOptions gd;
  auto* gen = app.add_subcommand("gen-data", "Write synthetic scenes, the view grid and correspondence CSVs");
  gen->add_option("--scenes", gd.scenes, "Number of scenes")->capture_default_str();
  gen->add_option("--points", gd.points, "Points per scene (default: config)");
  gen->add_option("--views-file", gd.views_file, "View grid, one 'azimuth elevation' per line (default: 33-view grid)");
  gen->add_option("--noise-px", gd.noise_px, "Pixel noise on matched keypoints")->capture_default_str();
  gen->add_option("--seed", gd.seed, "Generation seed")->capture_default_str();
  gen->add_option("--config", gd.config_path, "Experiment config JSON");
  gen->add_option("--out", gd.out, "Output directory")->required();

  cli::TrainOptions tr;
  auto* train = app.add_subcommand("train", "Train one ablation arm, or all of them");
  train->add_option("--config", tr.config_path, "Experiment config JSON (default: built-in)");
  train->add_option("--ablation", tr.ablation, "full, no_csl, no_ca3, no_lora, no_frame_replication or all")
      ->capture_default_str();
  train->add_option("--out", tr.out, "Run directory")->required();
  train->add_flag("--resume", tr.resume, "Continue from checkpoint.bin in each arm directory");
  train->add_option("--steps", tr.steps, "Override train.steps");
  train->add_option("--seed", tr.seed, "Override train.seed");
  train->add_flag("--quiet", tr.quiet, "Only print the final ranking");

  cli::EvalOptions ev;
  auto* eval = app.add_subcommand("eval", "Correspondence accuracy of a checkpoint or a predictions file");
  eval->add_option("--ckpt", ev.ckpt, "checkpoint.bin written by train");
  eval->add_option("--data", ev.data, "gen-data directory (default: held-out synthetic scenes)");
  eval->add_option("--config", ev.config_path, "Config JSON (default: config.json beside the checkpoint)");
  eval->add_option("--metric", ev.metric, "Metric")->capture_default_str();
  eval->add_option("--threshold-px", ev.threshold_px, "Pixel threshold (strict)")->capture_default_str();
  eval->add_option("--predictions", ev.predictions, "CSV scene,pair,u_pred,v_pred scored against --data");
  eval->add_option("--out", ev.out, "Metric JSON path");

  cli::AttnVizOptions av;
  auto* viz = app.add_subcommand("attn-viz", "Export one query token's attention as PGM heatmaps and CSV");
  viz->add_option("--ckpt", av.ckpt, "checkpoint.bin written by train")->required();
  viz->add_option("--config", av.config_path, "Config JSON (default: config.json beside the checkpoint)");
  viz->add_option("--data", av.data, "gen-data directory (default: held-out synthetic scenes)");
  viz->add_option("--scene", av.scene, "Scene index")->capture_default_str();
  viz->add_option("--query-view", av.query_view, "Query view")->capture_default_str();
  viz->add_option("--query-patch", av.query_patch, "Query patch, row-major")->capture_default_str();
  viz->add_option("--layer", av.layer, "Layer (default: config eval layer)");
  viz->add_option("--out", av.out, "Output directory")->required();

  cli::GradCheckOptions gc;
  auto* grad = app.add_subcommand("grad-check", "Finite-difference check of every trainable gradient");
  grad->add_option("--config", gc.config_path, "Config JSON (default: micro model)");
  grad->add_option("--eps", gc.eps, "Central-difference step")->capture_default_str();
  grad->add_option("--threshold", gc.threshold, "Maximum relative error")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? cli::kOk : cli::kUsage;
  }

  try {
    if (*gen) return cli::cmd_gen_data(gd);
    if (*train) return cli::cmd_train(tr);
    if (*eval) return cli::cmd_eval(ev);
    if (*viz) return cli::cmd_attn_viz(av);
    if (*grad) return cli::cmd_grad_check(gc);
  } catch (const cli::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cli::kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cli::kFailure;
  }
  return cli::kUsage;
}
