#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <string>

#include "mvacon/harness.hpp"

using namespace mvacon;

int main(int argc, char** argv) {
  CLI::App app{"MvACon toy multi-view 3D detection harness"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", ckpt, only;
  int seed = -1, cell = -1, reps = 5;
  bool plant = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON run configuration");
    cmd->add_option("--out", out_dir, "output directory");
    cmd->add_option("--seed", seed, "override scene and training seeds");
  };

  CLI::App* train = app.add_subcommand("train", "SGD training on a synthetic scene");
  add_common(train);
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "central-difference gradient verification");
  add_common(gradcheck);
  gradcheck->add_option("--only", only, "substring filter over check names");
  gradcheck->add_flag("--plant-corruption", plant, "add a deliberately wrong gradient");
  CLI::App* bench = app.add_subcommand("bench", "PaCa vs dense attention timing");
  add_common(bench);
  bench->add_option("--reps", reps, "repetitions per measurement");
  CLI::App* viz_clusters = app.add_subcommand("viz-clusters", "cluster heatmaps per view/level");
  add_common(viz_clusters);
  viz_clusters->add_option("--ckpt", ckpt, "checkpoint to load");
  CLI::App* viz_deform = app.add_subcommand("viz-deform", "deformable points per encoder layer");
  add_common(viz_deform);
  viz_deform->add_option("--ckpt", ckpt, "checkpoint to load");
  viz_deform->add_option("--cell", cell, "BEV cell index (default: center)");
  CLI::App* scene_gen = app.add_subcommand("scene-gen", "dump a generated scene");
  add_common(scene_gen);

  CLI11_PARSE(app, argc, argv);

  try {
    PipelineConfig cfg = config_path.empty() ? PipelineConfig{}
                                             : PipelineConfig::from_json_file(config_path);
    if (seed >= 0) {
      cfg.train.seed = static_cast<uint64_t>(seed);
      cfg.scene.seed = static_cast<uint64_t>(seed);
    }

    if (train->parsed()) {
      TrainResult res = cmd_train(cfg, out_dir);
      const double last = res.losses.empty() ? std::nan("") : res.losses.back();
      std::printf("steps=%zu final_loss=%g best_center_err=%g\n", res.losses.size(), last,
                  res.final_best_center_err);
      std::printf("metrics: %s\ncheckpoint: %s\n", res.csv_path.c_str(), res.checkpoint_path.c_str());
    } else if (gradcheck->parsed()) {
      GradCheckReport report = cmd_gradcheck(only, plant);
      for (const auto& e : report.entries)
        std::printf("%-20s rel_err=%.3e %s\n", e.name.c_str(), e.rel_err, e.ok ? "ok" : "FAIL");
      if (!report.ok) {
        std::fprintf(stderr, "gradcheck failed\n");
        return 1;
      }
    } else if (bench->parsed()) {
      for (const auto& r : cmd_bench(cfg, out_dir, reps))
        std::printf("%-6s N=%-5d median=%.3f ms\n", r.mechanism.c_str(), r.n, r.median_ms);
    } else if (viz_clusters->parsed()) {
      for (const auto& p : cmd_viz_clusters(cfg, ckpt, out_dir)) std::printf("%s\n", p.c_str());
    } else if (viz_deform->parsed()) {
      for (const auto& p : cmd_viz_deform(cfg, ckpt, cell, out_dir)) std::printf("%s\n", p.c_str());
    } else if (scene_gen->parsed()) {
      for (const auto& p : cmd_scene_gen(cfg, out_dir)) std::printf("%s\n", p.c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
