#pragma once

#include <string>
#include <vector>

#include "mvacon/pipeline.hpp"

namespace mvacon {

struct TrainResult {
  std::vector<double> losses;         // per step
  std::vector<double> center_errs;    // mean matched center error per step
  double final_best_center_err = 0;   // best-matched center error at the last step
  std::string csv_path;
  std::string checkpoint_path;
};

/// SGD loop over generate -> render -> backbone -> MvACon -> lift -> decode
/// -> loss; writes metrics.csv (atomic line writes, config hash header) and
/// model.ckpt into `out_dir`. Aborts with a diagnostic dump on non-finite loss.
TrainResult cmd_train(const PipelineConfig& cfg, const std::string& out_dir);

struct GradCheckEntry {
  std::string name;
  double rel_err = 0;
  bool ok = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool ok = false;
};

/// Central-difference verification over every module's registered computation
/// at tiny shapes and randomly-perturbed parameter states. `only` filters by
/// substring (empty string: run everything; no match: error).
/// `plant_corruption` adds a deliberately wrong gradient that must be caught.
GradCheckReport cmd_gradcheck(const std::string& only = "", bool plant_corruption = false);

struct BenchRow {
  std::string mechanism;  // "paca" or "dense"
  int n = 0;
  double median_ms = 0;
};

/// Times paca_attend (M=100) against dense attention at N in {1024..8192};
/// writes bench.csv into `out_dir` when non-empty.
std::vector<BenchRow> cmd_bench(const PipelineConfig& cfg, const std::string& out_dir,
                                int reps = 5);

/// Per view and level, channel-summed cluster responses upsampled to image
/// resolution, min-max normalized, written as 16-bit PGM.
std::vector<std::string> cmd_viz_clusters(const PipelineConfig& cfg, const std::string& checkpoint,
                                          const std::string& out_dir);

/// Per encoder layer, the sampled deformable points of one BEV query as CSV
/// (view, level, pillar, sample, u, v, weight).
std::vector<std::string> cmd_viz_deform(const PipelineConfig& cfg, const std::string& checkpoint,
                                        int bev_cell, const std::string& out_dir);

/// Writes the generated scene: camera rig JSON, ground-truth boxes JSON, and
/// one PPM render per camera.
std::vector<std::string> cmd_scene_gen(const PipelineConfig& cfg, const std::string& out_dir);

/// Min-max normalized, clamp-edge bilinear upsample of a single-channel map.
std::vector<double> upsample_heatmap(const std::vector<double>& src, int sh, int sw, int dh, int dw);

}  // namespace mvacon
