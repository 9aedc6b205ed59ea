#pragma once

#include <memory>
#include <string>
#include <vector>

#include "mvacon/bev.hpp"
#include "mvacon/cluster_attention.hpp"
#include "mvacon/detection.hpp"
#include "mvacon/lifting.hpp"
#include "mvacon/scene.hpp"

namespace mvacon {

struct TrainConfig {
  int steps = 200;
  double lr = 0.01;
  uint64_t seed = 1;
};

/// Full run configuration: scene, model (mvacon, lift, head, bev), training.
/// JSON loading rejects unknown keys; serialization materializes defaults.
struct PipelineConfig {
  int channels = 16;  // backbone / MvACon / BEV query width
  ClusterConfig mvacon;
  LiftConfig lift;
  HeadConfig head;
  BevGridConfig bev;
  SceneConfig scene;
  TrainConfig train;

  static PipelineConfig from_json_text(const std::string& text);
  static PipelineConfig from_json_file(const std::string& path);
  std::string to_json_text() const;
  uint64_t hash() const;  // FNV-1a over the canonical serialization
  void validate() const;
};

struct ModelForward {
  DetectionSet det;
  Tensor kv;                                     // lifted keys/values at the current frame
  std::vector<Pyramid> contextualized;           // MvACon outputs per view (current frame)
  std::vector<std::vector<DeformPoint>> traces;  // per encoder layer (bevformer mode only)
};

/// End-to-end model: rendered views -> backbone -> MvACon -> lifting ->
/// decoder -> detection heads, differentiable throughout.
class DetectionModel {
 public:
  explicit DetectionModel(const PipelineConfig& cfg);

  /// Two-frame forward: the velocity head reads decoded states from both
  /// frames; detections and losses are for time `t1`.
  ModelForward forward(const Scene& scene, double t0, double t1, int trace_query = -1);

  MatchResult loss(const ModelForward& fwd, const Scene& scene, double t1) const;

  ParamRegistry& params() { return reg_; }
  const PipelineConfig& config() const { return cfg_; }
  const MvACon& mvacon() const { return *mvacon_; }
  const ToyBackbone& backbone() const { return *backbone_; }
  const BevGrid& grid() const { return grid_; }
  int encoder_layers() const { return bev_encoder_ ? bev_encoder_->layers() : 0; }

  Pyramid view_pyramid(const Scene& scene, double t, int view);  // backbone+MvACon, for viz

 private:
  std::vector<Pyramid> contextualize(const std::vector<RenderedView>& views);
  Tensor lift(const Scene& scene, const std::vector<Pyramid>& ctx,
              std::vector<std::vector<DeformPoint>>* traces, int trace_query);

  PipelineConfig cfg_;
  ParamRegistry reg_;
  std::unique_ptr<ToyBackbone> backbone_;
  std::unique_ptr<MvACon> mvacon_;
  std::unique_ptr<PetrLift> petr_;
  std::unique_ptr<BevEncoder> bev_encoder_;
  std::unique_ptr<Decoder> decoder_;
  std::unique_ptr<PredictHeads> heads_;
  Tensor obj_queries_;  // [O, query_dim]
  Tensor bev_embed_;    // [nx*nz, channels] (bevformer mode)
  BevGrid grid_;
};

}  // namespace mvacon
