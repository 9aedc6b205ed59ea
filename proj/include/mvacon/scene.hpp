#pragma once

#include <string>
#include <vector>

#include "mvacon/camera.hpp"
#include "mvacon/cluster_attention.hpp"
#include "mvacon/detection.hpp"

namespace mvacon {

struct SceneConfig {
  int cameras = 6;
  int image_w = 64;
  int image_h = 64;
  int objects = 3;
  int classes = 3;
  uint64_t seed = 1;
  SceneRange range;  // object placement volume and frustum depth bounds

  void validate() const;
};

struct SceneObject {
  GtBox box;
  double intensity = 1.0;  // distinct per object
};

struct Scene {
  SceneConfig cfg;
  CameraRig rig;
  std::vector<SceneObject> objects;
};

/// Ring of cameras looking inward plus collision-free seeded boxes.
/// Deterministic: the same (cfg, seed) yields a bit-identical scene.
Scene generate_scene(const SceneConfig& cfg, uint64_t seed);

/// Ground-truth boxes advanced to time `t` under constant velocity.
std::vector<GtBox> gt_at_time(const Scene& scene, double t);

struct RenderedView {
  int w = 0, h = 0;
  std::vector<double> rgb;      // h*w*3, values in [0,1]
  std::vector<int> object_ids;  // h*w, -1 for background
};

/// Flat-shaded rasterization of the boxes at time `t`; nearest surface wins
/// per pixel (depth buffer over face planes).
std::vector<RenderedView> render(const Scene& scene, double t);

void write_ppm(const std::string& path, const RenderedView& view);

/// Ray-cast reference: object id hit by the ray through pixel center
/// (px+0.5, py+0.5) of `view_index`, or -1.
int raycast_object(const Scene& scene, double t, int view_index, double px, double py);

/// Strided conv stack producing feature pyramids at strides {4, 8, 16}.
class ToyBackbone {
 public:
  ToyBackbone(ParamRegistry& reg, const std::string& prefix, int channels, int levels, Rng& rng);

  Pyramid forward(const Tensor& image) const;  // image [h, w, 3]

  int levels() const { return static_cast<int>(kernels_.size()); }

 private:
  std::vector<Tensor> kernels_, biases_;
};

}  // namespace mvacon
