#pragma once

#include <array>
#include <string>
#include <vector>

#include "mvacon/tensor.hpp"

namespace mvacon {

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

using Mat3 = std::array<double, 9>;   // row-major
using Mat4 = std::array<double, 16>;  // row-major

Mat3 mat3_identity();
Mat4 mat4_identity();
Vec3 mat3_apply(const Mat3& m, const Vec3& v);
Vec3 mat4_apply_point(const Mat4& m, const Vec3& p);  // assumes last row (0,0,0,1)
Mat3 mat3_inverse(const Mat3& m);
Mat4 se3_inverse(const Mat4& t);

/// Pinhole camera: K intrinsics, T world->camera rigid transform.
struct Camera {
  Mat3 K = mat3_identity();
  Mat4 T = mat4_identity();
  int width = 0;
  int height = 0;

  /// Throws unless K is upper-triangular with positive focals and the
  /// rotation block of T is orthonormal with det +1.
  void validate() const;
};

struct SceneRange {
  Vec3 min{-10, -10, -10};
  Vec3 max{10, 10, 10};
  int depth_levels = 1;
  double depth_min = 1.0;
  double depth_max = 10.0;

  void validate() const;
};

struct Projection {
  double u = 0, v = 0, depth = 0;
  bool visible = false;
};

/// Projects a world point; visible iff depth > 1e-6 and (u,v) inside the
/// image. Never produces NaN: behind-camera points get clamped (u,v).
Projection project_point(const Camera& cam, const Vec3& p_world);

/// PETR-style frustum position volume: Tensor[h x w x 4*D] of normalized
/// homogeneous world coordinates (x,y,z,1) per depth bin, depth-major.
Tensor frustum_volume(const Camera& cam, int h, int w, const SceneRange& range);

struct CameraRig {
  std::vector<Camera> cameras;
  SceneRange range;

  static CameraRig from_json_file(const std::string& path);
  static CameraRig from_json_text(const std::string& text);
  std::string to_json_text() const;
};

}  // namespace mvacon
