#include "mvacon/camera.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace mvacon {

Mat3 mat3_identity() { return {1, 0, 0, 0, 1, 0, 0, 0, 1}; }

Mat4 mat4_identity() { return {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1}; }

Vec3 mat3_apply(const Mat3& m, const Vec3& v) {
  return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
          m[6] * v.x + m[7] * v.y + m[8] * v.z};
}

Vec3 mat4_apply_point(const Mat4& m, const Vec3& p) {
  return {m[0] * p.x + m[1] * p.y + m[2] * p.z + m[3], m[4] * p.x + m[5] * p.y + m[6] * p.z + m[7],
          m[8] * p.x + m[9] * p.y + m[10] * p.z + m[11]};
}

Mat3 mat3_inverse(const Mat3& m) {
  const double a = m[0], b = m[1], c = m[2], d = m[3], e = m[4], f = m[5], g = m[6], h = m[7], i = m[8];
  const double det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g);
  if (std::fabs(det) < 1e-12) throw std::invalid_argument("mat3_inverse: singular matrix");
  const double id = 1.0 / det;
  return {(e * i - f * h) * id, (c * h - b * i) * id, (b * f - c * e) * id,
          (f * g - d * i) * id, (a * i - c * g) * id, (c * d - a * f) * id,
          (d * h - e * g) * id, (b * g - a * h) * id, (a * e - b * d) * id};
}

Mat4 se3_inverse(const Mat4& t) {
  // [R t; 0 1]^-1 = [R^T, -R^T t; 0 1]
  Mat4 inv = mat4_identity();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) inv[static_cast<size_t>(r) * 4 + c] = t[static_cast<size_t>(c) * 4 + r];
  const Vec3 tr{t[3], t[7], t[11]};
  inv[3] = -(inv[0] * tr.x + inv[1] * tr.y + inv[2] * tr.z);
  inv[7] = -(inv[4] * tr.x + inv[5] * tr.y + inv[6] * tr.z);
  inv[11] = -(inv[8] * tr.x + inv[9] * tr.y + inv[10] * tr.z);
  return inv;
}

void Camera::validate() const {
  if (width <= 0 || height <= 0) throw std::invalid_argument("camera: non-positive image size");
  if (K[0] <= 0.0 || K[4] <= 0.0) throw std::invalid_argument("camera: focal lengths must be positive");
  if (K[3] != 0.0 || K[6] != 0.0 || K[7] != 0.0)
    throw std::invalid_argument("camera: K must be upper-triangular");
  // R * R^T = I within 1e-9, det = +1
  double rr[9] = {0};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      for (int k = 0; k < 3; ++k)
        rr[r * 3 + c] += T[static_cast<size_t>(r) * 4 + k] * T[static_cast<size_t>(c) * 4 + k];
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      const double expect = (r == c) ? 1.0 : 0.0;
      if (std::fabs(rr[r * 3 + c] - expect) > 1e-9)
        throw std::invalid_argument("camera: rotation block is not orthonormal");
    }
  Mat3 R{T[0], T[1], T[2], T[4], T[5], T[6], T[8], T[9], T[10]};
  const double det = R[0] * (R[4] * R[8] - R[5] * R[7]) - R[1] * (R[3] * R[8] - R[5] * R[6]) +
                     R[2] * (R[3] * R[7] - R[4] * R[6]);
  if (std::fabs(det - 1.0) > 1e-9) throw std::invalid_argument("camera: rotation determinant is not +1");
  if (T[12] != 0.0 || T[13] != 0.0 || T[14] != 0.0 || T[15] != 1.0)
    throw std::invalid_argument("camera: T last row must be (0,0,0,1)");
}

void SceneRange::validate() const {
  if (!(max.x > min.x && max.y > min.y && max.z > min.z))
    throw std::invalid_argument("scene range: max must exceed min on every axis");
  if (depth_levels < 1) throw std::invalid_argument("scene range: depth levels must be >= 1");
  if (!(depth_max > depth_min)) throw std::invalid_argument("scene range: depth_max must exceed depth_min");
}

Projection project_point(const Camera& cam, const Vec3& p_world) {
  const Vec3 pc = mat4_apply_point(cam.T, p_world);
  Projection out;
  out.depth = pc.z;
  if (pc.z <= 1e-6) {
    out.visible = false;
    // clamped, finite placeholder coordinates
    out.u = std::clamp(pc.x, -1e6, 1e6);
    out.v = std::clamp(pc.y, -1e6, 1e6);
    return out;
  }
  const Vec3 uvw = mat3_apply(cam.K, {pc.x / pc.z, pc.y / pc.z, 1.0});
  out.u = uvw.x;
  out.v = uvw.y;
  out.visible = out.u >= 0.0 && out.u < cam.width && out.v >= 0.0 && out.v < cam.height;
  return out;
}

Tensor frustum_volume(const Camera& cam, int h, int w, const SceneRange& range) {
  if (h < 1 || w < 1) throw std::invalid_argument("frustum_volume: h, w must be >= 1");
  cam.validate();
  range.validate();
  const Mat3 kinv = mat3_inverse(cam.K);
  const Mat4 tinv = se3_inverse(cam.T);
  const int d = range.depth_levels;
  Tensor vol = Tensor::zeros({h, w, 4 * d});
  auto& out = vol.mutable_data();
  const double sx = static_cast<double>(cam.width) / w;
  const double sy = static_cast<double>(cam.height) / h;
  const double span = range.depth_max - range.depth_min;
  const Vec3 ext{range.max.x - range.min.x, range.max.y - range.min.y, range.max.z - range.min.z};
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const double u = (j + 0.5) * sx;
      const double v = (i + 0.5) * sy;
      const Vec3 ray = mat3_apply(kinv, {u, v, 1.0});
      double* cell = out.data() + (static_cast<size_t>(i) * w + j) * 4 * d;
      for (int k = 0; k < d; ++k) {
        const double depth = range.depth_min + (k + 0.5) * span / d;  // bin centers
        const Vec3 pc{ray.x * depth, ray.y * depth, ray.z * depth};
        const Vec3 pw = mat4_apply_point(tinv, pc);
        cell[4 * k + 0] = (pw.x - range.min.x) / ext.x;
        cell[4 * k + 1] = (pw.y - range.min.y) / ext.y;
        cell[4 * k + 2] = (pw.z - range.min.z) / ext.z;
        cell[4 * k + 3] = 1.0;
      }
    }
  return vol;
}

namespace {

using nlohmann::json;

SceneRange range_from_json(const json& j) {
  SceneRange r;
  static const std::vector<std::string> allowed = {"min", "max", "depth_levels", "depth_min", "depth_max"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw std::invalid_argument("camera rig: unknown range key: " + it.key());
  if (j.contains("min")) r.min = {j["min"][0], j["min"][1], j["min"][2]};
  if (j.contains("max")) r.max = {j["max"][0], j["max"][1], j["max"][2]};
  r.depth_levels = j.value("depth_levels", r.depth_levels);
  r.depth_min = j.value("depth_min", r.depth_min);
  r.depth_max = j.value("depth_max", r.depth_max);
  r.validate();
  return r;
}

}  // namespace

CameraRig CameraRig::from_json_text(const std::string& text) {
  json j = json::parse(text);
  CameraRig rig;
  if (!j.contains("cameras")) throw std::invalid_argument("camera rig: missing cameras array");
  for (const auto& cj : j["cameras"]) {
    Camera cam;
    const auto& kk = cj.at("K");
    const auto& tt = cj.at("T");
    if (kk.size() != 9 || tt.size() != 16) throw std::invalid_argument("camera rig: K needs 9 and T needs 16 floats");
    for (int i = 0; i < 9; ++i) cam.K[static_cast<size_t>(i)] = kk[static_cast<size_t>(i)];
    for (int i = 0; i < 16; ++i) cam.T[static_cast<size_t>(i)] = tt[static_cast<size_t>(i)];
    cam.width = cj.at("width");
    cam.height = cj.at("height");
    cam.validate();
    rig.cameras.push_back(cam);
  }
  if (j.contains("range")) rig.range = range_from_json(j["range"]);
  return rig;
}

CameraRig CameraRig::from_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open camera rig file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return from_json_text(ss.str());
}

std::string CameraRig::to_json_text() const {
  json j;
  j["cameras"] = json::array();
  for (const auto& cam : cameras) {
    json cj;
    cj["K"] = std::vector<double>(cam.K.begin(), cam.K.end());
    cj["T"] = std::vector<double>(cam.T.begin(), cam.T.end());
    cj["width"] = cam.width;
    cj["height"] = cam.height;
    j["cameras"].push_back(cj);
  }
  j["range"] = {{"min", {range.min.x, range.min.y, range.min.z}},
                {"max", {range.max.x, range.max.y, range.max.z}},
                {"depth_levels", range.depth_levels},
                {"depth_min", range.depth_min},
                {"depth_max", range.depth_max}};
  return j.dump(2);
}

}  // namespace mvacon
