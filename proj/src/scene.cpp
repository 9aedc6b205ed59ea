#include "mvacon/scene.hpp"

#include <algorithm>
#include <cmath>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <thread>
#include <stdexcept>

namespace mvacon {

void SceneConfig::validate() const {
  if (cameras < 1) throw std::invalid_argument("scene config: cameras must be >= 1");
  if (image_w < 8 || image_h < 8) throw std::invalid_argument("scene config: image too small");
  if (objects < 0) throw std::invalid_argument("scene config: negative object count");
  if (classes < 1) throw std::invalid_argument("scene config: classes must be >= 1");
  range.validate();
}

namespace {

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

Vec3 normalize(const Vec3& v) {
  const double n = std::sqrt(v.x * v.x + v.y * v.y + v.z * v.z);
  if (n < 1e-12) throw std::invalid_argument("cannot normalize a zero vector");
  return {v.x / n, v.y / n, v.z / n};
}

Camera ring_camera(double angle, double radius, double height, int w, int h) {
  Camera cam;
  const Vec3 pos{radius * std::cos(angle), height, radius * std::sin(angle)};
  const Vec3 fwd = normalize({-pos.x, 0.0, -pos.z});  // toward the ring center
  const Vec3 up{0, 1, 0};
  const Vec3 xc = normalize(cross(fwd, up));
  const Vec3 yc = cross(fwd, xc);  // world-down for image v
  cam.T = {xc.x, xc.y, xc.z, 0, yc.x, yc.y, yc.z, 0, fwd.x, fwd.y, fwd.z, 0, 0, 0, 0, 1};
  cam.T[3] = -(xc.x * pos.x + xc.y * pos.y + xc.z * pos.z);
  cam.T[7] = -(yc.x * pos.x + yc.y * pos.y + yc.z * pos.z);
  cam.T[11] = -(fwd.x * pos.x + fwd.y * pos.y + fwd.z * pos.z);
  const double f = 0.8 * w;
  cam.K = {f, 0, w / 2.0, 0, f, h / 2.0, 0, 0, 1};
  cam.width = w;
  cam.height = h;
  cam.validate();
  return cam;
}

struct Rot2 {
  double c = 1, s = 0;
};

// local box frame: l along x, h along y, w along z, yaw about y
Vec3 box_to_world(const GtBox& b, const Vec3& local, const Rot2& r) {
  return {b.x + local.x * r.c + local.z * r.s, b.y + local.y, b.z - local.x * r.s + local.z * r.c};
}

Vec3 world_to_box(const GtBox& b, const Vec3& p, const Rot2& r) {
  const double dx = p.x - b.x, dy = p.y - b.y, dz = p.z - b.z;
  return {dx * r.c - dz * r.s, dy, dx * r.s + dz * r.c};
}

Vec3 rotate_to_box(const Rot2& r, const Vec3& d) {
  return {d.x * r.c - d.z * r.s, d.y, d.x * r.s + d.z * r.c};
}

constexpr int kFaceCorners[6][4] = {
    {0, 1, 3, 2},  // -x
    {4, 6, 7, 5},  // +x
    {0, 4, 5, 1},  // -y
    {2, 3, 7, 6},  // +y
    {0, 2, 6, 4},  // -z
    {1, 5, 7, 3},  // +z
};

}  // namespace

Scene generate_scene(const SceneConfig& cfg, uint64_t seed) {
  cfg.validate();
  Scene scene;
  scene.cfg = cfg;
  scene.cfg.seed = seed;
  scene.rig.range = cfg.range;

  const double half_x = std::max(std::fabs(cfg.range.min.x), std::fabs(cfg.range.max.x));
  const double half_z = std::max(std::fabs(cfg.range.min.z), std::fabs(cfg.range.max.z));
  const double radius = 1.7 * std::max(half_x, half_z);
  const double height = 0.5 * (cfg.range.min.y + cfg.range.max.y);
  for (int v = 0; v < cfg.cameras; ++v) {
    const double angle = 2.0 * M_PI * v / cfg.cameras;
    scene.rig.cameras.push_back(ring_camera(angle, radius, height, cfg.image_w, cfg.image_h));
  }

  Rng rng(seed ^ 0xa5c3u);
  const double y_span = cfg.range.max.y - cfg.range.min.y;
  for (int i = 0; i < cfg.objects; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      GtBox b;
      b.cls = rng.uniform_int(0, cfg.classes - 1);
      b.l = rng.uniform(0.8, 1.8);
      b.w = rng.uniform(0.8, 1.8);
      b.h = rng.uniform(0.6, std::max(0.7, std::min(1.6, 0.8 * y_span)));
      b.x = rng.uniform(0.6 * cfg.range.min.x, 0.6 * cfg.range.max.x);
      b.z = rng.uniform(0.6 * cfg.range.min.z, 0.6 * cfg.range.max.z);
      b.y = rng.uniform(cfg.range.min.y + b.h / 2, std::max(cfg.range.min.y + b.h / 2, cfg.range.max.y - b.h / 2));
      b.yaw = rng.uniform(-M_PI, M_PI);
      b.vx = rng.uniform(-0.4, 0.4);
      b.vz = rng.uniform(-0.4, 0.4);
      const double r = 0.5 * std::hypot(b.l, b.w);
      bool clash = false;
      for (const auto& other : scene.objects) {
        const double ro = 0.5 * std::hypot(other.box.l, other.box.w);
        if (std::hypot(b.x - other.box.x, b.z - other.box.z) < r + ro + 0.3) clash = true;
      }
      if (clash) continue;
      SceneObject obj;
      obj.box = b;
      obj.intensity = 0.25 + 0.7 * (i + 0.5) / cfg.objects;
      scene.objects.push_back(obj);
      placed = true;
    }
    if (!placed) throw std::runtime_error("generate_scene: could not place a collision-free box");
  }
  return scene;
}

std::vector<GtBox> gt_at_time(const Scene& scene, double t) {
  std::vector<GtBox> boxes;
  boxes.reserve(scene.objects.size());
  for (const auto& obj : scene.objects) {
    GtBox b = obj.box;
    b.x += b.vx * t;
    b.z += b.vz * t;
    boxes.push_back(b);
  }
  return boxes;
}

namespace {

int render_threads() {
  const char* env = std::getenv("MVACON_THREADS");
  if (!env) return 1;
  return std::clamp(std::atoi(env), 1, 64);
}

RenderedView render_view(const Scene& scene, const std::vector<GtBox>& boxes, const Camera& cam) {
  RenderedView view;
  view.w = cam.width;
  view.h = cam.height;
  view.rgb.assign(static_cast<size_t>(cam.width) * cam.height * 3, 0.0);
  view.object_ids.assign(static_cast<size_t>(cam.width) * cam.height, -1);
  std::vector<double> zbuf(static_cast<size_t>(cam.width) * cam.height,
                           std::numeric_limits<double>::infinity());

  for (size_t oi = 0; oi < boxes.size(); ++oi) {
    const GtBox& b = boxes[oi];
    const Rot2 rot{std::cos(b.yaw), std::sin(b.yaw)};
    double u[8], v[8], z[8];
    bool in_front = true;
    for (int k = 0; k < 8; ++k) {
      const Vec3 local{(k & 4 ? 0.5 : -0.5) * b.l, (k & 2 ? 0.5 : -0.5) * b.h,
                       (k & 1 ? 0.5 : -0.5) * b.w};
      const Vec3 p = mat4_apply_point(cam.T, box_to_world(b, local, rot));
      if (p.z < 0.1) in_front = false;
      z[k] = p.z;
      u[k] = (cam.K[0] * p.x + cam.K[1] * p.y + cam.K[2] * p.z) / p.z;
      v[k] = (cam.K[4] * p.y + cam.K[5] * p.z) / p.z;
    }
    if (!in_front) continue;

    for (int face = 0; face < 6; ++face) {
      const double shade = scene.objects[oi].intensity * (0.7 + 0.3 * face / 5.0);
      for (int tri = 0; tri < 2; ++tri) {
        const int ia = kFaceCorners[face][0];
        const int ib = kFaceCorners[face][tri + 1];
        const int ic = kFaceCorners[face][tri + 2];
        const double ax = u[ia], ay = v[ia], bx = u[ib], by = v[ib], cx = u[ic], cy = v[ic];
        const double area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax);
        if (std::fabs(area) < 1e-12) continue;
        const int x0 = std::max(0, static_cast<int>(std::floor(std::min({ax, bx, cx}))));
        const int x1 = std::min(cam.width - 1, static_cast<int>(std::ceil(std::max({ax, bx, cx}))));
        const int y0 = std::max(0, static_cast<int>(std::floor(std::min({ay, by, cy}))));
        const int y1 = std::min(cam.height - 1, static_cast<int>(std::ceil(std::max({ay, by, cy}))));
        for (int py = y0; py <= y1; ++py)
          for (int px = x0; px <= x1; ++px) {
            const double sx = px + 0.5, sy = py + 0.5;
            const double w0 = ((bx - sx) * (cy - sy) - (by - sy) * (cx - sx)) / area;
            const double w1 = ((cx - sx) * (ay - sy) - (cy - sy) * (ax - sx)) / area;
            const double w2 = 1.0 - w0 - w1;
            if (w0 < 0 || w1 < 0 || w2 < 0) continue;
            // 1/z is affine across a planar face in screen space
            const double inv_z = w0 / z[ia] + w1 / z[ib] + w2 / z[ic];
            const double depth = 1.0 / inv_z;
            const size_t idx = static_cast<size_t>(py) * cam.width + px;
            if (depth < zbuf[idx] - 1e-9) {
              zbuf[idx] = depth;
              view.object_ids[idx] = static_cast<int>(oi);
              for (int ch = 0; ch < 3; ++ch) view.rgb[idx * 3 + ch] = shade;
            }
          }
      }
    }
  }
  return view;
}

}  // namespace

std::vector<RenderedView> render(const Scene& scene, double t) {
  const std::vector<GtBox> boxes = gt_at_time(scene, t);
  const int views = static_cast<int>(scene.rig.cameras.size());
  std::vector<RenderedView> out(static_cast<size_t>(views));
  const int threads = std::min(render_threads(), std::max(1, views));
  if (threads <= 1) {
    for (int v = 0; v < views; ++v) out[static_cast<size_t>(v)] = render_view(scene, boxes, scene.rig.cameras[static_cast<size_t>(v)]);
    return out;
  }
  std::vector<std::thread> pool;
  std::atomic<int> next{0};
  for (int w = 0; w < threads; ++w)
    pool.emplace_back([&]() {
      for (int v = next.fetch_add(1); v < views; v = next.fetch_add(1))
        out[static_cast<size_t>(v)] = render_view(scene, boxes, scene.rig.cameras[static_cast<size_t>(v)]);
    });
  for (auto& th : pool) th.join();
  return out;
}

void write_ppm(const std::string& path, const RenderedView& view) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  f << "P6\n" << view.w << " " << view.h << "\n255\n";
  for (double x : view.rgb) {
    const double c = std::clamp(x, 0.0, 1.0);
    f.put(static_cast<char>(static_cast<int>(std::lround(c * 255.0))));
  }
}

int raycast_object(const Scene& scene, double t, int view_index, double px, double py) {
  const Camera& cam = scene.rig.cameras[static_cast<size_t>(view_index)];
  const Mat3 kinv = mat3_inverse(cam.K);
  const Vec3 dir_cam = mat3_apply(kinv, {px, py, 1.0});
  // camera center and ray direction in world coordinates (R^T columns)
  const Mat4& T = cam.T;
  const Vec3 tvec{T[3], T[7], T[11]};
  const Vec3 origin{-(T[0] * tvec.x + T[4] * tvec.y + T[8] * tvec.z),
                    -(T[1] * tvec.x + T[5] * tvec.y + T[9] * tvec.z),
                    -(T[2] * tvec.x + T[6] * tvec.y + T[10] * tvec.z)};
  const Vec3 dir{T[0] * dir_cam.x + T[4] * dir_cam.y + T[8] * dir_cam.z,
                 T[1] * dir_cam.x + T[5] * dir_cam.y + T[9] * dir_cam.z,
                 T[2] * dir_cam.x + T[6] * dir_cam.y + T[10] * dir_cam.z};

  const std::vector<GtBox> boxes = gt_at_time(scene, t);
  int best = -1;
  double best_t = std::numeric_limits<double>::infinity();
  for (size_t oi = 0; oi < boxes.size(); ++oi) {
    const GtBox& b = boxes[oi];
    const Rot2 rot{std::cos(b.yaw), std::sin(b.yaw)};
    const Vec3 o = world_to_box(b, origin, rot);
    const Vec3 d = rotate_to_box(rot, dir);
    const double half[3] = {b.l / 2, b.h / 2, b.w / 2};
    const double ov[3] = {o.x, o.y, o.z}, dv[3] = {d.x, d.y, d.z};
    double t_enter = -std::numeric_limits<double>::infinity();
    double t_exit = std::numeric_limits<double>::infinity();
    bool miss = false;
    for (int axis = 0; axis < 3 && !miss; ++axis) {
      if (std::fabs(dv[axis]) < 1e-12) {
        if (std::fabs(ov[axis]) > half[axis]) miss = true;
        continue;
      }
      double t0 = (-half[axis] - ov[axis]) / dv[axis];
      double t1 = (half[axis] - ov[axis]) / dv[axis];
      if (t0 > t1) std::swap(t0, t1);
      t_enter = std::max(t_enter, t0);
      t_exit = std::min(t_exit, t1);
    }
    if (miss || t_enter > t_exit || t_exit < 1e-9) continue;
    const double hit = t_enter > 1e-9 ? t_enter : t_exit;
    if (hit < best_t) {
      best_t = hit;
      best = static_cast<int>(oi);
    }
  }
  return best;
}

ToyBackbone::ToyBackbone(ParamRegistry& reg, const std::string& prefix, int channels, int levels,
                         Rng& rng) {
  if (levels < 1 || levels > 3) throw std::invalid_argument("backbone: levels must be 1..3");
  kernels_.push_back(reg.create(prefix + ".conv0.w", {5, 5, 3, channels}, InitScheme::kUniformFanIn, rng));
  biases_.push_back(reg.create(prefix + ".conv0.b", {channels}, InitScheme::kZeros, rng));
  for (int l = 1; l < levels; ++l) {
    kernels_.push_back(reg.create(prefix + ".conv" + std::to_string(l) + ".w", {3, 3, channels, channels},
                                  InitScheme::kUniformFanIn, rng));
    biases_.push_back(reg.create(prefix + ".conv" + std::to_string(l) + ".b", {channels},
                                 InitScheme::kZeros, rng));
  }
}

Pyramid ToyBackbone::forward(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(2) != 3)
    throw std::invalid_argument("backbone: image must be [h, w, 3]");
  Pyramid pyr;
  Tensor x = image;
  for (size_t l = 0; l < kernels_.size(); ++l) {
    const int stride = l == 0 ? 4 : 2;
    const int pad = l == 0 ? 2 : 1;
    x = relu(conv2d(x, kernels_[l], biases_[l], stride, pad));
    FeatureMap fm;
    fm.h = x.dim(0);
    fm.w = x.dim(1);
    fm.c = x.dim(2);
    fm.tokens = reshape(x, {fm.h * fm.w, fm.c});
    pyr.push_back(fm);
  }
  return pyr;
}

}  // namespace mvacon
