#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mvacon/camera.hpp"
#include "mvacon/tensor.hpp"

using namespace mvacon;

namespace {

Camera identity_camera(int w = 64, int h = 48, double f = 50.0) {
  Camera cam;
  cam.K = {f, 0, w / 2.0, 0, f, h / 2.0, 0, 0, 1};
  cam.width = w;
  cam.height = h;
  return cam;
}

}  // namespace

TEST_CASE("optical axis projects to the principal point") {
  Camera cam = identity_camera();
  cam.validate();
  for (double z : {0.5, 2.0, 9.0}) {
    Projection p = project_point(cam, {0, 0, z});
    CHECK(p.visible);
    CHECK(p.u == doctest::Approx(32.0));
    CHECK(p.v == doctest::Approx(24.0));
    CHECK(p.depth == doctest::Approx(z));
  }
}

TEST_CASE("points behind the camera are invisible and finite") {
  Camera cam = identity_camera();
  Projection p = project_point(cam, {0.3, -0.1, -2.0});
  CHECK_FALSE(p.visible);
  CHECK(std::isfinite(p.u));
  CHECK(std::isfinite(p.v));
}

TEST_CASE("projection matches K*p/p_z oracle for identity extrinsics") {
  Camera cam = identity_camera();
  Rng rng(21);
  for (int t = 0; t < 100; ++t) {
    Vec3 p{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.5, 10)};
    Projection pr = project_point(cam, p);
    const double eu = cam.K[0] * p.x / p.z + cam.K[2];
    const double ev = cam.K[4] * p.y / p.z + cam.K[5];
    CHECK(std::fabs(pr.u - eu) < 1e-10);
    CHECK(std::fabs(pr.v - ev) < 1e-10);
    CHECK(pr.depth == doctest::Approx(p.z));
  }
}

TEST_CASE("camera validation rejects bad K and T") {
  Camera cam = identity_camera();
  cam.K[3] = 0.5;
  CHECK_THROWS(cam.validate());
  cam = identity_camera();
  cam.T[0] = 2.0;  // not orthonormal
  CHECK_THROWS(cam.validate());
}

TEST_CASE("frustum volume basic structure") {
  Camera cam = identity_camera(64, 48);
  SceneRange range;
  range.min = {-10, -10, -10};
  range.max = {10, 10, 10};
  range.depth_levels = 1;
  range.depth_min = 1.0;
  range.depth_max = 5.0;

  Tensor vol = frustum_volume(cam, 6, 8, range);
  CHECK(vol.shape() == std::vector<int>{6, 8, 4});
  // every 4k+3 channel is exactly 1
  for (int i = 0; i < vol.size(); i += 4) CHECK(vol.data()[i + 3] == 1.0);

  // D=1 bin center: depth 3. Cell covering the principal point back-projects
  // to (0,0,3) in world, normalized per range.
  range.depth_levels = 4;
  Tensor vol2 = frustum_volume(cam, 48, 64, range);  // feature map = image resolution
  CHECK(vol2.shape() == std::vector<int>{48, 64, 16});
}

TEST_CASE("principal-point cell lands on the optical axis") {
  // with h=w=image size and cell centers at (i+0.5), the cell at the
  // principal point corresponds to pixel (cx, cy) when cx,cy end in .5
  Camera cam;
  cam.K = {50, 0, 16.5, 0, 50, 12.5, 0, 0, 1};
  cam.width = 33;
  cam.height = 25;
  SceneRange range;
  range.min = {-10, -10, -10};
  range.max = {10, 10, 10};
  range.depth_levels = 1;
  range.depth_min = 2.0;
  range.depth_max = 6.0;
  Tensor vol = frustum_volume(cam, 25, 33, range);
  // cell (12, 16) has center (16.5, 12.5) = principal point -> world (0,0,4)
  const double* cell = vol.data().data() + (12 * 33 + 16) * 4;
  CHECK(cell[0] == doctest::Approx((0.0 + 10.0) / 20.0).epsilon(1e-10));
  CHECK(cell[1] == doctest::Approx(0.5).epsilon(1e-10));
  CHECK(cell[2] == doctest::Approx((4.0 + 10.0) / 20.0).epsilon(1e-10));
  CHECK(cell[3] == 1.0);
}

TEST_CASE("frustum points reproject to their generating cell centers") {
  // random-ish camera: rotation about y by 0.4 rad plus translation
  const double a = 0.4;
  Camera cam;
  cam.K = {55, 0, 30, 0, 52, 22, 0, 0, 1};
  cam.width = 60;
  cam.height = 44;
  cam.T = {std::cos(a), 0, -std::sin(a), 0.7, 0, 1, 0, -0.2, std::sin(a), 0, std::cos(a), 1.3, 0, 0, 0, 1};
  cam.validate();
  SceneRange range;
  range.min = {-40, -40, -40};
  range.max = {40, 40, 40};
  range.depth_levels = 3;
  range.depth_min = 1.0;
  range.depth_max = 7.0;
  const int h = 11, w = 15;
  Tensor vol = frustum_volume(cam, h, w, range);
  const double sx = 60.0 / w, sy = 44.0 / h;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int k = 0; k < 3; ++k) {
        const double* cell = vol.data().data() + ((static_cast<size_t>(i) * w + j) * 12) + 4 * k;
        Vec3 pw{cell[0] * 80 - 40, cell[1] * 80 - 40, cell[2] * 80 - 40};
        Projection p = project_point(cam, pw);
        CHECK(std::fabs(p.u - (j + 0.5) * sx) < 1e-8);
        CHECK(std::fabs(p.v - (i + 0.5) * sy) < 1e-8);
        CHECK(p.depth > 0);
        // all normalized coordinates inside [0,1] when frustum is in range
        for (int q = 0; q < 3; ++q) {
          CHECK(cell[q] >= 0.0);
          CHECK(cell[q] <= 1.0);
        }
      }
}

TEST_CASE("projection and back-projection round trip") {
  Camera cam = identity_camera(80, 60, 70.0);
  Rng rng(31);
  for (int t = 0; t < 200; ++t) {
    Vec3 p{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1, 9)};
    Projection pr = project_point(cam, p);
    if (!pr.visible) continue;
    const Mat3 kinv = mat3_inverse(cam.K);
    Vec3 ray = mat3_apply(kinv, {pr.u, pr.v, 1.0});
    Vec3 back{ray.x * pr.depth, ray.y * pr.depth, ray.z * pr.depth};
    CHECK(std::fabs(back.x - p.x) < 1e-8);
    CHECK(std::fabs(back.y - p.y) < 1e-8);
    CHECK(std::fabs(back.z - p.z) < 1e-8);
  }
}

TEST_CASE("camera rig JSON round trip") {
  CameraRig rig;
  rig.cameras.push_back(identity_camera());
  rig.range.depth_levels = 5;
  std::string text = rig.to_json_text();
  CameraRig loaded = CameraRig::from_json_text(text);
  REQUIRE(loaded.cameras.size() == 1);
  CHECK(loaded.cameras[0].K == rig.cameras[0].K);
  CHECK(loaded.cameras[0].T == rig.cameras[0].T);
  CHECK(loaded.range.depth_levels == 5);

  CHECK_THROWS(CameraRig::from_json_text("{\"nonsense\": 1}"));
}
