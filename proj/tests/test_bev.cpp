#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "mvacon/bev.hpp"

using namespace mvacon;

namespace {

Camera simple_camera(double tx, double ty, double tz) {
  Camera cam;
  cam.K = {50, 0, 32, 0, 50, 24, 0, 0, 1};
  cam.width = 64;
  cam.height = 48;
  cam.T = mat4_identity();
  cam.T[3] = tx;
  cam.T[7] = ty;
  cam.T[11] = tz;
  return cam;
}

}  // namespace

TEST_CASE("paper-scale config keeps the 200x200 grid") {
  BevGridConfig cfg = paper_scale_bev_config();
  CHECK(cfg.nx == 200);
  CHECK(cfg.nz == 200);
  BevGrid grid = build_bev_grid(cfg);
  CHECK(grid.cell_count() == 40000);
}

TEST_CASE("1x1 grid with one pillar point sits at the volume center") {
  BevGridConfig cfg;
  cfg.nx = cfg.nz = 1;
  cfg.pillar_count = 1;
  cfg.x_min = -3;
  cfg.x_max = 5;
  cfg.z_min = 2;
  cfg.z_max = 4;
  cfg.y_min = -1;
  cfg.y_max = 1;
  BevGrid grid = build_bev_grid(cfg);
  REQUIRE(grid.pillar_points.size() == 1);
  CHECK(grid.pillar_points[0].x == doctest::Approx(1.0));
  CHECK(grid.pillar_points[0].y == doctest::Approx(0.0));
  CHECK(grid.pillar_points[0].z == doctest::Approx(3.0));
}

TEST_CASE("4x4 grid on [-2,2]^2 has closed-form centers") {
  BevGridConfig cfg;
  cfg.nx = cfg.nz = 4;
  cfg.x_min = cfg.z_min = -2;
  cfg.x_max = cfg.z_max = 2;
  BevGrid grid = build_bev_grid(cfg);
  std::set<double> xs, zs;
  for (int c = 0; c < grid.cell_count(); ++c) {
    xs.insert(grid.centers[c * 2]);
    zs.insert(grid.centers[c * 2 + 1]);
  }
  const std::set<double> expect = {-1.5, -0.5, 0.5, 1.5};
  CHECK(xs == expect);
  CHECK(zs == expect);
  // pillar (x,z) equals its cell center
  for (int c = 0; c < grid.cell_count(); ++c)
    for (int p = 0; p < cfg.pillar_count; ++p) {
      const Vec3& pt = grid.pillar_points[c * cfg.pillar_count + p];
      CHECK(pt.x == grid.centers[c * 2]);
      CHECK(pt.z == grid.centers[c * 2 + 1]);
    }
  CHECK_THROWS(build_bev_grid(BevGridConfig{0, 4}));
}

TEST_CASE("anchors behind every camera are invisible") {
  BevGridConfig cfg;
  cfg.nx = cfg.nz = 2;
  cfg.z_min = -4;
  cfg.z_max = -2;  // all anchors behind a camera at origin looking +z
  BevGrid grid = build_bev_grid(cfg);
  CameraRig rig;
  rig.cameras.push_back(simple_camera(0, 0, 0));
  ProjectionTable table = project_anchors(grid, rig, {{12, 16}});
  for (const auto& e : table.entries) CHECK_FALSE(e.visible);
}

TEST_CASE("anchor on the optical axis hits the scaled principal point") {
  BevGridConfig cfg;
  cfg.nx = cfg.nz = 1;
  cfg.pillar_count = 1;
  cfg.x_min = -1;
  cfg.x_max = 1;
  cfg.z_min = 4;
  cfg.z_max = 6;
  cfg.y_min = -1;
  cfg.y_max = 1;  // single anchor at (0,0,5)
  BevGrid grid = build_bev_grid(cfg);
  CameraRig rig;
  rig.cameras.push_back(simple_camera(0, 0, 0));
  ProjectionTable table = project_anchors(grid, rig, {{24, 32}, {12, 16}});
  const ProjEntry& e0 = table.at(0, 0, 0, 0);
  CHECK(e0.visible);
  CHECK(e0.u == doctest::Approx(16.0));  // (w/2) scaled: 32 * 32/64
  CHECK(e0.v == doctest::Approx(12.0));
  const ProjEntry& e1 = table.at(0, 0, 0, 1);
  CHECK(e1.u == doctest::Approx(8.0));
  CHECK(e1.v == doctest::Approx(6.0));
}

TEST_CASE("table matches a per-point project_point oracle and scaling is consistent") {
  BevGridConfig cfg;
  cfg.nx = 3;
  cfg.nz = 4;
  cfg.pillar_count = 2;
  cfg.z_min = 1;
  cfg.z_max = 9;
  BevGrid grid = build_bev_grid(cfg);
  CameraRig rig;
  rig.cameras.push_back(simple_camera(0.3, -0.2, 0.5));
  rig.cameras.push_back(simple_camera(-1.0, 0.0, 0.0));
  std::vector<std::pair<int, int>> levels = {{48, 64}, {24, 32}, {12, 16}};
  ProjectionTable table = project_anchors(grid, rig, levels);
  CHECK(table.entries.size() == static_cast<size_t>(12 * 2 * 2 * 3));

  for (int c = 0; c < grid.cell_count(); ++c)
    for (int p = 0; p < cfg.pillar_count; ++p)
      for (int view = 0; view < 2; ++view) {
        const Projection pr = project_point(rig.cameras[view], grid.pillar_points[c * 2 + p]);
        for (int lvl = 0; lvl < 3; ++lvl) {
          const ProjEntry& e = table.at(c, p, view, lvl);
          CHECK(e.visible == pr.visible);
          CHECK(std::fabs(e.u - pr.u * levels[lvl].second / 64.0) < 1e-9);
          CHECK(std::fabs(e.v - pr.v * levels[lvl].first / 48.0) < 1e-9);
        }
      }
}

TEST_CASE("table is invariant under a common world translation") {
  BevGridConfig cfg;
  cfg.nx = cfg.nz = 3;
  cfg.z_min = 2;
  cfg.z_max = 8;
  CameraRig rig;
  rig.cameras.push_back(simple_camera(0.1, 0.4, -0.3));
  ProjectionTable base = project_anchors(build_bev_grid(cfg), rig, {{24, 32}});

  const Vec3 shift{5.0, -2.0, 7.0};
  BevGridConfig cfg2 = cfg;
  cfg2.x_min += shift.x;
  cfg2.x_max += shift.x;
  cfg2.z_min += shift.z;
  cfg2.z_max += shift.z;
  cfg2.y_min += shift.y;
  cfg2.y_max += shift.y;
  CameraRig rig2 = rig;
  // world -> camera with the world origin moved by `shift`: p_cam = R(p - shift) + t
  Camera& cam = rig2.cameras[0];
  cam.T[3] -= cam.T[0] * shift.x + cam.T[1] * shift.y + cam.T[2] * shift.z;
  cam.T[7] -= cam.T[4] * shift.x + cam.T[5] * shift.y + cam.T[6] * shift.z;
  cam.T[11] -= cam.T[8] * shift.x + cam.T[9] * shift.y + cam.T[10] * shift.z;
  ProjectionTable moved = project_anchors(build_bev_grid(cfg2), rig2, {{24, 32}});

  REQUIRE(moved.entries.size() == base.entries.size());
  for (size_t i = 0; i < base.entries.size(); ++i) {
    CHECK(base.entries[i].visible == moved.entries[i].visible);
    CHECK(std::fabs(base.entries[i].u - moved.entries[i].u) < 1e-9);
    CHECK(std::fabs(base.entries[i].v - moved.entries[i].v) < 1e-9);
  }
}
