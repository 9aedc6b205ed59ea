#include "mvacon/bev.hpp"

#include <stdexcept>

namespace mvacon {

BevGridConfig paper_scale_bev_config() {
  BevGridConfig cfg;
  cfg.nx = 200;
  cfg.nz = 200;
  cfg.x_min = -50;
  cfg.x_max = 50;
  cfg.z_min = -50;
  cfg.z_max = 50;
  return cfg;
}

BevGrid build_bev_grid(const BevGridConfig& cfg) {
  if (cfg.nx < 1 || cfg.nz < 1 || cfg.pillar_count < 1)
    throw std::invalid_argument("bev grid: non-positive extents");
  if (!(cfg.x_max > cfg.x_min && cfg.z_max > cfg.z_min && cfg.y_max > cfg.y_min))
    throw std::invalid_argument("bev grid: invalid bounds");
  BevGrid grid;
  grid.cfg = cfg;
  const double dx = (cfg.x_max - cfg.x_min) / cfg.nx;
  const double dz = (cfg.z_max - cfg.z_min) / cfg.nz;
  const double dy = (cfg.y_max - cfg.y_min) / cfg.pillar_count;
  grid.centers.resize(static_cast<size_t>(cfg.nx) * cfg.nz * 2);
  grid.pillar_points.resize(static_cast<size_t>(cfg.nx) * cfg.nz * cfg.pillar_count);
  for (int i = 0; i < cfg.nx; ++i)
    for (int k = 0; k < cfg.nz; ++k) {
      const double cx = cfg.x_min + (i + 0.5) * dx;
      const double cz = cfg.z_min + (k + 0.5) * dz;
      const size_t cell = static_cast<size_t>(i) * cfg.nz + k;
      grid.centers[cell * 2] = cx;
      grid.centers[cell * 2 + 1] = cz;
      for (int p = 0; p < cfg.pillar_count; ++p) {
        const double cy = cfg.y_min + (p + 0.5) * dy;  // sub-interval centers
        grid.pillar_points[cell * cfg.pillar_count + p] = {cx, cy, cz};
      }
    }
  return grid;
}

ProjectionTable project_anchors(const BevGrid& grid, const CameraRig& rig,
                                const std::vector<std::pair<int, int>>& levels) {
  if (rig.cameras.empty()) throw std::invalid_argument("project_anchors: empty camera rig");
  if (levels.empty()) throw std::invalid_argument("project_anchors: no pyramid levels");
  ProjectionTable table;
  table.cells = grid.cell_count();
  table.pillars = grid.cfg.pillar_count;
  table.views = static_cast<int>(rig.cameras.size());
  table.levels = static_cast<int>(levels.size());
  table.level_hw = levels;
  table.entries.resize(static_cast<size_t>(table.cells) * table.pillars * table.views * table.levels);
  for (int cell = 0; cell < table.cells; ++cell)
    for (int p = 0; p < table.pillars; ++p) {
      const Vec3& pt = grid.pillar_points[static_cast<size_t>(cell) * table.pillars + p];
      for (int view = 0; view < table.views; ++view) {
        const Camera& cam = rig.cameras[static_cast<size_t>(view)];
        const Projection pr = project_point(cam, pt);
        for (int lvl = 0; lvl < table.levels; ++lvl) {
          const auto [lh, lw] = levels[static_cast<size_t>(lvl)];
          ProjEntry& e = table.entries[table.index(cell, p, view, lvl)];
          e.u = pr.u * static_cast<double>(lw) / cam.width;
          e.v = pr.v * static_cast<double>(lh) / cam.height;
          e.visible = pr.visible;
        }
      }
    }
  return table;
}

}  // namespace mvacon
