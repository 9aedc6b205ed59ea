#pragma once

#include <vector>

#include "mvacon/camera.hpp"

namespace mvacon {

struct BevGridConfig {
  int nx = 16;
  int nz = 16;
  int pillar_count = 4;
  double x_min = -8, x_max = 8;
  double z_min = -8, z_max = 8;
  double y_min = 0, y_max = 3;
};

/// The paper-scale configuration (200x200 cells); desk-scale tests use the
/// 16x16 default above.
BevGridConfig paper_scale_bev_config();

struct BevGrid {
  BevGridConfig cfg;
  std::vector<double> centers;        // nx*nz * 2, (x, z), cell (i,k) at index i*nz+k
  std::vector<Vec3> pillar_points;    // nx*nz*P, pillar p varies fastest

  int cell_count() const { return cfg.nx * cfg.nz; }
  int point_count() const { return cell_count() * cfg.pillar_count; }
};

BevGrid build_bev_grid(const BevGridConfig& cfg);

struct ProjEntry {
  double u = 0, v = 0;
  bool visible = false;
};

/// Per (cell, pillar point, view, level) projections at each level's
/// feature-map scale. Level index varies fastest.
struct ProjectionTable {
  int cells = 0, pillars = 0, views = 0, levels = 0;
  std::vector<std::pair<int, int>> level_hw;  // (h, w) per level
  std::vector<ProjEntry> entries;

  size_t index(int cell, int pillar, int view, int level) const {
    return ((static_cast<size_t>(cell) * pillars + pillar) * views + view) * levels + level;
  }
  const ProjEntry& at(int cell, int pillar, int view, int level) const {
    return entries[index(cell, pillar, view, level)];
  }
};

ProjectionTable project_anchors(const BevGrid& grid, const CameraRig& rig,
                                const std::vector<std::pair<int, int>>& levels);

}  // namespace mvacon
