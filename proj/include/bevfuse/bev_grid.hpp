#pragma once

#include <array>
#include <vector>

namespace bevfuse {

// Query lattice over the ego-frame ROI. Cells are square; cell (ix, iy)
// covers x in [x_min + ix*cell, x_min + (ix+1)*cell) and the matching y band,
// with its center at min + (i + 0.5) * cell.
struct BevGrid {
  int h = 0, w = 0;
  double x_min = 0, x_max = 0, y_min = 0, y_max = 0;
  std::vector<double> z_anchors;
  double cell_size = 0;

  BevGrid() = default;
  BevGrid(int h_, int w_, double x_min_, double x_max_, double y_min_, double y_max_,
          std::vector<double> z_anchors_);

  int n_ref() const { return static_cast<int>(z_anchors.size()); }
  int n_cells() const { return h * w; }

  void cell_center(int ix, int iy, double& x, double& y) const;
  // Floor-maps a point to its cell; false when outside the ROI.
  bool cell_of(double x, double y, int& ix, int& iy) const;

  // Continuous cell coordinates of an ego point (u along rows/x, v along
  // cols/y); u == ix exactly at the center of cell ix.
  void cell_coords(double x, double y, double& u, double& v) const;
};

// Pillar expansion: every cell center lifted to the grid's height anchors.
// Entry (ix*W + iy)*n_ref + i holds (x, y, z_i).
std::vector<std::array<double, 3>> make_reference_points_3d(const BevGrid& grid);

}  // namespace bevfuse
