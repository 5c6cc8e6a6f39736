#include "bevfuse/bev_grid.hpp"

#include <cmath>
#include <stdexcept>

namespace bevfuse {

BevGrid::BevGrid(int h_, int w_, double x_min_, double x_max_, double y_min_, double y_max_,
                 std::vector<double> z_anchors_)
    : h(h_), w(w_), x_min(x_min_), x_max(x_max_), y_min(y_min_), y_max(y_max_), z_anchors(std::move(z_anchors_)) {
  if (h < 1 || w < 1) throw std::invalid_argument("bev_grid: dims must be >= 1");
  const double cx = (x_max - x_min) / h;
  const double cy = (y_max - y_min) / w;
  if (cx <= 0 || std::fabs(cx - cy) > 1e-9 * std::max(cx, cy))
    throw std::invalid_argument("bev_grid: cells must be square (check roi vs dims)");
  cell_size = cx;
  for (std::size_t i = 1; i < z_anchors.size(); ++i)
    if (z_anchors[i] <= z_anchors[i - 1]) throw std::invalid_argument("bev_grid: z_anchors must be strictly increasing");
}

void BevGrid::cell_center(int ix, int iy, double& x, double& y) const {
  if (ix < 0 || ix >= h || iy < 0 || iy >= w) throw std::out_of_range("bev_grid: cell index out of range");
  x = x_min + (ix + 0.5) * cell_size;
  y = y_min + (iy + 0.5) * cell_size;
}

bool BevGrid::cell_of(double x, double y, int& ix, int& iy) const {
  ix = static_cast<int>(std::floor((x - x_min) / cell_size));
  iy = static_cast<int>(std::floor((y - y_min) / cell_size));
  return ix >= 0 && ix < h && iy >= 0 && iy < w;
}

void BevGrid::cell_coords(double x, double y, double& u, double& v) const {
  u = (x - x_min) / cell_size - 0.5;
  v = (y - y_min) / cell_size - 0.5;
}

std::vector<std::array<double, 3>> make_reference_points_3d(const BevGrid& grid) {
  std::vector<std::array<double, 3>> pts;
  pts.reserve(static_cast<std::size_t>(grid.n_cells()) * grid.n_ref());
  for (int ix = 0; ix < grid.h; ++ix) {
    for (int iy = 0; iy < grid.w; ++iy) {
      double x, y;
      grid.cell_center(ix, iy, x, y);
      for (double z : grid.z_anchors) pts.push_back({x, y, z});
    }
  }
  return pts;
}

}  // namespace bevfuse
