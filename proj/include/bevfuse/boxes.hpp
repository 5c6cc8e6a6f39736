#pragma once

#include <array>
#include <string>
#include <vector>

#include "bevfuse/transform.hpp"

namespace bevfuse {

struct Box3D {
  double x = 0, y = 0, z = 0;  // center, meters
  double w = 1, l = 1, h = 1;  // width (across heading), length, height
  double yaw = 0;              // radians, (-pi, pi]
  double vx = 0, vy = 0;       // m/s
  int cls = 0;
  double score = 1.0;
  bool has_velocity = true;
};

// 10-dim parameter vector: x, y, z, log w, log l, log h, sin yaw, cos yaw,
// vx, vy. Sizes must be positive.
std::array<double, 10> encode_box(const Box3D& b);
Box3D decode_box(const std::array<double, 10>& p, int cls = 0, double score = 1.0);

// Detections text file, one record per line:
//   class score x y z w l h yaw vx vy
void save_detections(const std::string& path, const std::vector<Box3D>& boxes);
std::vector<Box3D> load_detections(const std::string& path);

}  // namespace bevfuse
