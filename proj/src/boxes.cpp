#include "bevfuse/boxes.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace bevfuse {

std::array<double, 10> encode_box(const Box3D& b) {
  if (b.w <= 0 || b.l <= 0 || b.h <= 0) throw std::invalid_argument("box: sizes must be positive");
  return {b.x, b.y, b.z, std::log(b.w), std::log(b.l), std::log(b.h), std::sin(b.yaw), std::cos(b.yaw), b.vx, b.vy};
}

Box3D decode_box(const std::array<double, 10>& p, int cls, double score) {
  Box3D b;
  b.x = p[0];
  b.y = p[1];
  b.z = p[2];
  b.w = std::exp(p[3]);
  b.l = std::exp(p[4]);
  b.h = std::exp(p[5]);
  b.yaw = wrap_angle(std::atan2(p[6], p[7]));
  b.vx = p[8];
  b.vy = p[9];
  b.cls = cls;
  b.score = score;
  return b;
}

void save_detections(const std::string& path, const std::vector<Box3D>& boxes) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("detections: cannot open " + path + " for writing");
  os.precision(17);
  os << "# class score x y z w l h yaw vx vy\n";
  for (const Box3D& b : boxes)
    os << b.cls << ' ' << b.score << ' ' << b.x << ' ' << b.y << ' ' << b.z << ' ' << b.w << ' ' << b.l << ' '
       << b.h << ' ' << b.yaw << ' ' << b.vx << ' ' << b.vy << '\n';
}

std::vector<Box3D> load_detections(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("detections: cannot open " + path);
  std::vector<Box3D> boxes;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    Box3D b;
    ls >> b.cls >> b.score >> b.x >> b.y >> b.z >> b.w >> b.l >> b.h >> b.yaw >> b.vx >> b.vy;
    if (!ls) throw std::runtime_error("detections: malformed record");
    boxes.push_back(b);
  }
  return boxes;
}

}  // namespace bevfuse
