#include "bevfuse/sensors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "bevfuse/ops.hpp"

namespace bevfuse {

void CameraRig::validate() const {
  for (std::size_t j = 0; j < cams.size(); ++j) {
    const CameraDef& c = cams[j];
    if (c.fx() <= 0 || c.fy() <= 0)
      throw std::invalid_argument("camera " + std::to_string(j) + ": focal lengths must be positive");
    if (!c.ego_from_cam.is_rigid(1e-9))
      throw std::invalid_argument("camera " + std::to_string(j) + ": extrinsics not orthonormal");
    if (c.img_w <= 0 || c.img_h <= 0)
      throw std::invalid_argument("camera " + std::to_string(j) + ": image dims must be positive");
  }
}

Projection project_to_lidar_bev(const double pt_ego[2], const LidarFrame& lidar, int bev_h, int bev_w) {
  const double p_ego[3] = {pt_ego[0], pt_ego[1], 0.0};
  double p_l[3];
  lidar.ego_from_lidar.inverse().apply(p_ego, p_l);
  Projection out;
  out.u = (p_l[0] - lidar.origin[0]) / lidar.voxel_size;
  out.v = (p_l[1] - lidar.origin[1]) / lidar.voxel_size;
  out.valid = out.u >= 0 && out.u < bev_h && out.v >= 0 && out.v < bev_w;
  return out;
}

Projection project_to_voxel(const double pt_ego[3], const LidarFrame& lidar) {
  double p_l[3];
  lidar.ego_from_lidar.inverse().apply(pt_ego, p_l);
  Projection out;
  out.u = (p_l[2] - lidar.origin[2]) / lidar.voxel_size;  // z -> grid depth axis
  out.v = (p_l[0] - lidar.origin[0]) / lidar.voxel_size;
  out.w = (p_l[1] - lidar.origin[1]) / lidar.voxel_size;
  out.valid = out.u >= 0 && out.u < lidar.nz && out.v >= 0 && out.v < lidar.ny && out.w >= 0 && out.w < lidar.nx;
  return out;
}

Projection project_to_camera(const double pt_ego[3], const CameraRig& rig, int cam) {
  const CameraDef& c = rig.cams.at(cam);
  double p_c[3];
  c.ego_from_cam.inverse().apply(pt_ego, p_c);
  Projection out;
  out.depth = p_c[2];
  if (p_c[2] <= kDepthMin) return out;
  out.u_px = c.intr[0] * p_c[0] / p_c[2] + c.intr[1] * p_c[1] / p_c[2] + c.intr[2];
  out.v_px = c.intr[4] * p_c[1] / p_c[2] + c.intr[5];
  if (out.u_px < 0 || out.u_px >= c.img_w || out.v_px < 0 || out.v_px >= c.img_h) return out;
  // center-aligned pixel -> feature cell mapping
  out.u = (out.v_px + 0.5) * c.feat_scale - 0.5;  // feature row
  out.v = (out.u_px + 0.5) * c.feat_scale - 0.5;  // feature col
  out.valid = true;
  return out;
}

DepthBinSpec DepthBinSpec::uniform(double lo, double hi, int bins) {
  if (bins < 1 || hi <= lo) throw std::invalid_argument("depth bins: need hi > lo and bins >= 1");
  DepthBinSpec s;
  s.edges.resize(bins + 1);
  for (int i = 0; i <= bins; ++i) s.edges[i] = lo + (hi - lo) * i / bins;
  return s;
}

double DepthBinSpec::bin_coord(double depth) const {
  const auto it = std::upper_bound(edges.begin(), edges.end(), depth);
  int k = static_cast<int>(it - edges.begin()) - 1;
  k = std::clamp(k, 0, bins() - 1);
  return k + (depth - edges[k]) / (edges[k + 1] - edges[k]);
}

Projection project_to_frustum(const double pt_ego[3], const CameraRig& rig, int cam, const DepthBinSpec& bins) {
  for (std::size_t i = 1; i < bins.edges.size(); ++i)
    if (bins.edges[i] <= bins.edges[i - 1]) throw std::invalid_argument("depth bins: edges must be strictly increasing");
  Projection out = project_to_camera(pt_ego, rig, cam);
  if (!out.valid) return out;
  if (out.depth < bins.edges.front() || out.depth > bins.edges.back()) {
    out.valid = false;
    return out;
  }
  // (u,v,w) = (bin, feature row, feature col)
  out.w = out.v;
  out.v = out.u;
  out.u = bins.bin_coord(out.depth);
  return out;
}

FeatureMap2D align_history_bev(const FeatureMap2D& hist, const EgoPose& pose_then, const EgoPose& pose_now,
                               const BevGrid& grid) {
  check_shape(hist.height() == grid.h && hist.width() == grid.w, "align_history_bev: map does not match grid");
  const RigidTransform then_from_now = pose_then.world_from_ego.inverse() * pose_now.world_from_ego;
  FeatureMap2D out(hist.channels(), grid.h, grid.w);
  const int c = hist.channels();
  std::vector<double> sample(c);
#pragma omp parallel for schedule(static) firstprivate(sample)
  for (int ix = 0; ix < grid.h; ++ix) {
    for (int iy = 0; iy < grid.w; ++iy) {
      double x, y;
      grid.cell_center(ix, iy, x, y);
      const double p_now[3] = {x, y, 0.0};
      double p_then[3];
      then_from_now.apply(p_now, p_then);
      double u, v;
      grid.cell_coords(p_then[0], p_then[1], u, v);
      if (std::fabs(u - std::round(u)) < 1e-9) u = std::round(u);
      if (std::fabs(v - std::round(v)) < 1e-9) v = std::round(v);
      bilinear_sample_2d(hist, u, v, sample.data());
      for (int ci = 0; ci < c; ++ci) out.at(ci, ix, iy) = sample[ci];
    }
  }
  return out;
}

namespace {

void write_transform(std::ostream& os, const RigidTransform& t) {
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) os << ' ' << t.r[3 * i + j];
    os << ' ' << t.t[i];
  }
}

RigidTransform read_transform(std::istream& is) {
  RigidTransform t;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) is >> t.r[3 * i + j];
    is >> t.t[i];
  }
  return t;
}

}  // namespace

void save_calibration(const std::string& path, const CameraRig& rig, const LidarFrame& lidar) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("calibration: cannot open " + path + " for writing");
  os.precision(17);
  for (const CameraDef& c : rig.cams) {
    os << "camera";
    for (double k : c.intr) os << ' ' << k;
    write_transform(os, c.ego_from_cam);
    os << ' ' << c.img_w << ' ' << c.img_h << ' ' << c.feat_scale << '\n';
  }
  os << "lidar";
  write_transform(os, lidar.ego_from_lidar);
  os << ' ' << lidar.origin[0] << ' ' << lidar.origin[1] << ' ' << lidar.origin[2];
  os << ' ' << lidar.voxel_size << ' ' << lidar.nz << ' ' << lidar.ny << ' ' << lidar.nx << '\n';
}

void load_calibration(const std::string& path, CameraRig& rig, LidarFrame& lidar) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("calibration: cannot open " + path);
  rig.cams.clear();
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "camera") {
      CameraDef c;
      for (double& k : c.intr) ls >> k;
      c.ego_from_cam = read_transform(ls);
      ls >> c.img_w >> c.img_h >> c.feat_scale;
      if (!ls) throw std::runtime_error("calibration: malformed camera record");
      rig.cams.push_back(c);
    } else if (kind == "lidar") {
      lidar.ego_from_lidar = read_transform(ls);
      ls >> lidar.origin[0] >> lidar.origin[1] >> lidar.origin[2];
      ls >> lidar.voxel_size >> lidar.nz >> lidar.ny >> lidar.nx;
      if (!ls) throw std::runtime_error("calibration: malformed lidar record");
    } else {
      throw std::runtime_error("calibration: unknown record '" + kind + "'");
    }
  }
  rig.validate();
}

}  // namespace bevfuse
