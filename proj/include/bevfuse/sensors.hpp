#pragma once

#include <string>
#include <vector>

#include "bevfuse/bev_grid.hpp"
#include "bevfuse/tensor.hpp"
#include "bevfuse/transform.hpp"

namespace bevfuse {

constexpr double kDepthMin = 0.1;  // meters; closer points never hit a camera

struct CameraDef {
  double intr[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major K
  RigidTransform ego_from_cam;
  int img_w = 0, img_h = 0;
  double feat_scale = 1.0;  // feature cells per pixel at level 0

  double fx() const { return intr[0]; }
  double fy() const { return intr[4]; }
  double cx() const { return intr[2]; }
  double cy() const { return intr[5]; }
};

struct CameraRig {
  std::vector<CameraDef> cams;
  void validate() const;  // positive focals, orthonormal extrinsics
};

struct EgoPose {
  int timestamp = 0;
  RigidTransform world_from_ego;
};

struct LidarFrame {
  RigidTransform ego_from_lidar;
  double origin[3] = {0, 0, 0};  // voxel grid origin, lidar frame
  double voxel_size = 1.0;
  int nz = 0, ny = 0, nx = 0;  // voxel dims (Z, H_v, W_v)
};

// One projected reference location. Cell coordinates follow the attended
// container's axes: (u=row, v=col) for maps, (u=z/bin, v=row, w=col) for grids.
struct Projection {
  double u = 0, v = 0, w = 0;
  bool valid = false;
  double depth = 0;         // camera-frame depth, cameras only
  double u_px = 0, v_px = 0;  // pixel coordinates, cameras only
};

// Voxel/BEV cell coordinate convention: cell = (meters - origin) / voxel_size,
// i.e. coordinate 0 sits at the grid origin corner.
Projection project_to_lidar_bev(const double pt_ego[2], const LidarFrame& lidar, int bev_h, int bev_w);
Projection project_to_voxel(const double pt_ego[3], const LidarFrame& lidar);

Projection project_to_camera(const double pt_ego[3], const CameraRig& rig, int cam);

struct DepthBinSpec {
  std::vector<double> edges;  // D+1 strictly increasing depths, meters

  static DepthBinSpec uniform(double lo, double hi, int bins);
  int bins() const { return static_cast<int>(edges.size()) - 1; }
  // Piecewise-linear bin coordinate with value k exactly at edge k.
  double bin_coord(double depth) const;
};

Projection project_to_frustum(const double pt_ego[3], const CameraRig& rig, int cam, const DepthBinSpec& bins);

// Resamples a historical BEV map into the current ego frame. Each current
// cell center is mapped through T_then<-world * T_world<-now and bilinearly
// sampled; out-of-range cells become zero. Coordinates within 1e-9 of a cell
// center are snapped so that an identity relative pose is exactly identity.
FeatureMap2D align_history_bev(const FeatureMap2D& hist, const EgoPose& pose_then, const EgoPose& pose_now,
                               const BevGrid& grid);

// Calibration file: text, one record per line.
//   camera <K:9> <T_ego_from_cam:12 (row-major 3x4)> <img_w> <img_h> <feat_scale>
//   lidar <T_ego_from_lidar:12> <origin:3> <voxel_size> <nz> <ny> <nx>
void save_calibration(const std::string& path, const CameraRig& rig, const LidarFrame& lidar);
void load_calibration(const std::string& path, CameraRig& rig, LidarFrame& lidar);

}  // namespace bevfuse
