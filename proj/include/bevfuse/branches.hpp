#pragma once

#include <string>
#include <vector>

#include "bevfuse/conv.hpp"
#include "bevfuse/sensors.hpp"
#include "bevfuse/tensor.hpp"

namespace bevfuse {

// Points in the LiDAR frame, packed (x, y, z, intensity).
struct PointCloud {
  std::vector<double> pts;

  std::size_t size() const { return pts.size() / 4; }
  const double* point(std::size_t i) const { return pts.data() + 4 * i; }
  void add(double x, double y, double z, double intensity) {
    pts.insert(pts.end(), {x, y, z, intensity});
  }
};

// Binary point cloud file: magic "FBPC1", u64 count, f64 * 4 per point.
void save_point_cloud(const std::string& path, const PointCloud& pc);
PointCloud load_point_cloud(const std::string& path);

// Binary tensor file: magic "FBTN1", u32 ndim, u32 dims[], f64 data.
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

struct VoxelFeatures {
  FeatureGrid3D grid;
  LidarFrame frame;
};

struct LidarBevFeatures {
  FeatureMap2D map;
  LidarFrame frame;
};

struct ImageLevel {
  FeatureMap2D map;
  double scale = 1.0;  // feature cells per image pixel
};

struct ImageFeatures {
  std::vector<std::vector<ImageLevel>> cams;  // [camera][level]
};

struct DepthFeatures {
  std::vector<FeatureGrid3D> cams;  // [C_d, D_bins, h_f, w_f] per camera
  DepthBinSpec bins;
};

// Raw voxelization: 4 channels (mean offsets from voxel center, mean
// intensity). Non-finite points are rejected and counted.
constexpr int kVoxelRawChannels = 4;
FeatureGrid3D voxelize(const PointCloud& pc, const LidarFrame& frame, std::size_t* rejected = nullptr,
                       std::vector<int>* counts = nullptr);

// Small dense stand-in for the sparse 3D backbone: conv(k3) + gelu + conv(k1).
struct VoxelEncoder {
  Conv3D conv1, conv2;

  struct Cache {
    FeatureGrid3D x, pre1, act1;
  };

  static VoxelEncoder make(int in_c, int mid_c, int out_c, int stride = 1);
  void init(Rng& rng);
  void collect_params(const std::string& prefix, ParamRefs& out);
  VoxelFeatures forward(const FeatureGrid3D& raw, const LidarFrame& frame, Cache* cache = nullptr) const;
  void backward(const Cache& cache, const FeatureGrid3D& dout, FeatureGrid3D* draw = nullptr);
};

// Z-to-channel fold ([C,Z,H,W] -> [C*Z,H,W], out channel = c*Z + z) plus a
// learned 2D conv.
FeatureMap2D fold_z_into_channels(const FeatureGrid3D& g);
FeatureGrid3D unfold_z_from_channels(const FeatureMap2D& m, int c, int z);

struct BevCompressor {
  Conv2D conv;

  struct Cache {
    FeatureMap2D folded;
  };

  static BevCompressor make(int in_c, int z, int out_c, int k = 3);
  void init(Rng& rng) { conv.init(rng); }
  void collect_params(const std::string& prefix, ParamRefs& out) { conv.collect_params(prefix + ".conv", out); }
  LidarBevFeatures forward(const VoxelFeatures& v, Cache* cache = nullptr) const;
  void backward(const Cache& cache, const FeatureMap2D& dout, FeatureGrid3D* dvoxels = nullptr);
};

// Tiny strided conv pyramid standing in for a real backbone + FPN.
struct ImageBackboneStub {
  Conv2D conv1, conv2, conv3;  // 3 -> mid (s2), mid -> C (s2), C -> C (s2)

  struct CamCache {
    FeatureMap2D x, pre1, act1, pre2, act2;
  };
  struct Cache {
    std::vector<CamCache> cams;
  };

  static ImageBackboneStub make(int mid_c, int out_c);
  void init(Rng& rng);
  void collect_params(const std::string& prefix, ParamRefs& out);
  // One [3,H,W] image per camera; two output levels at 1/4 and 1/8 scale.
  ImageFeatures forward(const std::vector<FeatureMap2D>& images, Cache* cache = nullptr) const;
  void backward(const Cache& cache, const std::vector<std::vector<FeatureMap2D>>& dlevels);
};

// Interval-based depth head: per-pixel softmax over depth bins, then a 3D
// conv encoding the distribution volume into frustum features.
struct DepthBranch {
  Conv2D logits_conv;  // C -> D_bins
  Conv3D encode_conv;  // 1 -> C_d
  DepthBinSpec bins;

  struct CamCache {
    FeatureMap2D feat, logits;
    FeatureGrid3D dist;  // [1, D, h, w]
  };
  struct Cache {
    std::vector<CamCache> cams;
  };

  static DepthBranch make(int feat_c, int out_c, DepthBinSpec bins);
  void init(Rng& rng);
  void collect_params(const std::string& prefix, ParamRefs& out);
  DepthFeatures forward(const ImageFeatures& feats, int level, Cache* cache = nullptr) const;
  void backward(const Cache& cache, const std::vector<FeatureGrid3D>& dout,
                std::vector<FeatureMap2D>* dfeat = nullptr);
};

}  // namespace bevfuse
