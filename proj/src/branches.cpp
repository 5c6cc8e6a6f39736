#include "bevfuse/branches.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "bevfuse/ops.hpp"

namespace bevfuse {

namespace {

void require_le() {
  if constexpr (std::endian::native != std::endian::little)
    throw std::runtime_error("binary files: big-endian hosts are not supported");
}

template <typename T>
void wr(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T rd(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("binary file: truncated");
  return v;
}

}  // namespace

void save_point_cloud(const std::string& path, const PointCloud& pc) {
  require_le();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("point cloud: cannot open " + path + " for writing");
  os.write("FBPC1", 5);
  wr<std::uint64_t>(os, pc.size());
  os.write(reinterpret_cast<const char*>(pc.pts.data()), static_cast<std::streamsize>(pc.pts.size() * sizeof(double)));
}

PointCloud load_point_cloud(const std::string& path) {
  require_le();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("point cloud: cannot open " + path);
  char magic[5];
  is.read(magic, 5);
  if (!is || std::memcmp(magic, "FBPC1", 5) != 0) throw std::runtime_error("point cloud: bad magic");
  const std::uint64_t n = rd<std::uint64_t>(is);
  PointCloud pc;
  pc.pts.resize(n * 4);
  is.read(reinterpret_cast<char*>(pc.pts.data()), static_cast<std::streamsize>(pc.pts.size() * sizeof(double)));
  if (!is) throw std::runtime_error("point cloud: truncated");
  return pc;
}

void save_tensor(const std::string& path, const Tensor& t) {
  require_le();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("tensor: cannot open " + path + " for writing");
  os.write("FBTN1", 5);
  wr<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
  for (int d : t.shape) wr<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  os.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(double)));
}

Tensor load_tensor(const std::string& path) {
  require_le();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("tensor: cannot open " + path);
  char magic[5];
  is.read(magic, 5);
  if (!is || std::memcmp(magic, "FBTN1", 5) != 0) throw std::runtime_error("tensor: bad magic");
  const std::uint32_t nd = rd<std::uint32_t>(is);
  std::vector<int> dims(nd);
  for (auto& d : dims) d = static_cast<int>(rd<std::uint32_t>(is));
  Tensor t(dims);
  is.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  if (!is) throw std::runtime_error("tensor: truncated");
  return t;
}

FeatureGrid3D voxelize(const PointCloud& pc, const LidarFrame& frame, std::size_t* rejected,
                       std::vector<int>* counts) {
  if (frame.nz < 1 || frame.ny < 1 || frame.nx < 1 || frame.voxel_size <= 0)
    throw std::invalid_argument("voxelize: frame dims/voxel_size invalid");
  FeatureGrid3D grid(kVoxelRawChannels, frame.nz, frame.ny, frame.nx);
  std::vector<int> cnt(static_cast<std::size_t>(frame.nz) * frame.ny * frame.nx, 0);
  std::size_t rej = 0;
  const double vs = frame.voxel_size;
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const double* p = pc.point(i);
    if (!std::isfinite(p[0]) || !std::isfinite(p[1]) || !std::isfinite(p[2]) || !std::isfinite(p[3])) {
      ++rej;
      continue;
    }
    const int zi = static_cast<int>(std::floor((p[2] - frame.origin[2]) / vs));
    const int yi = static_cast<int>(std::floor((p[0] - frame.origin[0]) / vs));
    const int xi = static_cast<int>(std::floor((p[1] - frame.origin[1]) / vs));
    if (zi < 0 || zi >= frame.nz || yi < 0 || yi >= frame.ny || xi < 0 || xi >= frame.nx) continue;
    const double cx = frame.origin[0] + (yi + 0.5) * vs;
    const double cy = frame.origin[1] + (xi + 0.5) * vs;
    const double cz = frame.origin[2] + (zi + 0.5) * vs;
    grid.at(0, zi, yi, xi) += p[0] - cx;
    grid.at(1, zi, yi, xi) += p[1] - cy;
    grid.at(2, zi, yi, xi) += p[2] - cz;
    grid.at(3, zi, yi, xi) += p[3];
    ++cnt[(static_cast<std::size_t>(zi) * frame.ny + yi) * frame.nx + xi];
  }
  for (int zi = 0; zi < frame.nz; ++zi)
    for (int yi = 0; yi < frame.ny; ++yi)
      for (int xi = 0; xi < frame.nx; ++xi) {
        const int n = cnt[(static_cast<std::size_t>(zi) * frame.ny + yi) * frame.nx + xi];
        if (n > 1)
          for (int c = 0; c < kVoxelRawChannels; ++c) grid.at(c, zi, yi, xi) /= n;
      }
  if (rejected) *rejected = rej;
  if (counts) *counts = std::move(cnt);
  return grid;
}

VoxelEncoder VoxelEncoder::make(int in_c, int mid_c, int out_c, int stride) {
  VoxelEncoder e;
  e.conv1 = Conv3D::make(in_c, mid_c, 3, stride);
  e.conv2 = Conv3D::make(mid_c, out_c, 1, 1);
  return e;
}

void VoxelEncoder::init(Rng& rng) {
  conv1.init(rng);
  conv2.init(rng);
}

void VoxelEncoder::collect_params(const std::string& prefix, ParamRefs& out) {
  conv1.collect_params(prefix + ".conv1", out);
  conv2.collect_params(prefix + ".conv2", out);
}

VoxelFeatures VoxelEncoder::forward(const FeatureGrid3D& raw, const LidarFrame& frame, Cache* cache) const {
  FeatureGrid3D pre1 = conv1.forward(raw);
  FeatureGrid3D act1(Tensor(pre1.t.shape));
  act1.t = gelu_forward(pre1.t);
  VoxelFeatures out;
  out.grid = conv2.forward(act1);
  out.frame = frame;
  if (conv1.stride != 1) {
    out.frame.voxel_size = frame.voxel_size * conv1.stride;
    out.frame.nz = out.grid.depth();
    out.frame.ny = out.grid.height();
    out.frame.nx = out.grid.width();
  }
  if (cache) {
    cache->x = raw;
    cache->pre1 = std::move(pre1);
    cache->act1 = std::move(act1);
  }
  return out;
}

void VoxelEncoder::backward(const Cache& cache, const FeatureGrid3D& dout, FeatureGrid3D* draw) {
  FeatureGrid3D dact1(cache.act1.channels(), cache.act1.depth(), cache.act1.height(), cache.act1.width());
  conv2.backward(cache.act1, dout, &dact1);
  FeatureGrid3D dpre1(Tensor(cache.pre1.t.shape));
  dpre1.t = gelu_backward(cache.pre1.t, dact1.t);
  conv1.backward(cache.x, dpre1, draw);
}

FeatureMap2D fold_z_into_channels(const FeatureGrid3D& g) {
  const int c = g.channels(), z = g.depth(), h = g.height(), w = g.width();
  FeatureMap2D out(c * z, h, w);
  // out channel = c*Z + z; both containers are row-major so this is a copy
  std::copy(g.t.data.begin(), g.t.data.end(), out.t.data.begin());
  return out;
}

FeatureGrid3D unfold_z_from_channels(const FeatureMap2D& m, int c, int z) {
  check_shape(m.channels() == c * z, "unfold: channel count != c*z");
  FeatureGrid3D out(c, z, m.height(), m.width());
  std::copy(m.t.data.begin(), m.t.data.end(), out.t.data.begin());
  return out;
}

BevCompressor BevCompressor::make(int in_c, int z, int out_c, int k) {
  BevCompressor b;
  b.conv = Conv2D::make(in_c * z, out_c, k, 1);
  return b;
}

LidarBevFeatures BevCompressor::forward(const VoxelFeatures& v, Cache* cache) const {
  FeatureMap2D folded = fold_z_into_channels(v.grid);
  LidarBevFeatures out;
  out.map = conv.forward(folded);
  out.frame = v.frame;
  if (cache) cache->folded = std::move(folded);
  return out;
}

void BevCompressor::backward(const Cache& cache, const FeatureMap2D& dout, FeatureGrid3D* dvoxels) {
  FeatureMap2D dfolded(cache.folded.channels(), cache.folded.height(), cache.folded.width());
  conv.backward(cache.folded, dout, &dfolded);
  if (dvoxels) {
    check_shape(dvoxels->t.numel() == dfolded.t.numel(), "bev compressor backward: size mismatch");
    for (std::size_t i = 0; i < dfolded.t.numel(); ++i) dvoxels->t.data[i] += dfolded.t.data[i];
  }
}

ImageBackboneStub ImageBackboneStub::make(int mid_c, int out_c) {
  ImageBackboneStub s;
  s.conv1 = Conv2D::make(3, mid_c, 3, 2);
  s.conv2 = Conv2D::make(mid_c, out_c, 3, 2);
  s.conv3 = Conv2D::make(out_c, out_c, 3, 2);
  return s;
}

void ImageBackboneStub::init(Rng& rng) {
  conv1.init(rng);
  conv2.init(rng);
  conv3.init(rng);
}

void ImageBackboneStub::collect_params(const std::string& prefix, ParamRefs& out) {
  conv1.collect_params(prefix + ".conv1", out);
  conv2.collect_params(prefix + ".conv2", out);
  conv3.collect_params(prefix + ".conv3", out);
}

ImageFeatures ImageBackboneStub::forward(const std::vector<FeatureMap2D>& images, Cache* cache) const {
  ImageFeatures out;
  if (cache) cache->cams.clear();
  for (const FeatureMap2D& img : images) {
    check_shape(img.channels() == 3, "image backbone: expected 3-channel image");
    FeatureMap2D pre1 = conv1.forward(img);
    FeatureMap2D act1(Tensor(pre1.t.shape));
    act1.t = gelu_forward(pre1.t);
    FeatureMap2D level0 = conv2.forward(act1);
    FeatureMap2D act2(Tensor(level0.t.shape));
    act2.t = gelu_forward(level0.t);
    FeatureMap2D level1 = conv3.forward(act2);
    std::vector<ImageLevel> levels;
    levels.push_back({level0, 0.25});
    levels.push_back({std::move(level1), 0.125});
    out.cams.push_back(std::move(levels));
    if (cache) cache->cams.push_back({img, std::move(pre1), std::move(act1), std::move(level0), std::move(act2)});
  }
  return out;
}

void ImageBackboneStub::backward(const Cache& cache, const std::vector<std::vector<FeatureMap2D>>& dlevels) {
  for (std::size_t cam = 0; cam < cache.cams.size(); ++cam) {
    const CamCache& cc = cache.cams[cam];
    FeatureMap2D dact2(cc.act2.channels(), cc.act2.height(), cc.act2.width());
    conv3.backward(cc.act2, dlevels[cam][1], &dact2);
    FeatureMap2D dlevel0(Tensor(cc.pre2.t.shape));
    dlevel0.t = gelu_backward(cc.pre2.t, dact2.t);
    for (std::size_t i = 0; i < dlevel0.t.numel(); ++i) dlevel0.t.data[i] += dlevels[cam][0].t.data[i];
    FeatureMap2D dact1(cc.act1.channels(), cc.act1.height(), cc.act1.width());
    conv2.backward(cc.act1, dlevel0, &dact1);
    FeatureMap2D dpre1(Tensor(cc.pre1.t.shape));
    dpre1.t = gelu_backward(cc.pre1.t, dact1.t);
    conv1.backward(cc.x, dpre1, nullptr);
  }
}

DepthBranch DepthBranch::make(int feat_c, int out_c, DepthBinSpec bins) {
  DepthBranch d;
  d.logits_conv = Conv2D::make(feat_c, bins.bins(), 3, 1);
  d.encode_conv = Conv3D::make(1, out_c, 3, 1);
  d.bins = std::move(bins);
  return d;
}

void DepthBranch::init(Rng& rng) {
  logits_conv.init(rng);
  encode_conv.init(rng);
}

void DepthBranch::collect_params(const std::string& prefix, ParamRefs& out) {
  logits_conv.collect_params(prefix + ".logits", out);
  encode_conv.collect_params(prefix + ".encode", out);
}

DepthFeatures DepthBranch::forward(const ImageFeatures& feats, int level, Cache* cache) const {
  DepthFeatures out;
  out.bins = bins;
  if (cache) cache->cams.clear();
  const int d = bins.bins();
  for (const auto& levels : feats.cams) {
    const FeatureMap2D& feat = levels.at(level).map;
    FeatureMap2D logits = logits_conv.forward(feat);
    const int h = logits.height(), w = logits.width();
    FeatureGrid3D dist(1, d, h, w);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double m = logits.at(0, y, x);
        for (int i = 1; i < d; ++i) m = std::max(m, logits.at(i, y, x));
        double sum = 0.0;
        for (int i = 0; i < d; ++i) {
          const double e = std::exp(logits.at(i, y, x) - m);
          dist.at(0, i, y, x) = e;
          sum += e;
        }
        for (int i = 0; i < d; ++i) dist.at(0, i, y, x) /= sum;
      }
    }
    out.cams.push_back(encode_conv.forward(dist));
    if (cache) cache->cams.push_back({feat, std::move(logits), std::move(dist)});
  }
  return out;
}

void DepthBranch::backward(const Cache& cache, const std::vector<FeatureGrid3D>& dout,
                           std::vector<FeatureMap2D>* dfeat) {
  const int d = bins.bins();
  for (std::size_t cam = 0; cam < cache.cams.size(); ++cam) {
    const CamCache& cc = cache.cams[cam];
    FeatureGrid3D ddist(1, d, cc.dist.height(), cc.dist.width());
    encode_conv.backward(cc.dist, dout[cam], &ddist);
    FeatureMap2D dlogits(d, cc.dist.height(), cc.dist.width());
    for (int y = 0; y < cc.dist.height(); ++y) {
      for (int x = 0; x < cc.dist.width(); ++x) {
        double dot = 0.0;
        for (int i = 0; i < d; ++i) dot += cc.dist.at(0, i, y, x) * ddist.at(0, i, y, x);
        for (int i = 0; i < d; ++i)
          dlogits.at(i, y, x) = cc.dist.at(0, i, y, x) * (ddist.at(0, i, y, x) - dot);
      }
    }
    logits_conv.backward(cc.feat, dlogits, dfeat ? &(*dfeat)[cam] : nullptr);
  }
}

}  // namespace bevfuse
