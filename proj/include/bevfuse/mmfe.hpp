#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "bevfuse/bev_grid.hpp"
#include "bevfuse/branches.hpp"
#include "bevfuse/deform_attn.hpp"
#include "bevfuse/ops.hpp"

namespace bevfuse {

// Learnable BEV queries plus their fixed sinusoidal position encoding.
// Row n corresponds to cell (n / W, n % W).
struct BevQueries {
  Tensor q;        // [H*W, C], learnable
  Tensor pos_enc;  // [H*W, C], fixed
  BevGrid grid;
};

BevQueries init_bev_queries(const BevGrid& grid, int embed_dim);
Tensor sinusoidal_pos_enc(const BevGrid& grid, int embed_dim);

FeatureMap2D rows_to_map(const Tensor& rows, int h, int w);
Tensor map_to_rows(const FeatureMap2D& map);

struct MmfeConfig {
  int num_layers = 6;
  std::vector<std::string> modality_order = {"points", "image"};  // active modalities
  std::set<std::string> modality_mask;                            // dropped at runtime
  std::string lidar_form = "voxel";  // "voxel" (3D path) or "bev" (2D path)
  int embed_dim = 32;
  int heads = 4;
  int points_k = 4;
  int ffn_mult = 4;
  int image_level = 0;
  double ln_eps = 1e-5;

  void validate() const;
  std::vector<std::string> active_modalities() const;  // order minus mask
};

struct AttnSublayer {
  Tensor ln_g, ln_b;
  DeformAttnParams attn;

  static AttnSublayer make(int embed_dim, int heads, int k, int dim);
  void init(Rng& rng);
  void collect_params(const std::string& prefix, ParamRefs& out);
};

struct FfnSublayer {
  Tensor ln_g, ln_b;
  Tensor w1, b1, w2, b2;

  static FfnSublayer make(int embed_dim, int hidden);
  void init(Rng& rng);
  void collect_params(const std::string& prefix, ParamRefs& out);

  struct Cache {
    LayerNormCache ln;
    Tensor z, pre, act;
  };
  // y = x + W2 gelu(W1 ln(x) + b1) + b2
  Tensor forward(const Tensor& x, double eps, Cache* cache) const;
  Tensor backward(const Cache& cache, const Tensor& dy);
};

struct MmfeLayer {
  AttnSublayer self_attn;
  std::map<std::string, AttnSublayer> cross;  // keyed by modality name
  FfnSublayer ffn;
};

// Projected reference points and hit counts for one forward pass.
struct MmfeGeometry {
  ReferencePoints self_refs;
  ReferencePoints lidar_bev;
  ReferencePoints lidar_voxel;
  std::vector<ReferencePoints> image_refs;  // per camera
  std::vector<int> image_hits;              // per query, count of hit views
  std::vector<ReferencePoints> depth_refs;
  std::vector<int> depth_hits;
};

struct MmfeInputs {
  const LidarBevFeatures* lidar_bev = nullptr;
  const VoxelFeatures* voxels = nullptr;
  const ImageFeatures* images = nullptr;
  const CameraRig* rig = nullptr;
  const DepthFeatures* depth = nullptr;
};

// Gradients routed back to the modality branches; any member may be null.
struct MmfeInputGrads {
  FeatureMap2D* lidar_bev = nullptr;
  FeatureGrid3D* voxels = nullptr;
  std::vector<std::vector<FeatureMap2D>>* images = nullptr;  // [camera][level]
  std::vector<FeatureGrid3D>* depth = nullptr;
};

struct MmfeCache {
  struct Sub {
    LayerNormCache ln;
    Tensor z;
    std::vector<DeformAttnCache> attn;  // one per attended map (cameras)
  };
  struct Layer {
    Sub self;
    std::map<std::string, Sub> cross;
    FfnSublayer::Cache ffn;
  };
  Tensor x0;
  std::vector<Layer> layers;
  MmfeGeometry geom;
};

// Stacked fusion encoder: per layer self-attention, the configured modality
// cross-attentions, and an FFN, all pre-norm residual sublayers.
struct MmfeEncoder {
  MmfeConfig cfg;
  BevQueries queries;
  std::vector<MmfeLayer> layers;

  static MmfeEncoder make(const MmfeConfig& cfg, const BevGrid& grid);
  void init(Rng& rng);
  void collect_params(const std::string& prefix, ParamRefs& out);

  FeatureMap2D forward(const MmfeInputs& in, MmfeCache* cache = nullptr) const;
  // dout has the output's [C,H,W] shape. Accumulates into all params
  // (including the learnable queries) and optional input grads.
  void backward(const MmfeInputs& in, const MmfeCache& cache, const FeatureMap2D& dout,
                const MmfeInputGrads& grads = {});
};

MmfeGeometry build_mmfe_geometry(const BevGrid& grid, const MmfeConfig& cfg, const MmfeInputs& in);

}  // namespace bevfuse
