#pragma once

#include <string>
#include <utility>
#include <vector>

#include "bevfuse/mmfe.hpp"
#include "bevfuse/sensors.hpp"

namespace bevfuse {

// Ring buffer of fused BEV maps with their ego poses, ordered by timestamp.
struct BevHistory {
  int capacity = 8;
  std::vector<std::pair<FeatureMap2D, EgoPose>> entries;  // oldest first

  explicit BevHistory(int cap = 8) : capacity(cap) {}
  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
  void push(FeatureMap2D bev, EgoPose pose);  // throws on non-monotone timestamps
  void clear() { entries.clear(); }
};

// History file: magic "FBHS1", u32 count, per record i32 timestamp,
// 12 doubles pose (row-major R|t), then the map in the tensor layout
// (u32 ndim, u32 dims[], f64 data).
void save_history(const std::string& path, const BevHistory& buf);
BevHistory load_history(const std::string& path, int capacity);

struct TfeConfig {
  int num_layers = 3;
  int embed_dim = 32;
  int heads = 4;
  int points_k = 4;
  int ffn_mult = 4;
  double ln_eps = 1e-5;
  bool mean_over_frames = false;  // Eq-style plain sum by default
};

struct TfeLayer {
  AttnSublayer tca;
  FfnSublayer ffn;
};

// Temporal fusion: queries start from the current BEV map and cross-attend
// the aligned history plus the current frame; historical maps are
// stop-gradient, the current frame is not.
struct TfeEncoder {
  TfeConfig cfg;
  std::vector<TfeLayer> layers;

  static TfeEncoder make(const TfeConfig& cfg);
  void init(Rng& rng);
  void collect_params(const std::string& prefix, ParamRefs& out);

  struct Cache {
    std::vector<FeatureMap2D> targets;  // aligned history then current
    ReferencePoints refs;
    struct Layer {
      LayerNormCache ln;
      Tensor z;
      std::vector<DeformAttnCache> attn;
      FfnSublayer::Cache ffn;
    };
    std::vector<Layer> layers;
    int h = 0, w = 0;
  };

  FeatureMap2D forward(const FeatureMap2D& current, const BevHistory& buf, const EgoPose& pose_now,
                       const BevGrid& grid, Cache* cache = nullptr) const;
  // Returns d(current); history frames receive no gradient.
  FeatureMap2D backward(const Cache& cache, const FeatureMap2D& dout);
};

// Channel-concat + 1x1 conv baseline behind the same call shape as the
// attention encoder: concat [current, newest..oldest aligned history],
// zero-padded to a fixed window.
struct TemporalConcat {
  int t_window = 4;
  Conv2D conv;

  static TemporalConcat make(int embed_dim, int t_window);
  void init(Rng& rng) { conv.init(rng); }
  void collect_params(const std::string& prefix, ParamRefs& out) { conv.collect_params(prefix + ".conv", out); }

  struct Cache {
    FeatureMap2D stacked;
  };

  FeatureMap2D forward(const FeatureMap2D& current, const BevHistory& buf, const EgoPose& pose_now,
                       const BevGrid& grid, Cache* cache = nullptr) const;
  FeatureMap2D backward(const Cache& cache, const FeatureMap2D& dout);
};

}  // namespace bevfuse
