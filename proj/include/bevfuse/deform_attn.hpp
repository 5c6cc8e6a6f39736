#pragma once

#include <vector>

#include "bevfuse/gradcheck.hpp"
#include "bevfuse/ops.hpp"
#include "bevfuse/rng.hpp"
#include "bevfuse/tensor.hpp"

namespace bevfuse {

// Per-query reference locations into the attended feature's cell coordinates.
// Invalid entries are skipped by the kernels (they contribute nothing and do
// not count toward any normalization).
struct ReferencePoints {
  int n_query = 0;
  int n_ref = 0;
  int dim = 2;
  std::vector<double> loc;   // [n_query, n_ref, dim]
  std::vector<char> valid;   // [n_query, n_ref]

  ReferencePoints() = default;
  ReferencePoints(int nq, int nr, int d)
      : n_query(nq), n_ref(nr), dim(d), loc(static_cast<std::size_t>(nq) * nr * d, 0.0),
        valid(static_cast<std::size_t>(nq) * nr, 1) {}

  double* at(int q, int r) { return loc.data() + (static_cast<std::size_t>(q) * n_ref + r) * dim; }
  const double* at(int q, int r) const { return loc.data() + (static_cast<std::size_t>(q) * n_ref + r) * dim; }
  bool is_valid(int q, int r) const { return valid[static_cast<std::size_t>(q) * n_ref + r] != 0; }
  void set_valid(int q, int r, bool v) { valid[static_cast<std::size_t>(q) * n_ref + r] = v ? 1 : 0; }
};

// Multi-head deformable attention weights. Heads split the embedding into
// C/heads channel groups; offsets and attention weights are per head/point.
// No biases: a zero query yields zero offsets and uniform weights.
struct DeformAttnParams {
  int heads = 4;
  int points = 4;  // K
  int embed_dim = 0;
  int dim = 2;  // 2 for maps, 3 for grids

  Tensor offset_proj;  // [C, heads*points*dim]
  Tensor weight_proj;  // [C, heads*points]
  Tensor value_proj;   // [C, C]
  Tensor output_proj;  // [C, C]

  static DeformAttnParams make(int heads, int points, int embed_dim, int dim);
  // Warm start: zero offsets (samples sit on the references), uniform
  // weights, random value/output projections.
  void init(Rng& rng, double scale = 0.0);
  void collect_params(const std::string& prefix, ParamRefs& out);
};

struct DeformAttnCache {
  Tensor off_logits;  // [N, H*K*dim]
  Tensor attn;        // [N, H*K], softmaxed per head
  Tensor samples;     // [N, R*H*K*C] raw sampled features
};

// out[n] = output_proj . concat_h( sum_r sum_k A[h,k] * value_proj(map(ref_r + off[h,k]))[h] )
// Queries are independent; the forward loop is OpenMP-parallel.
Tensor deform_attn_2d(const Tensor& q, const ReferencePoints& refs, const FeatureMap2D& map,
                      const DeformAttnParams& p, DeformAttnCache* cache = nullptr);
Tensor deform_attn_3d(const Tensor& q, const ReferencePoints& refs, const FeatureGrid3D& grid,
                      const DeformAttnParams& p, DeformAttnCache* cache = nullptr);

// Backward passes return dq and accumulate into the param grad buffers; dmap
// (same layout as the attended feature) and drefs ([N,R,dim]) are optional.
Tensor deform_attn_2d_backward(Tensor& q, const ReferencePoints& refs, const FeatureMap2D& map,
                               DeformAttnParams& p, const DeformAttnCache& cache, const Tensor& dout,
                               double* dmap = nullptr, std::vector<double>* drefs = nullptr);
Tensor deform_attn_3d_backward(Tensor& q, const ReferencePoints& refs, const FeatureGrid3D& grid,
                               DeformAttnParams& p, const DeformAttnCache& cache, const Tensor& dout,
                               double* dmap = nullptr, std::vector<double>* drefs = nullptr);

// Brute-force re-derivation used by the tests and the benchmark; see
// deform_attn_oracle.cpp. Serial, no shared helpers with the main kernel.
Tensor deform_attn_oracle_2d(const Tensor& q, const ReferencePoints& refs, const FeatureMap2D& map,
                             const DeformAttnParams& p);
Tensor deform_attn_oracle_3d(const Tensor& q, const ReferencePoints& refs, const FeatureGrid3D& grid,
                             const DeformAttnParams& p);

}  // namespace bevfuse
