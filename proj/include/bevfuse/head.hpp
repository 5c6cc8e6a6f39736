#pragma once

#include <vector>

#include "bevfuse/bev_grid.hpp"
#include "bevfuse/boxes.hpp"
#include "bevfuse/hungarian.hpp"
#include "bevfuse/mmfe.hpp"

namespace bevfuse {

struct HeadConfig {
  int n_classes = 3;
  int n_layers = 3;
  int embed_dim = 32;
  int n_query = 100;
  int heads = 4;
  int points_k = 4;
  int ffn_mult = 4;
  double ln_eps = 1e-5;
  int dn_groups = 2;
  double dn_noise_scale = 1.0;  // center noise = U(-0.5, 0.5) * size * scale
};

// Masked multi-head attention over a query set (used by the decoder's
// self-attention; the mask isolates denoising groups).
struct Mha {
  int heads = 4;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;

  static Mha make(int embed_dim, int heads);
  void init(Rng& rng);
  void collect_params(const std::string& prefix, ParamRefs& out);

  struct Cache {
    Tensor x, qh, kh, vh, attn, ctx;  // attn is [heads, N, N]
  };
  // allow is an N*N mask, row-major; allow[i*N+j] != 0 lets i attend j.
  Tensor forward(const Tensor& x, const std::vector<char>& allow, Cache* cache = nullptr) const;
  Tensor backward(const Cache& cache, const std::vector<char>& allow, const Tensor& dout);
};

struct DecoderLayer {
  Tensor sa_ln_g, sa_ln_b;
  Mha self_attn;
  AttnSublayer cross;
  FfnSublayer ffn;
};

// Query set for one forward pass: the learnable base queries plus optional
// per-scene denoising queries built from noised ground truth.
struct ObjectQuerySet {
  Tensor content;  // [N,C]
  Tensor refs;     // [N,2] BEV cell coordinates
  struct DnTag {
    int group = -1;   // -1 => matched (base) query
    int src_gt = -1;  // ground-truth index a dn query supervises against
    int src_cls = 0;
  };
  std::vector<DnTag> tags;
  Tensor dn_enc;  // [N_dn, 10] noised encoded boxes behind each dn query
  int n_base = 0;

  int n_total() const { return content.shape.empty() ? 0 : content.shape[0]; }
  std::vector<char> attn_mask() const;  // same-group visibility
};

struct HeadPrediction {
  Tensor cls_logits;  // [N, n_classes]
  Tensor box_raw;     // [N, 10]: dux, duy (cells), z, logw, logl, logh, sin, cos, vx, vy
  Tensor refs_after;  // [N, 2] refined references, cells
};

// Per-layer gradients fed back into the decoder by the loss.
struct HeadGrads {
  std::vector<Tensor> dcls;        // per layer [N, n_classes]
  std::vector<Tensor> dbox;        // per layer [N, 10]
  std::vector<Tensor> drefs_after; // per layer [N, 2]
};

struct DetectionHead {
  HeadConfig cfg;
  Tensor query_embed;     // [N_q, C]
  Tensor query_ref;       // [N_q, 2] cells
  std::vector<DecoderLayer> layers;
  Tensor cls_w, cls_b;                      // shared classification head
  Tensor box_w1, box_b1, box_w2, box_b2;    // shared box MLP
  Tensor dn_class_embed;                    // [n_classes, C]
  Tensor dn_box_w, dn_box_b;                // 10 -> C content projection

  static DetectionHead make(const HeadConfig& cfg, const BevGrid& grid);
  void init(Rng& rng);
  void collect_params(const std::string& prefix, ParamRefs& out);

  // Base queries, plus dn_groups noised copies of the ground truth when gt
  // and rng are given. Zero noise reproduces the GT centers exactly.
  ObjectQuerySet build_queries(const BevGrid& grid, const std::vector<Box3D>& gt_for_dn = {},
                               Rng* rng = nullptr) const;

  struct Cache {
    ObjectQuerySet qs;
    std::vector<char> mask;
    struct Layer {
      LayerNormCache sa_ln;
      Tensor sa_z;
      Mha::Cache mha;
      LayerNormCache ca_ln;
      Tensor ca_z;
      DeformAttnCache ca_attn;
      ReferencePoints ca_refs;
      FfnSublayer::Cache ffn;
      Tensor x_out;           // post-ffn stream (heads read this)
      Tensor box_pre, box_act;  // box MLP intermediates
    };
    std::vector<Layer> layers;
  };

  std::vector<HeadPrediction> forward(const FeatureMap2D& bev, const ObjectQuerySet& qs,
                                      Cache* cache = nullptr) const;
  // Accumulates into all head params; dbev may be null.
  void backward(const FeatureMap2D& bev, const Cache& cache, const HeadGrads& grads, FeatureMap2D* dbev);
};

struct LossWeights {
  double w_cls = 2.0;    // matching weight on -log p
  double w_reg = 0.25;   // matching weight on L1
  double loss_cls = 2.0;
  double loss_l1 = 0.25;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
};

// Matching over the base queries of the final decoder layer:
// cost = w_cls * (-log p_gtclass) + w_reg * L1(encoded params).
std::vector<int> match_predictions(const HeadPrediction& final_layer, int n_base, const std::vector<Box3D>& gt,
                                   const BevGrid& grid, const LossWeights& w);

struct LossBreakdown {
  double total = 0, cls = 0, box = 0, dn_cls = 0, dn_box = 0;
  int n_matched = 0;
};

// Focal classification + L1 regression with deep supervision; dn queries are
// supervised directly against their source GT. Returns the breakdown and, if
// grads is given, per-layer gradients for DetectionHead::backward.
LossBreakdown detection_loss(const std::vector<HeadPrediction>& preds, const ObjectQuerySet& qs,
                             const std::vector<Box3D>& gt, const std::vector<int>& assignment,
                             const BevGrid& grid, const LossWeights& w, HeadGrads* grads = nullptr);

// Decode one layer's base-query predictions to scored boxes.
std::vector<Box3D> decode_predictions(const HeadPrediction& pred, int n_base, const BevGrid& grid,
                                      double score_threshold = 0.0);

}  // namespace bevfuse
