#include "bevfuse/mmfe.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bevfuse {

Tensor sinusoidal_pos_enc(const BevGrid& grid, int embed_dim) {
  if (embed_dim % 4 != 0) throw std::invalid_argument("pos_enc: embed_dim must be divisible by 4");
  const int half = embed_dim / 2;
  Tensor pe(std::vector<int>{grid.n_cells(), embed_dim});
  for (int ix = 0; ix < grid.h; ++ix) {
    for (int iy = 0; iy < grid.w; ++iy) {
      double* row = pe.row(ix * grid.w + iy);
      for (int i = 0; i < half / 2; ++i) {
        const double freq = std::pow(10000.0, -2.0 * i / half);
        row[2 * i] = std::sin(ix * freq);
        row[2 * i + 1] = std::cos(ix * freq);
        row[half + 2 * i] = std::sin(iy * freq);
        row[half + 2 * i + 1] = std::cos(iy * freq);
      }
    }
  }
  return pe;
}

BevQueries init_bev_queries(const BevGrid& grid, int embed_dim) {
  BevQueries q;
  q.grid = grid;
  q.q = Tensor::zeros({grid.n_cells(), embed_dim});
  q.pos_enc = sinusoidal_pos_enc(grid, embed_dim);
  return q;
}

FeatureMap2D rows_to_map(const Tensor& rows, int h, int w) {
  check_shape(rows.ndim() == 2 && rows.shape[0] == h * w, "rows_to_map: rows must be [H*W,C]");
  const int c = rows.shape[1];
  FeatureMap2D m(c, h, w);
  for (int n = 0; n < h * w; ++n) {
    const double* r = rows.row(n);
    for (int ci = 0; ci < c; ++ci) m.t.data[ci * static_cast<std::size_t>(h) * w + n] = r[ci];
  }
  return m;
}

Tensor map_to_rows(const FeatureMap2D& map) {
  const int c = map.channels(), hw = map.height() * map.width();
  Tensor rows(std::vector<int>{hw, c});
  for (int n = 0; n < hw; ++n) {
    double* r = rows.row(n);
    for (int ci = 0; ci < c; ++ci) r[ci] = map.t.data[ci * static_cast<std::size_t>(hw) + n];
  }
  return rows;
}

void MmfeConfig::validate() const {
  if (num_layers < 1) throw std::invalid_argument("mmfe: num_layers must be >= 1");
  if (embed_dim % heads != 0) throw std::invalid_argument("mmfe: embed_dim must divide by heads");
  if (lidar_form != "voxel" && lidar_form != "bev") throw std::invalid_argument("mmfe: lidar_form must be voxel|bev");
  std::set<std::string> seen;
  for (const std::string& m : modality_order) {
    if (m != "points" && m != "image" && m != "depth")
      throw std::invalid_argument("mmfe: unknown modality '" + m + "'");
    if (!seen.insert(m).second) throw std::invalid_argument("mmfe: modality '" + m + "' listed twice");
  }
  for (const std::string& m : modality_mask)
    if (!seen.count(m)) throw std::invalid_argument("mmfe: masked modality '" + m + "' not in order");
  if (active_modalities().empty()) throw std::invalid_argument("mmfe: all modalities masked");
}

std::vector<std::string> MmfeConfig::active_modalities() const {
  std::vector<std::string> act;
  for (const std::string& m : modality_order)
    if (!modality_mask.count(m)) act.push_back(m);
  return act;
}

AttnSublayer AttnSublayer::make(int embed_dim, int heads, int k, int dim) {
  AttnSublayer s;
  s.ln_g = Tensor::full({embed_dim}, 1.0);
  s.ln_b = Tensor::zeros({embed_dim});
  s.attn = DeformAttnParams::make(heads, k, embed_dim, dim);
  return s;
}

void AttnSublayer::init(Rng& rng) { attn.init(rng); }

void AttnSublayer::collect_params(const std::string& prefix, ParamRefs& out) {
  out.push_back({prefix + ".ln_g", &ln_g});
  out.push_back({prefix + ".ln_b", &ln_b});
  attn.collect_params(prefix + ".attn", out);
}

FfnSublayer FfnSublayer::make(int embed_dim, int hidden) {
  FfnSublayer f;
  f.ln_g = Tensor::full({embed_dim}, 1.0);
  f.ln_b = Tensor::zeros({embed_dim});
  f.w1 = Tensor::zeros({embed_dim, hidden});
  f.b1 = Tensor::zeros({hidden});
  f.w2 = Tensor::zeros({hidden, embed_dim});
  f.b2 = Tensor::zeros({embed_dim});
  return f;
}

void FfnSublayer::init(Rng& rng) {
  const int din = w1.shape[0], hidden = w1.shape[1];
  const double s1 = std::sqrt(2.0 / (din + hidden));
  for (double& v : w1.data) v = s1 * rng.normal();
  const double s2 = std::sqrt(2.0 / (hidden + din));
  for (double& v : w2.data) v = s2 * rng.normal();
}

void FfnSublayer::collect_params(const std::string& prefix, ParamRefs& out) {
  out.push_back({prefix + ".ln_g", &ln_g});
  out.push_back({prefix + ".ln_b", &ln_b});
  out.push_back({prefix + ".w1", &w1});
  out.push_back({prefix + ".b1", &b1});
  out.push_back({prefix + ".w2", &w2});
  out.push_back({prefix + ".b2", &b2});
}

Tensor FfnSublayer::forward(const Tensor& x, double eps, Cache* cache) const {
  LayerNormCache lnc;
  Tensor z = layer_norm_forward(x, ln_g, ln_b, eps, &lnc);
  Tensor pre = linear_forward(z, w1, b1);
  Tensor act = gelu_forward(pre);
  Tensor out = linear_forward(act, w2, b2);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += x.data[i];
  if (cache) {
    cache->ln = std::move(lnc);
    cache->z = std::move(z);
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return out;
}

Tensor FfnSublayer::backward(const Cache& cache, const Tensor& dy) {
  Tensor dact = linear_backward(const_cast<Tensor&>(cache.act), w2, b2, dy);
  Tensor dpre = gelu_backward(cache.pre, dact);
  Tensor dz = linear_backward(const_cast<Tensor&>(cache.z), w1, b1, dpre);
  Tensor dx = layer_norm_backward(cache.ln, ln_g, ln_b, dz);
  for (std::size_t i = 0; i < dx.numel(); ++i) dx.data[i] += dy.data[i];
  return dx;
}

MmfeEncoder MmfeEncoder::make(const MmfeConfig& cfg, const BevGrid& grid) {
  cfg.validate();
  MmfeEncoder e;
  e.cfg = cfg;
  e.queries = init_bev_queries(grid, cfg.embed_dim);
  for (int l = 0; l < cfg.num_layers; ++l) {
    MmfeLayer layer;
    layer.self_attn = AttnSublayer::make(cfg.embed_dim, cfg.heads, cfg.points_k, 2);
    for (const std::string& m : cfg.modality_order) {
      const int dim = (m == "points" && cfg.lidar_form == "voxel") || m == "depth" ? 3 : 2;
      layer.cross[m] = AttnSublayer::make(cfg.embed_dim, cfg.heads, cfg.points_k, dim);
    }
    layer.ffn = FfnSublayer::make(cfg.embed_dim, cfg.embed_dim * cfg.ffn_mult);
    e.layers.push_back(std::move(layer));
  }
  return e;
}

void MmfeEncoder::init(Rng& rng) {
  for (double& v : queries.q.data) v = 0.1 * rng.normal();
  for (MmfeLayer& l : layers) {
    l.self_attn.init(rng);
    for (auto& [name, s] : l.cross) s.init(rng);
    l.ffn.init(rng);
  }
}

void MmfeEncoder::collect_params(const std::string& prefix, ParamRefs& out) {
  out.push_back({prefix + ".queries", &queries.q});
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string lp = prefix + ".layer" + std::to_string(l);
    layers[l].self_attn.collect_params(lp + ".self", out);
    for (auto& [name, s] : layers[l].cross) s.collect_params(lp + "." + name, out);
    layers[l].ffn.collect_params(lp + ".ffn", out);
  }
}

MmfeGeometry build_mmfe_geometry(const BevGrid& grid, const MmfeConfig& cfg, const MmfeInputs& in) {
  MmfeGeometry g;
  const int n = grid.n_cells();
  const int n_ref = grid.n_ref();

  g.self_refs = ReferencePoints(n, 1, 2);
  for (int ix = 0; ix < grid.h; ++ix)
    for (int iy = 0; iy < grid.w; ++iy) {
      double* p = g.self_refs.at(ix * grid.w + iy, 0);
      p[0] = ix;
      p[1] = iy;
    }

  const auto active = cfg.active_modalities();
  const bool points_active = std::count(active.begin(), active.end(), "points") > 0;
  const bool image_active = std::count(active.begin(), active.end(), "image") > 0;
  const bool depth_active = std::count(active.begin(), active.end(), "depth") > 0;

  std::vector<std::array<double, 3>> pillars;
  if ((points_active && cfg.lidar_form == "voxel") || image_active || depth_active)
    pillars = make_reference_points_3d(grid);

  if (points_active && cfg.lidar_form == "bev") {
    if (!in.lidar_bev) throw std::invalid_argument("mmfe: points modality active but LiDAR BEV features missing");
    g.lidar_bev = ReferencePoints(n, 1, 2);
    for (int ix = 0; ix < grid.h; ++ix)
      for (int iy = 0; iy < grid.w; ++iy) {
        double cx, cy;
        grid.cell_center(ix, iy, cx, cy);
        const double pt[2] = {cx, cy};
        const Projection pr =
            project_to_lidar_bev(pt, in.lidar_bev->frame, in.lidar_bev->map.height(), in.lidar_bev->map.width());
        const int qi = ix * grid.w + iy;
        double* p = g.lidar_bev.at(qi, 0);
        p[0] = pr.u;
        p[1] = pr.v;
        g.lidar_bev.set_valid(qi, 0, pr.valid);
      }
  }

  if (points_active && cfg.lidar_form == "voxel") {
    if (!in.voxels) throw std::invalid_argument("mmfe: points modality active but voxel features missing");
    g.lidar_voxel = ReferencePoints(n, n_ref, 3);
    for (int qi = 0; qi < n; ++qi)
      for (int i = 0; i < n_ref; ++i) {
        const auto& pt = pillars[static_cast<std::size_t>(qi) * n_ref + i];
        const Projection pr = project_to_voxel(pt.data(), in.voxels->frame);
        double* p = g.lidar_voxel.at(qi, i);
        p[0] = pr.u;
        p[1] = pr.v;
        p[2] = pr.w;
        g.lidar_voxel.set_valid(qi, i, pr.valid);
      }
  }

  if (image_active || depth_active) {
    if (!in.rig || !in.images)
      throw std::invalid_argument("mmfe: image/depth modality active but camera features missing");
    const std::size_t n_cam = in.rig->cams.size();
    if (image_active) {
      g.image_refs.assign(n_cam, ReferencePoints(n, n_ref, 2));
      g.image_hits.assign(n, 0);
    }
    if (depth_active) {
      if (!in.depth) throw std::invalid_argument("mmfe: depth modality active but depth features missing");
      g.depth_refs.assign(n_cam, ReferencePoints(n, n_ref, 3));
      g.depth_hits.assign(n, 0);
    }
    for (std::size_t j = 0; j < n_cam; ++j) {
      const double scale = in.images->cams.at(j).at(cfg.image_level).scale;
      for (int qi = 0; qi < n; ++qi) {
        bool img_hit = false, dep_hit = false;
        for (int i = 0; i < n_ref; ++i) {
          const auto& pt = pillars[static_cast<std::size_t>(qi) * n_ref + i];
          if (image_active) {
            const Projection pr = project_to_camera(pt.data(), *in.rig, static_cast<int>(j));
            double* p = g.image_refs[j].at(qi, i);
            p[0] = (pr.v_px + 0.5) * scale - 0.5;
            p[1] = (pr.u_px + 0.5) * scale - 0.5;
            g.image_refs[j].set_valid(qi, i, pr.valid);
            img_hit |= pr.valid;
          }
          if (depth_active) {
            const Projection pr = project_to_frustum(pt.data(), *in.rig, static_cast<int>(j), in.depth->bins);
            double* p = g.depth_refs[j].at(qi, i);
            p[0] = pr.u;  // bin
            p[1] = (pr.v_px + 0.5) * scale - 0.5;
            p[2] = (pr.u_px + 0.5) * scale - 0.5;
            g.depth_refs[j].set_valid(qi, i, pr.valid);
            dep_hit |= pr.valid;
          }
        }
        if (image_active && img_hit) ++g.image_hits[qi];
        if (depth_active && dep_hit) ++g.depth_hits[qi];
      }
    }
  }
  return g;
}

namespace {

// y = x + attn(ln(x)) with the attended map(s) chosen by the caller.
struct SubForward {
  Tensor z;
  LayerNormCache ln;
};

Tensor apply_residual(const Tensor& x, const Tensor& inc) {
  Tensor y = x;
  for (std::size_t i = 0; i < y.numel(); ++i) y.data[i] += inc.data[i];
  return y;
}

}  // namespace

FeatureMap2D MmfeEncoder::forward(const MmfeInputs& in, MmfeCache* cache) const {
  cfg.validate();
  const BevGrid& grid = queries.grid;
  const int h = grid.h, w = grid.w;
  const auto active = cfg.active_modalities();

  MmfeGeometry geom = build_mmfe_geometry(grid, cfg, in);

  Tensor x = queries.q;
  for (std::size_t i = 0; i < x.numel(); ++i) x.data[i] += queries.pos_enc.data[i];
  if (cache) {
    cache->x0 = x;
    cache->layers.assign(layers.size(), MmfeCache::Layer{});
  }

  for (std::size_t l = 0; l < layers.size(); ++l) {
    const MmfeLayer& layer = layers[l];
    MmfeCache::Layer* lc = cache ? &cache->layers[l] : nullptr;

    {  // self-attention over the queries' own map
      LayerNormCache lnc;
      Tensor z = layer_norm_forward(x, layer.self_attn.ln_g, layer.self_attn.ln_b, cfg.ln_eps, &lnc);
      FeatureMap2D zmap = rows_to_map(z, h, w);
      DeformAttnCache ac;
      Tensor inc = deform_attn_2d(z, geom.self_refs, zmap, layer.self_attn.attn, lc ? &ac : nullptr);
      x = apply_residual(x, inc);
      if (lc) {
        lc->self.ln = std::move(lnc);
        lc->self.z = std::move(z);
        lc->self.attn.push_back(std::move(ac));
      }
    }

    for (const std::string& m : cfg.modality_order) {
      if (cfg.modality_mask.count(m)) continue;
      const AttnSublayer& s = layer.cross.at(m);
      LayerNormCache lnc;
      Tensor z = layer_norm_forward(x, s.ln_g, s.ln_b, cfg.ln_eps, &lnc);
      MmfeCache::Sub* sc = nullptr;
      if (lc) {
        sc = &lc->cross[m];
        sc->ln = std::move(lnc);
      }
      Tensor inc(std::vector<int>{x.shape[0], x.shape[1]});
      if (m == "points") {
        if (cfg.lidar_form == "bev") {
          DeformAttnCache ac;
          inc = deform_attn_2d(z, geom.lidar_bev, in.lidar_bev->map, s.attn, sc ? &ac : nullptr);
          if (sc) sc->attn.push_back(std::move(ac));
        } else {
          DeformAttnCache ac;
          inc = deform_attn_3d(z, geom.lidar_voxel, in.voxels->grid, s.attn, sc ? &ac : nullptr);
          if (sc) sc->attn.push_back(std::move(ac));
        }
      } else if (m == "image") {
        const int n = x.shape[0], c = x.shape[1];
        for (std::size_t j = 0; j < in.rig->cams.size(); ++j) {
          DeformAttnCache ac;
          Tensor oj = deform_attn_2d(z, geom.image_refs[j], in.images->cams[j][cfg.image_level].map, s.attn,
                                     sc ? &ac : nullptr);
          if (sc) sc->attn.push_back(std::move(ac));
          if (j == 0)
            inc = std::move(oj);
          else
            for (std::size_t i = 0; i < inc.numel(); ++i) inc.data[i] += oj.data[i];
        }
        for (int qi = 0; qi < n; ++qi) {
          const double div = std::max(geom.image_hits[qi], 1);
          double* row = inc.row(qi);
          for (int ci = 0; ci < c; ++ci) row[ci] /= div;
        }
      } else {  // depth
        const int n = x.shape[0], c = x.shape[1];
        for (std::size_t j = 0; j < in.rig->cams.size(); ++j) {
          DeformAttnCache ac;
          Tensor oj = deform_attn_3d(z, geom.depth_refs[j], in.depth->cams[j], s.attn, sc ? &ac : nullptr);
          if (sc) sc->attn.push_back(std::move(ac));
          if (j == 0)
            inc = std::move(oj);
          else
            for (std::size_t i = 0; i < inc.numel(); ++i) inc.data[i] += oj.data[i];
        }
        for (int qi = 0; qi < n; ++qi) {
          const double div = std::max(geom.depth_hits[qi], 1);
          double* row = inc.row(qi);
          for (int ci = 0; ci < c; ++ci) row[ci] /= div;
        }
      }
      x = apply_residual(x, inc);
      if (sc) sc->z = std::move(z);
    }

    x = layer.ffn.forward(x, cfg.ln_eps, lc ? &lc->ffn : nullptr);
  }

  if (cache) cache->geom = std::move(geom);
  return rows_to_map(x, h, w);
}

void MmfeEncoder::backward(const MmfeInputs& in, const MmfeCache& cache, const FeatureMap2D& dout,
                           const MmfeInputGrads& grads) {
  const BevGrid& grid = queries.grid;
  const int h = grid.h, w = grid.w, c = cfg.embed_dim;
  const MmfeGeometry& geom = cache.geom;
  Tensor dx = map_to_rows(dout);

  for (int l = static_cast<int>(layers.size()) - 1; l >= 0; --l) {
    MmfeLayer& layer = layers[l];
    const MmfeCache::Layer& lc = cache.layers[l];

    dx = layer.ffn.backward(lc.ffn, dx);

    const auto& order = cfg.modality_order;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const std::string& m = *it;
      if (cfg.modality_mask.count(m)) continue;
      AttnSublayer& s = layer.cross.at(m);
      const MmfeCache::Sub& sc = lc.cross.at(m);
      Tensor dz(std::vector<int>{dx.shape[0], c});
      if (m == "points") {
        if (cfg.lidar_form == "bev") {
          double* dmap = nullptr;
          if (grads.lidar_bev) dmap = grads.lidar_bev->t.data.data();
          dz = deform_attn_2d_backward(const_cast<Tensor&>(sc.z), geom.lidar_bev, in.lidar_bev->map, s.attn,
                                       sc.attn[0], dx, dmap, nullptr);
        } else {
          double* dgrid = nullptr;
          if (grads.voxels) dgrid = grads.voxels->t.data.data();
          dz = deform_attn_3d_backward(const_cast<Tensor&>(sc.z), geom.lidar_voxel, in.voxels->grid, s.attn,
                                       sc.attn[0], dx, dgrid, nullptr);
        }
      } else if (m == "image") {
        const int n = dx.shape[0];
        std::fill(dz.data.begin(), dz.data.end(), 0.0);
        for (std::size_t j = 0; j < in.rig->cams.size(); ++j) {
          Tensor doj = dx;
          for (int qi = 0; qi < n; ++qi) {
            const double div = std::max(geom.image_hits[qi], 1);
            double* row = doj.row(qi);
            for (int ci = 0; ci < c; ++ci) row[ci] /= div;
          }
          double* dmap = nullptr;
          if (grads.images) dmap = (*grads.images)[j][cfg.image_level].t.data.data();
          Tensor dzj = deform_attn_2d_backward(const_cast<Tensor&>(sc.z), geom.image_refs[j],
                                               in.images->cams[j][cfg.image_level].map, s.attn, sc.attn[j], doj,
                                               dmap, nullptr);
          for (std::size_t i = 0; i < dz.numel(); ++i) dz.data[i] += dzj.data[i];
        }
      } else {  // depth
        const int n = dx.shape[0];
        std::fill(dz.data.begin(), dz.data.end(), 0.0);
        for (std::size_t j = 0; j < in.rig->cams.size(); ++j) {
          Tensor doj = dx;
          for (int qi = 0; qi < n; ++qi) {
            const double div = std::max(geom.depth_hits[qi], 1);
            double* row = doj.row(qi);
            for (int ci = 0; ci < c; ++ci) row[ci] /= div;
          }
          double* dgrid = nullptr;
          if (grads.depth) dgrid = (*grads.depth)[j].t.data.data();
          Tensor dzj = deform_attn_3d_backward(const_cast<Tensor&>(sc.z), geom.depth_refs[j], in.depth->cams[j],
                                               s.attn, sc.attn[j], doj, dgrid, nullptr);
          for (std::size_t i = 0; i < dz.numel(); ++i) dz.data[i] += dzj.data[i];
        }
      }
      Tensor dres = layer_norm_backward(sc.ln, s.ln_g, s.ln_b, dz);
      for (std::size_t i = 0; i < dx.numel(); ++i) dx.data[i] += dres.data[i];
    }

    {  // self-attention backward; z feeds both the queries and the map
      const MmfeCache::Sub& sc = lc.self;
      FeatureMap2D zmap = rows_to_map(sc.z, h, w);
      FeatureMap2D dzmap(c, h, w);
      Tensor dz = deform_attn_2d_backward(const_cast<Tensor&>(sc.z), geom.self_refs, zmap,
                                          layer.self_attn.attn, sc.attn[0], dx, dzmap.t.data.data(), nullptr);
      Tensor dz_map_rows = map_to_rows(dzmap);
      for (std::size_t i = 0; i < dz.numel(); ++i) dz.data[i] += dz_map_rows.data[i];
      Tensor dres = layer_norm_backward(sc.ln, layer.self_attn.ln_g, layer.self_attn.ln_b, dz);
      for (std::size_t i = 0; i < dx.numel(); ++i) dx.data[i] += dres.data[i];
    }
  }

  queries.q.ensure_grad();
  for (std::size_t i = 0; i < dx.numel(); ++i) queries.q.grad[i] += dx.data[i];
}

}  // namespace bevfuse
