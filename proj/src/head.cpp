#include "bevfuse/head.hpp"

#include <cmath>
#include <stdexcept>

#include "bevfuse/conv.hpp"

namespace bevfuse {

namespace {

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

// Sigmoid focal loss for one logit; returns the loss and writes d/dlogit.
double sigmoid_focal(double z, bool positive, double alpha, double gamma, double* dz) {
  const double log_p = -softplus(-z);
  const double log_q = -softplus(z);  // log(1-p)
  const double p = std::exp(log_p);
  const double q = std::exp(log_q);
  if (positive) {
    const double loss = -alpha * std::pow(q, gamma) * log_p;
    if (dz) *dz = alpha * gamma * std::pow(q, gamma) * p * log_p - alpha * std::pow(q, gamma + 1.0);
    return loss;
  }
  const double loss = -(1.0 - alpha) * std::pow(p, gamma) * log_q;
  if (dz) *dz = -(1.0 - alpha) * gamma * std::pow(p, gamma) * q * log_q + (1.0 - alpha) * std::pow(p, gamma + 1.0);
  return loss;
}

}  // namespace

Mha Mha::make(int embed_dim, int heads) {
  if (embed_dim % heads != 0) throw std::invalid_argument("mha: embed_dim must divide by heads");
  Mha m;
  m.heads = heads;
  m.wq = Tensor::zeros({embed_dim, embed_dim});
  m.bq = Tensor::zeros({embed_dim});
  m.wk = Tensor::zeros({embed_dim, embed_dim});
  m.bk = Tensor::zeros({embed_dim});
  m.wv = Tensor::zeros({embed_dim, embed_dim});
  m.bv = Tensor::zeros({embed_dim});
  m.wo = Tensor::zeros({embed_dim, embed_dim});
  m.bo = Tensor::zeros({embed_dim});
  return m;
}

void Mha::init(Rng& rng) {
  const int c = wq.shape[0];
  const double s = std::sqrt(1.0 / c);
  for (Tensor* t : {&wq, &wk, &wv, &wo})
    for (double& v : t->data) v = s * rng.normal();
}

void Mha::collect_params(const std::string& prefix, ParamRefs& out) {
  out.push_back({prefix + ".wq", &wq});
  out.push_back({prefix + ".bq", &bq});
  out.push_back({prefix + ".wk", &wk});
  out.push_back({prefix + ".bk", &bk});
  out.push_back({prefix + ".wv", &wv});
  out.push_back({prefix + ".bv", &bv});
  out.push_back({prefix + ".wo", &wo});
  out.push_back({prefix + ".bo", &bo});
}

Tensor Mha::forward(const Tensor& x, const std::vector<char>& allow, Cache* cache) const {
  const int n = x.shape[0], c = x.shape[1];
  check_shape(allow.size() == static_cast<std::size_t>(n) * n, "mha: mask size mismatch");
  const int dh = c / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor q = linear_forward(x, wq, bq);
  Tensor k = linear_forward(x, wk, bk);
  Tensor v = linear_forward(x, wv, bv);
  Tensor attn(std::vector<int>{heads, n, n});
  Tensor ctx(std::vector<int>{n, c});

  for (int h = 0; h < heads; ++h) {
    for (int i = 0; i < n; ++i) {
      double* arow = attn.data.data() + (static_cast<std::size_t>(h) * n + i) * n;
      double mx = -1e300;
      for (int j = 0; j < n; ++j) {
        if (!allow[static_cast<std::size_t>(i) * n + j]) {
          arow[j] = -1e300;
          continue;
        }
        double dot = 0.0;
        const double* qi = q.row(i) + h * dh;
        const double* kj = k.row(j) + h * dh;
        for (int d = 0; d < dh; ++d) dot += qi[d] * kj[d];
        arow[j] = dot * scale;
        mx = std::max(mx, arow[j]);
      }
      double sum = 0.0;
      for (int j = 0; j < n; ++j) {
        arow[j] = allow[static_cast<std::size_t>(i) * n + j] ? std::exp(arow[j] - mx) : 0.0;
        sum += arow[j];
      }
      for (int j = 0; j < n; ++j) arow[j] /= sum;
      double* crow = ctx.row(i) + h * dh;
      for (int d = 0; d < dh; ++d) crow[d] = 0.0;
      for (int j = 0; j < n; ++j) {
        const double a = arow[j];
        if (a == 0.0) continue;
        const double* vj = v.row(j) + h * dh;
        for (int d = 0; d < dh; ++d) crow[d] += a * vj[d];
      }
    }
  }
  Tensor out = linear_forward(ctx, wo, bo);
  if (cache) {
    cache->x = x;
    cache->qh = std::move(q);
    cache->kh = std::move(k);
    cache->vh = std::move(v);
    cache->attn = std::move(attn);
    cache->ctx = std::move(ctx);
  }
  return out;
}

Tensor Mha::backward(const Cache& cache, const std::vector<char>& allow, const Tensor& dout) {
  const int n = cache.x.shape[0], c = cache.x.shape[1];
  const int dh = c / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor dctx = linear_backward(const_cast<Tensor&>(cache.ctx), wo, bo, dout);
  Tensor dq(std::vector<int>{n, c}), dk(std::vector<int>{n, c}), dv(std::vector<int>{n, c});

  std::vector<double> dattn(n), dlogit(n);
  for (int h = 0; h < heads; ++h) {
    for (int i = 0; i < n; ++i) {
      const double* arow = cache.attn.data.data() + (static_cast<std::size_t>(h) * n + i) * n;
      const double* dci = dctx.row(i) + h * dh;
      for (int j = 0; j < n; ++j) {
        if (arow[j] == 0.0) {
          dattn[j] = 0.0;
          continue;
        }
        double dot = 0.0;
        const double* vj = cache.vh.row(j) + h * dh;
        for (int d = 0; d < dh; ++d) dot += dci[d] * vj[d];
        dattn[j] = dot;
        double* dvj = dv.row(j) + h * dh;
        for (int d = 0; d < dh; ++d) dvj[d] += arow[j] * dci[d];
      }
      double adot = 0.0;
      for (int j = 0; j < n; ++j) adot += arow[j] * dattn[j];
      for (int j = 0; j < n; ++j) dlogit[j] = arow[j] * (dattn[j] - adot);
      double* dqi = dq.row(i) + h * dh;
      for (int j = 0; j < n; ++j) {
        const double g = dlogit[j] * scale;
        if (g == 0.0) continue;
        const double* kj = cache.kh.row(j) + h * dh;
        const double* qi = cache.qh.row(i) + h * dh;
        double* dkj = dk.row(j) + h * dh;
        for (int d = 0; d < dh; ++d) {
          dqi[d] += g * kj[d];
          dkj[d] += g * qi[d];
        }
      }
    }
  }
  (void)allow;
  Tensor dx = linear_backward(const_cast<Tensor&>(cache.x), wq, bq, dq);
  Tensor dx2 = linear_backward(const_cast<Tensor&>(cache.x), wk, bk, dk);
  Tensor dx3 = linear_backward(const_cast<Tensor&>(cache.x), wv, bv, dv);
  for (std::size_t i = 0; i < dx.numel(); ++i) dx.data[i] += dx2.data[i] + dx3.data[i];
  return dx;
}

std::vector<char> ObjectQuerySet::attn_mask() const {
  const int n = n_total();
  std::vector<char> allow(static_cast<std::size_t>(n) * n, 0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      allow[static_cast<std::size_t>(i) * n + j] = tags[i].group == tags[j].group ? 1 : 0;
  return allow;
}

DetectionHead DetectionHead::make(const HeadConfig& cfg, const BevGrid& grid) {
  DetectionHead h;
  h.cfg = cfg;
  h.query_embed = Tensor::zeros({cfg.n_query, cfg.embed_dim});
  h.query_ref = Tensor::zeros({cfg.n_query, 2});
  // spread the learnable references over the grid
  const int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(cfg.n_query))));
  for (int i = 0; i < cfg.n_query; ++i) {
    const int gx = i / side, gy = i % side;
    h.query_ref.at2(i, 0) = (gx + 0.5) * grid.h / static_cast<double>(side) - 0.5;
    h.query_ref.at2(i, 1) = (gy + 0.5) * grid.w / static_cast<double>(side) - 0.5;
  }
  for (int l = 0; l < cfg.n_layers; ++l) {
    DecoderLayer layer;
    layer.sa_ln_g = Tensor::full({cfg.embed_dim}, 1.0);
    layer.sa_ln_b = Tensor::zeros({cfg.embed_dim});
    layer.self_attn = Mha::make(cfg.embed_dim, cfg.heads);
    layer.cross = AttnSublayer::make(cfg.embed_dim, cfg.heads, cfg.points_k, 2);
    layer.ffn = FfnSublayer::make(cfg.embed_dim, cfg.embed_dim * cfg.ffn_mult);
    h.layers.push_back(std::move(layer));
  }
  h.cls_w = Tensor::zeros({cfg.embed_dim, cfg.n_classes});
  h.cls_b = Tensor::zeros({cfg.n_classes});
  h.box_w1 = Tensor::zeros({cfg.embed_dim, cfg.embed_dim});
  h.box_b1 = Tensor::zeros({cfg.embed_dim});
  h.box_w2 = Tensor::zeros({cfg.embed_dim, 10});
  h.box_b2 = Tensor::zeros({10});
  h.dn_class_embed = Tensor::zeros({cfg.n_classes, cfg.embed_dim});
  h.dn_box_w = Tensor::zeros({10, cfg.embed_dim});
  h.dn_box_b = Tensor::zeros({cfg.embed_dim});
  return h;
}

void DetectionHead::init(Rng& rng) {
  for (double& v : query_embed.data) v = 0.1 * rng.normal();
  for (DecoderLayer& l : layers) {
    l.self_attn.init(rng);
    l.cross.init(rng);
    l.ffn.init(rng);
  }
  const double s = std::sqrt(1.0 / cfg.embed_dim);
  for (double& v : cls_w.data) v = s * rng.normal();
  // low initial foreground probability keeps early focal loss stable
  std::fill(cls_b.data.begin(), cls_b.data.end(), -2.0);
  for (double& v : box_w1.data) v = s * rng.normal();
  // zero-init final box layer: boxes start at their references with unit size
  std::fill(box_w2.data.begin(), box_w2.data.end(), 0.0);
  for (double& v : dn_class_embed.data) v = 0.1 * rng.normal();
  for (double& v : dn_box_w.data) v = 0.1 * rng.normal();
}

void DetectionHead::collect_params(const std::string& prefix, ParamRefs& out) {
  out.push_back({prefix + ".query_embed", &query_embed});
  out.push_back({prefix + ".query_ref", &query_ref});
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string lp = prefix + ".layer" + std::to_string(l);
    out.push_back({lp + ".sa_ln_g", &layers[l].sa_ln_g});
    out.push_back({lp + ".sa_ln_b", &layers[l].sa_ln_b});
    layers[l].self_attn.collect_params(lp + ".mha", out);
    layers[l].cross.collect_params(lp + ".cross", out);
    layers[l].ffn.collect_params(lp + ".ffn", out);
  }
  out.push_back({prefix + ".cls_w", &cls_w});
  out.push_back({prefix + ".cls_b", &cls_b});
  out.push_back({prefix + ".box_w1", &box_w1});
  out.push_back({prefix + ".box_b1", &box_b1});
  out.push_back({prefix + ".box_w2", &box_w2});
  out.push_back({prefix + ".box_b2", &box_b2});
  out.push_back({prefix + ".dn_class_embed", &dn_class_embed});
  out.push_back({prefix + ".dn_box_w", &dn_box_w});
  out.push_back({prefix + ".dn_box_b", &dn_box_b});
}

ObjectQuerySet DetectionHead::build_queries(const BevGrid& grid, const std::vector<Box3D>& gt_for_dn,
                                            Rng* rng) const {
  const int n_dn = (rng && !gt_for_dn.empty()) ? cfg.dn_groups * static_cast<int>(gt_for_dn.size()) : 0;
  const int n = cfg.n_query + n_dn;
  ObjectQuerySet qs;
  qs.n_base = cfg.n_query;
  qs.content = Tensor(std::vector<int>{n, cfg.embed_dim});
  qs.refs = Tensor(std::vector<int>{n, 2});
  qs.tags.assign(n, {});
  qs.dn_enc = Tensor(std::vector<int>{n_dn, 10});

  for (int i = 0; i < cfg.n_query; ++i) {
    std::copy(query_embed.row(i), query_embed.row(i) + cfg.embed_dim, qs.content.row(i));
    qs.refs.at2(i, 0) = query_ref.at2(i, 0);
    qs.refs.at2(i, 1) = query_ref.at2(i, 1);
  }

  int row = cfg.n_query;
  for (int g = 0; g < (n_dn ? cfg.dn_groups : 0); ++g) {
    for (std::size_t j = 0; j < gt_for_dn.size(); ++j, ++row) {
      Box3D noised = gt_for_dn[j];
      noised.x += rng->uniform(-0.5, 0.5) * noised.l * cfg.dn_noise_scale;
      noised.y += rng->uniform(-0.5, 0.5) * noised.w * cfg.dn_noise_scale;
      const auto enc = encode_box(noised);
      const int dn_row = row - cfg.n_query;
      std::copy(enc.begin(), enc.end(), qs.dn_enc.row(dn_row));
      double* content = qs.content.row(row);
      const double* ce = dn_class_embed.row(noised.cls);
      for (int d = 0; d < cfg.embed_dim; ++d) {
        double acc = ce[d] + dn_box_b.data[d];
        for (int e = 0; e < 10; ++e) acc += enc[e] * dn_box_w.at2(e, d);
        content[d] = acc;
      }
      double u, v;
      grid.cell_coords(noised.x, noised.y, u, v);
      qs.refs.at2(row, 0) = u;
      qs.refs.at2(row, 1) = v;
      qs.tags[row] = {g, static_cast<int>(j), noised.cls};
    }
  }
  return qs;
}

std::vector<HeadPrediction> DetectionHead::forward(const FeatureMap2D& bev, const ObjectQuerySet& qs,
                                                   Cache* cache) const {
  const int n = qs.n_total(), c = cfg.embed_dim;
  check_shape(bev.channels() == c, "head: bev channels != embed_dim");
  const std::vector<char> mask = qs.attn_mask();

  Tensor x = qs.content;
  Tensor refs = qs.refs;
  if (cache) {
    cache->qs = qs;
    cache->mask = mask;
    cache->layers.assign(layers.size(), Cache::Layer{});
  }

  std::vector<HeadPrediction> preds;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const DecoderLayer& layer = layers[l];
    Cache::Layer* lc = cache ? &cache->layers[l] : nullptr;

    {  // masked self-attention among queries
      LayerNormCache lnc;
      Tensor z = layer_norm_forward(x, layer.sa_ln_g, layer.sa_ln_b, cfg.ln_eps, &lnc);
      Mha::Cache mc;
      Tensor o = layer.self_attn.forward(z, mask, lc ? &mc : nullptr);
      for (std::size_t i = 0; i < x.numel(); ++i) x.data[i] += o.data[i];
      if (lc) {
        lc->sa_ln = std::move(lnc);
        lc->sa_z = std::move(z);
        lc->mha = std::move(mc);
      }
    }

    {  // deformable cross-attention at the current references
      LayerNormCache lnc;
      Tensor z = layer_norm_forward(x, layer.cross.ln_g, layer.cross.ln_b, cfg.ln_eps, &lnc);
      ReferencePoints rp(n, 1, 2);
      for (int i = 0; i < n; ++i) {
        rp.at(i, 0)[0] = refs.at2(i, 0);
        rp.at(i, 0)[1] = refs.at2(i, 1);
      }
      DeformAttnCache ac;
      Tensor o = deform_attn_2d(z, rp, bev, layer.cross.attn, lc ? &ac : nullptr);
      for (std::size_t i = 0; i < x.numel(); ++i) x.data[i] += o.data[i];
      if (lc) {
        lc->ca_ln = std::move(lnc);
        lc->ca_z = std::move(z);
        lc->ca_attn = std::move(ac);
        lc->ca_refs = std::move(rp);
      }
    }

    x = layer.ffn.forward(x, cfg.ln_eps, lc ? &lc->ffn : nullptr);

    HeadPrediction p;
    p.cls_logits = linear_forward(x, cls_w, cls_b);
    Tensor pre = linear_forward(x, box_w1, box_b1);
    Tensor act = gelu_forward(pre);
    p.box_raw = linear_forward(act, box_w2, box_b2);
    p.refs_after = Tensor(std::vector<int>{n, 2});
    for (int i = 0; i < n; ++i) {
      p.refs_after.at2(i, 0) = refs.at2(i, 0) + p.box_raw.at2(i, 0);
      p.refs_after.at2(i, 1) = refs.at2(i, 1) + p.box_raw.at2(i, 1);
    }
    refs = p.refs_after;
    if (lc) {
      lc->x_out = x;
      lc->box_pre = std::move(pre);
      lc->box_act = std::move(act);
    }
    preds.push_back(std::move(p));
  }
  return preds;
}

void DetectionHead::backward(const FeatureMap2D& bev, const Cache& cache, const HeadGrads& grads,
                             FeatureMap2D* dbev) {
  const int n = cache.qs.n_total(), c = cfg.embed_dim;
  Tensor dx(std::vector<int>{n, c});
  Tensor dref_chain(std::vector<int>{n, 2});

  for (int l = static_cast<int>(layers.size()) - 1; l >= 0; --l) {
    DecoderLayer& layer = layers[l];
    const Cache::Layer& lc = cache.layers[l];

    // prediction heads of this layer
    Tensor dref_total = grads.drefs_after[l];
    for (std::size_t i = 0; i < dref_total.numel(); ++i) dref_total.data[i] += dref_chain.data[i];
    Tensor dbox = grads.dbox[l];
    for (int i = 0; i < n; ++i) {
      dbox.at2(i, 0) += dref_total.at2(i, 0);
      dbox.at2(i, 1) += dref_total.at2(i, 1);
    }
    Tensor dact = linear_backward(const_cast<Tensor&>(cache.layers[l].box_act), box_w2, box_b2, dbox);
    Tensor dpre = gelu_backward(lc.box_pre, dact);
    Tensor dxh = linear_backward(const_cast<Tensor&>(lc.x_out), box_w1, box_b1, dpre);
    Tensor dxc = linear_backward(const_cast<Tensor&>(lc.x_out), cls_w, cls_b, grads.dcls[l]);
    for (std::size_t i = 0; i < dx.numel(); ++i) dx.data[i] += dxh.data[i] + dxc.data[i];

    dx = layer.ffn.backward(lc.ffn, dx);

    {  // cross-attention backward; reference gradient joins the chain
      std::vector<double> drp;
      Tensor dz = deform_attn_2d_backward(const_cast<Tensor&>(lc.ca_z), lc.ca_refs, bev, layer.cross.attn,
                                          lc.ca_attn, dx, dbev ? dbev->t.data.data() : nullptr, &drp);
      for (int i = 0; i < n; ++i) {
        dref_total.at2(i, 0) += drp[2 * static_cast<std::size_t>(i)];
        dref_total.at2(i, 1) += drp[2 * static_cast<std::size_t>(i) + 1];
      }
      Tensor dres = layer_norm_backward(lc.ca_ln, layer.cross.ln_g, layer.cross.ln_b, dz);
      for (std::size_t i = 0; i < dx.numel(); ++i) dx.data[i] += dres.data[i];
    }

    {  // self-attention backward
      Tensor dz = layer.self_attn.backward(lc.mha, cache.mask, dx);
      Tensor dres = layer_norm_backward(lc.sa_ln, layer.sa_ln_g, layer.sa_ln_b, dz);
      for (std::size_t i = 0; i < dx.numel(); ++i) dx.data[i] += dres.data[i];
    }

    dref_chain = std::move(dref_total);
  }

  // route stream/reference gradients into the learnable query parameters
  query_embed.ensure_grad();
  query_ref.ensure_grad();
  dn_class_embed.ensure_grad();
  dn_box_w.ensure_grad();
  dn_box_b.ensure_grad();
  for (int i = 0; i < n; ++i) {
    if (i < cache.qs.n_base) {
      for (int d = 0; d < c; ++d) query_embed.grad[static_cast<std::size_t>(i) * c + d] += dx.at2(i, d);
      query_ref.grad[2 * static_cast<std::size_t>(i)] += dref_chain.at2(i, 0);
      query_ref.grad[2 * static_cast<std::size_t>(i) + 1] += dref_chain.at2(i, 1);
    } else {
      const int dn_row = i - cache.qs.n_base;
      const int cls = cache.qs.tags[i].src_cls;
      const double* enc = cache.qs.dn_enc.row(dn_row);
      // content = dn_class_embed[cls] + enc * dn_box_w + dn_box_b
      for (int d = 0; d < c; ++d) {
        const double g = dx.at2(i, d);
        dn_class_embed.grad[static_cast<std::size_t>(cls) * c + d] += g;
        dn_box_b.grad[d] += g;
        for (int e = 0; e < 10; ++e) dn_box_w.grad[static_cast<std::size_t>(e) * c + d] += enc[e] * g;
      }
    }
  }
}

std::vector<int> match_predictions(const HeadPrediction& final_layer, int n_base, const std::vector<Box3D>& gt,
                                   const BevGrid& grid, const LossWeights& w) {
  if (gt.empty()) return std::vector<int>(n_base, -1);
  std::vector<std::array<double, 10>> gt_enc;
  gt_enc.reserve(gt.size());
  for (const Box3D& b : gt) gt_enc.push_back(encode_box(b));

  std::vector<std::vector<double>> cost(n_base, std::vector<double>(gt.size(), 0.0));
  for (int i = 0; i < n_base; ++i) {
    std::array<double, 10> enc;
    enc[0] = grid.x_min + (final_layer.refs_after.at2(i, 0) + 0.5) * grid.cell_size;
    enc[1] = grid.y_min + (final_layer.refs_after.at2(i, 1) + 0.5) * grid.cell_size;
    for (int e = 2; e < 10; ++e) enc[e] = final_layer.box_raw.at2(i, e);
    for (std::size_t j = 0; j < gt.size(); ++j) {
      const double neg_log_p = softplus(-final_layer.cls_logits.at2(i, gt[j].cls));
      double l1 = 0.0;
      const int dims = gt[j].has_velocity ? 10 : 8;
      for (int e = 0; e < dims; ++e) l1 += std::fabs(enc[e] - gt_enc[j][e]);
      cost[i][j] = w.w_cls * neg_log_p + w.w_reg * l1;
    }
  }
  return hungarian_match(cost);
}

LossBreakdown detection_loss(const std::vector<HeadPrediction>& preds, const ObjectQuerySet& qs,
                             const std::vector<Box3D>& gt, const std::vector<int>& assignment,
                             const BevGrid& grid, const LossWeights& w, HeadGrads* grads) {
  const int n = qs.n_total();
  const int n_base = qs.n_base;
  const int n_cls = preds.empty() ? 0 : preds[0].cls_logits.shape[1];
  const int n_dn = n - n_base;
  const double pos_norm = std::max<double>(1.0, static_cast<double>(gt.size()));
  const double dn_norm = std::max(1, n_dn);

  std::vector<std::array<double, 10>> gt_enc;
  for (const Box3D& b : gt) gt_enc.push_back(encode_box(b));

  LossBreakdown out;
  if (grads) {
    grads->dcls.clear();
    grads->dbox.clear();
    grads->drefs_after.clear();
  }

  for (std::size_t l = 0; l < preds.size(); ++l) {
    const HeadPrediction& p = preds[l];
    Tensor dcls(std::vector<int>{n, n_cls});
    Tensor dbox(std::vector<int>{n, 10});
    Tensor drefs(std::vector<int>{n, 2});

    for (int i = 0; i < n; ++i) {
      const bool is_dn = i >= n_base;
      int target_gt = -1;
      if (is_dn)
        target_gt = qs.tags[i].src_gt;
      else if (assignment[i] >= 0)
        target_gt = assignment[i];

      const double cls_scale = (is_dn ? w.loss_cls / dn_norm : w.loss_cls / pos_norm);
      for (int k = 0; k < n_cls; ++k) {
        const bool positive = target_gt >= 0 && gt[target_gt].cls == k;
        double dz = 0.0;
        const double loss = sigmoid_focal(p.cls_logits.at2(i, k), positive, w.focal_alpha, w.focal_gamma, &dz);
        if (is_dn)
          out.dn_cls += loss / dn_norm;
        else
          out.cls += loss / pos_norm;
        dcls.at2(i, k) = cls_scale * dz;
      }

      if (target_gt >= 0) {
        const Box3D& g = gt[target_gt];
        std::array<double, 10> enc;
        enc[0] = grid.x_min + (p.refs_after.at2(i, 0) + 0.5) * grid.cell_size;
        enc[1] = grid.y_min + (p.refs_after.at2(i, 1) + 0.5) * grid.cell_size;
        for (int e = 2; e < 10; ++e) enc[e] = p.box_raw.at2(i, e);
        const int dims = g.has_velocity ? 10 : 8;
        const double box_scale = (is_dn ? w.loss_l1 / dn_norm : w.loss_l1 / pos_norm);
        for (int e = 0; e < dims; ++e) {
          const double diff = enc[e] - gt_enc[target_gt][e];
          const double al1 = std::fabs(diff);
          if (is_dn)
            out.dn_box += al1 / dn_norm;
          else
            out.box += al1 / pos_norm;
          const double sgn = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
          if (e == 0)
            drefs.at2(i, 0) += box_scale * sgn * grid.cell_size;
          else if (e == 1)
            drefs.at2(i, 1) += box_scale * sgn * grid.cell_size;
          else
            dbox.at2(i, e) += box_scale * sgn;
        }
        if (!is_dn) ++out.n_matched;
      }
    }
    if (grads) {
      grads->dcls.push_back(std::move(dcls));
      grads->dbox.push_back(std::move(dbox));
      grads->drefs_after.push_back(std::move(drefs));
    }
  }
  out.n_matched = preds.empty() ? 0 : out.n_matched / static_cast<int>(preds.size());
  out.total = w.loss_cls * out.cls + w.loss_l1 * out.box + w.loss_cls * out.dn_cls + w.loss_l1 * out.dn_box;
  return out;
}

std::vector<Box3D> decode_predictions(const HeadPrediction& pred, int n_base, const BevGrid& grid,
                                      double score_threshold) {
  std::vector<Box3D> boxes;
  const int n_cls = pred.cls_logits.shape[1];
  for (int i = 0; i < n_base; ++i) {
    int best = 0;
    double best_logit = pred.cls_logits.at2(i, 0);
    for (int k = 1; k < n_cls; ++k)
      if (pred.cls_logits.at2(i, k) > best_logit) {
        best_logit = pred.cls_logits.at2(i, k);
        best = k;
      }
    const double score = 1.0 / (1.0 + std::exp(-best_logit));
    if (score < score_threshold) continue;
    std::array<double, 10> enc;
    enc[0] = grid.x_min + (pred.refs_after.at2(i, 0) + 0.5) * grid.cell_size;
    enc[1] = grid.y_min + (pred.refs_after.at2(i, 1) + 0.5) * grid.cell_size;
    for (int e = 2; e < 10; ++e) enc[e] = pred.box_raw.at2(i, e);
    boxes.push_back(decode_box(enc, best, score));
  }
  return boxes;
}

}  // namespace bevfuse
