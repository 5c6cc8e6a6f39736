#include "bevfuse/deform_attn.hpp"

#include <cmath>
#include <stdexcept>

namespace bevfuse {

DeformAttnParams DeformAttnParams::make(int heads, int points, int embed_dim, int dim) {
  if (heads < 1 || points < 1) throw std::invalid_argument("deform_attn: heads and points must be >= 1");
  if (dim != 2 && dim != 3) throw std::invalid_argument("deform_attn: dim must be 2 or 3");
  if (embed_dim % heads != 0) throw std::invalid_argument("deform_attn: embed_dim must be divisible by heads");
  DeformAttnParams p;
  p.heads = heads;
  p.points = points;
  p.embed_dim = embed_dim;
  p.dim = dim;
  p.offset_proj = Tensor::zeros({embed_dim, heads * points * dim});
  p.weight_proj = Tensor::zeros({embed_dim, heads * points});
  p.value_proj = Tensor::identity(embed_dim);
  p.output_proj = Tensor::identity(embed_dim);
  return p;
}

void DeformAttnParams::init(Rng& rng, double scale) {
  const double s = scale > 0.0 ? scale : std::sqrt(1.0 / embed_dim);
  for (double& v : value_proj.data) v = s * rng.normal();
  for (double& v : output_proj.data) v = s * rng.normal();
  std::fill(offset_proj.data.begin(), offset_proj.data.end(), 0.0);
  std::fill(weight_proj.data.begin(), weight_proj.data.end(), 0.0);
}

void DeformAttnParams::collect_params(const std::string& prefix, ParamRefs& out) {
  out.push_back({prefix + ".offset_proj", &offset_proj});
  out.push_back({prefix + ".weight_proj", &weight_proj});
  out.push_back({prefix + ".value_proj", &value_proj});
  out.push_back({prefix + ".output_proj", &output_proj});
}

namespace {

struct AnyFeature {
  const FeatureMap2D* map = nullptr;
  const FeatureGrid3D* grid = nullptr;

  int channels() const { return map ? map->channels() : grid->channels(); }
  void sample(const double* loc, double* out) const {
    if (map)
      bilinear_sample_2d(*map, loc[0], loc[1], out);
    else
      trilinear_sample_3d(*grid, loc[0], loc[1], loc[2], out);
  }
  void sample_backward(const double* loc, const double* dout, double* dfeat, double* dloc) const {
    if (map)
      bilinear_sample_2d_backward(*map, loc[0], loc[1], dout, dfeat, dloc ? &dloc[0] : nullptr,
                                  dloc ? &dloc[1] : nullptr);
    else
      trilinear_sample_3d_backward(*grid, loc[0], loc[1], loc[2], dout, dfeat, dloc ? &dloc[0] : nullptr,
                                   dloc ? &dloc[1] : nullptr, dloc ? &dloc[2] : nullptr);
  }
};

void check_inputs(const Tensor& q, const ReferencePoints& refs, const DeformAttnParams& p) {
  check_shape(q.ndim() == 2, "deform_attn: queries must be [N,C]");
  check_shape(q.shape[1] == p.embed_dim, "deform_attn: query dim != embed_dim");
  check_shape(refs.n_query == q.shape[0], "deform_attn: reference count != query count");
  if (refs.dim != p.dim) throw std::invalid_argument("deform_attn: reference dim != params dim");
}

// Softmax over each head's K weight logits; written into attn.
void head_softmax(const double* logits, double* attn, int heads, int k) {
  for (int h = 0; h < heads; ++h) {
    const double* in = logits + h * k;
    double* out = attn + h * k;
    double m = in[0];
    for (int i = 1; i < k; ++i) m = std::max(m, in[i]);
    double sum = 0.0;
    for (int i = 0; i < k; ++i) {
      out[i] = std::exp(in[i] - m);
      sum += out[i];
    }
    for (int i = 0; i < k; ++i) out[i] /= sum;
  }
}

Tensor deform_attn_forward(const Tensor& q, const ReferencePoints& refs, const AnyFeature& feat,
                           const DeformAttnParams& p, DeformAttnCache* cache) {
  check_inputs(q, refs, p);
  const int n = q.shape[0], c = p.embed_dim, heads = p.heads, k = p.points, dim = p.dim;
  const int hk = heads * k, dh = c / heads;
  const int r = refs.n_ref;

  Tensor out(std::vector<int>{n, c});
  if (cache) {
    cache->off_logits = Tensor(std::vector<int>{n, hk * dim});
    cache->attn = Tensor(std::vector<int>{n, hk});
    cache->samples = Tensor(std::vector<int>{n, r * hk * c});
  }

#pragma omp parallel
  {
    std::vector<double> off(static_cast<std::size_t>(hk) * dim);
    std::vector<double> attn(hk);
    std::vector<double> sample(c);
    std::vector<double> vproj(c);
    std::vector<double> u(c);
#pragma omp for schedule(static)
    for (int qi = 0; qi < n; ++qi) {
      const double* qr = q.row(qi);
      // offset and weight logits
      for (int j = 0; j < hk * dim; ++j) off[j] = 0.0;
      for (int j = 0; j < hk; ++j) attn[j] = 0.0;
      for (int i = 0; i < c; ++i) {
        const double qv = qr[i];
        if (qv == 0.0) continue;
        const double* orow = p.offset_proj.data.data() + static_cast<std::size_t>(i) * hk * dim;
        for (int j = 0; j < hk * dim; ++j) off[j] += qv * orow[j];
        const double* wrow = p.weight_proj.data.data() + static_cast<std::size_t>(i) * hk;
        for (int j = 0; j < hk; ++j) attn[j] += qv * wrow[j];
      }
      if (cache) {
        std::copy(off.begin(), off.end(), cache->off_logits.row(qi));
      }
      head_softmax(attn.data(), attn.data(), heads, k);
      if (cache) std::copy(attn.begin(), attn.end(), cache->attn.row(qi));

      for (int i = 0; i < c; ++i) u[i] = 0.0;
      for (int ri = 0; ri < r; ++ri) {
        if (!refs.is_valid(qi, ri)) continue;
        const double* ref = refs.at(qi, ri);
        for (int h = 0; h < heads; ++h) {
          for (int ki = 0; ki < k; ++ki) {
            const int j = h * k + ki;
            double loc[3];
            for (int d = 0; d < dim; ++d) loc[d] = ref[d] + off[static_cast<std::size_t>(j) * dim + d];
            feat.sample(loc, sample.data());
            if (cache) {
              double* dst = cache->samples.row(qi) + (static_cast<std::size_t>(ri) * hk + j) * c;
              std::copy(sample.begin(), sample.end(), dst);
            }
            // value projection, head slice only
            const double a = attn[j];
            for (int d = 0; d < dh; ++d) {
              const int col = h * dh + d;
              double acc = 0.0;
              for (int i = 0; i < c; ++i) acc += sample[i] * p.value_proj.data[static_cast<std::size_t>(i) * c + col];
              u[col] += a * acc;
            }
          }
        }
      }
      double* orow = out.row(qi);
      for (int j = 0; j < c; ++j) {
        double acc = 0.0;
        for (int i = 0; i < c; ++i) acc += u[i] * p.output_proj.data[static_cast<std::size_t>(i) * c + j];
        orow[j] = acc;
      }
    }
  }
  return out;
}

Tensor deform_attn_backward(Tensor& q, const ReferencePoints& refs, const AnyFeature& feat,
                            DeformAttnParams& p, const DeformAttnCache& cache, const Tensor& dout,
                            double* dfeat, std::vector<double>* drefs) {
  check_inputs(q, refs, p);
  check_shape(dout.same_shape(q), "deform_attn backward: dout shape mismatch");
  const int n = q.shape[0], c = p.embed_dim, heads = p.heads, k = p.points, dim = p.dim;
  const int hk = heads * k, dh = c / heads;
  const int r = refs.n_ref;

  p.offset_proj.ensure_grad();
  p.weight_proj.ensure_grad();
  p.value_proj.ensure_grad();
  p.output_proj.ensure_grad();
  if (drefs) drefs->assign(static_cast<std::size_t>(n) * r * dim, 0.0);

  Tensor dq(std::vector<int>{n, c});
  std::vector<double> u(c), du(c), dattn(hk), dlogit(hk), doff(static_cast<std::size_t>(hk) * dim);
  std::vector<double> vh(dh), dv_full(c), dsample(c);
  for (int qi = 0; qi < n; ++qi) {
    const double* qr = q.row(qi);
    const double* attn = cache.attn.row(qi);
    const double* off = cache.off_logits.row(qi);
    const double* dout_r = dout.row(qi);

    // rebuild u = sum of per-head weighted value slices (needed for dW_out)
    std::fill(u.begin(), u.end(), 0.0);
    std::fill(du.begin(), du.end(), 0.0);
    std::fill(dattn.begin(), dattn.end(), 0.0);
    std::fill(doff.begin(), doff.end(), 0.0);
    for (int ri = 0; ri < r; ++ri) {
      if (!refs.is_valid(qi, ri)) continue;
      for (int j = 0; j < hk; ++j) {
        const int h = j / k;
        const double* s = cache.samples.row(qi) + (static_cast<std::size_t>(ri) * hk + j) * c;
        for (int d = 0; d < dh; ++d) {
          const int col = h * dh + d;
          double acc = 0.0;
          for (int i = 0; i < c; ++i) acc += s[i] * p.value_proj.data[static_cast<std::size_t>(i) * c + col];
          u[col] += attn[j] * acc;
        }
      }
    }

    // output projection
    for (int i = 0; i < c; ++i) {
      double acc = 0.0;
      const double* wrow = p.output_proj.data.data() + static_cast<std::size_t>(i) * c;
      double* gwrow = p.output_proj.grad.data() + static_cast<std::size_t>(i) * c;
      for (int j = 0; j < c; ++j) {
        acc += dout_r[j] * wrow[j];
        gwrow[j] += u[i] * dout_r[j];
      }
      du[i] = acc;
    }

    // per-reference, per-point paths
    for (int ri = 0; ri < r; ++ri) {
      if (!refs.is_valid(qi, ri)) continue;
      const double* ref = refs.at(qi, ri);
      for (int j = 0; j < hk; ++j) {
        const int h = j / k;
        const double a = attn[j];
        const double* s = cache.samples.row(qi) + (static_cast<std::size_t>(ri) * hk + j) * c;
        // v_h = value slice; dattn += du_h . v_h
        double ddot = 0.0;
        for (int d = 0; d < dh; ++d) {
          const int col = h * dh + d;
          double acc = 0.0;
          for (int i = 0; i < c; ++i) acc += s[i] * p.value_proj.data[static_cast<std::size_t>(i) * c + col];
          vh[d] = acc;
          ddot += du[col] * acc;
        }
        dattn[j] += ddot;
        // dv (full C vector, zero outside head slice) -> dsample, dW_value
        std::fill(dv_full.begin(), dv_full.end(), 0.0);
        for (int d = 0; d < dh; ++d) dv_full[h * dh + d] = a * du[h * dh + d];
        for (int i = 0; i < c; ++i) {
          double acc = 0.0;
          double* gvrow = p.value_proj.grad.data() + static_cast<std::size_t>(i) * c;
          const double* vrow = p.value_proj.data.data() + static_cast<std::size_t>(i) * c;
          const double si = s[i];
          for (int d = 0; d < dh; ++d) {
            const int col = h * dh + d;
            acc += dv_full[col] * vrow[col];
            gvrow[col] += si * dv_full[col];
          }
          dsample[i] = acc;
        }
        double loc[3];
        double dloc[3] = {0.0, 0.0, 0.0};
        for (int d = 0; d < dim; ++d) loc[d] = ref[d] + off[static_cast<std::size_t>(j) * dim + d];
        feat.sample_backward(loc, dsample.data(), dfeat, dloc);
        for (int d = 0; d < dim; ++d) {
          doff[static_cast<std::size_t>(j) * dim + d] += dloc[d];
          if (drefs) (*drefs)[(static_cast<std::size_t>(qi) * r + ri) * dim + d] += dloc[d];
        }
      }
    }

    // softmax backward per head
    for (int h = 0; h < heads; ++h) {
      double dot = 0.0;
      for (int ki = 0; ki < k; ++ki) dot += attn[h * k + ki] * dattn[h * k + ki];
      for (int ki = 0; ki < k; ++ki) {
        const int j = h * k + ki;
        dlogit[j] = attn[j] * (dattn[j] - dot);
      }
    }

    // project logit/offset grads back to the query and weights
    double* dqr = dq.row(qi);
    for (int i = 0; i < c; ++i) {
      const double qv = qr[i];
      double acc = 0.0;
      const double* orow = p.offset_proj.data.data() + static_cast<std::size_t>(i) * hk * dim;
      double* gorow = p.offset_proj.grad.data() + static_cast<std::size_t>(i) * hk * dim;
      for (int j = 0; j < hk * dim; ++j) {
        acc += doff[j] * orow[j];
        gorow[j] += qv * doff[j];
      }
      const double* wrow = p.weight_proj.data.data() + static_cast<std::size_t>(i) * hk;
      double* gwrow = p.weight_proj.grad.data() + static_cast<std::size_t>(i) * hk;
      for (int j = 0; j < hk; ++j) {
        acc += dlogit[j] * wrow[j];
        gwrow[j] += qv * dlogit[j];
      }
      dqr[i] = acc;
    }
  }
  if (!q.grad.empty()) {
    for (std::size_t i = 0; i < dq.numel(); ++i) q.grad[i] += dq.data[i];
  }
  return dq;
}

}  // namespace

Tensor deform_attn_2d(const Tensor& q, const ReferencePoints& refs, const FeatureMap2D& map,
                      const DeformAttnParams& p, DeformAttnCache* cache) {
  if (p.dim != 2) throw std::invalid_argument("deform_attn_2d: params dim != 2");
  AnyFeature f;
  f.map = &map;
  return deform_attn_forward(q, refs, f, p, cache);
}

Tensor deform_attn_3d(const Tensor& q, const ReferencePoints& refs, const FeatureGrid3D& grid,
                      const DeformAttnParams& p, DeformAttnCache* cache) {
  if (p.dim != 3) throw std::invalid_argument("deform_attn_3d: params dim != 3");
  AnyFeature f;
  f.grid = &grid;
  return deform_attn_forward(q, refs, f, p, cache);
}

Tensor deform_attn_2d_backward(Tensor& q, const ReferencePoints& refs, const FeatureMap2D& map,
                               DeformAttnParams& p, const DeformAttnCache& cache, const Tensor& dout,
                               double* dmap, std::vector<double>* drefs) {
  AnyFeature f;
  f.map = &map;
  return deform_attn_backward(q, refs, f, p, cache, dout, dmap, drefs);
}

Tensor deform_attn_3d_backward(Tensor& q, const ReferencePoints& refs, const FeatureGrid3D& grid,
                               DeformAttnParams& p, const DeformAttnCache& cache, const Tensor& dout,
                               double* dmap, std::vector<double>* drefs) {
  AnyFeature f;
  f.grid = &grid;
  return deform_attn_backward(q, refs, f, p, cache, dout, dmap, drefs);
}

}  // namespace bevfuse
