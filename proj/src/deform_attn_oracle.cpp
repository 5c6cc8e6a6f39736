// Brute-force deformable attention, written from the definition with plain
// nested loops. Kept independent of the main kernel on purpose: no shared
// sampling or projection helpers, so the two paths can check each other.

#include <cmath>
#include <vector>

#include "bevfuse/deform_attn.hpp"

namespace bevfuse {

namespace {

double fetch2(const FeatureMap2D& m, int c, int y, int x) {
  if (y < 0 || y >= m.height() || x < 0 || x >= m.width()) return 0.0;
  return m.at(c, y, x);
}

double fetch3(const FeatureGrid3D& g, int c, int z, int y, int x) {
  if (z < 0 || z >= g.depth() || y < 0 || y >= g.height() || x < 0 || x >= g.width()) return 0.0;
  return g.at(c, z, y, x);
}

double interp2(const FeatureMap2D& m, int c, double u, double v) {
  const int y0 = static_cast<int>(std::floor(u));
  const int x0 = static_cast<int>(std::floor(v));
  const double fy = u - y0, fx = v - x0;
  return fetch2(m, c, y0, x0) * (1 - fy) * (1 - fx) + fetch2(m, c, y0, x0 + 1) * (1 - fy) * fx +
         fetch2(m, c, y0 + 1, x0) * fy * (1 - fx) + fetch2(m, c, y0 + 1, x0 + 1) * fy * fx;
}

double interp3(const FeatureGrid3D& g, int c, double u, double v, double w) {
  const int z0 = static_cast<int>(std::floor(u));
  const int y0 = static_cast<int>(std::floor(v));
  const int x0 = static_cast<int>(std::floor(w));
  const double fz = u - z0, fy = v - y0, fx = w - x0;
  double acc = 0.0;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b)
      for (int d = 0; d < 2; ++d) {
        const double wt = (a ? fz : 1 - fz) * (b ? fy : 1 - fy) * (d ? fx : 1 - fx);
        acc += wt * fetch3(g, c, z0 + a, y0 + b, x0 + d);
      }
  return acc;
}

Tensor oracle(const Tensor& q, const ReferencePoints& refs, const FeatureMap2D* map, const FeatureGrid3D* grid,
              const DeformAttnParams& p) {
  const int n = q.shape[0];
  const int c = p.embed_dim;
  const int heads = p.heads;
  const int k = p.points;
  const int dim = p.dim;
  const int dh = c / heads;
  Tensor out(std::vector<int>{n, c});

  for (int qi = 0; qi < n; ++qi) {
    // offset and weight logits, one entry at a time
    std::vector<double> off(heads * k * dim, 0.0);
    for (int j = 0; j < heads * k * dim; ++j)
      for (int i = 0; i < c; ++i) off[j] += q.at2(qi, i) * p.offset_proj.at2(i, j);
    std::vector<double> wl(heads * k, 0.0);
    for (int j = 0; j < heads * k; ++j)
      for (int i = 0; i < c; ++i) wl[j] += q.at2(qi, i) * p.weight_proj.at2(i, j);

    std::vector<double> attn(heads * k, 0.0);
    for (int h = 0; h < heads; ++h) {
      double mx = wl[h * k];
      for (int ki = 1; ki < k; ++ki) mx = std::max(mx, wl[h * k + ki]);
      double den = 0.0;
      for (int ki = 0; ki < k; ++ki) den += std::exp(wl[h * k + ki] - mx);
      for (int ki = 0; ki < k; ++ki) attn[h * k + ki] = std::exp(wl[h * k + ki] - mx) / den;
    }

    std::vector<double> mixed(c, 0.0);
    for (int ri = 0; ri < refs.n_ref; ++ri) {
      if (!refs.is_valid(qi, ri)) continue;
      const double* rp = refs.at(qi, ri);
      for (int h = 0; h < heads; ++h) {
        for (int ki = 0; ki < k; ++ki) {
          const int j = h * k + ki;
          double loc[3] = {0, 0, 0};
          for (int d = 0; d < dim; ++d) loc[d] = rp[d] + off[j * dim + d];
          std::vector<double> sample(c, 0.0);
          for (int i = 0; i < c; ++i)
            sample[i] = map ? interp2(*map, i, loc[0], loc[1]) : interp3(*grid, i, loc[0], loc[1], loc[2]);
          for (int d = 0; d < dh; ++d) {
            double val = 0.0;
            for (int i = 0; i < c; ++i) val += sample[i] * p.value_proj.at2(i, h * dh + d);
            mixed[h * dh + d] += attn[j] * val;
          }
        }
      }
    }
    for (int j = 0; j < c; ++j) {
      double acc = 0.0;
      for (int i = 0; i < c; ++i) acc += mixed[i] * p.output_proj.at2(i, j);
      out.at2(qi, j) = acc;
    }
  }
  return out;
}

}  // namespace

Tensor deform_attn_oracle_2d(const Tensor& q, const ReferencePoints& refs, const FeatureMap2D& map,
                             const DeformAttnParams& p) {
  return oracle(q, refs, &map, nullptr, p);
}

Tensor deform_attn_oracle_3d(const Tensor& q, const ReferencePoints& refs, const FeatureGrid3D& grid,
                             const DeformAttnParams& p) {
  return oracle(q, refs, nullptr, &grid, p);
}

}  // namespace bevfuse
