#include "bevfuse/ops.hpp"

#include <cmath>
#include <stdexcept>

namespace bevfuse {

namespace {

// Rows of x when the trailing dim is stripped.
std::size_t leading_rows(const Tensor& x) {
  if (x.ndim() < 1) throw std::invalid_argument("op needs at least 1 dimension");
  return x.numel() / static_cast<std::size_t>(x.shape.back());
}

}  // namespace

Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
  check_shape(w.ndim() == 2, "linear: w must be [Din,Dout]");
  const int din = w.shape[0], dout = w.shape[1];
  check_shape(x.shape.back() == din, "linear: x trailing dim != Din");
  check_shape(b.ndim() == 1 && b.shape[0] == dout, "linear: b must be [Dout]");

  const std::size_t rows = leading_rows(x);
  std::vector<int> out_shape = x.shape;
  out_shape.back() = dout;
  Tensor y(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data.data() + r * din;
    double* yr = y.data.data() + r * dout;
    for (int j = 0; j < dout; ++j) yr[j] = b.data[j];
    for (int i = 0; i < din; ++i) {
      const double xi = xr[i];
      const double* wrow = w.data.data() + static_cast<std::size_t>(i) * dout;
      for (int j = 0; j < dout; ++j) yr[j] += xi * wrow[j];
    }
  }
  return y;
}

Tensor linear_backward(Tensor& x, Tensor& w, Tensor& b, const Tensor& dy) {
  const int din = w.shape[0], dout = w.shape[1];
  check_shape(dy.shape.back() == dout, "linear backward: dy trailing dim != Dout");
  const std::size_t rows = leading_rows(x);
  check_shape(leading_rows(dy) == rows, "linear backward: row count mismatch");

  w.ensure_grad();
  b.ensure_grad();
  Tensor dx(x.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data.data() + r * din;
    const double* dyr = dy.data.data() + r * dout;
    double* dxr = dx.data.data() + r * din;
    for (int j = 0; j < dout; ++j) b.grad[j] += dyr[j];
    for (int i = 0; i < din; ++i) {
      const double* wrow = w.data.data() + static_cast<std::size_t>(i) * dout;
      double* gwrow = w.grad.data() + static_cast<std::size_t>(i) * dout;
      double acc = 0.0;
      const double xi = xr[i];
      for (int j = 0; j < dout; ++j) {
        acc += dyr[j] * wrow[j];
        gwrow[j] += xi * dyr[j];
      }
      dxr[i] = acc;
    }
  }
  if (!x.grad.empty()) {
    for (std::size_t i = 0; i < dx.numel(); ++i) x.grad[i] += dx.data[i];
  }
  return dx;
}

Tensor softmax_forward(const Tensor& x) {
  const int k = x.shape.back();
  check_shape(k >= 1, "softmax: trailing dim must be >= 1");
  const std::size_t rows = leading_rows(x);
  Tensor y(x.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data.data() + r * k;
    double* yr = y.data.data() + r * k;
    double m = xr[0];
    for (int i = 1; i < k; ++i) m = std::max(m, xr[i]);
    double sum = 0.0;
    for (int i = 0; i < k; ++i) {
      yr[i] = std::exp(xr[i] - m);
      sum += yr[i];
    }
    for (int i = 0; i < k; ++i) yr[i] /= sum;
  }
  return y;
}

Tensor softmax_backward(const Tensor& y, const Tensor& dy) {
  check_shape(y.same_shape(dy), "softmax backward: shape mismatch");
  const int k = y.shape.back();
  const std::size_t rows = leading_rows(y);
  Tensor dx(y.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* yr = y.data.data() + r * k;
    const double* dyr = dy.data.data() + r * k;
    double* dxr = dx.data.data() + r * k;
    double dot = 0.0;
    for (int i = 0; i < k; ++i) dot += yr[i] * dyr[i];
    for (int i = 0; i < k; ++i) dxr[i] = yr[i] * (dyr[i] - dot);
  }
  return dx;
}

Tensor layer_norm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                          LayerNormCache* cache) {
  const int c = x.shape.back();
  check_shape(gamma.numel() == static_cast<std::size_t>(c) && beta.numel() == static_cast<std::size_t>(c),
              "layer_norm: gamma/beta must be [C]");
  const std::size_t rows = leading_rows(x);
  Tensor y(x.shape);
  if (cache) {
    cache->xhat = Tensor(x.shape);
    cache->inv_std.assign(rows, 0.0);
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data.data() + r * c;
    double* yr = y.data.data() + r * c;
    double mean = 0.0;
    for (int i = 0; i < c; ++i) mean += xr[i];
    mean /= c;
    double var = 0.0;
    for (int i = 0; i < c; ++i) {
      const double d = xr[i] - mean;
      var += d * d;
    }
    var /= c;
    const double inv_std = 1.0 / std::sqrt(var + eps);
    for (int i = 0; i < c; ++i) {
      const double xh = (xr[i] - mean) * inv_std;
      if (cache) cache->xhat.data[r * c + i] = xh;
      yr[i] = gamma.data[i] * xh + beta.data[i];
    }
    if (cache) cache->inv_std[r] = inv_std;
  }
  return y;
}

Tensor layer_norm_backward(const LayerNormCache& cache, Tensor& gamma, Tensor& beta, const Tensor& dy) {
  const Tensor& xhat = cache.xhat;
  check_shape(xhat.same_shape(dy), "layer_norm backward: shape mismatch");
  const int c = xhat.shape.back();
  const std::size_t rows = leading_rows(xhat);
  gamma.ensure_grad();
  beta.ensure_grad();
  Tensor dx(xhat.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xh = xhat.data.data() + r * c;
    const double* dyr = dy.data.data() + r * c;
    double* dxr = dx.data.data() + r * c;
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (int i = 0; i < c; ++i) {
      const double dxh = dyr[i] * gamma.data[i];
      sum_dxhat += dxh;
      sum_dxhat_xhat += dxh * xh[i];
      gamma.grad[i] += dyr[i] * xh[i];
      beta.grad[i] += dyr[i];
    }
    const double inv_c = 1.0 / c;
    for (int i = 0; i < c; ++i) {
      const double dxh = dyr[i] * gamma.data[i];
      dxr[i] = (dxh - sum_dxhat * inv_c - xh[i] * sum_dxhat_xhat * inv_c) * cache.inv_std[r];
    }
  }
  return dx;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

void bilinear_sample_2d(const FeatureMap2D& map, double u, double v, double* out) {
  const int c = map.channels(), h = map.height(), w = map.width();
  for (int i = 0; i < c; ++i) out[i] = 0.0;
  const double u0f = std::floor(u), v0f = std::floor(v);
  const int u0 = static_cast<int>(u0f), v0 = static_cast<int>(v0f);
  const double fu = u - u0f, fv = v - v0f;
  const double wu[2] = {1.0 - fu, fu};
  const double wv[2] = {1.0 - fv, fv};
  const std::size_t plane = map.plane();
  for (int du = 0; du < 2; ++du) {
    const int y = u0 + du;
    if (y < 0 || y >= h) continue;
    for (int dv = 0; dv < 2; ++dv) {
      const int x = v0 + dv;
      if (x < 0 || x >= w) continue;
      const double wt = wu[du] * wv[dv];
      if (wt == 0.0) continue;
      const double* base = map.t.data.data() + static_cast<std::size_t>(y) * w + x;
      for (int i = 0; i < c; ++i) out[i] += wt * base[i * plane];
    }
  }
}

void bilinear_sample_2d_backward(const FeatureMap2D& map, double u, double v, const double* dout,
                                 double* dmap, double* du_out, double* dv_out) {
  const int c = map.channels(), h = map.height(), w = map.width();
  const double u0f = std::floor(u), v0f = std::floor(v);
  const int u0 = static_cast<int>(u0f), v0 = static_cast<int>(v0f);
  const double fu = u - u0f, fv = v - v0f;
  const double wu[2] = {1.0 - fu, fu};
  const double wv[2] = {1.0 - fv, fv};
  const double su[2] = {-1.0, 1.0};  // d wu / d u
  const std::size_t plane = map.plane();
  double du_acc = 0.0, dv_acc = 0.0;
  for (int du = 0; du < 2; ++du) {
    const int y = u0 + du;
    if (y < 0 || y >= h) continue;
    for (int dv = 0; dv < 2; ++dv) {
      const int x = v0 + dv;
      if (x < 0 || x >= w) continue;
      const std::size_t off = static_cast<std::size_t>(y) * w + x;
      double dot = 0.0;
      const double* base = map.t.data.data() + off;
      for (int i = 0; i < c; ++i) dot += dout[i] * base[i * plane];
      du_acc += su[du] * wv[dv] * dot;
      dv_acc += wu[du] * su[dv] * dot;
      if (dmap) {
        const double wt = wu[du] * wv[dv];
        double* gbase = dmap + off;
        for (int i = 0; i < c; ++i) gbase[i * plane] += wt * dout[i];
      }
    }
  }
  if (du_out) *du_out += du_acc;
  if (dv_out) *dv_out += dv_acc;
}

Tensor bilinear_sample_2d(const FeatureMap2D& map, double u, double v) {
  Tensor out(std::vector<int>{map.channels()});
  bilinear_sample_2d(map, u, v, out.data.data());
  return out;
}

void trilinear_sample_3d(const FeatureGrid3D& grid, double u, double v, double w, double* out) {
  const int c = grid.channels(), nz = grid.depth(), ny = grid.height(), nx = grid.width();
  for (int i = 0; i < c; ++i) out[i] = 0.0;
  const double u0f = std::floor(u), v0f = std::floor(v), w0f = std::floor(w);
  const int u0 = static_cast<int>(u0f), v0 = static_cast<int>(v0f), w0 = static_cast<int>(w0f);
  const double wu[2] = {1.0 - (u - u0f), u - u0f};
  const double wv[2] = {1.0 - (v - v0f), v - v0f};
  const double ww[2] = {1.0 - (w - w0f), w - w0f};
  const std::size_t vol = grid.volume(), plane = grid.plane();
  for (int a = 0; a < 2; ++a) {
    const int z = u0 + a;
    if (z < 0 || z >= nz) continue;
    for (int b = 0; b < 2; ++b) {
      const int y = v0 + b;
      if (y < 0 || y >= ny) continue;
      for (int d = 0; d < 2; ++d) {
        const int x = w0 + d;
        if (x < 0 || x >= nx) continue;
        const double wt = wu[a] * wv[b] * ww[d];
        if (wt == 0.0) continue;
        const double* base = grid.t.data.data() + z * plane + static_cast<std::size_t>(y) * nx + x;
        for (int i = 0; i < c; ++i) out[i] += wt * base[i * vol];
      }
    }
  }
}

void trilinear_sample_3d_backward(const FeatureGrid3D& grid, double u, double v, double w, const double* dout,
                                  double* dgrid, double* du_out, double* dv_out, double* dw_out) {
  const int c = grid.channels(), nz = grid.depth(), ny = grid.height(), nx = grid.width();
  const double u0f = std::floor(u), v0f = std::floor(v), w0f = std::floor(w);
  const int u0 = static_cast<int>(u0f), v0 = static_cast<int>(v0f), w0 = static_cast<int>(w0f);
  const double wu[2] = {1.0 - (u - u0f), u - u0f};
  const double wv[2] = {1.0 - (v - v0f), v - v0f};
  const double ww[2] = {1.0 - (w - w0f), w - w0f};
  const double s[2] = {-1.0, 1.0};
  const std::size_t vol = grid.volume(), plane = grid.plane();
  double du_acc = 0.0, dv_acc = 0.0, dw_acc = 0.0;
  for (int a = 0; a < 2; ++a) {
    const int z = u0 + a;
    if (z < 0 || z >= nz) continue;
    for (int b = 0; b < 2; ++b) {
      const int y = v0 + b;
      if (y < 0 || y >= ny) continue;
      for (int d = 0; d < 2; ++d) {
        const int x = w0 + d;
        if (x < 0 || x >= nx) continue;
        const std::size_t off = z * plane + static_cast<std::size_t>(y) * nx + x;
        double dot = 0.0;
        const double* base = grid.t.data.data() + off;
        for (int i = 0; i < c; ++i) dot += dout[i] * base[i * vol];
        du_acc += s[a] * wv[b] * ww[d] * dot;
        dv_acc += wu[a] * s[b] * ww[d] * dot;
        dw_acc += wu[a] * wv[b] * s[d] * dot;
        if (dgrid) {
          const double wt = wu[a] * wv[b] * ww[d];
          double* gbase = dgrid + off;
          for (int i = 0; i < c; ++i) gbase[i * vol] += wt * dout[i];
        }
      }
    }
  }
  if (du_out) *du_out += du_acc;
  if (dv_out) *dv_out += dv_acc;
  if (dw_out) *dw_out += dw_acc;
}

Tensor trilinear_sample_3d(const FeatureGrid3D& grid, double u, double v, double w) {
  Tensor out(std::vector<int>{grid.channels()});
  trilinear_sample_3d(grid, u, v, w, out.data.data());
  return out;
}

}  // namespace bevfuse
