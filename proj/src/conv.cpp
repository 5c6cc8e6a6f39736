#include "bevfuse/conv.hpp"

#include <cmath>
#include <stdexcept>

#include "bevfuse/ops.hpp"

namespace bevfuse {

namespace {
int out_dim(int in, int stride) { return (in + stride - 1) / stride; }
}  // namespace

Conv2D Conv2D::make(int in_c, int out_c, int k, int stride) {
  if (k % 2 == 0 || k < 1 || stride < 1) throw std::invalid_argument("conv2d: k must be odd, stride >= 1");
  Conv2D c;
  c.in_c = in_c;
  c.out_c = out_c;
  c.k = k;
  c.stride = stride;
  c.w = Tensor::zeros({out_c, in_c, k, k});
  c.b = Tensor::zeros({out_c});
  return c;
}

void Conv2D::init(Rng& rng) {
  const double s = std::sqrt(2.0 / (in_c * k * k));
  for (double& v : w.data) v = s * rng.normal();
  std::fill(b.data.begin(), b.data.end(), 0.0);
}

void Conv2D::init_identity() {
  if (out_c != in_c) throw std::invalid_argument("conv2d: identity init needs out_c == in_c");
  std::fill(w.data.begin(), w.data.end(), 0.0);
  std::fill(b.data.begin(), b.data.end(), 0.0);
  const int mid = k / 2;
  for (int c = 0; c < out_c; ++c)
    w.data[((static_cast<std::size_t>(c) * in_c + c) * k + mid) * k + mid] = 1.0;
}

void Conv2D::collect_params(const std::string& prefix, ParamRefs& out) {
  out.push_back({prefix + ".w", &w});
  out.push_back({prefix + ".b", &b});
}

FeatureMap2D Conv2D::forward(const FeatureMap2D& x) const {
  check_shape(x.channels() == in_c, "conv2d: channel mismatch");
  const int h = x.height(), wd = x.width();
  const int oh = out_dim(h, stride), ow = out_dim(wd, stride);
  const int pad = k / 2;
  FeatureMap2D y(out_c, oh, ow);
#pragma omp parallel for schedule(static)
  for (int o = 0; o < out_c; ++o) {
    for (int yy = 0; yy < oh; ++yy) {
      for (int xx = 0; xx < ow; ++xx) {
        double acc = b.data[o];
        for (int i = 0; i < in_c; ++i) {
          for (int dy = 0; dy < k; ++dy) {
            const int sy = yy * stride + dy - pad;
            if (sy < 0 || sy >= h) continue;
            for (int dx = 0; dx < k; ++dx) {
              const int sx = xx * stride + dx - pad;
              if (sx < 0 || sx >= wd) continue;
              acc += w.data[((static_cast<std::size_t>(o) * in_c + i) * k + dy) * k + dx] * x.at(i, sy, sx);
            }
          }
        }
        y.at(o, yy, xx) = acc;
      }
    }
  }
  return y;
}

void Conv2D::backward(const FeatureMap2D& x, const FeatureMap2D& dy, FeatureMap2D* dx) {
  const int h = x.height(), wd = x.width();
  const int oh = dy.height(), ow = dy.width();
  const int pad = k / 2;
  w.ensure_grad();
  b.ensure_grad();
#pragma omp parallel for schedule(static)
  for (int o = 0; o < out_c; ++o) {
    for (int yy = 0; yy < oh; ++yy) {
      for (int xx = 0; xx < ow; ++xx) {
        const double g = dy.at(o, yy, xx);
        if (g == 0.0) continue;
        b.grad[o] += g;
        for (int i = 0; i < in_c; ++i) {
          for (int dyk = 0; dyk < k; ++dyk) {
            const int sy = yy * stride + dyk - pad;
            if (sy < 0 || sy >= h) continue;
            for (int dxk = 0; dxk < k; ++dxk) {
              const int sx = xx * stride + dxk - pad;
              if (sx < 0 || sx >= wd) continue;
              w.grad[((static_cast<std::size_t>(o) * in_c + i) * k + dyk) * k + dxk] += x.at(i, sy, sx) * g;
            }
          }
        }
      }
    }
  }
  if (!dx) return;
#pragma omp parallel for schedule(static)
  for (int i = 0; i < in_c; ++i) {
    for (int o = 0; o < out_c; ++o) {
      for (int yy = 0; yy < oh; ++yy) {
        for (int xx = 0; xx < ow; ++xx) {
          const double g = dy.at(o, yy, xx);
          if (g == 0.0) continue;
          for (int dyk = 0; dyk < k; ++dyk) {
            const int sy = yy * stride + dyk - pad;
            if (sy < 0 || sy >= h) continue;
            for (int dxk = 0; dxk < k; ++dxk) {
              const int sx = xx * stride + dxk - pad;
              if (sx < 0 || sx >= wd) continue;
              dx->at(i, sy, sx) += w.data[((static_cast<std::size_t>(o) * in_c + i) * k + dyk) * k + dxk] * g;
            }
          }
        }
      }
    }
  }
}

Conv3D Conv3D::make(int in_c, int out_c, int k, int stride) {
  if (k % 2 == 0 || k < 1 || stride < 1) throw std::invalid_argument("conv3d: k must be odd, stride >= 1");
  Conv3D c;
  c.in_c = in_c;
  c.out_c = out_c;
  c.k = k;
  c.stride = stride;
  c.w = Tensor::zeros({out_c, in_c, k, k, k});
  c.b = Tensor::zeros({out_c});
  return c;
}

void Conv3D::init(Rng& rng) {
  const double s = std::sqrt(2.0 / (in_c * k * k * k));
  for (double& v : w.data) v = s * rng.normal();
  std::fill(b.data.begin(), b.data.end(), 0.0);
}

void Conv3D::collect_params(const std::string& prefix, ParamRefs& out) {
  out.push_back({prefix + ".w", &w});
  out.push_back({prefix + ".b", &b});
}

FeatureGrid3D Conv3D::forward(const FeatureGrid3D& x) const {
  check_shape(x.channels() == in_c, "conv3d: channel mismatch");
  const int nz = x.depth(), ny = x.height(), nx = x.width();
  const int oz = out_dim(nz, stride), oy = out_dim(ny, stride), ox = out_dim(nx, stride);
  const int pad = k / 2;
  FeatureGrid3D y(out_c, oz, oy, ox);
#pragma omp parallel for schedule(static)
  for (int o = 0; o < out_c; ++o) {
    for (int zz = 0; zz < oz; ++zz) {
      for (int yy = 0; yy < oy; ++yy) {
        for (int xx = 0; xx < ox; ++xx) {
          double acc = b.data[o];
          for (int i = 0; i < in_c; ++i) {
            for (int dz = 0; dz < k; ++dz) {
              const int sz = zz * stride + dz - pad;
              if (sz < 0 || sz >= nz) continue;
              for (int dy = 0; dy < k; ++dy) {
                const int sy = yy * stride + dy - pad;
                if (sy < 0 || sy >= ny) continue;
                for (int dx = 0; dx < k; ++dx) {
                  const int sx = xx * stride + dx - pad;
                  if (sx < 0 || sx >= nx) continue;
                  acc += w.data[(((static_cast<std::size_t>(o) * in_c + i) * k + dz) * k + dy) * k + dx] *
                         x.at(i, sz, sy, sx);
                }
              }
            }
          }
          y.at(o, zz, yy, xx) = acc;
        }
      }
    }
  }
  return y;
}

void Conv3D::backward(const FeatureGrid3D& x, const FeatureGrid3D& dy, FeatureGrid3D* dx) {
  const int nz = x.depth(), ny = x.height(), nx = x.width();
  const int oz = dy.depth(), oy = dy.height(), ox = dy.width();
  const int pad = k / 2;
  w.ensure_grad();
  b.ensure_grad();
#pragma omp parallel for schedule(static)
  for (int o = 0; o < out_c; ++o) {
    for (int zz = 0; zz < oz; ++zz) {
      for (int yy = 0; yy < oy; ++yy) {
        for (int xx = 0; xx < ox; ++xx) {
          const double g = dy.at(o, zz, yy, xx);
          if (g == 0.0) continue;
          b.grad[o] += g;
          for (int i = 0; i < in_c; ++i) {
            for (int dz = 0; dz < k; ++dz) {
              const int sz = zz * stride + dz - pad;
              if (sz < 0 || sz >= nz) continue;
              for (int dyk = 0; dyk < k; ++dyk) {
                const int sy = yy * stride + dyk - pad;
                if (sy < 0 || sy >= ny) continue;
                for (int dxk = 0; dxk < k; ++dxk) {
                  const int sx = xx * stride + dxk - pad;
                  if (sx < 0 || sx >= nx) continue;
                  w.grad[(((static_cast<std::size_t>(o) * in_c + i) * k + dz) * k + dyk) * k + dxk] +=
                      x.at(i, sz, sy, sx) * g;
                }
              }
            }
          }
        }
      }
    }
  }
  if (!dx) return;
#pragma omp parallel for schedule(static)
  for (int i = 0; i < in_c; ++i) {
    for (int o = 0; o < out_c; ++o) {
      for (int zz = 0; zz < oz; ++zz) {
        for (int yy = 0; yy < oy; ++yy) {
          for (int xx = 0; xx < ox; ++xx) {
            const double g = dy.at(o, zz, yy, xx);
            if (g == 0.0) continue;
            for (int dz = 0; dz < k; ++dz) {
              const int sz = zz * stride + dz - pad;
              if (sz < 0 || sz >= nz) continue;
              for (int dyk = 0; dyk < k; ++dyk) {
                const int sy = yy * stride + dyk - pad;
                if (sy < 0 || sy >= ny) continue;
                for (int dxk = 0; dxk < k; ++dxk) {
                  const int sx = xx * stride + dxk - pad;
                  if (sx < 0 || sx >= nx) continue;
                  dx->at(i, sz, sy, sx) +=
                      w.data[(((static_cast<std::size_t>(o) * in_c + i) * k + dz) * k + dyk) * k + dxk] * g;
                }
              }
            }
          }
        }
      }
    }
  }
}

Tensor gelu_forward(const Tensor& x) {
  Tensor y(x.shape);
  for (std::size_t i = 0; i < x.numel(); ++i) y.data[i] = gelu(x.data[i]);
  return y;
}

Tensor gelu_backward(const Tensor& x, const Tensor& dy) {
  check_shape(x.same_shape(dy), "gelu backward: shape mismatch");
  Tensor dx(x.shape);
  for (std::size_t i = 0; i < x.numel(); ++i) dx.data[i] = gelu_grad(x.data[i]) * dy.data[i];
  return dx;
}

}  // namespace bevfuse
