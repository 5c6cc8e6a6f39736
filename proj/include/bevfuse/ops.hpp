#pragma once

#include "bevfuse/tensor.hpp"

namespace bevfuse {

// y = x.w + b. x is [N,Din] (leading dims flattened into N), w is [Din,Dout],
// b is [Dout]. Backward accumulates into w.grad / b.grad / x.grad (when
// allocated) and returns dx.
Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor linear_backward(Tensor& x, Tensor& w, Tensor& b, const Tensor& dy);

// Softmax over the trailing dimension, max-subtracted.
Tensor softmax_forward(const Tensor& x);
Tensor softmax_backward(const Tensor& y, const Tensor& dy);

struct LayerNormCache {
  Tensor xhat;                  // normalized input
  std::vector<double> inv_std;  // one per slice
};

// Normalizes each trailing-C slice to zero mean / unit variance, then applies
// gamma/beta. Cache is required for the backward pass.
Tensor layer_norm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                          LayerNormCache* cache = nullptr);
Tensor layer_norm_backward(const LayerNormCache& cache, Tensor& gamma, Tensor& beta, const Tensor& dy);

double gelu(double x);
double gelu_grad(double x);

// Bilinear sample of map [C,H,W] at continuous cell coordinates (u along H,
// v along W); coordinate u == i lands exactly on cell i. Out-of-range corners
// contribute zero. Raw-pointer kernels below are what the attention code uses.
void bilinear_sample_2d(const FeatureMap2D& map, double u, double v, double* out);
// dmap may be null; du/dv may be null. dmap points at a C*H*W accumulation buffer.
void bilinear_sample_2d_backward(const FeatureMap2D& map, double u, double v, const double* dout,
                                 double* dmap, double* du, double* dv);

Tensor bilinear_sample_2d(const FeatureMap2D& map, double u, double v);

// Trilinear analogue over [C,Z,H,W] at (u along Z, v along H, w along W).
void trilinear_sample_3d(const FeatureGrid3D& grid, double u, double v, double w, double* out);
void trilinear_sample_3d_backward(const FeatureGrid3D& grid, double u, double v, double w, const double* dout,
                                  double* dgrid, double* du, double* dv, double* dw);

Tensor trilinear_sample_3d(const FeatureGrid3D& grid, double u, double v, double w);

}  // namespace bevfuse
