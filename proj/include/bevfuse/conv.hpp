#pragma once

#include "bevfuse/gradcheck.hpp"
#include "bevfuse/rng.hpp"
#include "bevfuse/tensor.hpp"

namespace bevfuse {

// Direct-loop 2D convolution, zero padding k/2, output ceil(in/stride).
struct Conv2D {
  int in_c = 0, out_c = 0, k = 3, stride = 1;
  Tensor w;  // [out_c, in_c, k, k]
  Tensor b;  // [out_c]

  static Conv2D make(int in_c, int out_c, int k, int stride);
  void init(Rng& rng);
  void init_identity();  // requires out_c == in_c and odd k
  void collect_params(const std::string& prefix, ParamRefs& out);

  FeatureMap2D forward(const FeatureMap2D& x) const;
  // Accumulates into w.grad / b.grad; dx may be null.
  void backward(const FeatureMap2D& x, const FeatureMap2D& dy, FeatureMap2D* dx);
};

struct Conv3D {
  int in_c = 0, out_c = 0, k = 3, stride = 1;
  Tensor w;  // [out_c, in_c, k, k, k]
  Tensor b;  // [out_c]

  static Conv3D make(int in_c, int out_c, int k, int stride);
  void init(Rng& rng);
  void collect_params(const std::string& prefix, ParamRefs& out);

  FeatureGrid3D forward(const FeatureGrid3D& x) const;
  void backward(const FeatureGrid3D& x, const FeatureGrid3D& dy, FeatureGrid3D* dx);
};

// Elementwise GELU with stored pre-activations.
Tensor gelu_forward(const Tensor& x);
Tensor gelu_backward(const Tensor& x, const Tensor& dy);

}  // namespace bevfuse
