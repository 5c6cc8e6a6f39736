#include "bevfuse/tensor.hpp"

#include <stdexcept>

namespace bevfuse {

std::size_t shape_numel(const std::vector<int>& dims) {
  std::size_t n = 1;
  for (int d : dims) {
    if (d < 0) throw std::invalid_argument("tensor: negative dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(std::vector<int> dims) : shape(std::move(dims)), data(shape_numel(shape), 0.0) {}

Tensor Tensor::full(std::vector<int> dims, double v) {
  Tensor t(std::move(dims));
  std::fill(t.data.begin(), t.data.end(), v);
  return t;
}

Tensor Tensor::identity(int n) {
  Tensor t(std::vector<int>{n, n});
  for (int i = 0; i < n; ++i) t.at2(i, i) = 1.0;
  return t;
}

Tensor Tensor::from(std::vector<int> dims, std::vector<double> values) {
  Tensor t;
  t.shape = std::move(dims);
  if (values.size() != shape_numel(t.shape)) throw std::invalid_argument("tensor: value count does not match shape");
  t.data = std::move(values);
  return t;
}

void check_shape(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("shape mismatch: " + what);
}

FeatureMap2D::FeatureMap2D(Tensor tensor) : t(std::move(tensor)) {
  check_shape(t.ndim() == 3, "FeatureMap2D expects [C,H,W]");
}

FeatureGrid3D::FeatureGrid3D(Tensor tensor) : t(std::move(tensor)) {
  check_shape(t.ndim() == 4, "FeatureGrid3D expects [C,Z,H,W]");
}

}  // namespace bevfuse
