#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

namespace bevfuse {

std::size_t shape_numel(const std::vector<int>& dims);

// Dense row-major tensor, double precision. Activations normally leave
// `grad` empty; parameters and checked inputs allocate it via ensure_grad().
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty or same length as data

  Tensor() = default;
  explicit Tensor(std::vector<int> dims);

  static Tensor zeros(std::vector<int> dims) { return Tensor(std::move(dims)); }
  static Tensor full(std::vector<int> dims, double v);
  static Tensor identity(int n);
  static Tensor from(std::vector<int> dims, std::vector<double> values);

  std::size_t numel() const { return data.size(); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

  double& at2(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  double at2(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  double* row(int i) { return data.data() + static_cast<std::size_t>(i) * shape[shape.size() - 1]; }
  const double* row(int i) const { return data.data() + static_cast<std::size_t>(i) * shape[shape.size() - 1]; }
};

void check_shape(bool ok, const std::string& what);

// Channel-major 2D feature container, shape [C,H,W].
struct FeatureMap2D {
  Tensor t;

  FeatureMap2D() = default;
  FeatureMap2D(int c, int h, int w) : t(Tensor::zeros({c, h, w})) {}
  explicit FeatureMap2D(Tensor tensor);

  int channels() const { return t.shape[0]; }
  int height() const { return t.shape[1]; }
  int width() const { return t.shape[2]; }

  std::size_t plane() const { return static_cast<std::size_t>(height()) * width(); }
  double& at(int c, int y, int x) { return t.data[c * plane() + static_cast<std::size_t>(y) * width() + x]; }
  double at(int c, int y, int x) const { return t.data[c * plane() + static_cast<std::size_t>(y) * width() + x]; }
};

// Channel-major 3D feature container, shape [C,Z,H,W].
struct FeatureGrid3D {
  Tensor t;

  FeatureGrid3D() = default;
  FeatureGrid3D(int c, int z, int h, int w) : t(Tensor::zeros({c, z, h, w})) {}
  explicit FeatureGrid3D(Tensor tensor);

  int channels() const { return t.shape[0]; }
  int depth() const { return t.shape[1]; }
  int height() const { return t.shape[2]; }
  int width() const { return t.shape[3]; }

  std::size_t volume() const { return static_cast<std::size_t>(depth()) * height() * width(); }
  std::size_t plane() const { return static_cast<std::size_t>(height()) * width(); }
  double& at(int c, int z, int y, int x) {
    return t.data[c * volume() + z * plane() + static_cast<std::size_t>(y) * width() + x];
  }
  double at(int c, int z, int y, int x) const {
    return t.data[c * volume() + z * plane() + static_cast<std::size_t>(y) * width() + x];
  }
};

}  // namespace bevfuse
