#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bevfuse/tensor.hpp"

namespace bevfuse {

struct ParamRef {
  std::string name;
  Tensor* t = nullptr;
};

using ParamRefs = std::vector<ParamRef>;

struct GradCheckReport {
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;  // flat index within worst_param
  std::string worst_param;
  double step = 0.0;
  std::size_t coords_checked = 0;
  std::size_t coords_total = 0;  // subsampling shows up as checked < total
};

// Central-difference check of analytic gradients. `loss(true)` must run
// forward + backward and accumulate gradients into each param's grad buffer
// (which this function zeroes first); `loss(false)` must be forward-only.
// Coordinates beyond max_coords_per_param are subsampled deterministically.
GradCheckReport finite_difference_check(const std::function<double(bool with_grad)>& loss,
                                        const ParamRefs& params, double step = 1e-5,
                                        std::size_t max_coords_per_param = static_cast<std::size_t>(-1),
                                        std::uint64_t subsample_seed = 1);

}  // namespace bevfuse
