#pragma once

#include <string>

#include "bevfuse/gradcheck.hpp"
#include "bevfuse/tensor.hpp"

namespace bevfuse {

// Weight checkpoint container. Layout (little-endian throughout):
//   magic "FBWT1"
//   u32 tensor count
//   per tensor: u32 name length, name bytes, u32 ndim, u32 dims[ndim],
//               f64 data (row-major)
void save_checkpoint(const std::string& path, const ParamRefs& params);

// Loads by name into the given tensors; throws if a name is missing or a
// shape disagrees.
void load_checkpoint(const std::string& path, const ParamRefs& params);

}  // namespace bevfuse
