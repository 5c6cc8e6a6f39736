#pragma once

#include <vector>

namespace bevfuse {

// Minimum-cost one-to-one assignment (Jonker-Volgenant style, O(n^3)).
// cost[i][j] is row i -> column j; rectangular inputs are padded to square
// with zeros internally. Returns per-row column index, -1 when a row is
// matched to padding. total, when given, receives the summed real cost.
std::vector<int> hungarian_match(const std::vector<std::vector<double>>& cost, double* total = nullptr);

}  // namespace bevfuse
