#include "bevfuse/hungarian.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace bevfuse {

std::vector<int> hungarian_match(const std::vector<std::vector<double>>& cost, double* total) {
  const int rows = static_cast<int>(cost.size());
  const int cols = rows ? static_cast<int>(cost[0].size()) : 0;
  if (rows == 0 || cols == 0) {
    if (total) *total = 0.0;
    return std::vector<int>(rows, -1);
  }
  for (const auto& r : cost) {
    if (static_cast<int>(r.size()) != cols) throw std::invalid_argument("hungarian: ragged cost matrix");
    for (double v : r)
      if (!std::isfinite(v)) throw std::invalid_argument("hungarian: non-finite cost");
  }

  const int n = std::max(rows, cols);
  auto at = [&](int i, int j) -> double { return (i < rows && j < cols) ? cost[i][j] : 0.0; };

  // shortest augmenting path with potentials; 1-based internal arrays
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = 0;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }

  std::vector<int> match(rows, -1);
  double sum = 0.0;
  for (int j = 1; j <= n; ++j) {
    const int i = p[j];
    if (i >= 1 && i <= rows && j <= cols) {
      match[i - 1] = j - 1;
      sum += cost[i - 1][j - 1];
    }
  }
  if (total) *total = sum;
  return match;
}

}  // namespace bevfuse
