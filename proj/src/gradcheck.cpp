#include "bevfuse/gradcheck.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "bevfuse/rng.hpp"

namespace bevfuse {

GradCheckReport finite_difference_check(const std::function<double(bool)>& loss, const ParamRefs& params,
                                        double step, std::size_t max_coords_per_param,
                                        std::uint64_t subsample_seed) {
  if (step <= 0.0) throw std::invalid_argument("finite_difference_check: step must be > 0");

  for (const ParamRef& p : params) {
    p.t->ensure_grad();
    p.t->zero_grad();
  }
  const double f0 = loss(true);
  if (!std::isfinite(f0)) throw std::runtime_error("finite_difference_check: non-finite loss");

  GradCheckReport rep;
  rep.step = step;
  Rng rng(subsample_seed);
  for (const ParamRef& p : params) {
    Tensor& t = *p.t;
    const std::size_t n = t.numel();
    rep.coords_total += n;

    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (n > max_coords_per_param) {
      // Fisher-Yates prefix shuffle, keep the first max_coords.
      for (std::size_t i = 0; i < max_coords_per_param; ++i) {
        std::size_t j = i + rng.index(n - i);
        std::swap(coords[i], coords[j]);
      }
      coords.resize(max_coords_per_param);
    }

    for (std::size_t idx : coords) {
      const double saved = t.data[idx];
      t.data[idx] = saved + step;
      const double fp = loss(false);
      t.data[idx] = saved - step;
      const double fm = loss(false);
      t.data[idx] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw std::runtime_error("finite_difference_check: non-finite loss while perturbing " + p.name);
      }
      const double numeric = (fp - fm) / (2.0 * step);
      const double analytic = t.grad[idx];
      const double abs_err = std::fabs(analytic - numeric);
      const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-3});
      const double rel_err = abs_err / denom;
      rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
      if (rel_err > rep.max_rel_err) {
        rep.max_rel_err = rel_err;
        rep.worst_index = idx;
        rep.worst_param = p.name;
      }
      ++rep.coords_checked;
    }
  }
  return rep;
}

}  // namespace bevfuse
