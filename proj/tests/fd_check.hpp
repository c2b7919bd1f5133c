#pragma once

// Central finite-difference oracle for gradients over the flat parameter vector.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "hapo/policy.hpp"
#include "hapo/rng.hpp"

namespace hapo::testing {

struct FdResult {
  double max_rel_error = 0.0;
  int checked = 0;
};

/// Picks `per_block` coordinates from each tensor of the layout plus `extra`
/// uniformly over the whole vector.
inline std::vector<Eigen::Index> pick_coordinates(const ParamLayout& layout, const PolicyShape& s, int per_block,
                                                  int extra, Rng& rng) {
  std::vector<std::pair<Eigen::Index, Eigen::Index>> blocks{
      {layout.w1, static_cast<Eigen::Index>(s.hidden) * s.obs_dim},
      {layout.b1, s.hidden},
      {layout.w2, static_cast<Eigen::Index>(s.hidden) * s.hidden},
      {layout.b2, s.hidden},
      {layout.embed, static_cast<Eigen::Index>(s.embed) * s.bins}};
  for (int d = 0; d < s.dims; ++d) {
    blocks.push_back({layout.head_w[d], static_cast<Eigen::Index>(s.bins) * (s.hidden + s.embed)});
    blocks.push_back({layout.head_b[d], s.bins});
  }
  std::vector<Eigen::Index> out;
  for (const auto& [off, len] : blocks)
    for (int i = 0; i < per_block; ++i) out.push_back(off + static_cast<Eigen::Index>(rng.uniform_index(len)));
  for (int i = 0; i < extra; ++i) out.push_back(static_cast<Eigen::Index>(rng.uniform_index(layout.total)));
  return out;
}

/// Compares analytic gradient entries with (f(x+e) - f(x-e)) / 2e.
/// Relative error uses max(|analytic|, |numeric|, floor) as denominator.
inline FdResult finite_difference_check(PolicyParams params, const Gradient& analytic,
                                        const std::function<double(const PolicyParams&)>& f,
                                        const std::vector<Eigen::Index>& coords, double eps = 1e-4,
                                        double floor = 1e-8) {
  FdResult r;
  for (auto k : coords) {
    const double x0 = params.flat()[k];
    params.flat()[k] = x0 + eps;
    const double fp = f(params);
    params.flat()[k] = x0 - eps;
    const double fm = f(params);
    params.flat()[k] = x0;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double a = analytic.flat()[k];
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    r.max_rel_error = std::max(r.max_rel_error, std::abs(a - numeric) / denom);
    ++r.checked;
  }
  return r;
}

}  // namespace hapo::testing
