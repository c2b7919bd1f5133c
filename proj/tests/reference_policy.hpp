#pragma once

// Slow scalar forward pass used as an oracle for the vectorized policy.
// Reads parameters element by element; shares no code with src/policy.cpp.

#include <cmath>
#include <vector>

#include "hapo/policy.hpp"

namespace hapo::testing {

inline std::vector<double> reference_log_probs(const PolicyParams& p, const std::vector<double>& obs,
                                               const std::vector<int>& tokens) {
  const auto& s = p.shape();
  const auto W1 = p.w1();
  const auto B1 = p.b1();
  const auto W2 = p.w2();
  const auto B2 = p.b2();
  const auto EMB = p.embed();

  std::vector<double> h1(s.hidden), h2(s.hidden);
  for (int j = 0; j < s.hidden; ++j) {
    double acc = B1(j);
    for (int k = 0; k < s.obs_dim; ++k) acc += W1(j, k) * obs[k];
    h1[j] = std::tanh(acc);
  }
  for (int j = 0; j < s.hidden; ++j) {
    double acc = B2(j);
    for (int k = 0; k < s.hidden; ++k) acc += W2(j, k) * h1[k];
    h2[j] = std::tanh(acc);
  }

  std::vector<double> out;
  for (int d = 0; d < s.dims; ++d) {
    const auto W = p.head_w(d);
    const auto b = p.head_b(d);
    std::vector<double> input(h2);
    for (int e = 0; e < s.embed; ++e) input.push_back(d == 0 ? 0.0 : EMB(e, tokens[d - 1]));
    std::vector<double> logits(s.bins);
    double mx = -1e300;
    for (int k = 0; k < s.bins; ++k) {
      double acc = b(k);
      for (int j = 0; j < s.hidden + s.embed; ++j) acc += W(k, j) * input[j];
      logits[k] = acc;
      mx = std::max(mx, acc);
    }
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    out.push_back(logits[tokens[d]] - mx - std::log(z));
  }
  return out;
}

}  // namespace hapo::testing
