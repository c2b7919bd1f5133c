#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hapo/env.hpp"
#include "hapo/kv.hpp"

namespace hapo {

/// Uniform per-dimension binning of continuous actions.
struct TokenizerConfig {
  int bins = 256;
  double low = -1.0;
  double high = 1.0;
  int dims = kActionDims;
  int gripper_dim = kGripperDim;

  /// Throws std::invalid_argument when bins < 2, low >= high or gripper_dim is out of range.
  void validate() const;
  KeyValues to_key_values() const;
  static TokenizerConfig from_key_values(const KeyValues& kv);
  friend bool operator==(const TokenizerConfig&, const TokenizerConfig&) = default;
};

struct ActionTokens {
  std::vector<int> tokens;

  std::size_t size() const { return tokens.size(); }
  int operator[](std::size_t i) const { return tokens[i]; }
  int& operator[](std::size_t i) { return tokens[i]; }
  friend bool operator==(const ActionTokens&, const ActionTokens&) = default;
};

/// token = clamp(floor((a - low) / (high - low) * B), 0, B - 1).
/// Throws std::domain_error on non-finite components.
ActionTokens encode(std::span<const double> action, const TokenizerConfig& cfg);
ActionTokens encode(const ContinuousAction& action, const TokenizerConfig& cfg);

/// Bin centers. Throws std::out_of_range for tokens outside [0, B).
std::vector<double> decode_values(const ActionTokens& tokens, const TokenizerConfig& cfg);
ContinuousAction decode(const ActionTokens& tokens, const TokenizerConfig& cfg);

}  // namespace hapo
