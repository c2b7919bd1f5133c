#include "hapo/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace hapo {

void TokenizerConfig::validate() const {
  if (bins < 2) throw std::invalid_argument("tokenizer: bins must be >= 2");
  if (!(low < high)) throw std::invalid_argument("tokenizer: low must be < high");
  if (dims < 1) throw std::invalid_argument("tokenizer: dims must be >= 1");
  if (gripper_dim < 0 || gripper_dim >= dims) throw std::invalid_argument("tokenizer: gripper_dim out of range");
}

KeyValues TokenizerConfig::to_key_values() const {
  return {{"bins", std::to_string(bins)},
          {"low", format_double(low)},
          {"high", format_double(high)},
          {"dims", std::to_string(dims)},
          {"gripper_dim", std::to_string(gripper_dim)}};
}

TokenizerConfig TokenizerConfig::from_key_values(const KeyValues& kv) {
  TokenizerConfig cfg;
  cfg.bins = static_cast<int>(kv_int(kv, "bins", cfg.bins));
  cfg.low = kv_double(kv, "low", cfg.low);
  cfg.high = kv_double(kv, "high", cfg.high);
  cfg.dims = static_cast<int>(kv_int(kv, "dims", cfg.dims));
  cfg.gripper_dim = static_cast<int>(kv_int(kv, "gripper_dim", cfg.gripper_dim));
  cfg.validate();
  return cfg;
}

ActionTokens encode(std::span<const double> action, const TokenizerConfig& cfg) {
  if (action.size() != static_cast<std::size_t>(cfg.dims))
    throw std::invalid_argument("encode: expected " + std::to_string(cfg.dims) + " action components");
  ActionTokens out;
  out.tokens.reserve(action.size());
  const double scale = static_cast<double>(cfg.bins) / (cfg.high - cfg.low);
  for (double a : action) {
    if (!std::isfinite(a)) throw std::domain_error("encode: non-finite action component");
    const double bin = std::floor((a - cfg.low) * scale);
    out.tokens.push_back(static_cast<int>(std::clamp(bin, 0.0, static_cast<double>(cfg.bins - 1))));
  }
  return out;
}

ActionTokens encode(const ContinuousAction& action, const TokenizerConfig& cfg) {
  const auto values = action.to_array();
  return encode(std::span<const double>(values), cfg);
}

std::vector<double> decode_values(const ActionTokens& tokens, const TokenizerConfig& cfg) {
  if (tokens.size() != static_cast<std::size_t>(cfg.dims))
    throw std::invalid_argument("decode: expected " + std::to_string(cfg.dims) + " tokens");
  std::vector<double> out;
  out.reserve(tokens.size());
  const double width = (cfg.high - cfg.low) / cfg.bins;
  for (int tok : tokens.tokens) {
    if (tok < 0 || tok >= cfg.bins) throw std::out_of_range("decode: token " + std::to_string(tok) + " out of range");
    out.push_back(cfg.low + width * (tok + 0.5));
  }
  return out;
}

ContinuousAction decode(const ActionTokens& tokens, const TokenizerConfig& cfg) {
  return ContinuousAction::from_array(decode_values(tokens, cfg));
}

}  // namespace hapo
