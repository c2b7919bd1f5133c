#pragma once

#include <map>
#include <string>
#include <string_view>

namespace hapo {

/// Flat `key = value` configuration. Ordered so that serialization is stable.
using KeyValues = std::map<std::string, std::string>;

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
/// Throws std::runtime_error naming the line on malformed input.
KeyValues parse_key_values(std::string_view text);
KeyValues read_key_values(const std::string& path);
std::string format_key_values(const KeyValues& kv);

double kv_double(const KeyValues& kv, const std::string& key, double fallback);
long long kv_int(const KeyValues& kv, const std::string& key, long long fallback);
bool kv_bool(const KeyValues& kv, const std::string& key, bool fallback);
std::string kv_string(const KeyValues& kv, const std::string& key, const std::string& fallback);

/// Shortest decimal that round-trips the double exactly.
std::string format_double(double value);

}  // namespace hapo
