#pragma once

// Command-line entry point wiring every phase of the pipeline.
//
// Settings resolve in increasing precedence: built-in defaults, the `--config`
// key-value file, HAPO_* environment variables, then flags (`--set key=value`
// reaches any config key). Artifacts land in `--out`, indexed by manifest.json.

#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "hapo/kv.hpp"

namespace hapo {

/// Exit codes: 0 success, 1 runtime failure or missing input, 2 usage error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Run manifest: seed, immutable config snapshot, phase markers and artifacts.
struct RunManifest {
  std::string run_id;
  std::uint64_t seed = 0;
  KeyValues config;  ///< snapshot taken when the manifest was created
  /// phase name -> (artifact paths, settings used)
  struct Phase {
    std::vector<std::string> artifacts;
    KeyValues settings;
    bool completed = false;
  };
  std::map<std::string, Phase> phases;

  std::string to_json() const;
  static RunManifest from_json(const std::string& text);
};

}  // namespace hapo
