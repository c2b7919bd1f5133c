#pragma once

// Live deployment over a local socket: a fixed-tick simulation loop where a
// connected human can take control, steer, and hand control back.
//
// Wire records are length-delimited text: the decimal byte count of the JSON
// body, a newline, then the body. Every body is an object with exactly the
// fields kind, session, tick, payload.
//
// Handshake: on connect the server sends `config`, then the current `state`;
// afterwards one `state` per tick follows, and `episode_end` when an episode
// finishes. Clients send take_control, release_control and human_action.

#include <atomic>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hapo/data.hpp"
#include "hapo/env.hpp"
#include "hapo/policy.hpp"
#include "hapo/rng.hpp"
#include "json.hpp"

namespace hapo {

enum class Control { policy, human };
std::string to_string(Control c);

struct WireMessage {
  std::string kind;
  std::string session;
  long long tick = 0;
  nlohmann::json payload = nlohmann::json::object();

  friend bool operator==(const WireMessage&, const WireMessage&) = default;
};

inline constexpr std::string_view kKinds[] = {"state",       "take_control", "release_control", "human_action",
                                              "episode_end", "error",        "config"};

/// Throws std::invalid_argument when the body is not a well-formed message.
WireMessage parse_message(std::string_view body);
std::string message_body(const WireMessage& m);
/// "<bytes>\n<body>"
std::string encode_record(const WireMessage& m);

/// Splits a byte stream into record bodies.
class RecordDecoder {
 public:
  void feed(std::string_view bytes);
  /// Next complete body, if any. Throws std::invalid_argument on a bad length prefix.
  std::optional<std::string> next();

 private:
  std::string buffer_;
};

struct SessionConfig {
  Disruption disruption = Disruption::none;
  std::uint64_t seed = 0;  ///< episode e uses the task and sampler seeds of deployment rollout e
  int horizon = 200;
  int K = 10;
  double temperature = 1.0;
  double tick_hz = 10.0;
};

/// One entry of the replayable session journal.
struct JournalEntry {
  enum class Type { in, out, tick, disconnect };
  Type type = Type::tick;
  int client = -1;
  WireMessage message;  ///< for in/out; a malformed inbound record has an empty kind and its body in payload.raw

  friend bool operator==(const JournalEntry&, const JournalEntry&) = default;
};

using Journal = std::vector<JournalEntry>;
void save_journal(const Journal& j, const std::string& path);
Journal load_journal(const std::string& path);

/// Single simulation session. All state changes happen through handle(),
/// disconnect() and tick(), each of which is journaled.
class Session {
 public:
  Session(PolicyParams params, SessionConfig cfg, std::string id = "session-0", TokenizerConfig tok = {});

  const std::string& id() const { return id_; }
  const SessionConfig& config() const { return cfg_; }

  /// Replies for `client`. Errors are returned as `error` messages and leave the session unchanged.
  std::vector<WireMessage> handle(int client, const WireMessage& msg);
  /// Parses `body` first; a malformed body yields an `error` reply.
  std::vector<WireMessage> handle_raw(int client, std::string_view body);
  /// A departing controller hands control back to the policy.
  void disconnect(int client);
  /// Executes one env step; returns the broadcast messages (state, then episode_end if the episode ended).
  std::vector<WireMessage> tick();

  WireMessage config_message() const;
  WireMessage state_message() const;

  Control control() const { return control_; }
  std::optional<int> controller() const { return controller_; }
  long long ticks() const { return tick_; }
  int episodes_finished() const { return episode_; }
  const EnvState& state() const { return state_; }
  const Dataset& dataset() const { return dataset_; }
  const Journal& journal() const { return journal_; }

 private:
  void start_episode();
  WireMessage make(std::string kind, nlohmann::json payload) const;
  WireMessage error(std::string text, std::string_view in_reply_to) const;
  std::vector<WireMessage> apply(int client, const WireMessage& msg);
  void log_out(int client, const std::vector<WireMessage>& out);

  PolicyParams params_;
  SessionConfig cfg_;
  std::string id_;
  TokenizerConfig tok_;

  TaskSpec spec_;
  EnvState state_;
  Rng sampler_{0};
  Trajectory traj_;
  long long intervened_ = 0;

  Control control_ = Control::policy;
  std::optional<int> controller_;
  std::optional<ContinuousAction> pending_;
  long long tick_ = 0;
  int episode_ = 0;

  Dataset dataset_;
  Journal journal_;
};

/// Rebuilds a session from a journal. With `verify`, the regenerated journal
/// (outbound messages included) must equal the input; std::runtime_error otherwise.
Session replay(const PolicyParams& params, const SessionConfig& cfg, const std::string& id, const Journal& journal,
               bool verify = true, const TokenizerConfig& tok = {});

struct ServeOptions {
  int port = 8765;  ///< 0 picks a free port
  std::string host = "127.0.0.1";
  int max_episodes = 0;     ///< stop after this many finished episodes (0 = no limit)
  long long max_ticks = 0;  ///< stop after this many ticks (0 = no limit)
  const std::atomic<bool>* stop = nullptr;
  std::function<void(int port)> on_ready;
  std::function<void(const std::string&)> log;
};

/// Runs the fixed-tick service until a stop condition holds. Throws
/// std::runtime_error when the port cannot be bound.
Session serve(const PolicyParams& params, const SessionConfig& cfg, const ServeOptions& opt,
              const std::string& id = "session-0");

/// Blocking TCP client for scripted sessions and tests.
class BridgeClient {
 public:
  BridgeClient(const std::string& host, int port);
  ~BridgeClient();
  BridgeClient(const BridgeClient&) = delete;
  BridgeClient& operator=(const BridgeClient&) = delete;

  void send(const WireMessage& m);
  /// Next message, or nullopt after `timeout_ms` without one or on disconnect.
  std::optional<WireMessage> receive(int timeout_ms = 1000);
  /// Skips messages until one of `kind` arrives.
  std::optional<WireMessage> receive_kind(std::string_view kind, int timeout_ms = 1000);

 private:
  int fd_ = -1;
  RecordDecoder decoder_;
};

}  // namespace hapo
