#include "hapo/bridge.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <cmath>
#include <chrono>
#include <cstring>
#include <deque>
#include <fstream>
#include <map>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "hapo/loop.hpp"

namespace hapo {

using nlohmann::json;

std::string to_string(Control c) { return c == Control::policy ? "policy" : "human"; }

// Wire format -------------------------------------------------------------------

WireMessage parse_message(std::string_view body) {
  const auto j = json::parse(body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw std::invalid_argument("record is not a JSON object");
  for (const auto* f : {"kind", "session", "tick", "payload"})
    if (!j.contains(f)) throw std::invalid_argument(std::string("missing field '") + f + "'");
  if (j.size() != 4) throw std::invalid_argument("unexpected fields in record");
  if (!j["kind"].is_string() || !j["session"].is_string() || !j["tick"].is_number_integer())
    throw std::invalid_argument("bad field types");
  WireMessage m;
  m.kind = j["kind"].get<std::string>();
  if (std::find(std::begin(kKinds), std::end(kKinds), m.kind) == std::end(kKinds))
    throw std::invalid_argument("unknown kind '" + m.kind + "'");
  m.session = j["session"].get<std::string>();
  m.tick = j["tick"].get<long long>();
  m.payload = j["payload"];
  return m;
}

std::string message_body(const WireMessage& m) {
  nlohmann::ordered_json j;
  j["kind"] = m.kind;
  j["session"] = m.session;
  j["tick"] = m.tick;
  j["payload"] = m.payload;
  return j.dump();
}

std::string encode_record(const WireMessage& m) {
  const auto body = message_body(m);
  return std::to_string(body.size()) + "\n" + body;
}

void RecordDecoder::feed(std::string_view bytes) { buffer_.append(bytes); }

std::optional<std::string> RecordDecoder::next() {
  const auto nl = buffer_.find('\n');
  if (nl == std::string::npos) {
    if (buffer_.size() > 20) throw std::invalid_argument("record length prefix too long");
    return std::nullopt;
  }
  if (nl == 0 || nl > 20 || !std::all_of(buffer_.begin(), buffer_.begin() + static_cast<long>(nl), ::isdigit))
    throw std::invalid_argument("bad record length prefix");
  const auto len = std::stoull(buffer_.substr(0, nl));
  if (buffer_.size() < nl + 1 + len) return std::nullopt;
  auto body = buffer_.substr(nl + 1, len);
  buffer_.erase(0, nl + 1 + len);
  return body;
}

// Journal -----------------------------------------------------------------------

namespace {

const char* type_name(JournalEntry::Type t) {
  switch (t) {
    case JournalEntry::Type::in: return "in";
    case JournalEntry::Type::out: return "out";
    case JournalEntry::Type::tick: return "tick";
    case JournalEntry::Type::disconnect: return "disconnect";
  }
  return "?";
}

JournalEntry::Type parse_type(const std::string& s) {
  if (s == "in") return JournalEntry::Type::in;
  if (s == "out") return JournalEntry::Type::out;
  if (s == "tick") return JournalEntry::Type::tick;
  if (s == "disconnect") return JournalEntry::Type::disconnect;
  throw std::invalid_argument("unknown journal entry '" + s + "'");
}

}  // namespace

void save_journal(const Journal& journal, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& e : journal) {
    nlohmann::ordered_json j;
    j["entry"] = type_name(e.type);
    j["client"] = e.client;
    if (e.type == JournalEntry::Type::in || e.type == JournalEntry::Type::out)
      j["record"] = json::parse(message_body(e.message));
    out << j.dump() << '\n';
  }
}

Journal load_journal(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  Journal journal;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      JournalEntry e;
      e.type = parse_type(j.at("entry").get<std::string>());
      e.client = j.at("client").get<int>();
      if (j.contains("record")) {
        const auto& r = j["record"];
        e.message = {r.at("kind").get<std::string>(), r.at("session").get<std::string>(),
                     r.at("tick").get<long long>(), r.at("payload")};
      }
      journal.push_back(std::move(e));
    } catch (const std::exception& ex) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return journal;
}

// Session -----------------------------------------------------------------------

Session::Session(PolicyParams params, SessionConfig cfg, std::string id, TokenizerConfig tok)
    : params_(std::move(params)),
      cfg_(cfg),
      id_(std::move(id)),
      tok_(tok),
      dataset_(tok, TaskSpec{cfg.disruption, cfg.seed, cfg.horizon}) {
  if (cfg_.horizon < 1 || cfg_.K < 0 || !(cfg_.tick_hz > 0.0) || !(cfg_.temperature > 0.0))
    throw std::invalid_argument("invalid session config");
  start_episode();
}

void Session::start_episode() {
  spec_ = TaskSpec{cfg_.disruption, rollout_task_seed(cfg_.seed, episode_), cfg_.horizon};
  state_ = reset(spec_);
  sampler_ = Rng(rollout_sampler_seed(cfg_.seed, episode_));
  traj_ = Trajectory{};
  traj_.source = Source::interaction;
  traj_.meta = {spec_, static_cast<std::uint64_t>(episode_), 0};
  intervened_ = 0;
  control_ = Control::policy;
  controller_.reset();
  pending_.reset();
}

WireMessage Session::make(std::string kind, json payload) const { return {std::move(kind), id_, tick_, std::move(payload)}; }

WireMessage Session::error(std::string text, std::string_view in_reply_to) const {
  return make("error", {{"message", std::move(text)}, {"in_reply_to", std::string(in_reply_to)}});
}

WireMessage Session::config_message() const {
  json obs = json::array({"gripper_x", "gripper_y", "object_x", "object_y", "target_x", "target_y", "holding"});
  for (int i = 0; i < kNuisanceDims; ++i) obs.push_back("nuisance_" + std::to_string(i));
  return make("config", {{"obs_layout", obs},
                         {"action_dims", kActionDims},
                         {"action_names", {"dx", "dy", "gripper"}},
                         {"tick_hz", cfg_.tick_hz},
                         {"arena", {0.0, 1.0}},
                         {"max_displacement", kMaxDisplacement},
                         {"success_radius", spec_.success_radius},
                         {"horizon", cfg_.horizon},
                         {"K", cfg_.K},
                         {"disruption", to_string(cfg_.disruption)}});
}

WireMessage Session::state_message() const {
  return make("state", {{"gripper", {state_.gripper_pos.x, state_.gripper_pos.y}},
                        {"object", {state_.object_pos.x, state_.object_pos.y}},
                        {"target", {state_.target_pos.x, state_.target_pos.y}},
                        {"holding", state_.holding},
                        {"nuisance", state_.nuisance},
                        {"t", state_.t},
                        {"control", to_string(control_)},
                        {"controller", controller_ ? json(*controller_) : json(nullptr)},
                        {"episode", episode_},
                        {"intervened_steps", intervened_}});
}

void Session::log_out(int client, const std::vector<WireMessage>& out) {
  for (const auto& m : out) journal_.push_back({JournalEntry::Type::out, client, m});
}

std::vector<WireMessage> Session::handle(int client, const WireMessage& msg) {
  journal_.push_back({JournalEntry::Type::in, client, msg});
  auto out = apply(client, msg);
  log_out(client, out);
  return out;
}

std::vector<WireMessage> Session::handle_raw(int client, std::string_view body) {
  WireMessage msg;
  try {
    msg = parse_message(body);
  } catch (const std::exception& e) {
    WireMessage raw{"", id_, tick_, {{"raw", std::string(body)}}};
    journal_.push_back({JournalEntry::Type::in, client, raw});
    std::vector<WireMessage> out{error(std::string("malformed record: ") + e.what(), "")};
    log_out(client, out);
    return out;
  }
  return handle(client, msg);
}

std::vector<WireMessage> Session::apply(int client, const WireMessage& msg) {
  if (msg.session != id_) return {error("unknown session '" + msg.session + "'", msg.kind)};

  if (msg.kind == "take_control") {
    if (controller_ && *controller_ != client) return {error("control is held by another client", msg.kind)};
    control_ = Control::human;
    controller_ = client;
    return {make("take_control", {{"granted", true}})};
  }
  if (msg.kind == "release_control") {
    if (control_ != Control::human) return {error("not under human control", msg.kind)};
    if (*controller_ != client) return {error("control is held by another client", msg.kind)};
    control_ = Control::policy;
    controller_.reset();
    pending_.reset();
    return {make("release_control", {{"released", true}})};
  }
  if (msg.kind == "human_action") {
    if (control_ != Control::human) return {error("human_action while the policy is in control", msg.kind)};
    if (*controller_ != client) return {error("control is held by another client", msg.kind)};
    const auto& p = msg.payload;
    const json* arr = p.is_array() ? &p : (p.is_object() && p.contains("action") ? &p["action"] : nullptr);
    if (!arr || !arr->is_array() || arr->size() != kActionDims)
      return {error("human_action needs a " + std::to_string(kActionDims) + "-vector", msg.kind)};
    std::array<double, kActionDims> v{};
    for (int d = 0; d < kActionDims; ++d) {
      const auto& x = (*arr)[static_cast<std::size_t>(d)];
      if (!x.is_number() || !std::isfinite(x.get<double>())) return {error("human_action components must be finite numbers", msg.kind)};
      v[d] = x.get<double>();
    }
    const auto raw = ContinuousAction::from_array(v);
    const auto clamped = raw.clamped();
    pending_ = clamped;
    const auto c = clamped.to_array();
    json ack{{"accepted", true}, {"action", {c[0], c[1], c[2]}}};
    if (!(clamped == raw)) ack["warning"] = "clamped";
    return {make("human_action", ack)};
  }
  return {error("clients cannot send '" + msg.kind + "'", msg.kind)};
}

void Session::disconnect(int client) {
  journal_.push_back({JournalEntry::Type::disconnect, client, {}});
  if (controller_ && *controller_ == client) {
    control_ = Control::policy;
    controller_.reset();
    pending_.reset();
  }
}

std::vector<WireMessage> Session::tick() {
  journal_.push_back({JournalEntry::Type::tick, -1, {}});
  const auto o = observe(state_);
  const bool human = control_ == Control::human;
  ContinuousAction a;
  if (human) {
    a = pending_.value_or(ContinuousAction{});
    pending_.reset();
    ++intervened_;
  } else {
    a = decode(sample(params_, o, sampler_, cfg_.temperature), tok_);
  }
  Step s;
  s.o.assign(o.begin(), o.end());
  s.a = a.clamped();
  s.tokens = encode(s.a, tok_);
  s.c = human ? Label::intervention : Label::acceptable;
  s.t = static_cast<int>(traj_.steps.size());
  traj_.steps.push_back(std::move(s));
  state_ = step(spec_, state_, a).state;
  ++tick_;

  std::vector<WireMessage> out{state_message()};
  if (is_finished(spec_, state_)) {
    traj_.success = is_success(spec_, state_);
    const auto steps = traj_.steps.size();
    out.push_back(make("episode_end", {{"episode", episode_},
                                       {"success", traj_.success},
                                       {"steps", steps},
                                       {"intervened_steps", intervened_}}));
    dataset_.append(relabel_interventions(std::move(traj_), cfg_.K));
    ++episode_;
    start_episode();
    out.push_back(state_message());
  }
  log_out(-1, out);
  return out;
}

Session replay(const PolicyParams& params, const SessionConfig& cfg, const std::string& id, const Journal& journal,
               bool verify, const TokenizerConfig& tok) {
  Session s(params, cfg, id, tok);
  for (const auto& e : journal) {
    switch (e.type) {
      case JournalEntry::Type::in:
        if (e.message.kind.empty())
          s.handle_raw(e.client, e.message.payload.at("raw").get<std::string>());
        else
          s.handle(e.client, e.message);
        break;
      case JournalEntry::Type::tick: s.tick(); break;
      case JournalEntry::Type::disconnect: s.disconnect(e.client); break;
      case JournalEntry::Type::out: break;
    }
  }
  if (verify && !(s.journal() == journal)) {
    const auto& got = s.journal();
    std::size_t i = 0;
    while (i < got.size() && i < journal.size() && got[i] == journal[i]) ++i;
    throw std::runtime_error("replay diverged from the journal at entry " + std::to_string(i));
  }
  return s;
}

// TCP service -------------------------------------------------------------------

namespace {

bool send_all(int fd, const std::string& data) {
  std::size_t sent = 0;
  while (sent < data.size()) {
    const auto n = ::send(fd, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return false;
    sent += static_cast<std::size_t>(n);
  }
  return true;
}

struct Event {
  enum class Type { connect, message, disconnect } type;
  int client;
  std::string body;
};

class EventQueue {
 public:
  void push(Event e) {
    std::lock_guard lock(mu_);
    events_.push_back(std::move(e));
  }
  std::deque<Event> drain() {
    std::lock_guard lock(mu_);
    return std::exchange(events_, {});
  }

 private:
  std::mutex mu_;
  std::deque<Event> events_;
};

}  // namespace

Session serve(const PolicyParams& params, const SessionConfig& cfg, const ServeOptions& opt, const std::string& id) {
  Session session(params, cfg, id);
  auto log = [&](const std::string& s) {
    if (opt.log) opt.log(s);
  };

  const int listen_fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd < 0) throw std::runtime_error("socket: " + std::string(std::strerror(errno)));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(opt.port));
  if (::inet_pton(AF_INET, opt.host.c_str(), &addr.sin_addr) != 1) {
    ::close(listen_fd);
    throw std::runtime_error("bad host address " + opt.host);
  }
  if (::bind(listen_fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 || ::listen(listen_fd, 8) < 0) {
    const std::string why = std::strerror(errno);
    ::close(listen_fd);
    throw std::runtime_error("cannot listen on " + opt.host + ":" + std::to_string(opt.port) + ": " + why);
  }
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd, reinterpret_cast<sockaddr*>(&addr), &len);
  const int port = ntohs(addr.sin_port);
  log("listening on " + opt.host + ":" + std::to_string(port));

  std::atomic<bool> shutting_down{false};
  EventQueue queue;
  std::mutex threads_mu;
  std::vector<std::thread> readers;
  std::map<int, int> sockets;  // client id -> fd, owned by the simulation loop

  std::thread acceptor([&] {
    int next_id = 1;
    while (!shutting_down) {
      pollfd p{listen_fd, POLLIN, 0};
      if (::poll(&p, 1, 50) <= 0) continue;
      const int fd = ::accept(listen_fd, nullptr, nullptr);
      if (fd < 0) continue;
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      const int client = next_id++;
      queue.push({Event::Type::connect, client, std::to_string(fd)});
      std::lock_guard lock(threads_mu);
      readers.emplace_back([&, fd, client] {
        RecordDecoder dec;
        char buf[4096];
        while (!shutting_down) {
          pollfd rp{fd, POLLIN, 0};
          if (::poll(&rp, 1, 50) <= 0) continue;
          const auto n = ::recv(fd, buf, sizeof buf, 0);
          if (n <= 0) break;
          dec.feed({buf, static_cast<std::size_t>(n)});
          try {
            while (auto body = dec.next()) queue.push({Event::Type::message, client, std::move(*body)});
          } catch (const std::exception&) {
            break;  // framing is lost; drop the client
          }
        }
        queue.push({Event::Type::disconnect, client, {}});
      });
    }
  });
  if (opt.on_ready) opt.on_ready(port);

  auto send_to = [&](int client, const std::vector<WireMessage>& msgs) {
    auto it = sockets.find(client);
    if (it == sockets.end()) return;
    for (const auto& m : msgs)
      if (!send_all(it->second, encode_record(m))) break;
  };

  const auto period = std::chrono::duration<double>(1.0 / cfg.tick_hz);
  auto deadline = std::chrono::steady_clock::now();
  while (true) {
    if (opt.stop && opt.stop->load()) break;
    if (opt.max_episodes > 0 && session.episodes_finished() >= opt.max_episodes) break;
    if (opt.max_ticks > 0 && session.ticks() >= opt.max_ticks) break;

    for (auto& ev : queue.drain()) {
      switch (ev.type) {
        case Event::Type::connect:
          sockets[ev.client] = std::stoi(ev.body);
          log("client " + std::to_string(ev.client) + " connected");
          send_to(ev.client, {session.config_message(), session.state_message()});
          break;
        case Event::Type::message: send_to(ev.client, session.handle_raw(ev.client, ev.body)); break;
        case Event::Type::disconnect:
          if (auto it = sockets.find(ev.client); it != sockets.end()) {
            ::close(it->second);
            sockets.erase(it);
          }
          session.disconnect(ev.client);
          log("client " + std::to_string(ev.client) + " left");
          break;
      }
    }

    const auto out = session.tick();
    for (const auto& [client, fd] : sockets)
      for (const auto& m : out) send_all(fd, encode_record(m));

    deadline += std::chrono::duration_cast<std::chrono::steady_clock::duration>(period);
    std::this_thread::sleep_until(deadline);
  }

  shutting_down = true;
  acceptor.join();
  for (const auto& [client, fd] : sockets) ::shutdown(fd, SHUT_RDWR);
  {
    std::lock_guard lock(threads_mu);
    for (auto& t : readers) t.join();
  }
  for (const auto& [client, fd] : sockets) ::close(fd);
  ::close(listen_fd);
  return session;
}

// Client ------------------------------------------------------------------------

BridgeClient::BridgeClient(const std::string& host, int port) {
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) throw std::runtime_error("socket: " + std::string(std::strerror(errno)));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1 ||
      ::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0) {
    ::close(fd_);
    throw std::runtime_error("cannot connect to " + host + ":" + std::to_string(port));
  }
  int one = 1;
  ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

BridgeClient::~BridgeClient() {
  if (fd_ >= 0) ::close(fd_);
}

void BridgeClient::send(const WireMessage& m) {
  if (!send_all(fd_, encode_record(m))) throw std::runtime_error("send failed");
}

std::optional<WireMessage> BridgeClient::receive(int timeout_ms) {
  const auto until = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
  while (true) {
    if (auto body = decoder_.next()) return parse_message(*body);
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(until - std::chrono::steady_clock::now());
    if (left.count() <= 0) return std::nullopt;
    pollfd p{fd_, POLLIN, 0};
    if (::poll(&p, 1, static_cast<int>(left.count())) <= 0) continue;
    char buf[4096];
    const auto n = ::recv(fd_, buf, sizeof buf, 0);
    if (n <= 0) return std::nullopt;
    decoder_.feed({buf, static_cast<std::size_t>(n)});
  }
}

std::optional<WireMessage> BridgeClient::receive_kind(std::string_view kind, int timeout_ms) {
  const auto until = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
  while (true) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(until - std::chrono::steady_clock::now());
    if (left.count() <= 0) return std::nullopt;
    auto m = receive(static_cast<int>(left.count()));
    if (!m) return std::nullopt;
    if (m->kind == kind) return m;
  }
}

}  // namespace hapo
