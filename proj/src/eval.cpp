#include "hapo/eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace hapo {

namespace {

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace

ActionFn greedy_policy(const PolicyParams& params, const TokenizerConfig& tok) {
  auto p = std::make_shared<const PolicyParams>(params);
  return [p, tok](const EnvState&, const Observation& o) { return decode(greedy_decode(*p, o), tok); };
}

ActionFn expert_policy(const TaskSpec& spec) {
  return [spec](const EnvState& s, const Observation&) { return expert_action(s, spec); };
}

void EvalConfig::validate() const {
  if (episodes < 1) throw std::invalid_argument("eval episodes must be >= 1");
  if (seeds.empty()) throw std::invalid_argument("eval needs at least one seed");
  if (horizon < 1) throw std::invalid_argument("eval horizon must be >= 1");
}

double EvalReport::median_seed_success() const {
  std::vector<double> rates;
  for (const auto& s : per_seed) rates.push_back(s.success_rate);
  return median(rates);
}

std::uint64_t eval_task_seed(std::uint64_t seed, int episode) {
  return derive_seed(seed, "eval.episode", static_cast<std::uint64_t>(episode));
}

EpisodeOutcome run_episode(const ActionFn& policy, const TaskSpec& spec) {
  EpisodeOutcome out;
  out.task_seed = spec.seed;
  EnvState state = reset(spec);
  while (!is_finished(spec, state)) {
    const auto a = policy(state, observe(state));
    const auto r = step(spec, state, a);
    state = r.state;
  }
  out.success = is_success(spec, state);
  out.length = state.t;
  return out;
}

EvalReport evaluate(const std::function<ActionFn(const TaskSpec&)>& make_policy, Disruption disruption,
                    const EvalConfig& cfg, const std::string& task_id) {
  cfg.validate();
  EvalReport rep;
  rep.task_id = task_id;
  rep.disruption = disruption;
  rep.seeds = cfg.seeds;
  long long total_length = 0;
  int total_success = 0;
  for (auto seed : cfg.seeds) {
    SeedSummary summary{seed, cfg.episodes, 0, 0.0};
    for (int e = 0; e < cfg.episodes; ++e) {
      TaskSpec spec;
      spec.disruption = disruption;
      spec.seed = eval_task_seed(seed, e);
      spec.episode_horizon = cfg.horizon;
      auto outcome = run_episode(make_policy(spec), spec);
      outcome.seed = seed;
      outcome.episode = e;
      summary.successes += outcome.success;
      total_length += outcome.length;
      rep.episodes.push_back(outcome);
    }
    summary.success_rate = static_cast<double>(summary.successes) / cfg.episodes;
    total_success += summary.successes;
    rep.per_seed.push_back(summary);
  }
  rep.n_episodes = static_cast<int>(rep.episodes.size());
  rep.success_rate = static_cast<double>(total_success) / rep.n_episodes;
  rep.mean_episode_length = static_cast<double>(total_length) / rep.n_episodes;
  return rep;
}

EvalReport evaluate(const PolicyParams& params, Disruption disruption, const EvalConfig& cfg,
                    const TokenizerConfig& tok) {
  const auto policy = greedy_policy(params, tok);
  return evaluate([&](const TaskSpec&) { return policy; }, disruption, cfg);
}

double intervention_ratio(const Dataset& ds, std::optional<int> iteration) {
  long long steps = 0, intervened = 0;
  for (const auto& t : ds.trajectories()) {
    if (t.source != Source::interaction) continue;
    if (iteration && t.meta.iteration != *iteration) continue;
    for (const auto& s : t.steps) {
      ++steps;
      intervened += s.c == Label::intervention;
    }
  }
  if (steps == 0) throw std::invalid_argument("intervention_ratio: no interaction steps");
  return static_cast<double>(intervened) / static_cast<double>(steps);
}

SuiteTable disruption_suite(const PolicyParams& base, const PolicyParams& tuned, const EvalConfig& cfg,
                            const TokenizerConfig& tok) {
  SuiteTable table;
  for (const auto* name : {"base", "tuned"}) {
    const auto& params = std::string(name) == "base" ? base : tuned;
    for (auto d : kAllDisruptions) table.rows.push_back({name, d, evaluate(params, d, cfg, tok)});
  }
  for (std::size_t i = 0; i < kAllDisruptions.size(); ++i)
    table.deltas.push_back(table.rows[i + kAllDisruptions.size()].report.success_rate -
                           table.rows[i].report.success_rate);
  table.retention_delta = table.deltas[0];
  return table;
}

std::string suite_csv(const SuiteTable& table) {
  std::ostringstream os;
  os << "policy,disruption,episodes,success_rate,mean_episode_length\n";
  for (const auto& r : table.rows)
    os << r.policy << ',' << to_string(r.disruption) << ',' << r.report.n_episodes << ','
       << format_double(r.report.success_rate) << ',' << format_double(r.report.mean_episode_length) << '\n';
  for (std::size_t i = 0; i < table.deltas.size(); ++i)
    os << "delta," << to_string(kAllDisruptions[i]) << ",," << format_double(table.deltas[i]) << ",\n";
  return os.str();
}

std::string iteration_json(const IterationRecord& r) {
  nlohmann::ordered_json j;
  j["iteration"] = r.iteration;
  j["success_rate"] = r.success_rate;
  j["median_seed_success"] = r.median_seed_success;
  j["per_seed_success"] = r.per_seed_success;
  j["intervention_ratio"] = r.intervention_ratio ? nlohmann::ordered_json(*r.intervention_ratio) : nullptr;
  j["n_rollouts"] = r.n_rollouts;
  j["seed"] = r.seed;
  return j.dump();
}

IterationRecord parse_iteration_json(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  IterationRecord r;
  r.iteration = j.at("iteration").get<int>();
  r.success_rate = j.at("success_rate").get<double>();
  r.median_seed_success = j.at("median_seed_success").get<double>();
  r.per_seed_success = j.at("per_seed_success").get<std::vector<double>>();
  if (!j.at("intervention_ratio").is_null()) r.intervention_ratio = j.at("intervention_ratio").get<double>();
  r.n_rollouts = j.at("n_rollouts").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  return r;
}

std::vector<IterationRecord> read_iteration_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<IterationRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(parse_iteration_json(line));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void emit_report(const std::vector<IterationRecord>& records, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::ostringstream csv;
  csv << "iteration,success_rate,median_seed_success,intervention_ratio,n_rollouts,seed\n";
  std::ostringstream txt;
  txt << "iteration  success  median  intervention  rollouts\n";
  for (const auto& r : records) {
    csv << r.iteration << ',' << format_double(r.success_rate) << ',' << format_double(r.median_seed_success) << ','
        << (r.intervention_ratio ? format_double(*r.intervention_ratio) : "") << ',' << r.n_rollouts << ','
        << r.seed << '\n';
    txt << std::setw(9) << r.iteration << "  " << std::setw(7) << fixed(r.success_rate, 3) << "  " << std::setw(6)
        << fixed(r.median_seed_success, 3) << "  " << std::setw(12)
        << (r.intervention_ratio ? fixed(*r.intervention_ratio, 3) : "-") << "  " << std::setw(8) << r.n_rollouts
        << '\n';
  }
  write_file(std::filesystem::path(dir) / "report.csv", csv.str());
  write_file(std::filesystem::path(dir) / "report.txt", txt.str());
}

std::string episode_log(const EvalReport& report) {
  std::string out;
  for (const auto& e : report.episodes) {
    nlohmann::ordered_json j;
    j["disruption"] = to_string(report.disruption);
    j["seed"] = e.seed;
    j["episode"] = e.episode;
    j["task_seed"] = e.task_seed;
    j["success"] = e.success;
    j["length"] = e.length;
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace hapo
