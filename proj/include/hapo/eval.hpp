#pragma once

// Success-rate evaluation, intervention ratios, and report files.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hapo/data.hpp"
#include "hapo/env.hpp"
#include "hapo/policy.hpp"
#include "hapo/tokenizer.hpp"

namespace hapo {

/// Maps the current state (and its observation) to the action to execute.
using ActionFn = std::function<ContinuousAction(const EnvState&, const Observation&)>;

ActionFn greedy_policy(const PolicyParams& params, const TokenizerConfig& tok = {});
ActionFn expert_policy(const TaskSpec& spec);

struct EvalConfig {
  int episodes = 100;  ///< per seed
  std::vector<std::uint64_t> seeds{101, 202, 303};
  int horizon = 200;

  void validate() const;
};

struct EpisodeOutcome {
  std::uint64_t seed = 0;
  int episode = 0;
  std::uint64_t task_seed = 0;
  bool success = false;
  int length = 0;
};

struct SeedSummary {
  std::uint64_t seed = 0;
  int episodes = 0;
  int successes = 0;
  double success_rate = 0.0;
};

struct EvalReport {
  std::string task_id;
  Disruption disruption = Disruption::none;
  int n_episodes = 0;  ///< total over all seeds
  std::vector<std::uint64_t> seeds;
  double success_rate = 0.0;
  double mean_episode_length = 0.0;
  std::vector<SeedSummary> per_seed;
  std::vector<EpisodeOutcome> episodes;

  double median_seed_success() const;
};

/// Task seed of evaluation episode `episode` under held-out seed `seed`.
std::uint64_t eval_task_seed(std::uint64_t seed, int episode);

/// Runs one episode with `policy` on the task `spec` until success or horizon.
EpisodeOutcome run_episode(const ActionFn& policy, const TaskSpec& spec);

/// `make_policy` is called once per episode so stateful policies can reset.
EvalReport evaluate(const std::function<ActionFn(const TaskSpec&)>& make_policy, Disruption disruption,
                    const EvalConfig& cfg, const std::string& task_id = "pick-insert");
/// Greedy decoding, no intervention.
EvalReport evaluate(const PolicyParams& params, Disruption disruption, const EvalConfig& cfg,
                    const TokenizerConfig& tok = {});

/// Fraction of interaction steps with c = 2, optionally restricted to one iteration.
/// Throws std::invalid_argument when no interaction step qualifies.
double intervention_ratio(const Dataset& ds, std::optional<int> iteration = std::nullopt);

struct SuiteRow {
  std::string policy;
  Disruption disruption = Disruption::none;
  EvalReport report;
};

struct SuiteTable {
  std::vector<SuiteRow> rows;  ///< base then tuned, each over all four conditions
  /// tuned - base success per condition, in the order none, position, background, texture.
  std::vector<double> deltas;
  double retention_delta = 0.0;  ///< delta on the nominal task
};

inline constexpr std::array<Disruption, 4> kAllDisruptions{Disruption::none, Disruption::position,
                                                           Disruption::background, Disruption::texture};

SuiteTable disruption_suite(const PolicyParams& base, const PolicyParams& tuned, const EvalConfig& cfg,
                            const TokenizerConfig& tok = {});
std::string suite_csv(const SuiteTable& table);

/// One record of a lifelong run.
struct IterationRecord {
  int iteration = 0;
  double success_rate = 0.0;
  double median_seed_success = 0.0;
  std::vector<double> per_seed_success;
  /// Ratio observed while deploying this iteration's policy; absent for the final iteration.
  std::optional<double> intervention_ratio;
  int n_rollouts = 0;
  std::uint64_t seed = 0;

  friend bool operator==(const IterationRecord&, const IterationRecord&) = default;
};

std::string iteration_json(const IterationRecord& r);
IterationRecord parse_iteration_json(const std::string& line);
std::vector<IterationRecord> read_iteration_records(const std::string& path);

/// Writes <dir>/report.csv and <dir>/report.txt. Output depends only on `records`.
void emit_report(const std::vector<IterationRecord>& records, const std::string& dir);

/// Per-episode log lines (seed, episode, task_seed, success, length).
std::string episode_log(const EvalReport& report);

}  // namespace hapo
