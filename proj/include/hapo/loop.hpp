#pragma once

// Warm start, intervention-assisted deployment, preference optimization, and
// the repeated deploy-optimize loop.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hapo/data.hpp"
#include "hapo/env.hpp"
#include "hapo/eval.hpp"
#include "hapo/kv.hpp"
#include "hapo/optim.hpp"
#include "hapo/policy.hpp"

namespace hapo {

/// Decides, step by step, whether it takes over from the policy.
class Intervenor {
 public:
  virtual ~Intervenor() = default;
  virtual void begin_episode(const TaskSpec& spec) = 0;
  virtual bool wants_control(const EnvState& state) = 0;
  /// Action to execute while in control; nullopt means the intervenor became
  /// unavailable and the episode is aborted.
  virtual std::optional<ContinuousAction> corrective_action(const EnvState& state) = 0;
  /// Called after every executed step.
  virtual void observe(const EnvState& before, const ContinuousAction& executed, bool intervened,
                       const EnvState& after) = 0;
};

class NullIntervenor final : public Intervenor {
 public:
  void begin_episode(const TaskSpec&) override {}
  bool wants_control(const EnvState&) override { return false; }
  std::optional<ContinuousAction> corrective_action(const EnvState&) override { return std::nullopt; }
  void observe(const EnvState&, const ContinuousAction&, bool, const EnvState&) override {}
};

/// Always in control, acting as the scripted expert.
class ExpertIntervenor final : public Intervenor {
 public:
  void begin_episode(const TaskSpec& spec) override { spec_ = spec; }
  bool wants_control(const EnvState&) override { return true; }
  std::optional<ContinuousAction> corrective_action(const EnvState& s) override { return expert_action(s, spec_); }
  void observe(const EnvState&, const ContinuousAction&, bool, const EnvState&) override {}

 private:
  TaskSpec spec_;
};

struct ThresholdConfig {
  double deviation = 0.8;   ///< L1 distance to the expert action
  int deviation_steps = 3;  ///< consecutive deviating policy steps before taking over
  int stall_steps = 15;     ///< consecutive policy steps without subgoal progress
  int hold_steps = 10;      ///< steps in control per intervention

  void validate() const;
  KeyValues to_key_values() const;
  static ThresholdConfig from_key_values(const KeyValues& kv);
};

/// Headless stand-in for a human supervisor: watches the policy, takes over
/// as the expert for a fixed number of steps when it deviates or stalls.
class ThresholdIntervenor final : public Intervenor {
 public:
  explicit ThresholdIntervenor(ThresholdConfig cfg = {});
  void begin_episode(const TaskSpec& spec) override;
  bool wants_control(const EnvState& state) override;
  std::optional<ContinuousAction> corrective_action(const EnvState& state) override;
  void observe(const EnvState& before, const ContinuousAction& executed, bool intervened,
               const EnvState& after) override;

 private:
  ThresholdConfig cfg_;
  TaskSpec spec_;
  int remaining_ = 0;
  int deviating_ = 0;
  int stalled_ = 0;
};

/// Control over fixed step windows [start, end) of every episode, acting as the
/// expert (or as `actions`, indexed by step, when given).
class ScheduledIntervenor final : public Intervenor {
 public:
  explicit ScheduledIntervenor(std::vector<std::pair<int, int>> windows);
  void begin_episode(const TaskSpec& spec) override { spec_ = spec; }
  bool wants_control(const EnvState& state) override;
  std::optional<ContinuousAction> corrective_action(const EnvState& state) override;
  void observe(const EnvState&, const ContinuousAction&, bool, const EnvState&) override {}

 private:
  std::vector<std::pair<int, int>> windows_;
  TaskSpec spec_;
};

/// Accumulates the steps of one interaction episode.
class EpisodeRecorder {
 public:
  explicit EpisodeRecorder(EpisodeMeta meta, TokenizerConfig tok = {});
  /// Stores the clamped action and its tokens; c = 2 when `intervened`.
  void record(const Observation& o, const ContinuousAction& a, bool intervened);
  std::size_t size() const { return traj_.steps.size(); }
  /// Applies the K-window relabel and returns the trajectory.
  Trajectory finish(bool success, int K) &&;

 private:
  Trajectory traj_;
  TokenizerConfig tok_;
};

// Warm start -----------------------------------------------------------------

struct BcConfig {
  int batch = 64;
  double lr = 1e-3;
  int max_steps = 10000;
  int check_every = 500;      ///< full-dataset loss evaluation period
  double plateau_tol = 0.01;  ///< an improvement smaller than this fraction of the best loss does not count
  int patience = 3;           ///< checks without improvement before stopping

  void validate() const;
};

struct WarmStartConfig {
  int demos = 50;
  int horizon = 200;
  double max_expert_failure = 0.05;
  PolicyShape shape;
  BcConfig bc;
};

/// Expert demonstrations on the nominal task. Throws std::runtime_error when
/// more than `max_failure` of them fail, std::invalid_argument for n < 1.
Dataset collect_expert(int n, int horizon, std::uint64_t seed, double max_failure = 0.05,
                       const TokenizerConfig& tok = {});

struct BcResult {
  PolicyParams params;
  int steps = 0;
  double loss = 0.0;  ///< full-dataset loss at the last check
};

/// Minibatch BC on every step of `ds`; stops on plateau or after max_steps.
/// `metrics`, when set, receives one record per check.
BcResult train_bc(PolicyParams init, const Dataset& ds, const BcConfig& cfg, std::uint64_t seed,
                  const std::function<void(const std::string&)>& metrics = {});

struct WarmStart {
  PolicyParams params;
  Dataset demos;
  BcResult bc;
};

WarmStart warm_start(const WarmStartConfig& cfg, std::uint64_t seed);

// Deployment -----------------------------------------------------------------

struct DeployConfig {
  int rollouts = 20;
  int K = 10;
  Disruption disruption = Disruption::none;
  int horizon = 200;
  double temperature = 1.0;
};

struct DeployStats {
  int rollouts = 0;
  int aborted = 0;
  int successes = 0;
  long long steps = 0;
  long long intervened = 0;

  double intervention_ratio() const { return steps ? static_cast<double>(intervened) / static_cast<double>(steps) : 0.0; }
};

/// Task seed and sampler seed of rollout `r` within a phase seeded by `seed`.
std::uint64_t rollout_task_seed(std::uint64_t seed, int r);
std::uint64_t rollout_sampler_seed(std::uint64_t seed, int r);

/// Runs cfg.rollouts sampled rollouts; the intervenor's steps carry c = 2.
/// Finished trajectories are relabeled and appended to `ds`, tagged with `iteration`;
/// aborted ones are dropped.
DeployStats deployment(const PolicyParams& params, Dataset& ds, Intervenor& intervenor, const DeployConfig& cfg,
                       std::uint64_t seed, int iteration, const TokenizerConfig& tok = {});

// Optimization ---------------------------------------------------------------

struct OptimizeConfig {
  HapoConfig hapo;
  Method method = Method::hapo;
  int grad_steps = 1000;
};

struct OptimizeResult {
  PolicyParams params;
  bool failure_fallback = false;  ///< the failure class was empty
};

/// grad_steps of balanced sampling, loss, and Adam against the frozen `ref`.
/// Throws std::runtime_error when the intervention class is empty.
OptimizeResult optimization(const PolicyParams& params, const PolicyParams& ref, const Dataset& ds,
                            const OptimizeConfig& cfg, std::uint64_t seed,
                            const std::function<void(const std::string&)>& metrics = {},
                            const std::function<void(const std::string&)>& warn = {});

// Lifelong loop ----------------------------------------------------------------

enum class Mixture { cumulative, recent };
std::string to_string(Mixture m);
Mixture parse_mixture(const std::string& s);

struct LoopConfig {
  int X = 3;
  int rollouts = 20;
  int K = 10;
  Disruption disruption = Disruption::none;
  int horizon = 200;
  Mixture mixture = Mixture::cumulative;
  OptimizeConfig optimize;
  ThresholdConfig intervenor;
  EvalConfig eval;
  std::string out_dir;
  /// Stop after this many deploy-optimize phases (simulates an interrupted run).
  std::optional<int> stop_after;

  void validate() const;
  KeyValues to_key_values() const;
  static LoopConfig from_key_values(const KeyValues& kv);
};

struct LifelongResult {
  std::vector<IterationRecord> records;
  PolicyParams params;
  Dataset interaction;
  bool completed = false;
};

/// Seed of deploy-optimize phase i.
std::uint64_t phase_seed(std::uint64_t master, int i, std::string_view stream);

/// Artifact names inside cfg.out_dir.
std::string checkpoint_path(const std::string& dir, int i);
std::string interaction_path(const std::string& dir, int i);

/// Evaluates pi_0, then for i = 0..X-1: deploys pi_i with the intervenor,
/// optimizes against ref = pi_i, and evaluates pi_{i+1}. With `resume`, picks up
/// after the last completed phase found in cfg.out_dir.
/// `intervenor` defaults to a ThresholdIntervenor built from cfg.intervenor.
LifelongResult lifelong(const PolicyParams& warm, const Dataset& demos, const LoopConfig& cfg, std::uint64_t master,
                        bool resume = false, Intervenor* intervenor = nullptr);

}  // namespace hapo
