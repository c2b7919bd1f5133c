#include "hapo/loop.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace hapo {

namespace fs = std::filesystem;

// Intervenors ------------------------------------------------------------------

void ThresholdConfig::validate() const {
  if (!(deviation > 0.0)) throw std::invalid_argument("intervenor deviation must be positive");
  if (deviation_steps < 1 || stall_steps < 1 || hold_steps < 1)
    throw std::invalid_argument("intervenor step counts must be >= 1");
}

KeyValues ThresholdConfig::to_key_values() const {
  return {{"intervene_deviation", format_double(deviation)},
          {"intervene_deviation_steps", std::to_string(deviation_steps)},
          {"intervene_stall_steps", std::to_string(stall_steps)},
          {"intervene_hold_steps", std::to_string(hold_steps)}};
}

ThresholdConfig ThresholdConfig::from_key_values(const KeyValues& kv) {
  ThresholdConfig c;
  c.deviation = kv_double(kv, "intervene_deviation", c.deviation);
  c.deviation_steps = static_cast<int>(kv_int(kv, "intervene_deviation_steps", c.deviation_steps));
  c.stall_steps = static_cast<int>(kv_int(kv, "intervene_stall_steps", c.stall_steps));
  c.hold_steps = static_cast<int>(kv_int(kv, "intervene_hold_steps", c.hold_steps));
  c.validate();
  return c;
}

ThresholdIntervenor::ThresholdIntervenor(ThresholdConfig cfg) : cfg_(cfg) { cfg_.validate(); }

void ThresholdIntervenor::begin_episode(const TaskSpec& spec) {
  spec_ = spec;
  remaining_ = deviating_ = stalled_ = 0;
}

bool ThresholdIntervenor::wants_control(const EnvState&) {
  if (remaining_ > 0) return true;
  if (deviating_ >= cfg_.deviation_steps || stalled_ >= cfg_.stall_steps) {
    remaining_ = cfg_.hold_steps;
    deviating_ = stalled_ = 0;
    return true;
  }
  return false;
}

std::optional<ContinuousAction> ThresholdIntervenor::corrective_action(const EnvState& state) {
  return expert_action(state, spec_);
}

void ThresholdIntervenor::observe(const EnvState& before, const ContinuousAction& executed, bool intervened,
                                  const EnvState& after) {
  if (intervened) {
    --remaining_;
    return;
  }
  const auto expert = expert_action(before, spec_).to_array();
  const auto taken = executed.clamped().to_array();
  double l1 = 0.0;
  for (int d = 0; d < kActionDims; ++d) l1 += std::abs(expert[d] - taken[d]);
  deviating_ = l1 > cfg_.deviation ? deviating_ + 1 : 0;
  const bool progress = after.holding != before.holding || subgoal_distance(after) < subgoal_distance(before);
  stalled_ = progress ? 0 : stalled_ + 1;
}

ScheduledIntervenor::ScheduledIntervenor(std::vector<std::pair<int, int>> windows) : windows_(std::move(windows)) {}

bool ScheduledIntervenor::wants_control(const EnvState& state) {
  return std::any_of(windows_.begin(), windows_.end(),
                     [&](const auto& w) { return state.t >= w.first && state.t < w.second; });
}

std::optional<ContinuousAction> ScheduledIntervenor::corrective_action(const EnvState& state) {
  return expert_action(state, spec_);
}

// Recorder ---------------------------------------------------------------------

EpisodeRecorder::EpisodeRecorder(EpisodeMeta meta, TokenizerConfig tok) : tok_(tok) {
  traj_.source = Source::interaction;
  traj_.meta = meta;
}

void EpisodeRecorder::record(const Observation& o, const ContinuousAction& a, bool intervened) {
  Step s;
  s.o.assign(o.begin(), o.end());
  s.a = a.clamped();
  s.tokens = encode(s.a, tok_);
  s.c = intervened ? Label::intervention : Label::acceptable;
  s.t = static_cast<int>(traj_.steps.size());
  traj_.steps.push_back(std::move(s));
}

Trajectory EpisodeRecorder::finish(bool success, int K) && {
  traj_.success = success;
  return relabel_interventions(std::move(traj_), K);
}

// Warm start -------------------------------------------------------------------

void BcConfig::validate() const {
  if (batch < 1 || max_steps < 0 || check_every < 1 || patience < 1) throw std::invalid_argument("invalid BC schedule");
  if (!(lr > 0.0)) throw std::invalid_argument("BC lr must be positive");
}

Dataset collect_expert(int n, int horizon, std::uint64_t seed, double max_failure, const TokenizerConfig& tok) {
  if (n < 1) throw std::invalid_argument("collect_expert: need at least one demonstration");
  Dataset ds(tok, TaskSpec{Disruption::none, seed, horizon});
  int failures = 0;
  for (int i = 0; i < n; ++i) {
    TaskSpec spec{Disruption::none, derive_seed(seed, "expert", static_cast<std::uint64_t>(i)), horizon};
    Trajectory traj;
    traj.source = Source::expert;
    traj.meta = {spec, static_cast<std::uint64_t>(i), 0};
    EnvState state = reset(spec);
    while (!is_finished(spec, state)) {
      Step s;
      const auto o = observe(state);
      s.o.assign(o.begin(), o.end());
      s.a = expert_action(state, spec);
      s.tokens = encode(s.a, tok);
      s.t = state.t;
      state = step(spec, state, s.a).state;
      traj.steps.push_back(std::move(s));
    }
    traj.success = is_success(spec, state);
    if (!traj.success) ++failures;
    ds.append(std::move(traj));
  }
  if (failures > max_failure * n)
    throw std::runtime_error("expert failed " + std::to_string(failures) + " of " + std::to_string(n) +
                             " demonstrations; check the environment configuration");
  return ds;
}

BcResult train_bc(PolicyParams init, const Dataset& ds, const BcConfig& cfg, std::uint64_t seed,
                  const std::function<void(const std::string&)>& metrics) {
  cfg.validate();
  if (ds.total_steps() == 0) throw std::invalid_argument("train_bc: empty dataset");
  std::vector<Step> all;
  for (const auto& t : ds.trajectories())
    for (const auto& s : t.steps) all.push_back(s);

  BcResult r{std::move(init), 0, 0.0};
  Rng rng(derive_seed(seed, "bc.sampler"));
  AdamState adam;
  double best = bc_loss_and_grad(r.params, all).report.loss;
  r.loss = best;
  int stale = 0;
  std::vector<Step> batch(static_cast<std::size_t>(cfg.batch));
  while (r.steps < cfg.max_steps) {
    for (auto& s : batch) s = all[rng.uniform_index(all.size())];
    adam_step(r.params, bc_loss_and_grad(r.params, batch).grad, adam, cfg.lr);
    ++r.steps;
    if (r.steps % cfg.check_every == 0) {
      const double loss = bc_loss_and_grad(r.params, all).report.loss;
      if (metrics) {
        nlohmann::ordered_json j;
        j["step"] = r.steps;
        j["bc_loss"] = loss;
        metrics(j.dump());
      }
      r.loss = loss;
      if (best - loss < cfg.plateau_tol * std::abs(best)) {
        if (++stale >= cfg.patience) break;
      } else {
        best = loss;
        stale = 0;
      }
    }
  }
  return r;
}

WarmStart warm_start(const WarmStartConfig& cfg, std::uint64_t seed) {
  auto demos = collect_expert(cfg.demos, cfg.horizon, derive_seed(seed, "env"), cfg.max_expert_failure);
  auto bc = train_bc(PolicyParams::init(derive_seed(seed, "init"), cfg.shape), demos, cfg.bc, seed);
  return {bc.params, std::move(demos), bc};
}

// Deployment -------------------------------------------------------------------

std::uint64_t rollout_task_seed(std::uint64_t seed, int r) {
  return derive_seed(seed, "deploy.task", static_cast<std::uint64_t>(r));
}

std::uint64_t rollout_sampler_seed(std::uint64_t seed, int r) {
  return derive_seed(seed, "sampler", static_cast<std::uint64_t>(r));
}

DeployStats deployment(const PolicyParams& params, Dataset& ds, Intervenor& intervenor, const DeployConfig& cfg,
                       std::uint64_t seed, int iteration, const TokenizerConfig& tok) {
  DeployStats stats;
  for (int r = 0; r < cfg.rollouts; ++r) {
    const TaskSpec spec{cfg.disruption, rollout_task_seed(seed, r), cfg.horizon};
    Rng sampler(rollout_sampler_seed(seed, r));
    EpisodeRecorder rec({spec, static_cast<std::uint64_t>(r), iteration}, tok);
    intervenor.begin_episode(spec);
    EnvState state = reset(spec);
    bool aborted = false;
    long long intervened = 0;
    while (!is_finished(spec, state)) {
      const auto o = observe(state);
      const bool human = intervenor.wants_control(state);
      ContinuousAction a;
      if (human) {
        const auto corrective = intervenor.corrective_action(state);
        if (!corrective) {
          aborted = true;
          break;
        }
        a = corrective->clamped();
        ++intervened;
      } else {
        a = decode(sample(params, o, sampler, cfg.temperature), tok);
      }
      rec.record(o, a, human);
      const auto next = step(spec, state, a).state;
      intervenor.observe(state, a, human, next);
      state = next;
    }
    ++stats.rollouts;
    if (aborted) {
      ++stats.aborted;
      continue;
    }
    const bool success = is_success(spec, state);
    stats.successes += success;
    stats.steps += static_cast<long long>(rec.size());
    stats.intervened += intervened;
    ds.append(std::move(rec).finish(success, cfg.K));
  }
  return stats;
}

// Optimization -----------------------------------------------------------------

OptimizeResult optimization(const PolicyParams& params, const PolicyParams& ref, const Dataset& ds,
                            const OptimizeConfig& cfg, std::uint64_t seed,
                            const std::function<void(const std::string&)>& metrics,
                            const std::function<void(const std::string&)>& warn) {
  cfg.hapo.validate();
  if (cfg.grad_steps < 0) throw std::invalid_argument("grad_steps must be >= 0");
  OptimizeResult out{params, false};
  if (cfg.grad_steps == 0) return out;

  if (cfg.method != Method::bc && ds.class_index(StepClass::intervention).empty())
    throw std::runtime_error(
        "no intervention steps in the dataset; preference optimization needs them (use train-bc instead)");
  if (ds.class_index(StepClass::expert).empty()) throw std::runtime_error("no expert steps in the dataset");
  out.failure_fallback = ds.class_index(StepClass::failure).empty();
  if (out.failure_fallback && warn)
    warn("failure class is empty; its share of each batch goes to intervention steps");

  static constexpr std::array<StepClass, 3> kDesirableInteraction{StepClass::expert, StepClass::intervention,
                                                                  StepClass::policy};
  static constexpr std::array<StepClass, 1> kExpertOnly{StepClass::expert};
  Rng sampler(derive_seed(seed, "optim.sampler"));
  Rng noise(derive_seed(seed, "optim.noise"));
  AdamState adam;
  for (int k = 0; k < cfg.grad_steps; ++k) {
    std::vector<Step> batch;
    switch (cfg.method) {
      case Method::dagger:
      case Method::sirius: batch = sample_classes(ds, kDesirableInteraction, cfg.hapo.batch, sampler); break;
      case Method::bc: batch = sample_classes(ds, kExpertOnly, cfg.hapo.batch, sampler); break;
      default: batch = balanced_sample(ds, cfg.hapo.batch, sampler, true); break;
    }
    const auto lg = baseline_loss(cfg.method, out.params, ref, batch, cfg.hapo, ds.tokenizer(), &noise);
    if (metrics) metrics(metrics_record(k, lg.report));
    adam_step(out.params, lg.grad, adam, cfg.hapo.lr);
  }
  return out;
}

// Lifelong ---------------------------------------------------------------------

std::string to_string(Mixture m) { return m == Mixture::cumulative ? "cumulative" : "recent"; }

Mixture parse_mixture(const std::string& s) {
  if (s == "cumulative") return Mixture::cumulative;
  if (s == "recent") return Mixture::recent;
  throw std::invalid_argument("unknown mixture '" + s + "'");
}

void LoopConfig::validate() const {
  if (X < 0) throw std::invalid_argument("X must be >= 0");
  if (rollouts < 1) throw std::invalid_argument("rollouts must be >= 1");
  if (K < 0) throw std::invalid_argument("K must be >= 0");
  if (horizon < 1) throw std::invalid_argument("horizon must be >= 1");
  if (optimize.grad_steps < 0) throw std::invalid_argument("grad_steps must be >= 0");
  optimize.hapo.validate();
  intervenor.validate();
  eval.validate();
}

KeyValues LoopConfig::to_key_values() const {
  KeyValues kv = optimize.hapo.to_key_values();
  kv.merge(intervenor.to_key_values());
  kv["X"] = std::to_string(X);
  kv["rollouts"] = std::to_string(rollouts);
  kv["K"] = std::to_string(K);
  kv["disruption"] = to_string(disruption);
  kv["horizon"] = std::to_string(horizon);
  kv["mixture"] = to_string(mixture);
  kv["method"] = to_string(optimize.method);
  kv["grad_steps"] = std::to_string(optimize.grad_steps);
  kv["eval_episodes"] = std::to_string(eval.episodes);
  std::string seeds;
  for (auto s : eval.seeds) seeds += (seeds.empty() ? "" : ",") + std::to_string(s);
  kv["eval_seeds"] = seeds;
  return kv;
}

LoopConfig LoopConfig::from_key_values(const KeyValues& kv) {
  LoopConfig c;
  c.optimize.hapo = HapoConfig::from_key_values(kv);
  c.intervenor = ThresholdConfig::from_key_values(kv);
  c.X = static_cast<int>(kv_int(kv, "X", c.X));
  c.rollouts = static_cast<int>(kv_int(kv, "rollouts", c.rollouts));
  c.K = static_cast<int>(kv_int(kv, "K", c.K));
  c.optimize.hapo.K = c.K;
  c.disruption = parse_disruption(kv_string(kv, "disruption", to_string(c.disruption)));
  c.horizon = static_cast<int>(kv_int(kv, "horizon", c.horizon));
  c.mixture = parse_mixture(kv_string(kv, "mixture", to_string(c.mixture)));
  c.optimize.method = parse_method(kv_string(kv, "method", to_string(c.optimize.method)));
  c.optimize.grad_steps = static_cast<int>(kv_int(kv, "grad_steps", c.optimize.grad_steps));
  c.eval.episodes = static_cast<int>(kv_int(kv, "eval_episodes", c.eval.episodes));
  c.eval.horizon = c.horizon;
  if (auto it = kv.find("eval_seeds"); it != kv.end()) {
    c.eval.seeds.clear();
    std::size_t pos = 0;
    const auto& text = it->second;
    while (pos <= text.size()) {
      const auto comma = std::min(text.find(',', pos), text.size());
      if (comma > pos) c.eval.seeds.push_back(std::stoull(text.substr(pos, comma - pos)));
      pos = comma + 1;
    }
  }
  c.validate();
  return c;
}

std::uint64_t phase_seed(std::uint64_t master, int i, std::string_view stream) {
  return derive_seed(master, stream, static_cast<std::uint64_t>(i));
}

std::string checkpoint_path(const std::string& dir, int i) {
  return (fs::path(dir) / ("policy_" + std::to_string(i) + ".bin")).string();
}

std::string interaction_path(const std::string& dir, int i) {
  return (fs::path(dir) / ("interaction_" + std::to_string(i) + ".jsonl")).string();
}

namespace {

std::string progress_path(const std::string& dir) { return (fs::path(dir) / "progress.json").string(); }
std::string metrics_path(const std::string& dir) { return (fs::path(dir) / "metrics.jsonl").string(); }

void write_text(const std::string& path, const std::string& text) {
  const auto tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
  }
  fs::rename(tmp, path);
}

void write_records(const std::string& dir, const std::vector<IterationRecord>& records) {
  std::string text;
  for (const auto& r : records) text += iteration_json(r) + "\n";
  write_text(metrics_path(dir), text);
}

int read_progress(const std::string& dir) {
  std::ifstream in(progress_path(dir));
  if (!in) return -1;
  return nlohmann::json::parse(in).at("phases_completed").get<int>();
}

void write_progress(const std::string& dir, int phases) {
  nlohmann::ordered_json j;
  j["phases_completed"] = phases;
  write_text(progress_path(dir), j.dump() + "\n");
}

Dataset training_set(const Dataset& demos, const Dataset& interaction, Mixture mixture, int iteration) {
  Dataset train(demos.tokenizer(), demos.env());
  train.append_all(demos);
  for (const auto& t : interaction.trajectories())
    if (mixture == Mixture::cumulative || t.meta.iteration == iteration) train.append(t);
  return train;
}

}  // namespace

LifelongResult lifelong(const PolicyParams& warm, const Dataset& demos, const LoopConfig& cfg, std::uint64_t master,
                        bool resume, Intervenor* intervenor) {
  cfg.validate();
  const bool persist = !cfg.out_dir.empty();
  if (resume && !persist) throw std::invalid_argument("resume needs an output directory");
  if (persist) fs::create_directories(cfg.out_dir);

  ThresholdIntervenor scripted(cfg.intervenor);
  Intervenor& interv = intervenor ? *intervenor : scripted;

  LifelongResult res{{}, warm, Dataset(demos.tokenizer(), TaskSpec{cfg.disruption, master, cfg.horizon}), false};
  int start = 0;
  if (resume) {
    start = read_progress(cfg.out_dir);
    if (start < 0) throw std::runtime_error("nothing to resume in " + cfg.out_dir);
    res.params = load_policy(checkpoint_path(cfg.out_dir, start), &warm.shape());
    if (start > 0) res.interaction = load_dataset(interaction_path(cfg.out_dir, start));
    res.records = read_iteration_records(metrics_path(cfg.out_dir));
    res.records.resize(static_cast<std::size_t>(start));
  } else if (persist) {
    save_policy(warm, checkpoint_path(cfg.out_dir, 0));
    write_records(cfg.out_dir, {});
    write_progress(cfg.out_dir, 0);
  }

  for (int i = start;; ++i) {
    const auto report = evaluate(res.params, cfg.disruption, cfg.eval, demos.tokenizer());
    IterationRecord rec;
    rec.iteration = i;
    rec.success_rate = report.success_rate;
    rec.median_seed_success = report.median_seed_success();
    for (const auto& s : report.per_seed) rec.per_seed_success.push_back(s.success_rate);
    rec.seed = master;
    if (i == cfg.X) {
      res.records.push_back(rec);
      if (persist) write_records(cfg.out_dir, res.records);
      res.completed = true;
      break;
    }
    if (cfg.stop_after && i - start >= *cfg.stop_after) break;

    DeployConfig dc{cfg.rollouts, cfg.K, cfg.disruption, cfg.horizon, 1.0};
    const auto stats =
        deployment(res.params, res.interaction, interv, dc, phase_seed(master, i, "deploy"), i, demos.tokenizer());
    rec.n_rollouts = stats.rollouts;
    if (stats.steps > 0) rec.intervention_ratio = stats.intervention_ratio();
    res.records.push_back(rec);

    const PolicyParams ref = res.params;
    const auto train = training_set(demos, res.interaction, cfg.mixture, i);
    std::ofstream optim_log;
    if (persist) optim_log.open((fs::path(cfg.out_dir) / ("optim_" + std::to_string(i) + ".jsonl")).string());
    auto sink = [&](const std::string& line) {
      if (optim_log) optim_log << line << '\n';
    };
    auto opt = cfg.optimize;
    opt.hapo.K = cfg.K;
    res.params = optimization(res.params, ref, train, opt, phase_seed(master, i, "optimize"), sink).params;

    if (persist) {
      save_policy(res.params, checkpoint_path(cfg.out_dir, i + 1));
      save_dataset(res.interaction, interaction_path(cfg.out_dir, i + 1));
      write_records(cfg.out_dir, res.records);
      write_progress(cfg.out_dir, i + 1);
    }
  }
  return res;
}

}  // namespace hapo
