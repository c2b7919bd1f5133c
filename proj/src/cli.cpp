#include "hapo/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "hapo/bridge.hpp"
#include "hapo/eval.hpp"
#include "hapo/loop.hpp"
#include "json.hpp"

namespace hapo {

namespace fs = std::filesystem;

// Manifest ---------------------------------------------------------------------

std::string RunManifest::to_json() const {
  nlohmann::ordered_json j;
  j["run_id"] = run_id;
  j["seed"] = seed;
  j["config"] = nlohmann::ordered_json(config);
  auto& ph = j["phases"] = nlohmann::ordered_json::object();
  for (const auto& [name, p] : phases)
    ph[name] = {{"completed", p.completed}, {"artifacts", p.artifacts}, {"settings", nlohmann::ordered_json(p.settings)}};
  return j.dump(2) + "\n";
}

RunManifest RunManifest::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  RunManifest m;
  m.run_id = j.at("run_id").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.config = j.at("config").get<KeyValues>();
  for (const auto& [name, p] : j.at("phases").items())
    m.phases[name] = {p.at("artifacts").get<std::vector<std::string>>(), p.at("settings").get<KeyValues>(),
                      p.at("completed").get<bool>()};
  return m;
}

namespace {

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop = true; }

struct Context {
  std::uint64_t seed = 0;
  std::string out_dir = "run";
  std::string config_path;
  KeyValues overrides;
  KeyValues settings;  ///< config file plus overrides
  std::ostream* out = nullptr;
  std::ostream* err = nullptr;

  std::string in_out(const std::string& name) const { return (fs::path(out_dir) / name).string(); }
};

std::string require_file(const std::string& path) {
  if (!fs::exists(path)) throw std::runtime_error("missing artifact: " + path);
  return path;
}

std::string env_name(const std::string& flag) {
  std::string s = "HAPO_";
  for (char ch : flag) s += ch == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  return s;
}

/// Adds `--flag` that overrides settings key `key`.
void setting(CLI::App* app, Context& ctx, const std::string& flag, const std::string& key, const std::string& desc) {
  app->add_option("--" + flag, desc)
      ->envname(env_name(flag))
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)
      ->each([&ctx, key](const std::string& v) { ctx.overrides[key] = v; });
}

CLI::Option* path_flag(CLI::App* app, const std::string& flag, std::string& target, const std::string& desc) {
  return app->add_option("--" + flag, target, desc)->envname(env_name(flag));
}

void load_settings(Context& ctx) {
  if (!ctx.config_path.empty()) ctx.settings = read_key_values(require_file(ctx.config_path));
  for (const auto& [k, v] : ctx.overrides) ctx.settings[k] = v;
}

void record_phase(const Context& ctx, const std::string& phase, std::vector<std::string> artifacts) {
  fs::create_directories(ctx.out_dir);
  const auto path = ctx.in_out("manifest.json");
  RunManifest m;
  if (fs::exists(path)) {
    std::ifstream in(path);
    m = RunManifest::from_json(std::string(std::istreambuf_iterator<char>(in), {}));
  } else {
    m.run_id = "run-" + std::to_string(ctx.seed);
    m.seed = ctx.seed;
    m.config = ctx.settings;
  }
  auto settings = ctx.settings;
  settings["seed"] = std::to_string(ctx.seed);
  m.phases[phase] = {std::move(artifacts), std::move(settings), true};
  std::ofstream(path) << m.to_json();
}

BcConfig bc_config(const KeyValues& kv) {
  BcConfig c;
  c.batch = static_cast<int>(kv_int(kv, "bc_batch", c.batch));
  c.lr = kv_double(kv, "bc_lr", c.lr);
  c.max_steps = static_cast<int>(kv_int(kv, "bc_max_steps", c.max_steps));
  c.check_every = static_cast<int>(kv_int(kv, "bc_check_every", c.check_every));
  c.plateau_tol = kv_double(kv, "bc_plateau_tol", c.plateau_tol);
  c.patience = static_cast<int>(kv_int(kv, "bc_patience", c.patience));
  c.validate();
  return c;
}

SessionConfig session_config(const KeyValues& kv, std::uint64_t seed) {
  SessionConfig c;
  c.disruption = parse_disruption(kv_string(kv, "disruption", to_string(c.disruption)));
  c.seed = derive_seed(seed, "deploy");
  c.horizon = static_cast<int>(kv_int(kv, "horizon", c.horizon));
  c.K = static_cast<int>(kv_int(kv, "K", c.K));
  c.temperature = kv_double(kv, "temperature", c.temperature);
  c.tick_hz = kv_double(kv, "tick_hz", c.tick_hz);
  if (c.tick_hz <= 0) throw std::invalid_argument("tick_hz must be > 0");
  return c;
}

std::ofstream open_log(const std::string& path) {
  fs::create_directories(fs::path(path).parent_path().empty() ? fs::path(".") : fs::path(path).parent_path());
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  return f;
}

// Subcommands ------------------------------------------------------------------

int cmd_collect_expert(Context& ctx) {
  const auto& kv = ctx.settings;
  const auto demos = collect_expert(static_cast<int>(kv_int(kv, "demos", 50)),
                                    static_cast<int>(kv_int(kv, "horizon", 200)), derive_seed(ctx.seed, "env"),
                                    kv_double(kv, "max_expert_failure", 0.05));
  fs::create_directories(ctx.out_dir);
  const auto path = ctx.in_out("demos.jsonl");
  save_dataset(demos, path);
  record_phase(ctx, "collect-expert", {path});
  *ctx.out << "wrote " << demos.trajectories().size() << " demonstrations to " << path << "\n";
  return 0;
}

int cmd_train_bc(Context& ctx, std::string dataset, std::string checkpoint) {
  if (dataset.empty()) dataset = ctx.in_out("demos.jsonl");
  if (checkpoint.empty()) checkpoint = ctx.in_out("policy_bc.bin");
  const auto demos = load_dataset(require_file(dataset));
  const auto shape = PolicyShape::from_key_values(ctx.settings);
  auto log = open_log(ctx.in_out("bc_metrics.jsonl"));
  const auto res = train_bc(PolicyParams::init(derive_seed(ctx.seed, "init"), shape), demos, bc_config(ctx.settings),
                            ctx.seed, [&](const std::string& line) { log << line << '\n'; });
  save_policy(res.params, checkpoint);
  record_phase(ctx, "train-bc", {checkpoint, ctx.in_out("bc_metrics.jsonl")});
  *ctx.out << "trained " << res.steps << " steps, loss " << format_double(res.loss) << ", wrote " << checkpoint
           << "\n";
  return 0;
}

int run_service(Context& ctx, const std::string& checkpoint, std::string dataset_out, const std::string& phase) {
  if (dataset_out.empty()) dataset_out = ctx.in_out("interaction.jsonl");
  const auto params = load_policy(require_file(checkpoint));
  const auto cfg = session_config(ctx.settings, ctx.seed);
  ServeOptions opt;
  opt.port = static_cast<int>(kv_int(ctx.settings, "port", 8765));
  opt.host = kv_string(ctx.settings, "host", opt.host);
  opt.max_episodes = static_cast<int>(kv_int(ctx.settings, "max_episodes", 0));
  opt.max_ticks = kv_int(ctx.settings, "max_ticks", 0);
  opt.stop = &g_stop;
  opt.on_ready = [&](int port) { *ctx.out << "listening on " << opt.host << ":" << port << std::endl; };
  opt.log = [&](const std::string& line) { *ctx.err << line << std::endl; };
  g_stop = false;
  auto prev_int = std::signal(SIGINT, on_signal);
  auto prev_term = std::signal(SIGTERM, on_signal);
  const auto session = serve(params, cfg, opt);
  std::signal(SIGINT, prev_int);
  std::signal(SIGTERM, prev_term);

  save_dataset(session.dataset(), dataset_out);
  const auto journal = ctx.in_out("journal.jsonl");
  save_journal(session.journal(), journal);
  record_phase(ctx, phase, {dataset_out, journal});
  *ctx.out << "served " << session.ticks() << " ticks, " << session.episodes_finished() << " episodes, wrote "
           << dataset_out << "\n";
  return 0;
}

int cmd_deploy(Context& ctx, std::string checkpoint, std::string dataset_out, const std::string& mode) {
  if (checkpoint.empty()) checkpoint = ctx.in_out("policy_bc.bin");
  if (mode == "serve") return run_service(ctx, checkpoint, dataset_out, "deploy");
  if (dataset_out.empty()) dataset_out = ctx.in_out("interaction.jsonl");
  const auto params = load_policy(require_file(checkpoint));
  const auto& kv = ctx.settings;
  DeployConfig dc;
  dc.rollouts = static_cast<int>(kv_int(kv, "rollouts", dc.rollouts));
  dc.K = static_cast<int>(kv_int(kv, "K", dc.K));
  dc.disruption = parse_disruption(kv_string(kv, "disruption", to_string(dc.disruption)));
  dc.horizon = static_cast<int>(kv_int(kv, "horizon", dc.horizon));
  dc.temperature = kv_double(kv, "temperature", dc.temperature);
  ThresholdIntervenor intervenor(ThresholdConfig::from_key_values(kv));
  Dataset ds;
  const auto stats = deployment(params, ds, intervenor, dc, derive_seed(ctx.seed, "deploy"),
                                static_cast<int>(kv_int(kv, "iteration", 0)));
  fs::create_directories(ctx.out_dir);
  save_dataset(ds, dataset_out);
  record_phase(ctx, "deploy", {dataset_out});
  nlohmann::ordered_json j{{"rollouts", stats.rollouts},     {"aborted", stats.aborted},
                           {"successes", stats.successes},   {"steps", stats.steps},
                           {"intervened", stats.intervened}, {"intervention_ratio", stats.intervention_ratio()}};
  *ctx.out << j.dump() << "\n";
  return 0;
}

int cmd_optimize(Context& ctx, std::string checkpoint, std::string ref, const std::vector<std::string>& datasets,
                 std::string out_checkpoint) {
  if (datasets.empty()) {
    *ctx.err << "optimize: missing required option --dataset\n";
    return 1;
  }
  if (checkpoint.empty()) checkpoint = ctx.in_out("policy_bc.bin");
  if (ref.empty()) ref = checkpoint;
  if (out_checkpoint.empty()) out_checkpoint = ctx.in_out("policy_tuned.bin");
  const auto params = load_policy(require_file(checkpoint));
  const auto ref_params = load_policy(require_file(ref));
  Dataset ds;
  for (const auto& p : datasets) ds.append_all(load_dataset(require_file(p)));

  OptimizeConfig oc;
  oc.hapo = HapoConfig::from_key_values(ctx.settings);
  oc.method = parse_method(kv_string(ctx.settings, "method", to_string(oc.method)));
  oc.grad_steps = static_cast<int>(kv_int(ctx.settings, "grad_steps", oc.grad_steps));
  const auto metrics = ctx.in_out("optim_metrics.jsonl");
  auto log = open_log(metrics);
  const auto res = optimization(
      params, ref_params, ds, oc, derive_seed(ctx.seed, "optimize"), [&](const std::string& l) { log << l << '\n'; },
      [&](const std::string& w) { *ctx.err << "warning: " << w << "\n"; });
  save_policy(res.params, out_checkpoint);
  record_phase(ctx, "optimize", {out_checkpoint, metrics});
  *ctx.out << "optimized " << oc.grad_steps << " steps (" << to_string(oc.method) << "), wrote " << out_checkpoint
           << "\n";
  return 0;
}

int cmd_lifelong(Context& ctx, std::string checkpoint, std::string demos_path, std::string run_dir, bool resume) {
  if (checkpoint.empty()) checkpoint = ctx.in_out("policy_bc.bin");
  if (demos_path.empty()) demos_path = ctx.in_out("demos.jsonl");
  if (run_dir.empty()) run_dir = ctx.in_out("lifelong");
  const auto warm = load_policy(require_file(checkpoint));
  const auto demos = load_dataset(require_file(demos_path));
  auto cfg = LoopConfig::from_key_values(ctx.settings);
  cfg.out_dir = run_dir;
  const auto res = lifelong(warm, demos, cfg, ctx.seed, resume);
  record_phase(ctx, "lifelong", {run_dir});
  for (const auto& r : res.records) *ctx.out << iteration_json(r) << "\n";
  return 0;
}

int cmd_eval(Context& ctx, std::string checkpoint, const std::string& base, const std::string& task) {
  if (checkpoint.empty()) checkpoint = ctx.in_out("policy_bc.bin");
  const auto params = load_policy(require_file(checkpoint));
  const auto& kv = ctx.settings;
  EvalConfig ec = LoopConfig::from_key_values(kv).eval;
  fs::create_directories(ctx.out_dir);

  if (!base.empty()) {
    const auto table = disruption_suite(load_policy(require_file(base)), params, ec);
    const auto path = ctx.in_out("suite.csv");
    std::ofstream(path) << suite_csv(table);
    record_phase(ctx, "eval", {path});
    *ctx.out << suite_csv(table);
    return 0;
  }
  const auto report = evaluate(params, parse_disruption(task.empty() ? kv_string(kv, "disruption", "none") : task), ec);
  const auto log = ctx.in_out("eval_episodes.jsonl");
  std::ofstream(log) << episode_log(report);
  record_phase(ctx, "eval", {log});
  nlohmann::ordered_json j{{"task", report.task_id},
                           {"disruption", to_string(report.disruption)},
                           {"n_episodes", report.n_episodes},
                           {"success_rate", report.success_rate},
                           {"mean_episode_length", report.mean_episode_length}};
  for (const auto& s : report.per_seed) j["per_seed"].push_back({{"seed", s.seed}, {"success_rate", s.success_rate}});
  *ctx.out << j.dump() << "\n";
  return 0;
}

int cmd_report(Context& ctx, std::string run_dir) {
  if (run_dir.empty()) run_dir = ctx.in_out("lifelong");
  const auto records = read_iteration_records(require_file((fs::path(run_dir) / "metrics.jsonl").string()));
  emit_report(records, ctx.out_dir);
  record_phase(ctx, "report", {ctx.in_out("report.csv"), ctx.in_out("report.txt")});
  std::ifstream txt(ctx.in_out("report.txt"));
  *ctx.out << txt.rdbuf();
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Context ctx;
  ctx.out = &out;
  ctx.err = &err;

  CLI::App app{"Deploy, intervene, and preference-tune a token policy.", "hapo"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--seed", ctx.seed, "master seed")->envname("HAPO_SEED");
  app.add_option("--config", ctx.config_path, "key = value settings file")->envname("HAPO_CONFIG");
  app.add_option("--out", ctx.out_dir, "artifact directory")->envname("HAPO_OUT")->capture_default_str();
  app.add_option("--set", "override any setting, key=value; repeatable")
      ->envname("HAPO_SET")
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll)
      ->each([&](const std::string& s) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) throw CLI::ValidationError("--set", "expected key=value, got " + s);
        ctx.overrides[s.substr(0, eq)] = s.substr(eq + 1);
      });

  std::string checkpoint, dataset_out, ref, out_checkpoint, base, task, run_dir, demos_path, mode = "scripted";
  std::string bc_dataset;
  std::vector<std::string> datasets;
  bool resume = false;
  std::function<int()> action;

  auto* collect = app.add_subcommand("collect-expert", "record expert demonstrations on the nominal task");
  setting(collect, ctx, "demos", "demos", "number of demonstrations");
  setting(collect, ctx, "horizon", "horizon", "episode step limit");
  collect->callback([&] { action = [&] { return cmd_collect_expert(ctx); }; });

  auto* bc = app.add_subcommand("train-bc", "behavior cloning warm start");
  path_flag(bc, "dataset", bc_dataset, "demonstrations (default <out>/demos.jsonl)");
  path_flag(bc, "out-checkpoint", out_checkpoint, "checkpoint to write (default <out>/policy_bc.bin)");
  setting(bc, ctx, "hidden", "hidden", "hidden width");
  setting(bc, ctx, "bc-lr", "bc_lr", "learning rate");
  setting(bc, ctx, "bc-max-steps", "bc_max_steps", "step limit");
  bc->callback([&] { action = [&] { return cmd_train_bc(ctx, bc_dataset, out_checkpoint); }; });

  auto* deploy = app.add_subcommand("deploy", "interaction rollouts with a scripted or live intervenor");
  path_flag(deploy, "checkpoint", checkpoint, "policy (default <out>/policy_bc.bin)");
  path_flag(deploy, "out-dataset", dataset_out, "interaction dataset (default <out>/interaction.jsonl)");
  deploy->add_option("--mode", mode, "scripted or serve")
      ->envname("HAPO_MODE")
      ->check(CLI::IsMember({"scripted", "serve"}));
  setting(deploy, ctx, "task", "disruption", "none, position, background or texture");
  setting(deploy, ctx, "rollouts", "rollouts", "rollouts to run");
  setting(deploy, ctx, "port", "port", "serve mode: TCP port");
  setting(deploy, ctx, "tick-hz", "tick_hz", "serve mode: simulation rate");
  deploy->callback([&] { action = [&] { return cmd_deploy(ctx, checkpoint, dataset_out, mode); }; });

  auto* optimize = app.add_subcommand("optimize", "preference optimization against a frozen reference");
  path_flag(optimize, "checkpoint", checkpoint, "starting policy (default <out>/policy_bc.bin)");
  path_flag(optimize, "ref", ref, "reference policy (default: the starting policy)");
  optimize->add_option("--dataset", datasets, "training dataset; repeat to merge")->envname("HAPO_DATASET");
  path_flag(optimize, "out-checkpoint", out_checkpoint, "checkpoint to write (default <out>/policy_tuned.bin)");
  setting(optimize, ctx, "method", "method", "hapo, dagger, sirius, dpo_synth, kto_vanilla or bc");
  setting(optimize, ctx, "grad-steps", "grad_steps", "gradient steps");
  setting(optimize, ctx, "lr", "lr", "learning rate");
  setting(optimize, ctx, "batch", "batch", "batch size");
  optimize->callback([&] { action = [&] { return cmd_optimize(ctx, checkpoint, ref, datasets, out_checkpoint); }; });

  auto* life = app.add_subcommand("lifelong", "repeated deploy-optimize iterations");
  path_flag(life, "checkpoint", checkpoint, "warm-start policy (default <out>/policy_bc.bin)");
  path_flag(life, "demos", demos_path, "expert demonstrations (default <out>/demos.jsonl)");
  path_flag(life, "run-dir", run_dir, "iteration artifacts (default <out>/lifelong)");
  life->add_flag("--resume", resume, "continue after the last completed iteration")->envname("HAPO_RESUME");
  setting(life, ctx, "iterations", "X", "deploy-optimize iterations");
  setting(life, ctx, "task", "disruption", "deployment task");
  setting(life, ctx, "rollouts", "rollouts", "rollouts per iteration");
  setting(life, ctx, "grad-steps", "grad_steps", "gradient steps per iteration");
  setting(life, ctx, "method", "method", "training objective");
  life->callback([&] { action = [&] { return cmd_lifelong(ctx, checkpoint, demos_path, run_dir, resume); }; });

  auto* ev = app.add_subcommand("eval", "greedy success rate");
  path_flag(ev, "checkpoint", checkpoint, "policy (default <out>/policy_bc.bin)");
  path_flag(ev, "base", base, "compare against this policy over every disruption");
  ev->add_option("--task", task, "none, position, background or texture")->envname("HAPO_TASK");
  setting(ev, ctx, "episodes", "eval_episodes", "episodes per seed");
  setting(ev, ctx, "seeds", "eval_seeds", "comma-separated held-out seeds");
  ev->callback([&] { action = [&] { return cmd_eval(ctx, checkpoint, base, task); }; });

  auto* report = app.add_subcommand("report", "per-iteration summary table of a lifelong run");
  path_flag(report, "run-dir", run_dir, "lifelong artifacts (default <out>/lifelong)");
  report->callback([&] { action = [&] { return cmd_report(ctx, run_dir); }; });

  auto* srv = app.add_subcommand("serve", "live session over TCP");
  path_flag(srv, "checkpoint", checkpoint, "policy (default <out>/policy_bc.bin)");
  path_flag(srv, "out-dataset", dataset_out, "interaction dataset (default <out>/interaction.jsonl)");
  setting(srv, ctx, "task", "disruption", "none, position, background or texture");
  setting(srv, ctx, "port", "port", "TCP port (0 picks a free one)");
  setting(srv, ctx, "tick-hz", "tick_hz", "simulation rate");
  setting(srv, ctx, "max-episodes", "max_episodes", "stop after this many episodes");
  setting(srv, ctx, "max-ticks", "max_ticks", "stop after this many ticks");
  srv->callback([&] {
    action = [&] { return run_service(ctx, checkpoint.empty() ? ctx.in_out("policy_bc.bin") : checkpoint, dataset_out, "serve"); };
  });

  if (argc <= 1) {
    err << app.help();
    return 2;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n";
    const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return 2;
  }

  try {
    load_settings(ctx);
    return action();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace hapo
