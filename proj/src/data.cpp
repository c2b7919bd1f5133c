#include "hapo/data.hpp"

#include <fstream>
#include <optional>
#include <stdexcept>

#include "json.hpp"

namespace hapo {

using nlohmann::json;

Label label_from_int(int c) {
  if (c < 0 || c > 2) throw std::invalid_argument("label must be 0, 1 or 2, got " + std::to_string(c));
  return static_cast<Label>(c);
}

std::string to_string(Source s) { return s == Source::expert ? "expert" : "interaction"; }

Source parse_source(const std::string& s) {
  if (s == "expert") return Source::expert;
  if (s == "interaction") return Source::interaction;
  throw std::invalid_argument("unknown trajectory source '" + s + "'");
}

std::string to_string(StepClass k) {
  switch (k) {
    case StepClass::expert: return "expert";
    case StepClass::intervention: return "intervention";
    case StepClass::policy: return "policy";
    case StepClass::failure: return "failure";
  }
  return "?";
}

StepClass classify(Source source, Label c) {
  if (source == Source::expert) return StepClass::expert;
  switch (c) {
    case Label::intervention: return StepClass::intervention;
    case Label::undesirable: return StepClass::failure;
    case Label::acceptable: break;
  }
  return StepClass::policy;
}

Dataset::Dataset(TokenizerConfig tokenizer, TaskSpec env) : tokenizer_(tokenizer), env_(env) { tokenizer_.validate(); }

void Dataset::append(Trajectory traj) {
  for (std::size_t i = 0; i < traj.steps.size(); ++i) {
    const Step& s = traj.steps[i];
    if (s.t != static_cast<int>(i)) throw std::invalid_argument("trajectory step indices must be contiguous from 0");
    if (s.tokens != encode(s.a, tokenizer_)) throw std::invalid_argument("step tokens do not match encode(a)");
    if (traj.source == Source::expert && s.c != Label::acceptable)
      throw std::invalid_argument("expert trajectories may only contain c = 1");
  }
  const auto traj_id = static_cast<std::uint32_t>(trajectories_.size());
  for (std::size_t i = 0; i < traj.steps.size(); ++i) {
    const auto k = classify(traj.source, traj.steps[i].c);
    index_[static_cast<std::size_t>(k)].push_back({traj_id, static_cast<std::uint32_t>(i)});
  }
  total_steps_ += traj.steps.size();
  trajectories_.push_back(std::move(traj));
}

void Dataset::append_all(const Dataset& other) {
  if (!(other.tokenizer_ == tokenizer_)) throw std::invalid_argument("cannot merge datasets with different tokenizers");
  for (const auto& t : other.trajectories_) append(t);
}

Trajectory relabel_interventions(Trajectory traj, int K) {
  if (traj.source != Source::interaction) throw std::invalid_argument("relabel applies to interaction data only");
  if (K < 0) throw std::invalid_argument("relabel: K must be >= 0");
  auto& steps = traj.steps;
  const int n = static_cast<int>(steps.size());
  std::vector<bool> in_window(n, false);
  for (int s = 0; s < n; ++s) {
    const bool onset = steps[s].c == Label::intervention && (s == 0 || steps[s - 1].c != Label::intervention);
    if (!onset) continue;
    for (int j = std::max(0, s - K); j < s; ++j) in_window[j] = true;
  }
  for (int i = 0; i < n; ++i) {
    if (steps[i].c == Label::intervention) continue;
    steps[i].c = in_window[i] ? Label::undesirable : Label::acceptable;
  }
  return traj;
}

namespace {

void draw_from(const Dataset& ds, StepClass k, int count, Rng& rng, std::vector<Step>& out) {
  const auto refs = ds.class_index(k);
  if (refs.empty()) throw std::runtime_error("balanced_sample: empty class '" + to_string(k) + "'");
  for (int i = 0; i < count; ++i) out.push_back(ds.step(refs[rng.uniform_index(refs.size())]));
}

}  // namespace

std::vector<Step> balanced_sample(const Dataset& ds, int batch, Rng& rng, bool allow_missing_failure) {
  if (batch <= 0 || batch % 4 != 0) throw std::invalid_argument("batch not divisible by 4");
  const int quarter = batch / 4;
  int n_intervention = quarter;
  int n_failure = quarter;
  if (allow_missing_failure && ds.class_index(StepClass::failure).empty()) {
    n_intervention += n_failure;
    n_failure = 0;
  }
  std::vector<Step> out;
  out.reserve(batch);
  draw_from(ds, StepClass::expert, batch / 2, rng, out);
  draw_from(ds, StepClass::intervention, n_intervention, rng, out);
  if (n_failure > 0) draw_from(ds, StepClass::failure, n_failure, rng, out);
  return out;
}

std::vector<Step> sample_classes(const Dataset& ds, std::span<const StepClass> classes, int batch, Rng& rng) {
  std::size_t total = 0;
  for (auto k : classes) total += ds.class_index(k).size();
  if (total == 0) throw std::runtime_error("sample_classes: no steps in the requested classes");
  std::vector<Step> out;
  out.reserve(batch);
  for (int i = 0; i < batch; ++i) {
    std::size_t r = rng.uniform_index(total);
    for (auto k : classes) {
      const auto refs = ds.class_index(k);
      if (r < refs.size()) {
        out.push_back(ds.step(refs[r]));
        break;
      }
      r -= refs.size();
    }
  }
  return out;
}

namespace {

json task_json(const TaskSpec& t) {
  return {{"disruption", to_string(t.disruption)},
          {"seed", t.seed},
          {"horizon", t.episode_horizon},
          {"success_radius", t.success_radius}};
}

TaskSpec task_from_json(const json& j) {
  TaskSpec t;
  t.disruption = parse_disruption(j.at("disruption").get<std::string>());
  t.seed = j.at("seed").get<std::uint64_t>();
  t.episode_horizon = j.at("horizon").get<int>();
  t.success_radius = j.at("success_radius").get<double>();
  return t;
}

json tokenizer_json(const TokenizerConfig& c) {
  return {{"bins", c.bins}, {"low", c.low}, {"high", c.high}, {"dims", c.dims}, {"gripper_dim", c.gripper_dim}};
}

TokenizerConfig tokenizer_from_json(const json& j) {
  TokenizerConfig c;
  c.bins = j.at("bins").get<int>();
  c.low = j.at("low").get<double>();
  c.high = j.at("high").get<double>();
  c.dims = j.at("dims").get<int>();
  c.gripper_dim = j.at("gripper_dim").get<int>();
  c.validate();
  return c;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write dataset " + path);
  out << json{{"kind", "header"},
              {"version", kDatasetVersion},
              {"tokenizer", tokenizer_json(ds.tokenizer())},
              {"env", task_json(ds.env())}}
             .dump()
      << '\n';
  for (const auto& traj : ds.trajectories()) {
    json meta = task_json(traj.meta.task);
    meta["rollout_id"] = traj.meta.rollout_id;
    meta["iteration"] = traj.meta.iteration;
    out << json{{"kind", "traj-begin"}, {"source", to_string(traj.source)}, {"meta", meta}}.dump() << '\n';
    for (const auto& s : traj.steps) {
      const auto a = s.a.to_array();
      out << json{{"kind", "step"},
                  {"t", s.t},
                  {"o", s.o},
                  {"a", std::vector<double>(a.begin(), a.end())},
                  {"tokens", s.tokens.tokens},
                  {"c", to_int(s.c)}}
                 .dump()
          << '\n';
    }
    out << json{{"kind", "traj-end"}, {"success", traj.success}}.dump() << '\n';
  }
  if (!out) throw std::runtime_error("failed writing dataset " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset " + path);

  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& what) -> std::runtime_error {
    return std::runtime_error(path + ":" + std::to_string(line_no) + ": " + what);
  };

  std::optional<Dataset> ds;
  std::optional<Trajectory> open;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json rec = json::parse(line);
      const auto kind = rec.at("kind").get<std::string>();
      if (!ds) {
        if (kind != "header") throw fail("expected header record");
        const int version = rec.at("version").get<int>();
        if (version != kDatasetVersion) throw fail("dataset version " + std::to_string(version) + " not supported");
        ds.emplace(tokenizer_from_json(rec.at("tokenizer")), task_from_json(rec.at("env")));
      } else if (kind == "traj-begin") {
        if (open) throw fail("traj-begin inside an open trajectory");
        open.emplace();
        open->source = parse_source(rec.at("source").get<std::string>());
        const auto& meta = rec.at("meta");
        open->meta.task = task_from_json(meta);
        open->meta.rollout_id = meta.at("rollout_id").get<std::uint64_t>();
        open->meta.iteration = meta.at("iteration").get<int>();
      } else if (kind == "step") {
        if (!open) throw fail("step outside a trajectory");
        Step s;
        s.t = rec.at("t").get<int>();
        s.o = rec.at("o").get<std::vector<double>>();
        s.a = ContinuousAction::from_array(rec.at("a").get<std::vector<double>>());
        s.tokens.tokens = rec.at("tokens").get<std::vector<int>>();
        s.c = label_from_int(rec.at("c").get<int>());
        open->steps.push_back(std::move(s));
      } else if (kind == "traj-end") {
        if (!open) throw fail("traj-end without traj-begin");
        open->success = rec.at("success").get<bool>();
        ds->append(std::move(*open));
        open.reset();
      } else {
        throw fail("unknown record kind '" + kind + "'");
      }
    } catch (const std::runtime_error& e) {
      if (std::string(e.what()).rfind(path + ":", 0) == 0) throw;
      throw fail(e.what());
    } catch (const std::exception& e) {
      throw fail(e.what());
    }
  }
  ++line_no;
  if (!ds) throw fail("missing header");
  if (open) throw fail("unterminated trajectory at end of file");
  return std::move(*ds);
}

}  // namespace hapo
