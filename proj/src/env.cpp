#include "hapo/env.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "hapo/rng.hpp"

namespace hapo {

namespace {

double clamp_unit(double v) { return std::clamp(v, -1.0, 1.0); }

Vec2 clamp_arena(Vec2 p) { return {std::clamp(p.x, 0.0, 1.0), std::clamp(p.y, 0.0, 1.0)}; }

double snap_to_grid(double v) { return std::round(v / kExpertCommandStep) * kExpertCommandStep; }

/// Deadbeat proportional step toward `goal`, saturated per axis and rounded
/// to the expert's command grid.
Vec2 move_toward(Vec2 from, Vec2 goal) {
  const Vec2 err = goal - from;
  return {snap_to_grid(clamp_unit(err.x / kMaxDisplacement)), snap_to_grid(clamp_unit(err.y / kMaxDisplacement))};
}

}  // namespace

double distance(Vec2 a, Vec2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

std::string to_string(Disruption d) {
  switch (d) {
    case Disruption::none: return "none";
    case Disruption::position: return "position";
    case Disruption::background: return "background";
    case Disruption::texture: return "texture";
  }
  return "none";
}

Disruption parse_disruption(const std::string& name) {
  if (name == "none" || name == "nominal") return Disruption::none;
  if (name == "position") return Disruption::position;
  if (name == "background") return Disruption::background;
  if (name == "texture") return Disruption::texture;
  throw std::invalid_argument("unknown disruption '" + name + "'");
}

KeyValues TaskSpec::to_key_values() const {
  return {{"disruption", to_string(disruption)},
          {"seed", std::to_string(seed)},
          {"horizon", std::to_string(episode_horizon)},
          {"success_radius", format_double(success_radius)}};
}

TaskSpec TaskSpec::from_key_values(const KeyValues& kv) {
  TaskSpec spec;
  spec.disruption = parse_disruption(kv_string(kv, "disruption", "none"));
  spec.seed = static_cast<std::uint64_t>(kv_int(kv, "seed", 0));
  spec.episode_horizon = static_cast<int>(kv_int(kv, "horizon", spec.episode_horizon));
  spec.success_radius = kv_double(kv, "success_radius", spec.success_radius);
  if (spec.episode_horizon <= 0) throw std::invalid_argument("horizon must be positive");
  if (!(spec.success_radius > 0.0)) throw std::invalid_argument("success_radius must be positive");
  return spec;
}

ContinuousAction ContinuousAction::from_array(std::span<const double> values) {
  if (values.size() != kActionDims) throw std::invalid_argument("action must have 3 components");
  return {{values[0], values[1]}, values[2]};
}

ContinuousAction ContinuousAction::clamped() const {
  return {{clamp_unit(delta.x), clamp_unit(delta.y)}, clamp_unit(gripper)};
}

EnvState reset(const TaskSpec& spec) {
  Rng rng(derive_seed(spec.seed, "env.reset"));
  EnvState s;
  // Draw order is fixed and independent of the disruption, so a disruption
  // only moves the quantity it is meant to move.
  s.gripper_pos = {rng.uniform(0.05, 0.20), rng.uniform(0.30, 0.70)};
  s.object_pos = {rng.uniform(0.30, 0.45), rng.uniform(0.25, 0.75)};
  const double tu = rng.uniform();
  const double tv = rng.uniform();
  for (auto& n : s.nuisance) n = rng.uniform(-0.1, 0.1);

  if (spec.disruption == Disruption::position) {
    const auto& box = kDisruptedTargetBox;
    s.target_pos = {box[0] + (box[1] - box[0]) * tu, box[2] + (box[3] - box[2]) * tv};
  } else {
    s.target_pos = {kNominalTarget[0], kNominalTarget[1]};
  }
  if (spec.disruption == Disruption::background) {
    s.nuisance[0] += kAppearanceShift;
    s.nuisance[1] += kAppearanceShift;
  } else if (spec.disruption == Disruption::texture) {
    s.nuisance[2] += kAppearanceShift;
    s.nuisance[3] += kAppearanceShift;
  }
  return s;
}

bool is_success(const TaskSpec& spec, const EnvState& state) {
  return !state.holding && distance(state.object_pos, state.target_pos) <= spec.success_radius;
}

bool is_finished(const TaskSpec& spec, const EnvState& state) {
  return state.t >= spec.episode_horizon || is_success(spec, state);
}

StepResult step(const TaskSpec& spec, const EnvState& state, const ContinuousAction& action) {
  if (is_finished(spec, state)) throw std::logic_error("episode finished");
  const ContinuousAction a = action.clamped();

  EnvState next = state;
  next.gripper_pos = clamp_arena(state.gripper_pos + kMaxDisplacement * a.delta);
  if (state.holding) next.object_pos = clamp_arena(state.object_pos + (next.gripper_pos - state.gripper_pos));

  if (state.holding && a.gripper <= 0.0) {
    next.holding = false;
  } else if (!state.holding && a.gripper > 0.0 && distance(next.gripper_pos, next.object_pos) <= kGraspRadius) {
    next.holding = true;
  }
  next.t = state.t + 1;

  StepResult result;
  result.success = is_success(spec, next);
  result.done = result.success || next.t >= spec.episode_horizon;
  result.state = next;
  return result;
}

Observation observe(const EnvState& s) {
  return {s.gripper_pos.x, s.gripper_pos.y, s.object_pos.x, s.object_pos.y, s.target_pos.x, s.target_pos.y,
          s.holding ? 1.0 : 0.0, s.nuisance[0], s.nuisance[1], s.nuisance[2], s.nuisance[3]};
}

ContinuousAction expert_action(const EnvState& s, const TaskSpec& /*spec*/) {
  ContinuousAction a;
  if (!s.holding) {
    a.delta = move_toward(s.gripper_pos, s.object_pos);
    const Vec2 landing = clamp_arena(s.gripper_pos + kMaxDisplacement * a.delta);
    a.gripper = distance(landing, s.object_pos) <= kExpertSnapRadius ? 1.0 : -1.0;
  } else {
    a.delta = move_toward(s.object_pos, s.target_pos);
    const Vec2 landing = s.object_pos + kMaxDisplacement * a.delta;
    a.gripper = distance(landing, s.target_pos) <= kExpertSnapRadius ? -1.0 : 1.0;
  }
  return a;
}

double subgoal_distance(const EnvState& s) {
  return s.holding ? distance(s.object_pos, s.target_pos) : distance(s.gripper_pos, s.object_pos);
}

}  // namespace hapo
