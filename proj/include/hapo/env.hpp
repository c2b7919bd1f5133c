#pragma once

// Deterministic 2D pick-and-insert task: a point gripper must carry an
// object onto a target and let go. Three disruption variants shift the
// distribution of the target position or of the nuisance ("appearance")
// observation dimensions.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "hapo/kv.hpp"

namespace hapo {

inline constexpr int kObsDim = 11;
inline constexpr int kActionDims = 3;
inline constexpr int kGripperDim = 2;
inline constexpr int kNuisanceDims = 4;

inline constexpr double kMaxDisplacement = 0.05;
inline constexpr double kGraspRadius = 0.03;
/// The scripted expert closes/opens only once the commanded move lands within this distance.
inline constexpr double kExpertSnapRadius = 0.02;
/// Expert commands are multiples of this step, like a keyboard with a half-speed modifier.
inline constexpr double kExpertCommandStep = 0.5;

inline constexpr std::array<double, 2> kNominalTarget{0.75, 0.50};
/// Target rectangle under position disruption: [x0, x1] x [y0, y1].
inline constexpr std::array<double, 4> kDisruptedTargetBox{0.64, 0.86, 0.39, 0.61};
/// Added to nuisance dims 0-1 (background) or 2-3 (texture).
inline constexpr double kAppearanceShift = 0.5;

using Observation = std::array<double, kObsDim>;

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 v) { return {s * v.x, s * v.y}; }
  friend bool operator==(const Vec2&, const Vec2&) = default;
};

double distance(Vec2 a, Vec2 b);

enum class Disruption { none, position, background, texture };

std::string to_string(Disruption d);
Disruption parse_disruption(const std::string& name);

struct TaskSpec {
  Disruption disruption = Disruption::none;
  std::uint64_t seed = 0;
  int episode_horizon = 200;
  double success_radius = 0.03;

  KeyValues to_key_values() const;
  static TaskSpec from_key_values(const KeyValues& kv);
  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

struct ContinuousAction {
  Vec2 delta;
  double gripper = 0.0;  ///< > 0 closes, <= 0 opens

  std::array<double, kActionDims> to_array() const { return {delta.x, delta.y, gripper}; }
  static ContinuousAction from_array(std::span<const double> values);
  /// Every component clamped to [-1, 1].
  ContinuousAction clamped() const;
  friend bool operator==(const ContinuousAction&, const ContinuousAction&) = default;
};

struct EnvState {
  Vec2 gripper_pos;
  Vec2 object_pos;
  Vec2 target_pos;
  bool holding = false;
  std::array<double, kNuisanceDims> nuisance{};
  int t = 0;

  friend bool operator==(const EnvState&, const EnvState&) = default;
};

struct StepResult {
  EnvState state;
  bool done = false;
  bool success = false;
};

EnvState reset(const TaskSpec& spec);

/// Throws std::logic_error("episode finished") if the episode is already over.
StepResult step(const TaskSpec& spec, const EnvState& state, const ContinuousAction& action);

bool is_success(const TaskSpec& spec, const EnvState& state);
bool is_finished(const TaskSpec& spec, const EnvState& state);

/// Flat policy input: gripper, object, target, holding flag, nuisance.
Observation observe(const EnvState& state);

/// Scripted proportional controller: reach, close, carry, open.
ContinuousAction expert_action(const EnvState& state, const TaskSpec& spec);

/// Distance from the controlled point to its current subgoal (object while
/// reaching, target while carrying).
double subgoal_distance(const EnvState& state);

}  // namespace hapo
