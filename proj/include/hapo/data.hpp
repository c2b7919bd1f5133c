#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hapo/env.hpp"
#include "hapo/rng.hpp"
#include "hapo/tokenizer.hpp"

namespace hapo {

/// Desirability label c of a step.
enum class Label : std::uint8_t {
  undesirable = 0,   ///< inside the K-step window before an intervention
  acceptable = 1,    ///< executed by the expert or by the policy
  intervention = 2,  ///< executed by the intervening human/oracle
};

inline int to_int(Label c) { return static_cast<int>(c); }
Label label_from_int(int c);

enum class Source { expert, interaction };
std::string to_string(Source s);
Source parse_source(const std::string& s);

struct Step {
  std::vector<double> o;
  ContinuousAction a;
  ActionTokens tokens;
  Label c = Label::acceptable;
  int t = 0;

  bool desirable() const { return c != Label::undesirable; }
  friend bool operator==(const Step&, const Step&) = default;
};

struct EpisodeMeta {
  TaskSpec task;
  std::uint64_t rollout_id = 0;
  int iteration = 0;  ///< deploy-optimize iteration that produced the episode (0 for expert data)
  friend bool operator==(const EpisodeMeta&, const EpisodeMeta&) = default;
};

struct Trajectory {
  std::vector<Step> steps;
  Source source = Source::interaction;
  bool success = false;
  EpisodeMeta meta;

  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

/// Partition of all stored steps by (source, label).
enum class StepClass { expert, intervention, policy, failure };
inline constexpr std::array<StepClass, 4> kAllStepClasses{StepClass::expert, StepClass::intervention,
                                                          StepClass::policy, StepClass::failure};
std::string to_string(StepClass k);
StepClass classify(Source source, Label c);

struct StepRef {
  std::uint32_t trajectory = 0;
  std::uint32_t step = 0;
  friend bool operator==(const StepRef&, const StepRef&) = default;
};

/// Append-only trajectory store with a per-class step index.
class Dataset {
 public:
  explicit Dataset(TokenizerConfig tokenizer = {}, TaskSpec env = {});

  /// Validates contiguity of step indices, tokens == encode(a), and that
  /// expert trajectories carry only c = 1. Throws std::invalid_argument.
  void append(Trajectory traj);
  void append_all(const Dataset& other);

  const std::vector<Trajectory>& trajectories() const { return trajectories_; }
  std::span<const StepRef> class_index(StepClass k) const { return index_[static_cast<std::size_t>(k)]; }
  const Step& step(StepRef ref) const { return trajectories_[ref.trajectory].steps[ref.step]; }
  std::size_t total_steps() const { return total_steps_; }
  bool empty() const { return trajectories_.empty(); }

  const TokenizerConfig& tokenizer() const { return tokenizer_; }
  const TaskSpec& env() const { return env_; }

  /// Copy with only the trajectories that satisfy `keep`.
  template <typename Pred>
  Dataset filtered(Pred keep) const {
    Dataset out(tokenizer_, env_);
    for (const auto& t : trajectories_)
      if (keep(t)) out.append(t);
    return out;
  }

  friend bool operator==(const Dataset& a, const Dataset& b) {
    return a.tokenizer_ == b.tokenizer_ && a.env_ == b.env_ && a.trajectories_ == b.trajectories_;
  }

 private:
  TokenizerConfig tokenizer_;
  TaskSpec env_;
  std::vector<Trajectory> trajectories_;
  std::array<std::vector<StepRef>, 4> index_;
  std::size_t total_steps_ = 0;
};

/// Marks the K steps before each intervention onset as undesirable.
/// Labels are recomputed from the intervention mask: c = 2 is never changed,
/// steps in some window [max(0, s - K), s) become 0, all others become 1.
/// Throws std::invalid_argument for expert trajectories or K < 0.
Trajectory relabel_interventions(Trajectory traj, int K);

/// Batch recipe: batch/2 expert, batch/4 intervention, batch/4 failure steps,
/// uniform with replacement inside each class, in that order.
/// With `allow_missing_failure`, an empty failure class hands its share to
/// the intervention class instead of raising.
std::vector<Step> balanced_sample(const Dataset& ds, int batch, Rng& rng, bool allow_missing_failure = false);

/// Uniform sample with replacement from the union of `classes`.
std::vector<Step> sample_classes(const Dataset& ds, std::span<const StepClass> classes, int batch, Rng& rng);

inline constexpr int kDatasetVersion = 1;

/// Line-delimited JSON records: header, traj-begin, step..., traj-end.
void save_dataset(const Dataset& ds, const std::string& path);
/// Throws std::runtime_error("<path>:<line>: ...") on malformed input.
Dataset load_dataset(const std::string& path);

}  // namespace hapo
