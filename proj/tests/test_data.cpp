#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>

#include "data_fixtures.hpp"
#include "doctest.h"
#include "hapo/data.hpp"

using namespace hapo;
using hapo::testing::labels_of;
using hapo::testing::make_trajectory;
using hapo::testing::relabel_oracle;

namespace {

std::vector<int> with_interventions(int length, std::initializer_list<std::pair<int, int>> spans) {
  std::vector<int> labels(length, 1);
  for (auto [start, end] : spans)
    for (int i = start; i <= end; ++i) labels[i] = 2;
  return labels;
}

std::vector<int> expected_with_zeros(std::vector<int> labels, int lo, int hi) {
  for (int i = lo; i <= hi; ++i) labels[i] = 0;
  return labels;
}

Dataset mixed_dataset(Rng& rng) {
  Dataset ds;
  ds.append(make_trajectory(std::vector<int>(12, 1), Source::expert, rng));
  ds.append(relabel_interventions(make_trajectory(with_interventions(30, {{15, 18}}), Source::interaction, rng), 10));
  ds.append(make_trajectory(std::vector<int>(9, 1), Source::expert, rng));
  ds.append(relabel_interventions(make_trajectory(with_interventions(25, {{4, 6}, {20, 21}}), Source::interaction, rng), 3));
  return ds;
}

std::filesystem::path temp_file(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "hapo_data_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("relabel: window before a single onset") {
  Rng rng(1);
  const auto traj = make_trajectory(with_interventions(30, {{15, 17}}), Source::interaction, rng);
  const auto out = relabel_interventions(traj, 10);
  CHECK(labels_of(out) == expected_with_zeros(labels_of(traj), 5, 14));
}

TEST_CASE("relabel: window clamps at the episode start") {
  Rng rng(2);
  const auto traj = make_trajectory(with_interventions(20, {{3, 4}}), Source::interaction, rng);
  CHECK(labels_of(relabel_interventions(traj, 10)) == expected_with_zeros(labels_of(traj), 0, 2));
}

TEST_CASE("relabel: overlapping windows union and never downgrade interventions") {
  Rng rng(3);
  const auto traj = make_trajectory(with_interventions(30, {{12, 16}, {20, 22}}), Source::interaction, rng);
  const auto out = labels_of(relabel_interventions(traj, 10));
  CHECK(out == relabel_oracle(labels_of(traj), 10));
  std::set<int> undesirable;
  for (int i = 0; i < 30; ++i)
    if (out[i] == 0) undesirable.insert(i);
  std::set<int> expected;
  for (int i = 2; i <= 11; ++i) expected.insert(i);
  for (int i = 17; i <= 19; ++i) expected.insert(i);
  CHECK(undesirable == expected);
  for (int i = 12; i <= 16; ++i) CHECK(out[i] == 2);
}

TEST_CASE("relabel: expert data and negative K are rejected") {
  Rng rng(4);
  const auto expert = make_trajectory(std::vector<int>(5, 1), Source::expert, rng);
  CHECK_THROWS_WITH_AS(relabel_interventions(expert, 10), "relabel applies to interaction data only",
                       std::invalid_argument);
  const auto inter = make_trajectory(std::vector<int>(5, 1), Source::interaction, rng);
  CHECK_THROWS_AS(relabel_interventions(inter, -1), std::invalid_argument);
}

TEST_CASE("relabel: oracle equivalence, idempotence, payload untouched") {
  Rng rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const int K = std::vector<int>{0, 1, 5, 10}[trial % 4];
    const auto labels = testing::random_intervention_pattern(rng, 5 + static_cast<int>(rng.uniform_index(60)));
    const auto traj = make_trajectory(labels, Source::interaction, rng);
    const auto once = relabel_interventions(traj, K);
    CHECK(labels_of(once) == relabel_oracle(labels, K));
    CHECK(relabel_interventions(once, K) == once);
    for (std::size_t i = 0; i < traj.steps.size(); ++i) {
      CHECK(once.steps[i].o == traj.steps[i].o);
      CHECK(once.steps[i].a == traj.steps[i].a);
      CHECK(once.steps[i].tokens == traj.steps[i].tokens);
    }
  }
}

TEST_CASE("dataset class index partitions all steps") {
  Rng rng(6);
  const auto ds = mixed_dataset(rng);
  std::size_t sum = 0;
  for (auto k : kAllStepClasses) sum += ds.class_index(k).size();
  CHECK(sum == ds.total_steps());
  CHECK(ds.class_index(StepClass::expert).size() == 21);
  CHECK(ds.class_index(StepClass::intervention).size() == 4 + 3 + 2);
  for (auto k : kAllStepClasses)
    for (auto ref : ds.class_index(k)) {
      const auto& traj = ds.trajectories()[ref.trajectory];
      CHECK(classify(traj.source, traj.steps[ref.step].c) == k);
    }
}

TEST_CASE("dataset rejects invalid trajectories") {
  Rng rng(7);
  Dataset ds;
  auto bad_expert = make_trajectory({1, 1, 2}, Source::expert, rng);
  CHECK_THROWS_AS(ds.append(bad_expert), std::invalid_argument);
  auto gap = make_trajectory({1, 1, 1}, Source::interaction, rng);
  gap.steps[2].t = 5;
  CHECK_THROWS_AS(ds.append(gap), std::invalid_argument);
  auto bad_tokens = make_trajectory({1, 1}, Source::interaction, rng);
  bad_tokens.steps[0].tokens[0] = (bad_tokens.steps[0].tokens[0] + 1) % 256;
  CHECK_THROWS_AS(ds.append(bad_tokens), std::invalid_argument);
}

TEST_CASE("balanced sampler composition") {
  Rng rng(8);
  const auto ds = mixed_dataset(rng);
  Rng sampler(9);
  const auto batch = balanced_sample(ds, 8, sampler);
  REQUIRE(batch.size() == 8);
  // Expert steps come first, then interventions, then failures.
  for (int i = 0; i < 4; ++i) CHECK(batch[i].c == Label::acceptable);
  for (int i = 4; i < 6; ++i) CHECK(batch[i].c == Label::intervention);
  for (int i = 6; i < 8; ++i) CHECK(batch[i].c == Label::undesirable);

  CHECK_THROWS_WITH_AS(balanced_sample(ds, 6, sampler), "batch not divisible by 4", std::invalid_argument);

  Dataset expert_only;
  expert_only.append(make_trajectory({1, 1, 1, 1}, Source::expert, rng));
  CHECK_THROWS_WITH_AS(balanced_sample(expert_only, 8, sampler), doctest::Contains("intervention"),
                       std::runtime_error);
  Dataset no_failures = expert_only;
  no_failures.append(make_trajectory({2, 2, 1}, Source::interaction, rng));
  CHECK_THROWS_WITH_AS(balanced_sample(no_failures, 8, sampler), doctest::Contains("failure"), std::runtime_error);
  const auto fallback = balanced_sample(no_failures, 8, sampler, true);
  int interventions = 0;
  for (const auto& s : fallback) interventions += s.c == Label::intervention;
  CHECK(interventions == 4);
}

TEST_CASE("balanced sampler is uniform within each class") {
  Rng rng(10);
  const auto ds = mixed_dataset(rng);
  // Identify a step by its first observation value (continuous, so unique).
  std::map<double, int> expert_counts, failure_counts;
  Rng sampler(11);
  const int batches = 10'000;
  for (int b = 0; b < batches; ++b) {
    const auto batch = balanced_sample(ds, 8, sampler);
    for (int i = 0; i < 4; ++i) ++expert_counts[batch[i].o[0]];
    for (int i = 6; i < 8; ++i) ++failure_counts[batch[i].o[0]];
  }
  auto check_uniform = [](const std::map<double, int>& counts, std::size_t classes, double draws) {
    CHECK(counts.size() == classes);
    const double p = 1.0 / static_cast<double>(classes);
    const double sigma = std::sqrt(draws * p * (1 - p));
    for (const auto& [key, c] : counts) CHECK(std::abs(c - draws * p) <= 3.0 * sigma + 1.0);
  };
  check_uniform(expert_counts, ds.class_index(StepClass::expert).size(), 4.0 * batches);
  check_uniform(failure_counts, ds.class_index(StepClass::failure).size(), 2.0 * batches);
}

TEST_CASE("dataset persistence round trip") {
  Rng rng(12);
  Dataset ds(TokenizerConfig{}, TaskSpec{Disruption::position, 99});
  ds.append(make_trajectory(std::vector<int>(10, 1), Source::expert, rng));
  auto inter = relabel_interventions(make_trajectory(with_interventions(15, {{8, 10}}), Source::interaction, rng), 10);
  inter.success = true;
  inter.meta.iteration = 2;
  inter.meta.task = TaskSpec{Disruption::position, 1234567890123ULL};
  ds.append(inter);
  ds.append(make_trajectory(std::vector<int>(4, 1), Source::expert, rng));

  const auto path = temp_file("round_trip.jsonl").string();
  save_dataset(ds, path);
  const auto loaded = load_dataset(path);
  CHECK(loaded == ds);
  for (auto k : kAllStepClasses) {
    const auto a = ds.class_index(k);
    const auto b = loaded.class_index(k);
    CHECK(std::vector<StepRef>(a.begin(), a.end()) == std::vector<StepRef>(b.begin(), b.end()));
  }
}

TEST_CASE("dataset load errors carry line numbers") {
  Rng rng(13);
  Dataset ds;
  ds.append(make_trajectory(std::vector<int>(5, 1), Source::expert, rng));
  const auto path = temp_file("truncated.jsonl").string();
  save_dataset(ds, path);

  std::ifstream in(path);
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  // Cut in the middle of line 4 (header, traj-begin, step 0, step 1...).
  std::size_t pos = 0;
  for (int i = 0; i < 3; ++i) pos = content.find('\n', pos) + 1;
  {
    std::ofstream out(path, std::ios::trunc);
    out << content.substr(0, pos + 10);
  }
  CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains(":4:"), std::runtime_error);

  {
    std::ofstream out(path, std::ios::trunc);
    out << content.substr(0, pos);  // clean cut: trajectory never closed
  }
  CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains("unterminated"), std::runtime_error);

  {
    std::ofstream out(path, std::ios::trunc);
    auto bumped = content;
    bumped.replace(bumped.find("\"version\":1"), 11, "\"version\":9");
    out << bumped;
  }
  CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains("version"), std::runtime_error);
}
