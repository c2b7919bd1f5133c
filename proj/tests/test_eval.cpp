#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "data_fixtures.hpp"
#include "doctest.h"
#include "hapo/eval.hpp"

using namespace hapo;
using hapo::testing::make_trajectory;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("hapo_test_eval_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

Trajectory interaction(const std::vector<int>& labels, int iteration, Rng& rng) {
  auto t = make_trajectory(labels, Source::interaction, rng);
  t.meta.iteration = iteration;
  return t;
}

PolicyShape small_shape() {
  PolicyShape s;
  s.hidden = 16;
  s.embed = 8;
  return s;
}

}  // namespace

TEST_CASE("expert wrapper solves the nominal task") {
  EvalConfig cfg;
  cfg.seeds = {101};
  const auto rep = evaluate([](const TaskSpec& spec) { return expert_policy(spec); }, Disruption::none, cfg);
  CHECK(rep.n_episodes == 100);
  CHECK(rep.success_rate >= 0.99);
  CHECK(rep.per_seed.size() == 1);
  CHECK(rep.median_seed_success() == doctest::Approx(rep.success_rate));
}

TEST_CASE("freshly initialized policy rarely succeeds") {
  EvalConfig cfg;
  cfg.seeds = {101};
  const auto p = PolicyParams::init(3, small_shape());
  CHECK(evaluate(p, Disruption::none, cfg).success_rate <= 0.05);
}

TEST_CASE("evaluation is deterministic") {
  EvalConfig cfg;
  cfg.episodes = 10;
  cfg.seeds = {1, 2};
  const auto p = PolicyParams::init(5, small_shape());
  const auto a = evaluate(p, Disruption::position, cfg);
  const auto b = evaluate(p, Disruption::position, cfg);
  REQUIRE(a.episodes.size() == b.episodes.size());
  for (std::size_t i = 0; i < a.episodes.size(); ++i) {
    CHECK(a.episodes[i].task_seed == b.episodes[i].task_seed);
    CHECK(a.episodes[i].success == b.episodes[i].success);
    CHECK(a.episodes[i].length == b.episodes[i].length);
  }
  CHECK(episode_log(a) == episode_log(b));
  CHECK(a.mean_episode_length == b.mean_episode_length);
}

TEST_CASE("median over seeds") {
  EvalReport rep;
  rep.per_seed = {{1, 10, 2, 0.2}, {2, 10, 9, 0.9}, {3, 10, 5, 0.5}};
  CHECK(rep.median_seed_success() == doctest::Approx(0.5));
  rep.per_seed.pop_back();
  CHECK(rep.median_seed_success() == doctest::Approx(0.55));
}

TEST_CASE("eval config validation") {
  EvalConfig cfg;
  cfg.seeds.clear();
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.episodes = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("intervention ratio") {
  Rng rng(11);
  SUBCASE("no interventions") {
    Dataset ds;
    ds.append(interaction(std::vector<int>(50, 1), 0, rng));
    CHECK(intervention_ratio(ds) == 0.0);
  }
  SUBCASE("all interventions") {
    Dataset ds;
    ds.append(interaction(std::vector<int>(50, 2), 0, rng));
    CHECK(intervention_ratio(ds) == 1.0);
  }
  SUBCASE("30 of 200 steps") {
    Dataset ds;
    std::vector<int> labels(100, 1);
    for (int i = 40; i < 70; ++i) labels[i] = 2;
    ds.append(interaction(labels, 0, rng));
    ds.append(interaction(std::vector<int>(100, 1), 0, rng));
    CHECK(intervention_ratio(ds) == doctest::Approx(0.15).epsilon(1e-12));
  }
  SUBCASE("expert data and other iterations are ignored") {
    Dataset ds;
    ds.append(make_trajectory(std::vector<int>(80, 1), Source::expert, rng));
    ds.append(interaction({2, 2, 1, 1}, 1, rng));
    ds.append(interaction({2, 1, 1, 1}, 2, rng));
    CHECK(intervention_ratio(ds) == doctest::Approx(3.0 / 8.0));
    CHECK(intervention_ratio(ds, 1) == doctest::Approx(0.5));
    CHECK(intervention_ratio(ds, 2) == doctest::Approx(0.25));
    CHECK_THROWS_AS(intervention_ratio(ds, 3), std::invalid_argument);
  }
  SUBCASE("no interaction steps") {
    Dataset ds;
    CHECK_THROWS_AS(intervention_ratio(ds), std::invalid_argument);
  }
}

TEST_CASE("disruption suite shape and identical checkpoints") {
  EvalConfig cfg;
  cfg.episodes = 5;
  cfg.seeds = {7};
  const auto p = PolicyParams::init(9, small_shape());
  const auto table = disruption_suite(p, p, cfg);
  REQUIRE(table.rows.size() == 8);
  REQUIRE(table.deltas.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(table.rows[i].policy == "base");
    CHECK(table.rows[i + 4].policy == "tuned");
    CHECK(table.rows[i].disruption == kAllDisruptions[i]);
    CHECK(table.deltas[i] == 0.0);
  }
  CHECK(table.retention_delta == 0.0);
  const auto csv = suite_csv(table);
  CHECK(csv.rfind("policy,disruption,episodes,success_rate,mean_episode_length\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 8 + 4);
}

TEST_CASE("iteration records round trip through json") {
  IterationRecord r{2, 0.25, 0.3, {0.2, 0.3, 0.25}, 0.125, 20, 42};
  CHECK(parse_iteration_json(iteration_json(r)) == r);
  r.intervention_ratio.reset();
  CHECK(parse_iteration_json(iteration_json(r)) == r);
  CHECK(iteration_json(r).find("\"intervention_ratio\":null") != std::string::npos);
}

TEST_CASE("report emission") {
  SUBCASE("header only for no records") {
    const auto dir = scratch_dir("empty");
    emit_report({}, dir.string());
    CHECK(slurp(dir / "report.csv") == "iteration,success_rate,median_seed_success,intervention_ratio,n_rollouts,seed\n");
    std::filesystem::remove_all(dir);
  }
  SUBCASE("four iterations, byte-identical on re-emission") {
    std::vector<IterationRecord> records;
    for (int i = 0; i <= 3; ++i) {
      IterationRecord r{i, 0.1 * i, 0.1 * i, {0.1 * i}, std::nullopt, 20, 5};
      if (i < 3) r.intervention_ratio = 0.5 - 0.1 * i;
      records.push_back(r);
    }
    const auto dir = scratch_dir("four");
    emit_report(records, dir.string());
    const auto csv = slurp(dir / "report.csv");
    const auto txt = slurp(dir / "report.txt");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
    CHECK(csv.find("\n3,") != std::string::npos);
    CHECK(csv.find(",,20,5\n") != std::string::npos);  // final row has no ratio
    emit_report(records, dir.string());
    CHECK(slurp(dir / "report.csv") == csv);
    CHECK(slurp(dir / "report.txt") == txt);
    std::filesystem::remove_all(dir);
  }
}

TEST_CASE("reading iteration records reports the bad line") {
  const auto dir = scratch_dir("bad");
  std::filesystem::create_directories(dir);
  const auto path = dir / "metrics.jsonl";
  {
    std::ofstream out(path);
    out << iteration_json({0, 0.5, 0.5, {0.5}, 0.1, 20, 1}) << "\n{\"iteration\": 1}\n";
  }
  try {
    read_iteration_records(path.string());
    FAIL("expected an error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
  std::filesystem::remove_all(dir);
}
