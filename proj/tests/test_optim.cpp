#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "doctest.h"
#include "fd_check.hpp"
#include "hapo/optim.hpp"

using namespace hapo;
using hapo::testing::finite_difference_check;
using hapo::testing::pick_coordinates;

namespace {

Step random_step(Rng& rng, Label c) {
  Step s;
  s.o.resize(kObsDim);
  for (auto& v : s.o) v = rng.uniform(-1, 1);
  s.a = ContinuousAction{{rng.uniform(-1, 1), rng.uniform(-1, 1)}, rng.uniform() < 0.5 ? -1.0 : 1.0};
  s.tokens = encode(s.a, {});
  s.c = c;
  return s;
}

/// Quota 4/2/2: acceptable, intervention, undesirable.
std::vector<Step> quota_batch(Rng& rng) {
  std::vector<Step> b;
  for (int i = 0; i < 4; ++i) b.push_back(random_step(rng, Label::acceptable));
  for (int i = 0; i < 2; ++i) b.push_back(random_step(rng, Label::intervention));
  for (int i = 0; i < 2; ++i) b.push_back(random_step(rng, Label::undesirable));
  return b;
}

/// Replaces every action with the policy's own greedy action, so all L1 errors vanish.
void set_greedy_actions(const PolicyParams& p, std::vector<Step>& batch) {
  for (auto& s : batch) {
    s.tokens = greedy_decode(p, s.o);
    s.a = decode(s.tokens, {});
  }
}

PolicyParams perturbed(const PolicyParams& p, double scale, std::uint64_t seed) {
  PolicyParams q = p;
  Rng rng(seed);
  for (Eigen::Index i = 0; i < q.flat().size(); ++i) q.flat()[i] += scale * rng.normal();
  return q;
}

std::vector<Step> fixed_batch_16(Rng& rng) {
  std::vector<Step> b;
  for (int i = 0; i < 16; ++i) b.push_back(random_step(rng, Label::acceptable));
  return b;
}

}  // namespace

TEST_CASE("bc loss of the uniform policy") {
  const PolicyParams p{PolicyShape{}};
  Rng rng(1);
  const auto batch = quota_batch(rng);
  CHECK(bc_loss_and_grad(p, batch).report.loss == doctest::Approx(3.0 * std::log(256.0)).epsilon(1e-12));
  CHECK(3.0 * std::log(256.0) == doctest::Approx(16.635).epsilon(1e-4));
}

TEST_CASE("bc gradient matches finite differences") {
  const auto p = PolicyParams::init(2);
  Rng rng(2);
  const auto batch = quota_batch(rng);
  const auto g = bc_loss_and_grad(p, batch).grad;
  const auto coords = pick_coordinates(p.layout(), p.shape(), 8, 40, rng);
  const auto res = finite_difference_check(
      p, g, [&](const PolicyParams& q) { return bc_loss_and_grad(q, batch).report.loss; }, coords, 1e-4, 1e-5);
  CHECK(res.checked >= 100);
  CHECK(res.max_rel_error < 1e-3);
}

TEST_CASE("bc overfits one batch") {
  auto p = PolicyParams::init(3);
  Rng rng(3);
  const auto batch = fixed_batch_16(rng);
  AdamState st;
  std::vector<double> losses;
  for (int i = 0; i < 200; ++i) {
    const auto lg = bc_loss_and_grad(p, batch);
    losses.push_back(lg.report.loss);
    adam_step(p, lg.grad, st, 2e-3);
  }
  for (std::size_t i = 11; i < losses.size(); ++i) CHECK(losses[i] < losses[i - 1]);
  CHECK(losses.back() < 1.0);
}

TEST_CASE("reward") {
  const auto ref = PolicyParams::init(4);
  const HapoConfig cfg;
  Rng rng(4);
  const auto s = random_step(rng, Label::acceptable);
  CHECK(reward(ref, ref, s.o, s.tokens, s.c, cfg) == 0.0);

  auto p = ref;
  p.head_b(0)[s.tokens[0]] += 2.0;
  CHECK(reward(p, ref, s.o, s.tokens, s.c, cfg) > 0.0);

  const auto q = perturbed(ref, 0.05, 5);
  const auto lq = log_prob(q, s.o, s.tokens);
  const auto lr = log_prob(ref, s.o, s.tokens);
  double expected = 0.0;
  for (int d = 0; d < 3; ++d) expected += lq.per_dim[d] - lr.per_dim[d];
  CHECK(std::abs(reward(q, ref, s.o, s.tokens, s.c, cfg) - expected) < 1e-12);
}

TEST_CASE("gripper reject term is excluded for undesirable samples") {
  const auto ref = PolicyParams::init(6);
  const auto p = perturbed(ref, 0.05, 7);
  Rng rng(8);
  auto s = random_step(rng, Label::undesirable);
  HapoConfig on;
  HapoConfig off;
  off.exclude_gripper_reject = false;
  auto flipped = s.tokens;
  flipped[kGripperDim] = 255 - flipped[kGripperDim];
  CHECK(reward(p, ref, s.o, s.tokens, s.c, on) == reward(p, ref, s.o, flipped, s.c, on));
  CHECK(reward(p, ref, s.o, s.tokens, s.c, off) != reward(p, ref, s.o, flipped, s.c, off));

  // The same holds for the loss term.
  auto batch = quota_batch(rng);
  const std::vector<double> lambdas(8, 0.5);
  const double before = hapo_loss_fixed(p, ref, batch, lambdas, 0.1, on).report.loss;
  batch[7].a.gripper = -batch[7].a.gripper;
  batch[7].tokens = encode(batch[7].a, {});
  CHECK(hapo_loss_fixed(p, ref, batch, lambdas, 0.1, on).report.loss == before);
}

TEST_CASE("kl estimate") {
  const auto ref = PolicyParams::init(9);
  Rng rng(9);
  const auto batch = quota_batch(rng);
  CHECK(std::abs(kl_estimate(ref, ref, batch)) <= 1e-6);
  CHECK_THROWS_AS(kl_estimate(ref, ref, std::span<const Step>(batch.data(), 1)), std::invalid_argument);

  for (int i = 0; i < 1000; ++i) {
    const auto b = quota_batch(rng);
    const auto p = perturbed(ref, 0.02, 100 + static_cast<std::uint64_t>(i % 20));
    CHECK(kl_estimate(p, ref, b) >= 0.0);
  }
}

TEST_CASE("kl estimate approaches the exact divergence on a two-bin policy") {
  PolicyShape s;
  s.bins = 2;
  s.dims = 1;
  s.hidden = 4;
  s.embed = 2;
  PolicyParams p(s), ref(s);
  const double p0 = 0.7, q0 = 0.3;
  p.head_b(0) << std::log(p0), std::log(1 - p0);
  ref.head_b(0) << std::log(q0), std::log(1 - q0);
  const double exact = p0 * std::log(p0 / q0) + (1 - p0) * std::log((1 - p0) / (1 - q0));

  Rng rng(10);
  double sum = 0.0;
  const int batches = 1000;
  for (int b = 0; b < batches; ++b) {
    std::vector<Step> batch(16);
    for (auto& st : batch) {
      st.o.assign(kObsDim, 0.0);
      st.tokens = ActionTokens{{rng.uniform() < p0 ? 0 : 1}};
    }
    sum += kl_estimate(p, ref, batch);
  }
  CHECK(std::abs(sum / batches - exact) <= 0.05);
}

TEST_CASE("adaptive weights") {
  const auto p = PolicyParams::init(11);
  HapoConfig cfg;
  Rng rng(11);

  SUBCASE("zero error gives lambda_D = 0 and lambda_U = 1") {
    auto batch = quota_batch(rng);
    set_greedy_actions(p, batch);
    batch[0] = random_step(rng, Label::acceptable);  // keeps sum(l) > 0
    const auto w = adaptive_weights(p, batch, cfg);
    CHECK_FALSE(w.uniform_fallback);
    for (std::size_t i = 1; i < batch.size(); ++i) {
      CHECK(w.w[i] == 0.0);
      CHECK(w.lambda[i] == (batch[i].desirable() ? 0.0 : 1.0));
    }
  }
  SUBCASE("equal errors give w = 1/8 and lambda_D = 1 - 1/e") {
    const auto s = random_step(rng, Label::acceptable);
    const std::vector<Step> batch(8, s);
    const auto w = adaptive_weights(p, batch, cfg);
    for (std::size_t i = 0; i < 8; ++i) {
      CHECK(w.w[i] == doctest::Approx(0.125).epsilon(1e-14));
      CHECK(w.lambda[i] == doctest::Approx(1.0 - std::exp(-1.0)).epsilon(1e-12));
    }
    CHECK(w.lambda[0] == doctest::Approx(0.632).epsilon(1e-3));
  }
  SUBCASE("weights sum to one and lambdas are monotone in w") {
    const auto s = random_step(rng, Label::acceptable);
    const auto g = decode_values(greedy_decode(p, s.o), {});
    std::vector<Step> batch;
    for (int i = 0; i < 8; ++i) {
      Step x = s;
      const double step = 0.05 * (i + 1);
      x.a.delta.x = g[0] > 0 ? g[0] - step : g[0] + step;
      x.a.delta.y = g[1];
      x.a.gripper = g[2];
      x.c = i % 2 ? Label::undesirable : Label::acceptable;
      x.tokens = encode(x.a, {});
      batch.push_back(x);
    }
    const auto w = adaptive_weights(p, batch, cfg);
    CHECK(std::accumulate(w.w.begin(), w.w.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
    for (int i = 2; i < 8; ++i) {
      CHECK(w.w[i] > w.w[i - 2]);
      if (batch[i].desirable())
        CHECK(w.lambda[i] > w.lambda[i - 2]);
      else
        CHECK(w.lambda[i] < w.lambda[i - 2]);
    }
  }
  SUBCASE("zero total error falls back to uniform") {
    auto batch = quota_batch(rng);
    set_greedy_actions(p, batch);
    const auto w = adaptive_weights(p, batch, cfg);
    CHECK(w.uniform_fallback);
    for (double x : w.w) CHECK(x == 0.125);
  }
}

TEST_CASE("hapo loss at the identity point") {
  const auto ref = PolicyParams::init(12);
  Rng rng(12);
  auto batch = quota_batch(rng);
  set_greedy_actions(ref, batch);
  HapoConfig cfg;
  cfg.beta_D = cfg.beta_U = 8.0;
  const auto out = hapo_loss_and_grad(ref, ref, batch, cfg);
  const double e = std::exp(-1.0);
  const double expected = -(6.0 * (1.0 - e) * 0.5 + 2.0 * e * 0.5) / 8.0;
  CHECK(std::abs(out.report.loss - expected) <= 1e-9);
  CHECK(expected == doctest::Approx(-0.2830).epsilon(1e-3));
  CHECK(out.report.z0 == 0.0);
  for (double r : out.report.rewards) CHECK(r == 0.0);
}

TEST_CASE("hapo gradient matches finite differences") {
  const auto ref = PolicyParams::init(13);
  const auto p = perturbed(ref, 0.03, 14);
  Rng rng(13);
  const auto batch = quota_batch(rng);

  SUBCASE("lambdas and z0 frozen") {
    HapoConfig cfg;
    const auto w = adaptive_weights(p, batch, cfg);
    const double z0 = kl_estimate(p, ref, batch);
    const auto g = hapo_loss_fixed(p, ref, batch, w.lambda, z0, cfg).grad;
    const auto coords = pick_coordinates(p.layout(), p.shape(), 8, 40, rng);
    const auto res = finite_difference_check(
        p, g, [&](const PolicyParams& q) { return hapo_loss_fixed(q, ref, batch, w.lambda, z0, cfg).report.loss; },
        coords, 1e-4, 1e-5);
    CHECK(res.checked >= 100);
    CHECK(res.max_rel_error < 1e-3);
  }
  SUBCASE("live kl path") {
    HapoConfig cfg;
    cfg.kl_detached = false;
    const std::vector<double> lambdas{0.3, 0.9, 0.5, 0.7, 0.6, 0.4, 0.8, 0.2};
    // Find a perturbation whose mismatched-pair estimate is strictly positive.
    PolicyParams q = p;
    for (std::uint64_t seed = 20; kl_estimate(q, ref, batch) <= 0.0; ++seed) q = perturbed(ref, 0.03, seed);
    const auto lg = hapo_loss_fixed(q, ref, batch, lambdas, 0.0, cfg);
    REQUIRE(lg.report.z0 > 0.0);
    const auto coords = pick_coordinates(q.layout(), q.shape(), 8, 40, rng);
    const auto res = finite_difference_check(
        q, lg.grad, [&](const PolicyParams& x) { return hapo_loss_fixed(x, ref, batch, lambdas, 0.0, cfg).report.loss; },
        coords, 1e-4, 1e-5);
    CHECK(res.checked >= 100);
    CHECK(res.max_rel_error < 1e-3);
  }
}

TEST_CASE("hapo loss is invariant to sample order") {
  const auto ref = PolicyParams::init(15);
  const auto p = perturbed(ref, 0.03, 16);
  Rng rng(15);
  const auto batch = quota_batch(rng);
  const HapoConfig cfg;
  const std::vector<double> lambdas{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
  const double base = hapo_loss_fixed(p, ref, batch, lambdas, 0.05, cfg).report.loss;
  const auto original = adaptive_weights(p, batch, cfg);
  std::vector<std::size_t> perm(8);
  std::iota(perm.begin(), perm.end(), 0);
  for (int trial = 0; trial < 10; ++trial) {
    for (std::size_t i = 7; i > 0; --i) std::swap(perm[i], perm[rng.uniform_index(i + 1)]);
    std::vector<Step> b;
    std::vector<double> l;
    for (auto k : perm) {
      b.push_back(batch[k]);
      l.push_back(lambdas[k]);
    }
    CHECK(std::abs(hapo_loss_fixed(p, ref, b, l, 0.05, cfg).report.loss - base) <= 1e-9);
    const auto permuted = adaptive_weights(p, b, cfg);
    for (std::size_t i = 0; i < 8; ++i) CHECK(std::abs(permuted.lambda[i] - original.lambda[perm[i]]) <= 1e-12);
  }
}

TEST_CASE("utility is monotone in the log-prob ratio") {
  const auto ref = PolicyParams::init(17);
  Rng rng(17);
  const HapoConfig cfg;
  for (Label c : {Label::acceptable, Label::undesirable}) {
    const std::vector<Step> batch{random_step(rng, c)};
    const std::vector<double> lambdas{0.7};
    auto p = ref;
    double prev = hapo_loss_fixed(p, ref, batch, lambdas, 0.0, cfg).report.loss;
    for (int i = 0; i < 5; ++i) {
      p.head_b(0)[batch[0].tokens[0]] += 0.5;
      const double cur = hapo_loss_fixed(p, ref, batch, lambdas, 0.0, cfg).report.loss;
      if (c == Label::acceptable)
        CHECK(cur < prev);
      else
        CHECK(cur > prev);
      prev = cur;
    }
  }
}

TEST_CASE("hapo descent raises desirable rewards and lowers undesirable ones") {
  const auto ref = PolicyParams::init(18);
  auto p = ref;
  Rng rng(18);
  const auto batch = quota_batch(rng);
  HapoConfig cfg;
  AdamState st;
  for (int i = 0; i < 100; ++i) adam_step(p, hapo_loss_and_grad(p, ref, batch, cfg).grad, st, 1e-4);
  const auto rep = hapo_loss_and_grad(p, ref, batch, cfg).report;
  CHECK(rep.mean_reward_desirable > 0.0);
  CHECK(rep.mean_reward_undesirable < 0.0);
}

TEST_CASE("baselines") {
  const auto ref = PolicyParams::init(19);
  const auto p = perturbed(ref, 0.03, 20);
  Rng rng(19);
  const HapoConfig cfg;

  SUBCASE("dagger on expert-only data equals behavior cloning") {
    std::vector<Step> batch;
    for (int i = 0; i < 8; ++i) batch.push_back(random_step(rng, Label::acceptable));
    const auto a = baseline_loss(Method::dagger, p, ref, batch, cfg);
    const auto b = bc_loss_and_grad(p, batch);
    CHECK(a.report.loss == b.report.loss);
    CHECK(a.grad.flat() == b.grad.flat());
  }
  SUBCASE("dagger and sirius drop undesirable samples") {
    const auto batch = quota_batch(rng);
    std::vector<Step> kept(batch.begin(), batch.begin() + 6);
    CHECK(std::abs(baseline_loss(Method::dagger, p, ref, batch, cfg).report.loss -
                   bc_loss_and_grad(p, kept).report.loss) < 1e-12);
    // Intervention samples count double.
    std::vector<Step> doubled(batch.begin(), batch.begin() + 6);
    doubled.push_back(batch[4]);
    doubled.push_back(batch[5]);
    CHECK(std::abs(baseline_loss(Method::sirius, p, ref, batch, cfg).report.loss -
                   bc_loss_and_grad(p, doubled).report.loss) < 1e-12);
  }
  SUBCASE("kto_vanilla equals the preference loss with unit lambdas") {
    const auto batch = quota_batch(rng);
    const std::vector<double> ones(8, 1.0);
    const auto a = baseline_loss(Method::kto_vanilla, p, ref, batch, cfg);
    const auto b = hapo_loss_fixed(p, ref, batch, ones, kl_estimate(p, ref, batch), cfg);
    CHECK(std::abs(a.report.loss - b.report.loss) <= 1e-12);
    CHECK((a.grad.flat() - b.grad.flat()).cwiseAbs().maxCoeff() <= 1e-12);
  }
  SUBCASE("dpo at the reference point is ln 2") {
    const auto batch = quota_batch(rng);
    Rng noise(21);
    const auto out = baseline_loss(Method::dpo_synth, ref, ref, batch, cfg, {}, &noise);
    CHECK(std::abs(out.report.loss - std::log(2.0)) <= 1e-9);
    CHECK_THROWS_AS(baseline_loss(Method::dpo_synth, ref, ref, batch, cfg), std::invalid_argument);
  }
  SUBCASE("dpo gradient matches finite differences") {
    const auto batch = quota_batch(rng);
    Rng noise(22);
    const auto rejected = synthesize_rejections(ref, batch, cfg, {}, noise);
    const auto g = dpo_loss_and_grad(p, ref, batch, rejected, cfg).grad;
    const auto coords = pick_coordinates(p.layout(), p.shape(), 8, 40, rng);
    const auto res = finite_difference_check(
        p, g, [&](const PolicyParams& q) { return dpo_loss_and_grad(q, ref, batch, rejected, cfg).report.loss; },
        coords, 1e-4, 1e-5);
    CHECK(res.checked >= 100);
    CHECK(res.max_rel_error < 1e-3);
  }
  SUBCASE("method names") {
    for (auto m : {Method::hapo, Method::dagger, Method::sirius, Method::dpo_synth, Method::kto_vanilla, Method::bc})
      CHECK(parse_method(to_string(m)) == m);
    CHECK_THROWS_WITH_AS(parse_method("ppo"), doctest::Contains("ppo"), std::invalid_argument);
  }
}

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    Eigen::VectorXd x = Eigen::VectorXd::LinSpaced(5, -1, 1);
    const Eigen::VectorXd x0 = x;
    AdamState st;
    for (int i = 0; i < 3; ++i) adam_step(x, Eigen::VectorXd::Zero(5), st, 0.1);
    CHECK(x == x0);
  }
  SUBCASE("first step moves each coordinate by about lr") {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(4);
    Eigen::VectorXd g(4);
    g << 3.0, -0.2, 1e-3, 50.0;
    AdamState st;
    adam_step(x, g, st, 1e-3);
    for (int i = 0; i < 4; ++i) CHECK(std::abs(std::abs(x[i]) - 1e-3) < 1e-7);
    CHECK(x[0] < 0);
    CHECK(x[1] > 0);
  }
  SUBCASE("quadratic bowl") {
    Eigen::VectorXd x(2);
    x << 3.0, -2.0;
    Eigen::VectorXd center(2);
    center << 0.5, 1.5;
    const Eigen::Vector2d curvature(1.0, 10.0);
    AdamState st;
    int steps = 0;
    while (steps < 5000 && (x - center).norm() > 1e-6) {
      const Eigen::VectorXd g = 2.0 * curvature.cwiseProduct(x - center);
      adam_step(x, g, st, 0.05);
      ++steps;
    }
    CHECK((x - center).norm() <= 1e-6);
    CHECK(steps <= 5000);
  }
}

TEST_CASE("config key values") {
  HapoConfig c;
  c.lr = 1e-4;
  c.reward_scale = 3.0;
  c.kl_detached = false;
  const auto back = HapoConfig::from_key_values(c.to_key_values());
  CHECK(back.lr == c.lr);
  CHECK(back.reward_scale == 3.0);
  CHECK_FALSE(back.kl_detached);
  const auto scaled = HapoConfig::from_key_values({{"batch", "16"}});
  CHECK(scaled.beta_D == 16.0);
  CHECK(scaled.beta_U == 16.0);
  CHECK_THROWS_AS(HapoConfig::from_key_values({{"lr", "-1"}}), std::invalid_argument);
}

TEST_CASE("metrics record") {
  LossReport r;
  r.loss = -0.25;
  r.lambdas = {0.2, 0.6};
  const auto line = metrics_record(7, r);
  CHECK(line.find("\"step\":7") != std::string::npos);
  CHECK(line.find("\"lambda_mean\":0.4") != std::string::npos);
  CHECK(line.find('\n') == std::string::npos);
}
