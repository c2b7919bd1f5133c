#include "hapo/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace hapo {

namespace {

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

/// -log sigmoid(x), stable for large |x|.
double neg_log_sigmoid(double x) { return x >= 0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x)); }

struct BatchInputs {
  Eigen::MatrixXd obs;
  std::vector<ActionTokens> tokens;
};

BatchInputs gather(const PolicyParams& params, std::span<const Step> batch) {
  BatchInputs in;
  in.obs.resize(params.shape().obs_dim, static_cast<Eigen::Index>(batch.size()));
  in.tokens.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& o = batch[i].o;
    if (o.size() != static_cast<std::size_t>(params.shape().obs_dim))
      throw std::invalid_argument("batch observation dimension does not match the policy");
    for (std::size_t k = 0; k < o.size(); ++k) in.obs(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)) = o[k];
    in.tokens.push_back(batch[i].tokens);
  }
  return in;
}

/// Tokens of sample i+1 (mod n) paired with observation i.
std::vector<ActionTokens> shifted_tokens(std::span<const Step> batch) {
  std::vector<ActionTokens> out;
  out.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) out.push_back(batch[(i + 1) % batch.size()].tokens);
  return out;
}

/// Per-(sample, dim) mask of the reward terms that count.
Eigen::MatrixXd reward_mask(std::span<const Step> batch, int dims, const HapoConfig& cfg, const TokenizerConfig& tok) {
  Eigen::MatrixXd mask = Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(batch.size()), dims);
  if (cfg.exclude_gripper_reject && tok.gripper_dim < dims)
    for (std::size_t i = 0; i < batch.size(); ++i)
      if (!batch[i].desirable()) mask(static_cast<Eigen::Index>(i), tok.gripper_dim) = 0.0;
  return mask;
}

/// Weighted negative log-likelihood: -sum u_i log pi_i / sum u_i.
LossAndGrad weighted_nll(const PolicyParams& params, std::span<const Step> batch, const std::vector<double>& u) {
  const double total_weight = std::accumulate(u.begin(), u.end(), 0.0);
  if (!(total_weight > 0.0)) throw std::runtime_error("behavior cloning batch has no usable samples");
  const auto in = gather(params, batch);
  const auto fwd = forward_batch(params, in.obs, in.tokens);
  const Eigen::VectorXd totals = fwd.totals();

  LossAndGrad out{{}, Gradient(params.shape())};
  Eigen::MatrixXd coef(fwd.batch_size(), params.shape().dims);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < fwd.batch_size(); ++i) {
    loss -= u[i] * totals[i];
    coef.row(i).setConstant(-u[i] / total_weight);
  }
  out.report.loss = loss / total_weight;
  backward_batch(params, fwd, coef, out.grad);
  return out;
}

void summarize_rewards(LossReport& r, std::span<const Step> batch) {
  double sum_d = 0.0, sum_u = 0.0;
  int n_d = 0, n_u = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].desirable()) {
      sum_d += r.rewards[i];
      ++n_d;
    } else {
      sum_u += r.rewards[i];
      ++n_u;
    }
  }
  r.mean_reward_desirable = n_d ? sum_d / n_d : 0.0;
  r.mean_reward_undesirable = n_u ? sum_u / n_u : 0.0;
}

}  // namespace

void HapoConfig::validate() const {
  if (!(beta_D > 0.0) || !(beta_U > 0.0)) throw std::invalid_argument("beta_D and beta_U must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (batch < 2) throw std::invalid_argument("batch must be >= 2");
  if (K < 0) throw std::invalid_argument("K must be >= 0");
  if (!(reward_scale > 0.0)) throw std::invalid_argument("reward_scale must be positive");
  if (!(dpo_beta > 0.0) || dpo_noise_sigma < 0.0) throw std::invalid_argument("invalid DPO settings");
}

KeyValues HapoConfig::to_key_values() const {
  return {{"beta_D", format_double(beta_D)},
          {"beta_U", format_double(beta_U)},
          {"lr", format_double(lr)},
          {"batch", std::to_string(batch)},
          {"K", std::to_string(K)},
          {"exclude_gripper_reject", exclude_gripper_reject ? "true" : "false"},
          {"kl_detached", kl_detached ? "true" : "false"},
          {"reward_scale", format_double(reward_scale)},
          {"sirius_intervention_weight", format_double(sirius_intervention_weight)},
          {"dpo_noise_sigma", format_double(dpo_noise_sigma)},
          {"dpo_beta", format_double(dpo_beta)}};
}

HapoConfig HapoConfig::from_key_values(const KeyValues& kv) {
  HapoConfig c;
  c.batch = static_cast<int>(kv_int(kv, "batch", c.batch));
  c.beta_D = kv_double(kv, "beta_D", c.batch);
  c.beta_U = kv_double(kv, "beta_U", c.batch);
  c.lr = kv_double(kv, "lr", c.lr);
  c.K = static_cast<int>(kv_int(kv, "K", c.K));
  c.exclude_gripper_reject = kv_bool(kv, "exclude_gripper_reject", c.exclude_gripper_reject);
  c.kl_detached = kv_bool(kv, "kl_detached", c.kl_detached);
  c.reward_scale = kv_double(kv, "reward_scale", c.reward_scale);
  c.sirius_intervention_weight = kv_double(kv, "sirius_intervention_weight", c.sirius_intervention_weight);
  c.dpo_noise_sigma = kv_double(kv, "dpo_noise_sigma", c.dpo_noise_sigma);
  c.dpo_beta = kv_double(kv, "dpo_beta", c.dpo_beta);
  c.validate();
  return c;
}

LossAndGrad bc_loss_and_grad(const PolicyParams& params, std::span<const Step> batch) {
  if (batch.empty()) throw std::invalid_argument("bc_loss_and_grad: empty batch");
  return weighted_nll(params, batch, std::vector<double>(batch.size(), 1.0));
}

double reward(const PolicyParams& params, const PolicyParams& ref, std::span<const double> obs,
              const ActionTokens& tokens, Label c, const HapoConfig& cfg, const TokenizerConfig& tok) {
  const auto lp = log_prob(params, obs, tokens);
  const auto lr = log_prob(ref, obs, tokens);
  double r = 0.0;
  for (std::size_t d = 0; d < lp.per_dim.size(); ++d) {
    if (cfg.exclude_gripper_reject && c == Label::undesirable && static_cast<int>(d) == tok.gripper_dim) continue;
    r += lp.per_dim[d] - lr.per_dim[d];
  }
  return r;
}

double kl_estimate(const PolicyParams& params, const PolicyParams& ref, std::span<const Step> batch) {
  if (batch.size() < 2) throw std::invalid_argument("kl_estimate: batch must hold at least 2 samples");
  const auto in = gather(params, batch);
  const auto mismatched = shifted_tokens(batch);
  const auto fp = forward_batch(params, in.obs, mismatched);
  const auto fr = forward_batch(ref, in.obs, mismatched);
  return std::max(0.0, (fp.totals() - fr.totals()).mean());
}

double lambda_desirable(double w, double beta_D) { return 1.0 - std::exp(-beta_D * w); }

double lambda_undesirable(double w, double beta_U) { return std::exp(-beta_U * w); }

BatchWeights adaptive_weights(const PolicyParams& params, std::span<const Step> batch, const HapoConfig& cfg,
                              const TokenizerConfig& tok) {
  if (batch.empty()) throw std::invalid_argument("adaptive_weights: empty batch");
  BatchWeights bw;
  const std::size_t n = batch.size();
  bw.l.reserve(n);
  for (const auto& s : batch) {
    const auto predicted = decode_values(greedy_decode(params, s.o), tok);
    const auto target = s.a.to_array();
    double l1 = 0.0;
    for (std::size_t d = 0; d < predicted.size(); ++d) l1 += std::abs(predicted[d] - target[d]);
    bw.l.push_back(l1);
  }
  const double sum = std::accumulate(bw.l.begin(), bw.l.end(), 0.0);
  bw.uniform_fallback = !(sum > 0.0);
  bw.w.resize(n);
  bw.lambda.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    bw.w[i] = bw.uniform_fallback ? 1.0 / static_cast<double>(n) : bw.l[i] / sum;
    bw.lambda[i] = batch[i].desirable() ? lambda_desirable(bw.w[i], cfg.beta_D) : lambda_undesirable(bw.w[i], cfg.beta_U);
  }
  return bw;
}

LossAndGrad hapo_loss_fixed(const PolicyParams& params, const PolicyParams& ref, std::span<const Step> batch,
                            std::span<const double> lambdas, double z0, const HapoConfig& cfg,
                            const TokenizerConfig& tok) {
  const std::size_t n = batch.size();
  if (n == 0) throw std::invalid_argument("hapo loss: empty batch");
  if (lambdas.size() != n) throw std::invalid_argument("hapo loss: one lambda per sample required");
  const int dims = params.shape().dims;
  const double s = cfg.reward_scale;

  const auto in = gather(params, batch);
  const auto fp = forward_batch(params, in.obs, in.tokens);
  const auto fr = forward_batch(ref, in.obs, in.tokens);
  const Eigen::MatrixXd mask = reward_mask(batch, dims, cfg, tok);
  const Eigen::VectorXd rewards = (fp.log_probs - fr.log_probs).cwiseProduct(mask).rowwise().sum();

  std::optional<BatchForward> mismatched_fwd;
  bool z0_live = false;
  if (!cfg.kl_detached) {
    if (n < 2) throw std::invalid_argument("hapo loss: live KL needs at least 2 samples");
    const auto mismatched = shifted_tokens(batch);
    mismatched_fwd = forward_batch(params, in.obs, mismatched);
    const auto fr_m = forward_batch(ref, in.obs, mismatched);
    const double raw = (mismatched_fwd->totals() - fr_m.totals()).mean();
    z0 = std::max(0.0, raw);
    z0_live = raw > 0.0;
  }

  LossAndGrad out{{}, Gradient(params.shape())};
  auto& rep = out.report;
  rep.z0 = z0;
  rep.rewards.assign(rewards.data(), rewards.data() + n);
  rep.lambdas.assign(lambdas.begin(), lambdas.end());
  rep.utilities.resize(n);

  Eigen::MatrixXd coef(static_cast<Eigen::Index>(n), dims);
  double dloss_dz0 = 0.0;
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double sign = batch[i].desirable() ? 1.0 : -1.0;
    const double sig = sigmoid(sign * s * (rewards[i] - z0));
    const double v = lambdas[i] * sig;
    const double dv_dr = sign * lambdas[i] * s * sig * (1.0 - sig);
    rep.utilities[i] = v;
    loss -= v;
    const auto row = static_cast<Eigen::Index>(i);
    coef.row(row) = mask.row(row) * (-dv_dr / static_cast<double>(n));
    dloss_dz0 += dv_dr / static_cast<double>(n);  // dv/dz0 = -dv/dr
  }
  rep.loss = loss / static_cast<double>(n);
  summarize_rewards(rep, batch);
  if (!std::isfinite(rep.loss)) throw std::overflow_error("numeric overflow");

  backward_batch(params, fp, coef, out.grad);
  if (z0_live) {
    const Eigen::MatrixXd kl_coef =
        Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(n), dims, dloss_dz0 / static_cast<double>(n));
    backward_batch(params, *mismatched_fwd, kl_coef, out.grad);
  }
  return out;
}

LossAndGrad hapo_loss_and_grad(const PolicyParams& params, const PolicyParams& ref, std::span<const Step> batch,
                               const HapoConfig& cfg, const TokenizerConfig& tok) {
  const auto weights = adaptive_weights(params, batch, cfg, tok);
  const double z0 = kl_estimate(params, ref, batch);
  return hapo_loss_fixed(params, ref, batch, weights.lambda, z0, cfg, tok);
}

std::string to_string(Method m) {
  switch (m) {
    case Method::hapo: return "hapo";
    case Method::dagger: return "dagger";
    case Method::sirius: return "sirius";
    case Method::dpo_synth: return "dpo";
    case Method::kto_vanilla: return "kto";
    case Method::bc: return "bc";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  if (name == "hapo") return Method::hapo;
  if (name == "dagger") return Method::dagger;
  if (name == "sirius") return Method::sirius;
  if (name == "dpo" || name == "dpo_synth") return Method::dpo_synth;
  if (name == "kto" || name == "kto_vanilla") return Method::kto_vanilla;
  if (name == "bc") return Method::bc;
  throw std::invalid_argument("unknown method '" + name + "'");
}

std::vector<ActionTokens> synthesize_rejections(const PolicyParams& ref, std::span<const Step> batch,
                                                const HapoConfig& cfg, const TokenizerConfig& tok, Rng& rng) {
  std::vector<ActionTokens> out;
  out.reserve(batch.size());
  for (const auto& s : batch) {
    auto values = decode_values(greedy_decode(ref, s.o), tok);
    for (auto& v : values) v = std::clamp(v + cfg.dpo_noise_sigma * rng.normal(), tok.low, tok.high);
    out.push_back(encode(values, tok));
  }
  return out;
}

LossAndGrad dpo_loss_and_grad(const PolicyParams& params, const PolicyParams& ref, std::span<const Step> batch,
                              std::span<const ActionTokens> rejected, const HapoConfig& cfg) {
  if (rejected.size() != batch.size()) throw std::invalid_argument("dpo: one rejection per sample required");
  std::vector<Step> chosen;
  std::vector<ActionTokens> losers;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (!batch[i].desirable()) continue;
    chosen.push_back(batch[i]);
    losers.push_back(rejected[i]);
  }
  if (chosen.empty()) throw std::runtime_error("dpo: batch has no desirable samples");
  const auto n = static_cast<Eigen::Index>(chosen.size());
  const int dims = params.shape().dims;

  const auto in = gather(params, chosen);
  const auto fp_w = forward_batch(params, in.obs, in.tokens);
  const auto fr_w = forward_batch(ref, in.obs, in.tokens);
  const auto fp_l = forward_batch(params, in.obs, losers);
  const auto fr_l = forward_batch(ref, in.obs, losers);
  const Eigen::VectorXd margin =
      cfg.dpo_beta * ((fp_w.totals() - fr_w.totals()) - (fp_l.totals() - fr_l.totals()));

  LossAndGrad out{{}, Gradient(params.shape())};
  Eigen::MatrixXd coef_w(n, dims), coef_l(n, dims);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    loss += neg_log_sigmoid(margin[i]);
    const double dl_dm = -(1.0 - sigmoid(margin[i])) / static_cast<double>(n);
    coef_w.row(i).setConstant(dl_dm * cfg.dpo_beta);
    coef_l.row(i).setConstant(-dl_dm * cfg.dpo_beta);
  }
  out.report.loss = loss / static_cast<double>(n);
  out.report.rewards.assign(margin.data(), margin.data() + n);
  out.report.mean_reward_desirable = margin.mean() / cfg.dpo_beta;
  backward_batch(params, fp_w, coef_w, out.grad);
  backward_batch(params, fp_l, coef_l, out.grad);
  return out;
}

LossAndGrad baseline_loss(Method kind, const PolicyParams& params, const PolicyParams& ref,
                          std::span<const Step> batch, const HapoConfig& cfg, const TokenizerConfig& tok, Rng* rng) {
  switch (kind) {
    case Method::bc: return bc_loss_and_grad(params, batch);
    case Method::dagger: {
      std::vector<double> u;
      for (const auto& s : batch) u.push_back(s.desirable() ? 1.0 : 0.0);
      return weighted_nll(params, batch, u);
    }
    case Method::sirius: {
      std::vector<double> u;
      for (const auto& s : batch)
        u.push_back(s.c == Label::intervention ? cfg.sirius_intervention_weight : (s.desirable() ? 1.0 : 0.0));
      return weighted_nll(params, batch, u);
    }
    case Method::dpo_synth: {
      if (!rng) throw std::invalid_argument("dpo baseline needs a random source");
      const auto rejected = synthesize_rejections(ref, batch, cfg, tok, *rng);
      return dpo_loss_and_grad(params, ref, batch, rejected, cfg);
    }
    case Method::kto_vanilla: {
      const std::vector<double> ones(batch.size(), 1.0);
      return hapo_loss_fixed(params, ref, batch, ones, kl_estimate(params, ref, batch), cfg, tok);
    }
    case Method::hapo: return hapo_loss_and_grad(params, ref, batch, cfg, tok);
  }
  throw std::invalid_argument("unknown baseline");
}

void adam_step(Eigen::VectorXd& params, const Eigen::VectorXd& grad, AdamState& state, double lr,
               const AdamOptions& opt) {
  if (grad.size() != params.size()) throw std::invalid_argument("adam_step: gradient size mismatch");
  if (state.m.size() != params.size()) {
    state.m = Eigen::VectorXd::Zero(params.size());
    state.v = Eigen::VectorXd::Zero(params.size());
    state.t = 0;
  }
  ++state.t;
  state.m = opt.beta1 * state.m + (1.0 - opt.beta1) * grad;
  state.v = opt.beta2 * state.v + (1.0 - opt.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.t));
  params.array() -= lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + opt.eps);
}

std::string metrics_record(long long step, const LossReport& r) {
  double lmin = 0.0, lmax = 0.0, lmean = 0.0;
  if (!r.lambdas.empty()) {
    lmin = *std::min_element(r.lambdas.begin(), r.lambdas.end());
    lmax = *std::max_element(r.lambdas.begin(), r.lambdas.end());
    lmean = std::accumulate(r.lambdas.begin(), r.lambdas.end(), 0.0) / static_cast<double>(r.lambdas.size());
  }
  nlohmann::ordered_json j;
  j["step"] = step;
  j["loss"] = r.loss;
  j["z0"] = r.z0;
  j["mean_reward_desirable"] = r.mean_reward_desirable;
  j["mean_reward_undesirable"] = r.mean_reward_undesirable;
  j["lambda_mean"] = lmean;
  j["lambda_min"] = lmin;
  j["lambda_max"] = lmax;
  return j.dump();
}

}  // namespace hapo
