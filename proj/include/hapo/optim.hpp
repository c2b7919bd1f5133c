#pragma once

// Training objectives over batches of labeled steps.
//
// Preference loss, per sample i with reward r_i = log pi(a|o) - log pi_ref(a|o):
//   desirable (c != 0):  v_i = lambda_D,i * sigmoid(s * (r_i - z0))
//   undesirable (c = 0): v_i = lambda_U,i * sigmoid(s * (z0 - r_i))
//   loss = -mean_i v_i
// where z0 is the clamped mismatched-pair KL estimate and the lambdas come
// from batch-normalized L1 errors of the greedy action:
//   w_i = l_i / sum_j l_j,  lambda_D = 1 - exp(-beta_D w),  lambda_U = exp(-beta_U w).
// Losses are minimized; every gradient is d(loss)/d(params).

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hapo/data.hpp"
#include "hapo/kv.hpp"
#include "hapo/policy.hpp"
#include "hapo/rng.hpp"
#include "hapo/tokenizer.hpp"

namespace hapo {

struct HapoConfig {
  double beta_D = 8.0;  ///< defaults to the batch size
  double beta_U = 8.0;  ///< defaults to the batch size
  double lr = 5e-5;
  int batch = 8;
  int K = 10;
  bool exclude_gripper_reject = true;
  bool kl_detached = true;
  /// Inverse temperature on (r - z0); 1 leaves the utility exactly as written.
  double reward_scale = 1.0;

  // Baselines.
  double sirius_intervention_weight = 2.0;
  double dpo_noise_sigma = 0.1;
  double dpo_beta = 0.1;

  void validate() const;
  KeyValues to_key_values() const;
  /// Missing beta_D / beta_U fall back to the (possibly overridden) batch size.
  static HapoConfig from_key_values(const KeyValues& kv);
};

struct BatchWeights {
  std::vector<double> l;       ///< L1 error of the greedy action
  std::vector<double> w;       ///< l / sum(l), or 1/n when sum(l) = 0
  std::vector<double> lambda;  ///< lambda_D for c != 0, lambda_U for c = 0
  bool uniform_fallback = false;
};

struct LossReport {
  double loss = 0.0;
  double mean_reward_desirable = 0.0;
  double mean_reward_undesirable = 0.0;
  double z0 = 0.0;
  std::vector<double> rewards;
  std::vector<double> utilities;
  std::vector<double> lambdas;
};

struct LossAndGrad {
  LossReport report;
  Gradient grad;
};

/// -mean log pi(tokens | o).
LossAndGrad bc_loss_and_grad(const PolicyParams& params, std::span<const Step> batch);

/// Sum over action dims of log pi - log pi_ref; the gripper term is dropped for
/// undesirable samples when cfg.exclude_gripper_reject is set.
double reward(const PolicyParams& params, const PolicyParams& ref, std::span<const double> obs,
              const ActionTokens& tokens, Label c, const HapoConfig& cfg, const TokenizerConfig& tok = {});

/// z0 = max(0, mean_i [log pi(tokens_{i+1} | o_i) - log pi_ref(tokens_{i+1} | o_i)]).
/// Throws std::invalid_argument for batches smaller than 2.
double kl_estimate(const PolicyParams& params, const PolicyParams& ref, std::span<const Step> batch);

double lambda_desirable(double w, double beta_D);
double lambda_undesirable(double w, double beta_U);

BatchWeights adaptive_weights(const PolicyParams& params, std::span<const Step> batch, const HapoConfig& cfg,
                              const TokenizerConfig& tok = {});

/// Preference loss with lambdas and z0 held fixed (z0 is recomputed live
/// and differentiated when cfg.kl_detached is false).
LossAndGrad hapo_loss_fixed(const PolicyParams& params, const PolicyParams& ref, std::span<const Step> batch,
                            std::span<const double> lambdas, double z0, const HapoConfig& cfg,
                            const TokenizerConfig& tok = {});

/// Full step objective: adaptive weights, KL estimate, then hapo_loss_fixed.
LossAndGrad hapo_loss_and_grad(const PolicyParams& params, const PolicyParams& ref, std::span<const Step> batch,
                               const HapoConfig& cfg, const TokenizerConfig& tok = {});

enum class Method { hapo, dagger, sirius, dpo_synth, kto_vanilla, bc };
std::string to_string(Method m);
Method parse_method(const std::string& name);

/// Rejected tokens for each sample: greedy ref action plus N(0, sigma) noise, clamped and re-encoded.
std::vector<ActionTokens> synthesize_rejections(const PolicyParams& ref, std::span<const Step> batch,
                                                const HapoConfig& cfg, const TokenizerConfig& tok, Rng& rng);

/// DPO on (true tokens, rejected tokens) pairs of the desirable samples.
LossAndGrad dpo_loss_and_grad(const PolicyParams& params, const PolicyParams& ref, std::span<const Step> batch,
                              std::span<const ActionTokens> rejected, const HapoConfig& cfg);

/// Baseline objectives. dagger: BC on c != 0; sirius: BC with intervention
/// samples weighted by cfg.sirius_intervention_weight; dpo_synth: DPO against
/// synthesized rejections (needs `rng`); kto_vanilla: preference loss with all lambdas = 1.
LossAndGrad baseline_loss(Method kind, const PolicyParams& params, const PolicyParams& ref,
                          std::span<const Step> batch, const HapoConfig& cfg, const TokenizerConfig& tok = {},
                          Rng* rng = nullptr);

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  long long t = 0;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// In-place bias-corrected Adam update (descends the gradient).
void adam_step(Eigen::VectorXd& params, const Eigen::VectorXd& grad, AdamState& state, double lr,
               const AdamOptions& opt = {});
inline void adam_step(PolicyParams& params, const Gradient& grad, AdamState& state, double lr,
                      const AdamOptions& opt = {}) {
  adam_step(params.flat(), grad.flat(), state, lr, opt);
}

/// One line-delimited metrics record.
std::string metrics_record(long long step, const LossReport& report);

}  // namespace hapo
