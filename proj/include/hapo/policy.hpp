#pragma once

// Autoregressive discrete-action policy.
//
//   h        = tanh(W2 tanh(W1 o + b1) + b2)               (encoder, H units)
//   e_0      = 0                                           (start token)
//   e_d      = embed[token_{d-1}]                          (d >= 1)
//   logits_d = Wd [h; e_d] + bd                            (B logits)
//   log pi(tokens | o) = sum_d log_softmax(logits_d)[token_d]
//
// All parameters live in one flat vector so gradients, optimizer state and
// finite-difference probes can address them uniformly.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hapo/kv.hpp"
#include "hapo/rng.hpp"
#include "hapo/tokenizer.hpp"

namespace hapo {

struct PolicyShape {
  int obs_dim = kObsDim;
  int hidden = 128;
  int embed = 32;
  int bins = 256;
  int dims = kActionDims;

  void validate() const;
  KeyValues to_key_values() const;
  static PolicyShape from_key_values(const KeyValues& kv);
  friend bool operator==(const PolicyShape&, const PolicyShape&) = default;
};

/// Offsets of each tensor inside the flat parameter vector.
struct ParamLayout {
  explicit ParamLayout(const PolicyShape& shape);

  Eigen::Index w1 = 0, b1 = 0, w2 = 0, b2 = 0, embed = 0;
  std::vector<Eigen::Index> head_w, head_b;
  Eigen::Index total = 0;
};

using MatrixMap = Eigen::Map<Eigen::MatrixXd>;
using ConstMatrixMap = Eigen::Map<const Eigen::MatrixXd>;
using VectorMap = Eigen::Map<Eigen::VectorXd>;
using ConstVectorMap = Eigen::Map<const Eigen::VectorXd>;

/// A flat vector shaped like the policy; shared by parameters and gradients.
class ParamBlock {
 public:
  explicit ParamBlock(const PolicyShape& shape);

  const PolicyShape& shape() const { return shape_; }
  const ParamLayout& layout() const { return layout_; }
  Eigen::VectorXd& flat() { return flat_; }
  const Eigen::VectorXd& flat() const { return flat_; }
  Eigen::Index size() const { return flat_.size(); }

  MatrixMap w1() { return mat(layout_.w1, shape_.hidden, shape_.obs_dim); }
  ConstMatrixMap w1() const { return mat(layout_.w1, shape_.hidden, shape_.obs_dim); }
  VectorMap b1() { return vec(layout_.b1, shape_.hidden); }
  ConstVectorMap b1() const { return vec(layout_.b1, shape_.hidden); }
  MatrixMap w2() { return mat(layout_.w2, shape_.hidden, shape_.hidden); }
  ConstMatrixMap w2() const { return mat(layout_.w2, shape_.hidden, shape_.hidden); }
  VectorMap b2() { return vec(layout_.b2, shape_.hidden); }
  ConstVectorMap b2() const { return vec(layout_.b2, shape_.hidden); }
  /// E x B: column k embeds token k.
  MatrixMap embed() { return mat(layout_.embed, shape_.embed, shape_.bins); }
  ConstMatrixMap embed() const { return mat(layout_.embed, shape_.embed, shape_.bins); }
  /// B x (H + E); the first H columns read the encoder output.
  MatrixMap head_w(int d) { return mat(layout_.head_w[d], shape_.bins, shape_.hidden + shape_.embed); }
  ConstMatrixMap head_w(int d) const { return mat(layout_.head_w[d], shape_.bins, shape_.hidden + shape_.embed); }
  VectorMap head_b(int d) { return vec(layout_.head_b[d], shape_.bins); }
  ConstVectorMap head_b(int d) const { return vec(layout_.head_b[d], shape_.bins); }

  bool all_finite() const { return flat_.allFinite(); }

 protected:
  MatrixMap mat(Eigen::Index off, Eigen::Index r, Eigen::Index c) { return {flat_.data() + off, r, c}; }
  ConstMatrixMap mat(Eigen::Index off, Eigen::Index r, Eigen::Index c) const { return {flat_.data() + off, r, c}; }
  VectorMap vec(Eigen::Index off, Eigen::Index n) { return {flat_.data() + off, n}; }
  ConstVectorMap vec(Eigen::Index off, Eigen::Index n) const { return {flat_.data() + off, n}; }

  PolicyShape shape_;
  ParamLayout layout_;
  Eigen::VectorXd flat_;
};

class PolicyParams : public ParamBlock {
 public:
  /// All-zero weights (uniform policy).
  explicit PolicyParams(const PolicyShape& shape = {}) : ParamBlock(shape) {}

  /// Seeded scaled-uniform initialization; biases start at zero.
  static PolicyParams init(std::uint64_t seed, const PolicyShape& shape = {});

  friend bool operator==(const PolicyParams& a, const PolicyParams& b) {
    return a.shape_ == b.shape_ && a.flat_ == b.flat_;
  }
};

class Gradient : public ParamBlock {
 public:
  explicit Gradient(const PolicyShape& shape) : ParamBlock(shape) {}

  Gradient& operator+=(const Gradient& other);
  Gradient& operator*=(double s);
  void set_zero() { flat_.setZero(); }
};

struct LogProbResult {
  double total = 0.0;
  std::vector<double> per_dim;
};

/// Cached activations of a batched forward pass over n (observation, tokens) pairs.
struct BatchForward {
  Eigen::MatrixXd obs;  ///< obs_dim x n
  Eigen::MatrixXd h1;   ///< H x n
  Eigen::MatrixXd h2;   ///< H x n
  std::vector<Eigen::MatrixXd> probs;  ///< per dim, B x n softmax
  std::vector<std::vector<int>> tokens;  ///< per dim, n tokens
  Eigen::MatrixXd log_probs;  ///< n x dims

  Eigen::Index batch_size() const { return obs.cols(); }
  Eigen::VectorXd totals() const { return log_probs.rowwise().sum(); }
};

/// Stacks observations column-wise. Throws on size mismatch.
Eigen::MatrixXd stack_observations(std::span<const std::vector<double>> observations, int obs_dim);

/// Throws std::overflow_error("numeric overflow") if any log-probability is not finite.
BatchForward forward_batch(const PolicyParams& params, const Eigen::MatrixXd& obs,
                           std::span<const ActionTokens> tokens);

/// Accumulates sum_{i,d} coef(i, d) * grad(log pi_d(token_{i,d} | o_i)) into `grad`.
void backward_batch(const PolicyParams& params, const BatchForward& fwd, const Eigen::MatrixXd& coef,
                    Gradient& grad);

LogProbResult log_prob(const PolicyParams& params, std::span<const double> obs, const ActionTokens& tokens);

ActionTokens greedy_decode(const PolicyParams& params, std::span<const double> obs);

/// Ancestral sampling; temperature scales the logits (must be > 0).
ActionTokens sample(const PolicyParams& params, std::span<const double> obs, Rng& rng, double temperature = 1.0);

/// Exact gradient of log pi(tokens | o), scaled by `weight` and added to `grad`.
void accumulate_grad_log_prob(const PolicyParams& params, std::span<const double> obs, const ActionTokens& tokens,
                              double weight, Gradient& grad);
Gradient grad_log_prob(const PolicyParams& params, std::span<const double> obs, const ActionTokens& tokens);

/// Binary checkpoint: magic, version, shape header, then little-endian doubles.
void save_policy(const PolicyParams& params, const std::string& path);
/// Throws std::runtime_error on bad magic/version, or when `expected` is given and differs.
PolicyParams load_policy(const std::string& path, const PolicyShape* expected = nullptr);

}  // namespace hapo
