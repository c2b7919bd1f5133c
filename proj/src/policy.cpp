#include "hapo/policy.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace hapo {

namespace {

constexpr char kMagic[8] = {'H', 'A', 'P', 'O', 'P', 'O', 'L', '\0'};
constexpr std::uint32_t kCheckpointVersion = 1;

[[noreturn]] void numeric_overflow() { throw std::overflow_error("numeric overflow"); }

/// Log-softmax of each column, stabilized by the column max.
Eigen::MatrixXd softmax_columns(const Eigen::MatrixXd& logits, Eigen::VectorXd& log_norm) {
  const Eigen::RowVectorXd col_max = logits.colwise().maxCoeff();
  Eigen::MatrixXd probs = (logits.rowwise() - col_max).array().exp().matrix();
  const Eigen::RowVectorXd sums = probs.colwise().sum();
  log_norm = (col_max.array() + sums.array().log()).transpose();
  probs.array().rowwise() /= sums.array();
  return probs;
}

/// Encoder output for one observation.
Eigen::VectorXd encode_one(const PolicyParams& p, std::span<const double> obs) {
  if (obs.size() != static_cast<std::size_t>(p.shape().obs_dim))
    throw std::invalid_argument("observation has " + std::to_string(obs.size()) + " dims, policy expects " +
                                std::to_string(p.shape().obs_dim));
  const ConstVectorMap o(obs.data(), static_cast<Eigen::Index>(obs.size()));
  const Eigen::VectorXd h1 = (p.w1() * o + p.b1()).array().tanh().matrix();
  return (p.w2() * h1 + p.b2()).array().tanh().matrix();
}

Eigen::VectorXd head_logits(const PolicyParams& p, const Eigen::VectorXd& h, int d, int prev_token) {
  const int H = p.shape().hidden;
  const int E = p.shape().embed;
  const auto W = p.head_w(d);
  Eigen::VectorXd logits = W.leftCols(H) * h + p.head_b(d);
  if (d > 0) logits.noalias() += W.rightCols(E) * p.embed().col(prev_token);
  return logits;
}

int argmax_lowest(const Eigen::VectorXd& v) {
  int best = 0;
  for (Eigen::Index k = 1; k < v.size(); ++k)
    if (v[k] > v[best]) best = static_cast<int>(k);
  return best;
}

}  // namespace

void PolicyShape::validate() const {
  if (obs_dim < 1 || hidden < 1 || embed < 1 || bins < 2 || dims < 1)
    throw std::invalid_argument("policy shape: all sizes must be positive and bins >= 2");
}

KeyValues PolicyShape::to_key_values() const {
  return {{"obs_dim", std::to_string(obs_dim)},
          {"hidden", std::to_string(hidden)},
          {"embed", std::to_string(embed)},
          {"bins", std::to_string(bins)},
          {"dims", std::to_string(dims)}};
}

PolicyShape PolicyShape::from_key_values(const KeyValues& kv) {
  PolicyShape s;
  s.obs_dim = static_cast<int>(kv_int(kv, "obs_dim", s.obs_dim));
  s.hidden = static_cast<int>(kv_int(kv, "hidden", s.hidden));
  s.embed = static_cast<int>(kv_int(kv, "embed", s.embed));
  s.bins = static_cast<int>(kv_int(kv, "bins", s.bins));
  s.dims = static_cast<int>(kv_int(kv, "dims", s.dims));
  s.validate();
  return s;
}

ParamLayout::ParamLayout(const PolicyShape& s) {
  s.validate();
  Eigen::Index off = 0;
  auto take = [&off](Eigen::Index n) {
    const Eigen::Index at = off;
    off += n;
    return at;
  };
  w1 = take(static_cast<Eigen::Index>(s.hidden) * s.obs_dim);
  b1 = take(s.hidden);
  w2 = take(static_cast<Eigen::Index>(s.hidden) * s.hidden);
  b2 = take(s.hidden);
  embed = take(static_cast<Eigen::Index>(s.embed) * s.bins);
  for (int d = 0; d < s.dims; ++d) {
    head_w.push_back(take(static_cast<Eigen::Index>(s.bins) * (s.hidden + s.embed)));
    head_b.push_back(take(s.bins));
  }
  total = off;
}

ParamBlock::ParamBlock(const PolicyShape& shape)
    : shape_(shape), layout_(shape), flat_(Eigen::VectorXd::Zero(layout_.total)) {}

PolicyParams PolicyParams::init(std::uint64_t seed, const PolicyShape& shape) {
  PolicyParams p(shape);
  Rng rng(derive_seed(seed, "policy.init"));
  auto fill = [&rng](auto&& block, double bound) {
    for (Eigen::Index j = 0; j < block.cols(); ++j)
      for (Eigen::Index i = 0; i < block.rows(); ++i) block(i, j) = rng.uniform(-bound, bound);
  };
  fill(p.w1(), 1.0 / std::sqrt(shape.obs_dim));
  fill(p.w2(), 1.0 / std::sqrt(shape.hidden));
  fill(p.embed(), 1.0 / std::sqrt(shape.embed));
  for (int d = 0; d < shape.dims; ++d) fill(p.head_w(d), 1.0 / std::sqrt(shape.hidden + shape.embed));
  return p;
}

Gradient& Gradient::operator+=(const Gradient& other) {
  if (!(other.shape_ == shape_)) throw std::invalid_argument("gradient shape mismatch");
  flat_ += other.flat_;
  return *this;
}

Gradient& Gradient::operator*=(double s) {
  flat_ *= s;
  return *this;
}

Eigen::MatrixXd stack_observations(std::span<const std::vector<double>> observations, int obs_dim) {
  Eigen::MatrixXd out(obs_dim, static_cast<Eigen::Index>(observations.size()));
  for (std::size_t i = 0; i < observations.size(); ++i) {
    if (observations[i].size() != static_cast<std::size_t>(obs_dim))
      throw std::invalid_argument("observation " + std::to_string(i) + " has wrong dimension");
    for (int k = 0; k < obs_dim; ++k) out(k, static_cast<Eigen::Index>(i)) = observations[i][k];
  }
  return out;
}

BatchForward forward_batch(const PolicyParams& p, const Eigen::MatrixXd& obs, std::span<const ActionTokens> tokens) {
  const auto& s = p.shape();
  const Eigen::Index n = obs.cols();
  if (obs.rows() != s.obs_dim) throw std::invalid_argument("forward_batch: observation dimension mismatch");
  if (tokens.size() != static_cast<std::size_t>(n)) throw std::invalid_argument("forward_batch: batch size mismatch");

  BatchForward f;
  f.obs = obs;
  f.h1 = ((p.w1() * obs).colwise() + p.b1()).array().tanh().matrix();
  f.h2 = ((p.w2() * f.h1).colwise() + p.b2()).array().tanh().matrix();
  f.log_probs.resize(n, s.dims);
  f.tokens.assign(s.dims, std::vector<int>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    if (tokens[i].size() != static_cast<std::size_t>(s.dims))
      throw std::invalid_argument("forward_batch: token sequence has wrong length");
    for (int d = 0; d < s.dims; ++d) {
      const int tok = tokens[i][d];
      if (tok < 0 || tok >= s.bins) throw std::out_of_range("forward_batch: token out of range");
      f.tokens[d][i] = tok;
    }
  }

  Eigen::MatrixXd prev_embed(s.embed, n);
  Eigen::VectorXd log_norm;
  for (int d = 0; d < s.dims; ++d) {
    const auto W = p.head_w(d);
    Eigen::MatrixXd logits = W.leftCols(s.hidden) * f.h2;
    logits.colwise() += p.head_b(d);
    if (d > 0) {
      for (Eigen::Index i = 0; i < n; ++i) prev_embed.col(i) = p.embed().col(f.tokens[d - 1][i]);
      logits.noalias() += W.rightCols(s.embed) * prev_embed;
    }
    f.probs.push_back(softmax_columns(logits, log_norm));
    for (Eigen::Index i = 0; i < n; ++i) {
      const double lp = logits(f.tokens[d][i], i) - log_norm[i];
      if (!std::isfinite(lp)) numeric_overflow();
      f.log_probs(i, d) = lp;
    }
  }
  return f;
}

void backward_batch(const PolicyParams& p, const BatchForward& f, const Eigen::MatrixXd& coef, Gradient& grad) {
  const auto& s = p.shape();
  const Eigen::Index n = f.batch_size();
  if (coef.rows() != n || coef.cols() != s.dims) throw std::invalid_argument("backward_batch: coefficient shape");
  if (!(grad.shape() == s)) throw std::invalid_argument("backward_batch: gradient shape mismatch");

  Eigen::MatrixXd dh2 = Eigen::MatrixXd::Zero(s.hidden, n);
  Eigen::MatrixXd prev_embed(s.embed, n);
  for (int d = 0; d < s.dims; ++d) {
    // d log_softmax[tok] / d logits = onehot(tok) - probs
    Eigen::MatrixXd dlogits = -f.probs[d];
    for (Eigen::Index i = 0; i < n; ++i) dlogits(f.tokens[d][i], i) += 1.0;
    dlogits.array().rowwise() *= coef.col(d).transpose().array();

    auto gW = grad.head_w(d);
    gW.leftCols(s.hidden).noalias() += dlogits * f.h2.transpose();
    grad.head_b(d) += dlogits.rowwise().sum();
    const auto W = p.head_w(d);
    dh2.noalias() += W.leftCols(s.hidden).transpose() * dlogits;
    if (d > 0) {
      for (Eigen::Index i = 0; i < n; ++i) prev_embed.col(i) = p.embed().col(f.tokens[d - 1][i]);
      gW.rightCols(s.embed).noalias() += dlogits * prev_embed.transpose();
      const Eigen::MatrixXd de = W.rightCols(s.embed).transpose() * dlogits;
      auto gE = grad.embed();
      for (Eigen::Index i = 0; i < n; ++i) gE.col(f.tokens[d - 1][i]) += de.col(i);
    }
  }

  const Eigen::MatrixXd dz2 = (dh2.array() * (1.0 - f.h2.array().square())).matrix();
  grad.w2().noalias() += dz2 * f.h1.transpose();
  grad.b2() += dz2.rowwise().sum();
  const Eigen::MatrixXd dz1 = ((p.w2().transpose() * dz2).array() * (1.0 - f.h1.array().square())).matrix();
  grad.w1().noalias() += dz1 * f.obs.transpose();
  grad.b1() += dz1.rowwise().sum();
}

LogProbResult log_prob(const PolicyParams& params, std::span<const double> obs, const ActionTokens& tokens) {
  const auto& s = params.shape();
  if (tokens.size() != static_cast<std::size_t>(s.dims)) throw std::invalid_argument("log_prob: wrong token count");
  const Eigen::VectorXd h = encode_one(params, obs);
  LogProbResult r;
  r.per_dim.reserve(s.dims);
  for (int d = 0; d < s.dims; ++d) {
    if (tokens[d] < 0 || tokens[d] >= s.bins) throw std::out_of_range("log_prob: token out of range");
    const Eigen::VectorXd logits = head_logits(params, h, d, d > 0 ? tokens[d - 1] : 0);
    const double m = logits.maxCoeff();
    const double lse = m + std::log((logits.array() - m).exp().sum());
    const double lp = logits[tokens[d]] - lse;
    if (!std::isfinite(lp)) numeric_overflow();
    r.per_dim.push_back(lp);
    r.total += lp;
  }
  return r;
}

ActionTokens greedy_decode(const PolicyParams& params, std::span<const double> obs) {
  const Eigen::VectorXd h = encode_one(params, obs);
  ActionTokens out;
  out.tokens.reserve(params.shape().dims);
  int prev = 0;
  for (int d = 0; d < params.shape().dims; ++d) {
    prev = argmax_lowest(head_logits(params, h, d, prev));
    out.tokens.push_back(prev);
  }
  return out;
}

ActionTokens sample(const PolicyParams& params, std::span<const double> obs, Rng& rng, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("sample: temperature must be positive");
  const Eigen::VectorXd h = encode_one(params, obs);
  ActionTokens out;
  out.tokens.reserve(params.shape().dims);
  int prev = 0;
  for (int d = 0; d < params.shape().dims; ++d) {
    const Eigen::VectorXd scaled = head_logits(params, h, d, prev) / temperature;
    const Eigen::VectorXd weights = (scaled.array() - scaled.maxCoeff()).exp();
    const double u = rng.uniform() * weights.sum();
    double acc = 0.0;
    int choice = static_cast<int>(weights.size()) - 1;
    for (Eigen::Index k = 0; k < weights.size(); ++k) {
      acc += weights[k];
      if (u < acc) {
        choice = static_cast<int>(k);
        break;
      }
    }
    // Never land on a zero-probability tail bin through rounding.
    while (weights[choice] == 0.0 && choice > 0) --choice;
    out.tokens.push_back(choice);
    prev = choice;
  }
  return out;
}

void accumulate_grad_log_prob(const PolicyParams& params, std::span<const double> obs, const ActionTokens& tokens,
                              double weight, Gradient& grad) {
  const std::vector<std::vector<double>> one{std::vector<double>(obs.begin(), obs.end())};
  const auto fwd = forward_batch(params, stack_observations(one, params.shape().obs_dim), {&tokens, 1});
  backward_batch(params, fwd, Eigen::MatrixXd::Constant(1, params.shape().dims, weight), grad);
}

Gradient grad_log_prob(const PolicyParams& params, std::span<const double> obs, const ActionTokens& tokens) {
  Gradient g(params.shape());
  accumulate_grad_log_prob(params, obs, tokens, 1.0, g);
  return g;
}

void save_policy(const PolicyParams& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  const auto& s = params.shape();
  const std::int32_t header[5] = {s.obs_dim, s.hidden, s.embed, s.bins, s.dims};
  const std::uint64_t count = static_cast<std::uint64_t>(params.size());
  out.write(kMagic, sizeof kMagic);
  out.write(reinterpret_cast<const char*>(&kCheckpointVersion), sizeof kCheckpointVersion);
  out.write(reinterpret_cast<const char*>(header), sizeof header);
  out.write(reinterpret_cast<const char*>(&count), sizeof count);
  out.write(reinterpret_cast<const char*>(params.flat().data()),
            static_cast<std::streamsize>(count * sizeof(double)));
  if (!out) throw std::runtime_error("failed writing checkpoint " + path);
}

PolicyParams load_policy(const std::string& path, const PolicyShape* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[8];
  std::uint32_t version = 0;
  std::int32_t header[5];
  std::uint64_t count = 0;
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw std::runtime_error(path + ": not a policy checkpoint");
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  if (!in || version != kCheckpointVersion)
    throw std::runtime_error(path + ": unsupported checkpoint version " + std::to_string(version));
  in.read(reinterpret_cast<char*>(header), sizeof header);
  in.read(reinterpret_cast<char*>(&count), sizeof count);
  if (!in) throw std::runtime_error(path + ": truncated header");

  PolicyShape shape{header[0], header[1], header[2], header[3], header[4]};
  shape.validate();
  if (expected && !(*expected == shape)) throw std::runtime_error(path + ": checkpoint shape mismatch");
  PolicyParams p(shape);
  if (count != static_cast<std::uint64_t>(p.size())) throw std::runtime_error(path + ": parameter count mismatch");
  in.read(reinterpret_cast<char*>(p.flat().data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw std::runtime_error(path + ": truncated parameters");
  if (!p.all_finite()) throw std::runtime_error(path + ": non-finite parameters");
  return p;
}

}  // namespace hapo
