#pragma once

// Tiny pre-norm decoder-only transformer used as the policy.
//
// Two forward paths share one set of weights:
//  * forward(Tape&, ...) builds the differentiable graph from autodiff ops;
//    the non-recording overload is what embedding extraction uses.
//  * Decoder runs incremental inference with a key/value cache for sampling.
// Both mask BOS and PAD in the output logits, so the policy only ever emits
// byte tokens and EOS.

#include <Eigen/Core>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "grace/autodiff.hpp"
#include "grace/errors.hpp"
#include "grace/tensor.hpp"
#include "grace/tokenizer.hpp"

namespace grace {

struct PolicyConfig {
  int vocab_size = Vocab::kSize;
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 512;
  int max_seq_len = 1536;
  std::uint64_t rng_seed = 0;
  bool tie_embeddings = false;
  // Pool the residual stream before the final layer norm instead of after.
  bool pool_pre_final_norm = false;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (vocab_size < Vocab::kSize) {
      throw ConfigError("vocab_size must be at least " +
                        std::to_string(Vocab::kSize));
    }
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 ||
        max_seq_len <= 0) {
      throw ConfigError("model dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("d_model (" + std::to_string(d_model) +
                        ") is not divisible by n_heads (" +
                        std::to_string(n_heads) + ")");
    }
  }
};

/// Token ids the policy may not emit.
inline constexpr std::array<TokenId, 2> kNonEmittable = {Vocab::kBos,
                                                          Vocab::kPad};

/// Named parameter tensors in a fixed, deterministic order.
class PolicyParams {
 public:
  struct Block {
    std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o;
    std::size_t ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
  };

  PolicyParams() = default;

  explicit PolicyParams(const PolicyConfig& cfg) : config_(cfg) {
    cfg.validate();
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto v = static_cast<std::size_t>(cfg.vocab_size);
    const auto ff = static_cast<std::size_t>(cfg.d_ff);
    tok_emb_ = add("tok_emb", Shape{v, d});
    pos_emb_ = add("pos_emb", Shape{static_cast<std::size_t>(cfg.max_seq_len), d});
    for (int l = 0; l < cfg.n_layers; ++l) {
      const std::string p = "blocks." + std::to_string(l) + ".";
      Block b{};
      b.ln1_g = add(p + "ln1.g", Shape{d}, 1.0);
      b.ln1_b = add(p + "ln1.b", Shape{d});
      b.w_qkv = add(p + "attn.w_qkv", Shape{d, 3 * d});
      b.b_qkv = add(p + "attn.b_qkv", Shape{3 * d});
      b.w_o = add(p + "attn.w_o", Shape{d, d});
      b.b_o = add(p + "attn.b_o", Shape{d});
      b.ln2_g = add(p + "ln2.g", Shape{d}, 1.0);
      b.ln2_b = add(p + "ln2.b", Shape{d});
      b.w_fc = add(p + "mlp.w_fc", Shape{d, ff});
      b.b_fc = add(p + "mlp.b_fc", Shape{ff});
      b.w_proj = add(p + "mlp.w_proj", Shape{ff, d});
      b.b_proj = add(p + "mlp.b_proj", Shape{d});
      blocks_.push_back(b);
    }
    lnf_g_ = add("ln_f.g", Shape{d}, 1.0);
    lnf_b_ = add("ln_f.b", Shape{d});
    if (!cfg.tie_embeddings) lm_w_ = add("lm_head.w", Shape{d, v});
    lm_b_ = add("lm_head.b", Shape{v});
  }

  const PolicyConfig& config() const { return config_; }
  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }
  std::size_t count() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }

  Parameter& by_name(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter " + name);
    return params_[it->second];
  }

  std::size_t tok_emb() const { return tok_emb_; }
  std::size_t pos_emb() const { return pos_emb_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  std::size_t lnf_g() const { return lnf_g_; }
  std::size_t lnf_b() const { return lnf_b_; }
  bool tied() const { return config_.tie_embeddings; }
  std::size_t lm_w() const { return lm_w_; }
  std::size_t lm_b() const { return lm_b_; }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  bool all_finite() const {
    for (const auto& p : params_)
      if (!p.value.all_finite()) return false;
    return true;
  }

 private:
  std::size_t add(const std::string& name, Shape shape, double fill = 0.0) {
    params_.emplace_back(name, Tensor(std::move(shape), fill));
    index_[name] = params_.size() - 1;
    return params_.size() - 1;
  }

  PolicyConfig config_;
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
  std::vector<Block> blocks_;
  std::size_t tok_emb_ = 0, pos_emb_ = 0, lnf_g_ = 0, lnf_b_ = 0, lm_w_ = 0,
              lm_b_ = 0;
};

/// Weights ~ N(0, 0.02), layer-norm gains 1, biases 0. Deterministic in
/// config.rng_seed.
inline PolicyParams init_params(const PolicyConfig& config) {
  PolicyParams params(config);
  std::mt19937_64 engine(config.rng_seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (auto& p : params.all()) {
    const std::string& n = p.name;
    const bool is_gain = n.ends_with(".g");
    const bool is_bias = n.ends_with(".b") || n.ends_with("b_qkv") ||
                         n.ends_with("b_o") || n.ends_with("b_fc") ||
                         n.ends_with("b_proj");
    if (is_gain || is_bias) continue;
    for (double& v : p.value.data()) v = normal(engine);
  }
  return params;
}

struct ForwardVars {
  Var logits;              // [rows x V], rows counted from logits_from
  Var hidden_last;         // [L x d]
  Var hidden_penultimate;  // [L x d]
};

struct ForwardOutput {
  Tensor logits;              // [L x V]
  Tensor hidden_last;         // [L x d]
  Tensor hidden_penultimate;  // [L x d]
};

inline void check_sequence(const PolicyConfig& cfg,
                           std::span<const TokenId> tokens) {
  if (tokens.empty()) throw InputError("forward on an empty sequence");
  if (tokens.size() > static_cast<std::size_t>(cfg.max_seq_len)) {
    throw LengthError("sequence length " + std::to_string(tokens.size()) +
                      " exceeds max_seq_len " +
                      std::to_string(cfg.max_seq_len));
  }
}

/// Builds the forward graph on `tape`. Logits are produced only for
/// positions >= logits_from.
inline ForwardVars forward(Tape& tape, PolicyParams& params,
                           std::span<const TokenId> tokens,
                           std::size_t logits_from = 0) {
  const PolicyConfig& cfg = params.config();
  check_sequence(cfg, tokens);
  const std::size_t L = tokens.size();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto dh = static_cast<std::size_t>(cfg.head_dim());
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<Var> pv;
  pv.reserve(params.count());
  for (auto& p : params.all()) pv.push_back(tape.param(p));

  std::vector<int> positions(L);
  for (std::size_t i = 0; i < L; ++i) positions[i] = static_cast<int>(i);
  Var x = add(gather_rows(pv[params.tok_emb()], tokens),
              gather_rows(pv[params.pos_emb()], positions));

  Var penultimate = x;
  const auto& blocks = params.blocks();
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& b = blocks[l];
    if (l + 1 == blocks.size()) penultimate = x;
    Var a = layer_norm(x, pv[b.ln1_g], pv[b.ln1_b]);
    Var qkv = add_row(matmul(a, pv[b.w_qkv]), pv[b.b_qkv]);
    std::vector<Var> heads;
    heads.reserve(static_cast<std::size_t>(cfg.n_heads));
    for (std::size_t h = 0; h < static_cast<std::size_t>(cfg.n_heads); ++h) {
      Var q = slice_cols(qkv, h * dh, dh);
      Var k = slice_cols(qkv, d + h * dh, dh);
      Var v = slice_cols(qkv, 2 * d + h * dh, dh);
      Var scores = causal_mask(scale(matmul(q, transpose(k)), inv_sqrt_dh));
      heads.push_back(matmul(softmax(scores), v));
    }
    Var attn = add_row(matmul(concat_cols(heads), pv[b.w_o]), pv[b.b_o]);
    x = add(x, attn);
    Var m = layer_norm(x, pv[b.ln2_g], pv[b.ln2_b]);
    Var f = gelu(add_row(matmul(m, pv[b.w_fc]), pv[b.b_fc]));
    x = add(x, add_row(matmul(f, pv[b.w_proj]), pv[b.b_proj]));
  }

  Var normed = layer_norm(x, pv[params.lnf_g()], pv[params.lnf_b()]);
  Var head_in = logits_from == 0 ? normed
                                 : slice_rows(normed, logits_from, L - logits_from);
  Var lm_w = params.tied() ? transpose(pv[params.tok_emb()]) : pv[params.lm_w()];
  Var logits = fill_cols(add_row(matmul(head_in, lm_w), pv[params.lm_b()]),
                         kNonEmittable, kMaskValue);
  return ForwardVars{logits, cfg.pool_pre_final_norm ? x : normed, penultimate};
}

/// Gradient-free forward pass.
inline ForwardOutput forward(const PolicyParams& params,
                             std::span<const TokenId> tokens) {
  Tape tape(false);
  ForwardVars v = forward(tape, const_cast<PolicyParams&>(params), tokens);
  return ForwardOutput{v.logits.value(), v.hidden_last.value(),
                       v.hidden_penultimate.value()};
}

struct SequenceLogprob {
  Var total;                     // scalar on the tape
  Var tokens;                    // [|y|] per-token log-probs on the tape
  std::vector<double> per_token; // values of `tokens`
};

/// log pi(response | prompt) as a differentiable scalar. Prompt tokens are
/// conditioned on but not scored.
inline SequenceLogprob sequence_logprob(Tape& tape, PolicyParams& params,
                                        std::span<const TokenId> prompt,
                                        std::span<const TokenId> response) {
  if (response.empty()) {
    return {tape.constant(Tensor::scalar(0.0)), tape.constant(Tensor(Shape{0})), {}};
  }
  if (prompt.empty()) throw InputError("sequence_logprob needs a prompt");
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), response.begin(), response.end());
  ForwardVars fv = forward(tape, params, seq, prompt.size() - 1);
  Var scored = slice_rows(fv.logits, 0, response.size());
  Var picked = pick(log_softmax(scored), response);
  const Tensor& pt = picked.value();
  std::vector<double> per(pt.data().begin(), pt.data().end());
  return {sum(picked), picked, std::move(per)};
}

/// Gradient-free variant returning (total, per-token).
inline std::pair<double, std::vector<double>> sequence_logprob(
    const PolicyParams& params, std::span<const TokenId> prompt,
    std::span<const TokenId> response) {
  Tape tape(false);
  auto r = sequence_logprob(tape, const_cast<PolicyParams&>(params), prompt,
                            response);
  return {r.total.value().item(), std::move(r.per_token)};
}

/// Incremental inference with a key/value cache.
class Decoder {
 public:
  explicit Decoder(const PolicyParams& params, std::size_t capacity = 0)
      : params_(params), cfg_(params.config()) {
    const auto cap = capacity ? capacity : static_cast<std::size_t>(cfg_.max_seq_len);
    capacity_ = std::min(cap, static_cast<std::size_t>(cfg_.max_seq_len));
    const auto d = static_cast<Eigen::Index>(cfg_.d_model);
    k_cache_.assign(params.blocks().size(), RowMatrix(capacity_, d));
    v_cache_.assign(params.blocks().size(), RowMatrix(capacity_, d));
    logits_.resize(static_cast<std::size_t>(cfg_.vocab_size));
  }

  std::size_t length() const { return length_; }

  /// Next-token logits after the most recent extend().
  std::span<const double> logits() const { return logits_; }

  /// Appends tokens, updating the cache; afterwards logits() refer to the
  /// position after the last appended token.
  void extend(std::span<const TokenId> tokens) {
    if (tokens.empty()) return;
    if (length_ + tokens.size() > capacity_) {
      throw LengthError("decoder capacity " + std::to_string(capacity_) +
                        " exceeded");
    }
    const auto n = static_cast<Eigen::Index>(tokens.size());
    const auto d = static_cast<Eigen::Index>(cfg_.d_model);
    const auto dh = static_cast<Eigen::Index>(cfg_.head_dim());
    const auto p0 = static_cast<Eigen::Index>(length_);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    const ConstMatMap tok = as_matrix(params_[params_.tok_emb()].value);
    const ConstMatMap pos = as_matrix(params_[params_.pos_emb()].value);
    RowMatrix x(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto id = tokens[static_cast<std::size_t>(i)];
      if (id < 0 || id >= cfg_.vocab_size) throw DimensionError("token id out of range");
      x.row(i) = tok.row(id) + pos.row(p0 + i);
    }

    RowMatrix a, qkv, attn(n, d), f;
    const auto& blocks = params_.blocks();
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      const auto& b = blocks[l];
      a = x;
      layer_norm_rows(a, b.ln1_g, b.ln1_b);
      qkv.noalias() = a * mat(b.w_qkv);
      qkv.rowwise() += vec(b.b_qkv);
      k_cache_[l].middleRows(p0, n) = qkv.middleCols(d, d);
      v_cache_[l].middleRows(p0, n) = qkv.middleCols(2 * d, d);
      const Eigen::Index total = p0 + n;
      for (Eigen::Index h = 0; h < cfg_.n_heads; ++h) {
        RowMatrix scores = qkv.middleCols(h * dh, dh) *
                           k_cache_[l].block(0, h * dh, total, dh).transpose();
        scores *= inv_sqrt_dh;
        for (Eigen::Index i = 0; i < n; ++i) {
          const Eigen::Index visible = p0 + i + 1;
          auto row = scores.row(i);
          const double mx = row.head(visible).maxCoeff();
          double s = 0.0;
          for (Eigen::Index j = 0; j < visible; ++j) {
            row(j) = std::exp(row(j) - mx);
            s += row(j);
          }
          const double inv = 1.0 / s;
          for (Eigen::Index j = 0; j < visible; ++j) row(j) *= inv;
          for (Eigen::Index j = visible; j < total; ++j) row(j) = 0.0;
        }
        attn.middleCols(h * dh, dh).noalias() =
            scores * v_cache_[l].block(0, h * dh, total, dh);
      }
      x.noalias() += attn * mat(b.w_o);
      x.rowwise() += vec(b.b_o);
      a = x;
      layer_norm_rows(a, b.ln2_g, b.ln2_b);
      f.noalias() = a * mat(b.w_fc);
      f.rowwise() += vec(b.b_fc);
      gelu_inplace(f);
      x.noalias() += f * mat(b.w_proj);
      x.rowwise() += vec(b.b_proj);
    }

    RowMatrix last = x.bottomRows(1);
    layer_norm_rows(last, params_.lnf_g(), params_.lnf_b());
    Eigen::Map<Eigen::RowVectorXd> out(logits_.data(),
                                       static_cast<Eigen::Index>(logits_.size()));
    if (params_.tied()) {
      out.noalias() = last * mat(params_.tok_emb()).transpose();
    } else {
      out.noalias() = last * mat(params_.lm_w());
    }
    out += vec(params_.lm_b());
    for (TokenId t : kNonEmittable) logits_[static_cast<std::size_t>(t)] = kMaskValue;
    length_ += tokens.size();
  }

 private:
  ConstMatMap mat(std::size_t idx) const { return as_matrix(params_[idx].value); }
  Eigen::Map<const Eigen::RowVectorXd> vec(std::size_t idx) const {
    const Tensor& t = params_[idx].value;
    return Eigen::Map<const Eigen::RowVectorXd>(t.raw(),
                                                static_cast<Eigen::Index>(t.size()));
  }

  void layer_norm_rows(RowMatrix& m, std::size_t g, std::size_t b) const {
    const Tensor& gv = params_[g].value;
    const Tensor& bv = params_[b].value;
    const Eigen::Index n = m.cols();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      double mu = 0.0;
      for (Eigen::Index c = 0; c < n; ++c) mu += m(r, c);
      mu /= static_cast<double>(n);
      double var = 0.0;
      for (Eigen::Index c = 0; c < n; ++c) var += (m(r, c) - mu) * (m(r, c) - mu);
      var /= static_cast<double>(n);
      const double rs = 1.0 / std::sqrt(var + 1e-5);
      for (Eigen::Index c = 0; c < n; ++c) {
        m(r, c) = (m(r, c) - mu) * rs * gv[static_cast<std::size_t>(c)] +
                  bv[static_cast<std::size_t>(c)];
      }
    }
  }

  static void gelu_inplace(RowMatrix& m) {
    constexpr double k = 0.7978845608028654;
    double* p = m.data();
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double x = p[i];
      p[i] = 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
    }
  }

  const PolicyParams& params_;
  PolicyConfig cfg_;
  std::size_t capacity_ = 0;
  std::size_t length_ = 0;
  std::vector<RowMatrix> k_cache_;
  std::vector<RowMatrix> v_cache_;
  Storage logits_;
};

}  // namespace grace
