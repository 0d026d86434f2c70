#pragma once

// From rollout to embedding: re-encode prompt + rationale and pool the hidden
// states of every position after the instruction prefix.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "grace/autodiff.hpp"
#include "grace/errors.hpp"
#include "grace/model.hpp"
#include "grace/rollout.hpp"
#include "grace/tokenizer.hpp"

namespace grace {

enum class PoolingMode { kMeanLast, kMeanPenultimate, kEos, kMax };

inline const char* pooling_name(PoolingMode m) {
  switch (m) {
    case PoolingMode::kMeanLast: return "mean_last";
    case PoolingMode::kMeanPenultimate: return "mean_penultimate";
    case PoolingMode::kEos: return "eos";
    case PoolingMode::kMax: return "max";
  }
  return "?";
}

inline PoolingMode parse_pooling(const std::string& s) {
  if (s == "mean_last" || s == "mean") return PoolingMode::kMeanLast;
  if (s == "mean_penultimate") return PoolingMode::kMeanPenultimate;
  if (s == "eos") return PoolingMode::kEos;
  if (s == "max") return PoolingMode::kMax;
  throw ConfigError("unknown pooling mode '" + s +
                    "' (expected mean_last, mean_penultimate, eos or max)");
}

inline constexpr PoolingMode kAllPoolingModes[] = {
    PoolingMode::kMeanLast, PoolingMode::kMeanPenultimate, PoolingMode::kEos,
    PoolingMode::kMax};

struct Embedding {
  std::vector<double> vector;
  SourceRole role = SourceRole::kQuery;
  PoolingMode mode = PoolingMode::kMeanLast;
  double norm = 0.0;

  Embedding() = default;
  Embedding(std::vector<double> v, SourceRole r, PoolingMode m)
      : vector(std::move(v)), role(r), mode(m) {
    double s = 0.0;
    for (double x : vector) s += x * x;
    norm = std::sqrt(s);
  }
};

/// 1 for positions after the instruction prefix that are not padding.
inline std::vector<double> pooling_mask(std::span<const TokenId> tokens,
                                        std::size_t sys_len) {
  std::vector<double> mask(tokens.size(), 0.0);
  for (std::size_t t = sys_len; t < tokens.size(); ++t)
    mask[t] = tokens[t] == Vocab::kPad ? 0.0 : 1.0;
  return mask;
}

/// Aggregates hidden rows selected by `mask` ([L x d] inputs).
inline std::vector<double> pool(const Tensor& hidden_last,
                                const Tensor& hidden_penultimate,
                                std::span<const double> mask, PoolingMode mode) {
  const std::size_t L = hidden_last.rows();
  const std::size_t d = hidden_last.cols();
  if (mask.size() != L) throw DimensionError("pooling mask length != sequence length");
  std::vector<std::size_t> rows;
  for (std::size_t t = 0; t < L; ++t)
    if (mask[t] != 0.0) rows.push_back(t);
  if (rows.empty()) {
    throw DegenerateInputError("empty pooling mask: no text or rationale tokens");
  }
  std::vector<double> out(d, 0.0);
  switch (mode) {
    case PoolingMode::kMeanLast:
    case PoolingMode::kMeanPenultimate: {
      const Tensor& h =
          mode == PoolingMode::kMeanLast ? hidden_last : hidden_penultimate;
      for (std::size_t t : rows)
        for (std::size_t c = 0; c < d; ++c) out[c] += h.at(t, c);
      const double inv = 1.0 / static_cast<double>(rows.size());
      for (double& v : out) v *= inv;
      break;
    }
    case PoolingMode::kEos: {
      const auto r = hidden_last.row(rows.back());
      out.assign(r.begin(), r.end());
      break;
    }
    case PoolingMode::kMax: {
      out.assign(d, -std::numeric_limits<double>::infinity());
      for (std::size_t t : rows)
        for (std::size_t c = 0; c < d; ++c) out[c] = std::max(out[c], hidden_last.at(t, c));
      break;
    }
  }
  return out;
}

/// h for P(x) + rationale. An empty rationale embeds the prompt alone.
inline Embedding embed(const PolicyParams& params, const PromptedInput& prompted,
                       std::span<const TokenId> rationale, PoolingMode mode) {
  std::vector<TokenId> seq = prompted.token_ids;
  seq.insert(seq.end(), rationale.begin(), rationale.end());
  // Trailing padding is masked out and, the model being causal, cannot
  // influence earlier rows; skip computing it.
  while (seq.size() > 1 && seq.back() == Vocab::kPad) seq.pop_back();
  const std::vector<double> mask = pooling_mask(seq, prompted.sys_len);
  if (std::none_of(mask.begin(), mask.end(), [](double m) { return m != 0.0; })) {
    throw DegenerateInputError("empty pooling mask: no text or rationale tokens");
  }
  const ForwardOutput out = forward(params, seq);
  return Embedding(pool(out.hidden_last, out.hidden_penultimate, mask, mode),
                   prompted.role, mode);
}

inline Embedding embed_rollout(const PolicyParams& params, const Rollout& r,
                               PoolingMode mode) {
  return embed(params, r.prompted, r.response_ids, mode);
}

/// Differentiable mean-pooled embedding of a prompt without rationale,
/// used by the contrastive baseline trainer.
inline Var embed_var(Tape& tape, PolicyParams& params,
                     const PromptedInput& prompted, PoolingMode mode) {
  if (mode != PoolingMode::kMeanLast && mode != PoolingMode::kMeanPenultimate) {
    throw ConfigError(std::string("pooling mode ") + pooling_name(mode) +
                      " is not differentiable here; use a mean mode");
  }
  const std::vector<double> mask = pooling_mask(prompted.token_ids, prompted.sys_len);
  ForwardVars fv = forward(tape, params, prompted.token_ids, prompted.token_ids.size() - 1);
  return masked_mean(mode == PoolingMode::kMeanLast ? fv.hidden_last
                                                    : fv.hidden_penultimate,
                     mask);
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (!std::isfinite(na) || !std::isfinite(nb)) throw NumericAbort("cosine of a non-finite vector");
  if (!(na > 0.0) || !(nb > 0.0)) {
    throw DegenerateInputError("cosine of a zero-norm vector");
  }
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

inline double cosine(const Embedding& a, const Embedding& b) {
  return cosine(a.vector, b.vector);
}

}  // namespace grace
