#pragma once

// Composite contrastive reward for positive-document rollouts.
//
//   total  = contrastive + lambda1 * consistency + lambda2 * hard_negative
//   scaled = total / tau
//   final  = -gamma if the rollout hit the length cap without EOS, else scaled
//
// In unsupervised mode the contrastive term is the anchor self-alignment and
// the other texts' rollouts act as hard negatives.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "grace/errors.hpp"
#include "grace/representation.hpp"

namespace grace {

enum class NegativesAggregation { kSum, kMean };

struct RewardWeights {
  double lambda1 = 0.2;
  double lambda2 = 0.2;
  double tau = 10.0;
  double gamma = 1.0;
  std::size_t max_response_len = 256;
  NegativesAggregation negatives = NegativesAggregation::kSum;

  void validate() const {
    if (!(tau > 0.0)) throw ConfigError("reward temperature tau must be > 0");
    if (max_response_len == 0) throw ConfigError("max_response_len must be > 0");
  }
};

struct RewardBreakdown {
  std::size_t instance = 0;
  std::size_t rollout = 0;
  double r_cl = 0.0;  // self-alignment in unsupervised mode
  double r_consist = 0.0;
  double r_hard = 0.0;
  double r_total = 0.0;
  double r_scaled = 0.0;
  double r_final = 0.0;
  bool penalized = false;
  std::size_t response_len = 0;
};

struct BatchEmbeddings {
  std::vector<Embedding> queries;                 // B (anchors when unsupervised)
  std::vector<std::vector<Embedding>> positives;  // B x K
  std::vector<std::vector<Embedding>> negatives;  // B x M_i
  bool unsupervised = false;

  std::size_t batch_size() const { return positives.size(); }
};

inline double reward_cl(const Embedding& q, const Embedding& pos,
                        std::span<const Embedding> negs,
                        NegativesAggregation agg = NegativesAggregation::kSum) {
  double neg = 0.0;
  for (const auto& n : negs) neg += cosine(q, n);
  if (agg == NegativesAggregation::kMean && !negs.empty()) {
    neg /= static_cast<double>(negs.size());
  }
  return cosine(q, pos) - neg;
}

inline double reward_consist(std::size_t k, std::span<const Embedding> group) {
  if (group.empty() || k >= group.size()) {
    throw ContractError("reward_consist: rollout index out of range");
  }
  if (group.size() == 1) return 0.0;
  double s = 0.0;
  for (std::size_t j = 0; j < group.size(); ++j)
    if (j != k) s += cosine(group[k], group[j]);
  return s / static_cast<double>(group.size() - 1);
}

/// Negated mean over the other instances of the hardest (most similar)
/// rollout to this instance's query.
inline double reward_hard(std::size_t i, const BatchEmbeddings& batch) {
  const std::size_t B = batch.batch_size();
  if (B < 2) return 0.0;
  double s = 0.0;
  for (std::size_t j = 0; j < B; ++j) {
    if (j == i) continue;
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& h : batch.positives[j]) best = std::max(best, cosine(batch.queries[i], h));
    s += best;
  }
  return -s / static_cast<double>(B - 1);
}

inline double reward_self(const Embedding& anchor, const Embedding& rollout) {
  return cosine(anchor, rollout);
}

/// Fills total/scaled/final. A rollout is penalized when it used the whole
/// response budget without ending in EOS.
inline RewardBreakdown finalize(RewardBreakdown r, std::size_t response_len,
                                bool ended_with_eos, const RewardWeights& w) {
  w.validate();
  r.response_len = response_len;
  r.r_total = r.r_cl + w.lambda1 * r.r_consist + w.lambda2 * r.r_hard;
  r.r_scaled = r.r_total / w.tau;
  r.penalized = response_len >= w.max_response_len && !ended_with_eos;
  r.r_final = r.penalized ? -w.gamma : r.r_scaled;
  return r;
}

struct RolloutStatus {
  std::size_t response_len = 0;
  bool ended_with_eos = false;
};

namespace detail {

inline std::vector<double> unit(const Embedding& e) {
  if (!std::isfinite(e.norm)) throw NumericAbort("non-finite embedding in reward computation");
  if (!(e.norm > 0.0)) {
    throw DegenerateInputError("zero-norm embedding in reward computation");
  }
  std::vector<double> u = e.vector;
  for (double& v : u) v /= e.norm;
  return u;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return std::clamp(s, -1.0, 1.0);
}

}  // namespace detail

/// Breakdowns for every positive rollout of a batch, row-major in (i, k).
/// Embeddings are normalized once and every similarity is a dot product.
inline std::vector<RewardBreakdown> compute_rewards(
    const BatchEmbeddings& batch,
    const std::vector<std::vector<RolloutStatus>>& status,
    const RewardWeights& w) {
  w.validate();
  const std::size_t B = batch.batch_size();
  if (batch.queries.size() != B || status.size() != B ||
      (!batch.unsupervised && batch.negatives.size() != B)) {
    throw ContractError("compute_rewards: batch components are misaligned");
  }
  std::vector<std::vector<double>> q(B);
  std::vector<std::vector<std::vector<double>>> pos(B), neg(B);
  for (std::size_t i = 0; i < B; ++i) {
    q[i] = detail::unit(batch.queries[i]);
    if (status[i].size() != batch.positives[i].size() || batch.positives[i].empty()) {
      throw ContractError("compute_rewards: rollout status misaligned");
    }
    for (const auto& e : batch.positives[i]) pos[i].push_back(detail::unit(e));
    if (!batch.unsupervised)
      for (const auto& e : batch.negatives[i]) neg[i].push_back(detail::unit(e));
  }

  std::vector<RewardBreakdown> out;
  for (std::size_t i = 0; i < B; ++i) {
    const std::size_t K = pos[i].size();
    double hard = 0.0;
    if (B >= 2) {
      for (std::size_t j = 0; j < B; ++j) {
        if (j == i) continue;
        double best = -std::numeric_limits<double>::infinity();
        for (const auto& h : pos[j]) best = std::max(best, detail::dot(q[i], h));
        hard += best;
      }
      hard = -hard / static_cast<double>(B - 1);
    }
    double neg_term = 0.0;
    for (const auto& n : neg[i]) neg_term += detail::dot(q[i], n);
    if (w.negatives == NegativesAggregation::kMean && !neg[i].empty()) {
      neg_term /= static_cast<double>(neg[i].size());
    }
    // Pairwise similarities within the group, computed once.
    std::vector<double> sims(K * K, 1.0);
    for (std::size_t a = 0; a < K; ++a)
      for (std::size_t b = a + 1; b < K; ++b)
        sims[a * K + b] = sims[b * K + a] = detail::dot(pos[i][a], pos[i][b]);

    for (std::size_t k = 0; k < K; ++k) {
      RewardBreakdown r;
      r.instance = i;
      r.rollout = k;
      r.r_cl = detail::dot(q[i], pos[i][k]) - (batch.unsupervised ? 0.0 : neg_term);
      if (K > 1) {
        double s = 0.0;
        for (std::size_t j = 0; j < K; ++j)
          if (j != k) s += sims[k * K + j];
        r.r_consist = s / static_cast<double>(K - 1);
      }
      r.r_hard = hard;
      out.push_back(finalize(r, status[i][k].response_len, status[i][k].ended_with_eos, w));
    }
  }
  return out;
}

}  // namespace grace
