#pragma once

// Retrieval, STS and pair-classification metrics.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "grace/errors.hpp"

namespace grace {

/// Binary-gain nDCG truncated at rank 10. `ranking` lists document ids best
/// first; `relevant` is the gold set for the query.
inline double ndcg_at_10(std::span<const std::size_t> ranking,
                         const std::set<std::size_t>& relevant) {
  if (relevant.empty()) throw ContractError("ndcg_at_10: empty gold set");
  if (ranking.empty()) throw ContractError("ndcg_at_10: empty ranking");
  const std::size_t cut = std::min<std::size_t>(10, ranking.size());
  double dcg = 0.0;
  for (std::size_t r = 0; r < cut; ++r)
    if (relevant.contains(ranking[r])) dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  double ideal = 0.0;
  const std::size_t n_ideal = std::min<std::size_t>(10, relevant.size());
  for (std::size_t r = 0; r < n_ideal; ++r) ideal += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  return dcg / ideal;
}

/// 1-based ranks with ties sharing their average rank.
inline std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[idx[t]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (!(saa > 0.0) || !(sbb > 0.0)) {
    throw DegenerateInputError("correlation of a constant vector is undefined");
  }
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/// Pearson correlation of average ranks.
inline double spearman(std::span<const double> pred, std::span<const double> gold) {
  if (pred.size() != gold.size()) throw ContractError("spearman: length mismatch");
  if (pred.size() < 2) throw ContractError("spearman needs at least two points");
  const auto rp = average_ranks(pred), rg = average_ranks(gold);
  return pearson(rp, rg);
}

/// Mean precision at the rank of each positive, scores sorted descending.
/// Ties keep input order.
inline double average_precision(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw ContractError("average_precision: length mismatch");
  }
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double hits = 0.0, sum = 0.0;
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (labels[idx[r]] != 0) {
      hits += 1.0;
      sum += hits / static_cast<double>(r + 1);
    }
  }
  if (hits == 0.0) throw ContractError("average_precision: no positive labels");
  return sum / hits;
}

}  // namespace grace
