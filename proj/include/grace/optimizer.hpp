#pragma once

// Advantages, policy losses, the contrastive baseline loss and AdamW.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "grace/autodiff.hpp"
#include "grace/errors.hpp"
#include "grace/model.hpp"

namespace grace {

struct AdvantageGroup {
  std::size_t instance = 0;
  std::vector<double> finals;
  double baseline = 0.0;
  std::vector<double> advantages;
};

/// Mean-centred advantages; no standard-deviation scaling.
inline AdvantageGroup grace_advantages(std::span<const double> finals,
                                       std::size_t instance = 0) {
  if (finals.empty()) throw ContractError("grace_advantages: empty group");
  AdvantageGroup g;
  g.instance = instance;
  g.finals.assign(finals.begin(), finals.end());
  double s = 0.0;
  for (double f : finals) s += f;
  g.baseline = s / static_cast<double>(finals.size());
  const auto [lo, hi] = std::minmax_element(finals.begin(), finals.end());
  g.advantages.resize(finals.size());
  for (std::size_t k = 0; k < finals.size(); ++k) {
    // A constant group carries no signal; keep it exactly zero.
    g.advantages[k] = *lo == *hi ? 0.0 : finals[k] - g.baseline;
  }
  return g;
}

/// Group-standardized advantages (r - mean) / std with population std.
/// Falls back to mean-centring when std < 1e-8.
inline std::vector<double> grpo_advantages_std(std::span<const double> finals) {
  if (finals.size() < 2) throw ContractError("grpo_advantages_std needs K >= 2");
  const double n = static_cast<double>(finals.size());
  double mean = 0.0;
  for (double f : finals) mean += f;
  mean /= n;
  double var = 0.0;
  for (double f : finals) var += (f - mean) * (f - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> out(finals.size());
  for (std::size_t k = 0; k < finals.size(); ++k) {
    out[k] = sd < 1e-8 ? finals[k] - mean : (finals[k] - mean) / sd;
  }
  return out;
}

/// Sum or mean over all (i, k) terms of the policy loss.
enum class LossNormalization { kSum, kMean };

/// -sum_i sum_k A_ik * logp_ik, optionally divided by the number of terms.
/// logprobs[i][k] are scalar Vars; advantages enter as constants.
inline Var policy_loss(Tape& tape, const std::vector<AdvantageGroup>& groups,
                       const std::vector<std::vector<Var>>& logprobs,
                       LossNormalization norm = LossNormalization::kMean) {
  if (groups.size() != logprobs.size()) {
    throw ContractError("policy_loss: " + std::to_string(groups.size()) +
                        " advantage groups vs " + std::to_string(logprobs.size()) +
                        " logprob groups");
  }
  std::size_t terms = 0;
  std::vector<Var> parts;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (groups[i].advantages.size() != logprobs[i].size()) {
      throw ContractError("policy_loss: group " + std::to_string(i) +
                          " has misaligned advantages and logprobs");
    }
    for (std::size_t k = 0; k < logprobs[i].size(); ++k) {
      ++terms;
      parts.push_back(scale(logprobs[i][k], -groups[i].advantages[k]));
    }
  }
  if (parts.empty()) return tape.constant(Tensor::scalar(0.0));
  Var total = sum(stack_rows(parts));
  if (norm == LossNormalization::kMean) total = scale(total, 1.0 / static_cast<double>(terms));
  return total;
}

/// Negative token-averaged clipped surrogate without KL:
///   -(1/N) sum_rollouts (1/|y|) sum_t min(r_t A, clip(r_t, 1-eps, 1+eps) A)
/// with r_t = exp(logp_new - logp_old). logprobs_new[i][k] is a [|y|] Var.
inline Var grpo_clipped_loss(Tape& tape,
                             const std::vector<std::vector<double>>& advantages,
                             const std::vector<std::vector<Var>>& logprobs_new,
                             const std::vector<std::vector<std::vector<double>>>& logprobs_old,
                             double eps) {
  if (!(eps > 0.0)) throw ConfigError("clip epsilon must be > 0");
  if (advantages.size() != logprobs_new.size() ||
      advantages.size() != logprobs_old.size()) {
    throw ContractError("grpo_clipped_loss: misaligned groups");
  }
  std::vector<Var> parts;
  for (std::size_t i = 0; i < advantages.size(); ++i) {
    if (advantages[i].size() != logprobs_new[i].size() ||
        advantages[i].size() != logprobs_old[i].size()) {
      throw ContractError("grpo_clipped_loss: misaligned rollouts in group " +
                          std::to_string(i));
    }
    for (std::size_t k = 0; k < advantages[i].size(); ++k) {
      const Var lp = logprobs_new[i][k];
      const auto& old = logprobs_old[i][k];
      const std::size_t T = lp.value().size();
      if (old.size() != T) throw ContractError("grpo_clipped_loss: token count mismatch");
      if (T == 0) continue;
      const double A = advantages[i][k];
      Var ratio = exp(add(lp, tape.constant(Tensor::vector([&] {
        std::vector<double> neg(old.size());
        for (std::size_t t = 0; t < old.size(); ++t) neg[t] = -old[t];
        return neg;
      }()))));
      // Per token the min picks either the raw ratio (gradient flows) or the
      // clipped constant (no gradient). Select with a mask.
      const Tensor& rv = ratio.value();
      std::vector<double> use_raw(T), clipped_const(T);
      for (std::size_t t = 0; t < T; ++t) {
        const double r = rv[t];
        const double c = std::clamp(r, 1.0 - eps, 1.0 + eps);
        const bool raw = r * A <= c * A;
        use_raw[t] = raw ? A : 0.0;
        clipped_const[t] = raw ? 0.0 : c * A;
      }
      Var obj = add(mul(ratio, tape.constant(Tensor::vector(use_raw))),
                    tape.constant(Tensor::vector(clipped_const)));
      parts.push_back(scale(sum(obj), 1.0 / static_cast<double>(T)));
    }
  }
  if (parts.empty()) return tape.constant(Tensor::scalar(0.0));
  return scale(sum(stack_rows(parts)), -1.0 / static_cast<double>(parts.size()));
}

/// In-batch InfoNCE: -(1/B) sum_i log softmax_j(cos(q_i, p_j) / tau)[i].
/// queries and positives are [B x d] Vars.
inline Var infonce_loss(Var queries, Var positives, double tau) {
  if (!(tau > 0.0)) throw ConfigError("InfoNCE temperature must be > 0");
  const Tensor& qv = queries.value();
  if (qv.rank() != 2 || qv.shape() != positives.value().shape() || qv.rows() == 0) {
    throw DimensionError("infonce_loss: expected matching [B x d] inputs");
  }
  const std::size_t B = qv.rows();
  Var sims = matmul(normalize_rows(queries), transpose(normalize_rows(positives)));
  Var logp = log_softmax(scale(sims, 1.0 / tau));
  std::vector<int> diag(B);
  for (std::size_t i = 0; i < B; ++i) diag[i] = static_cast<int>(i);
  return scale(mean(pick(logp, diag), 0), -1.0);
}

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct OptimizerState {
  AdamWConfig hp;
  std::uint64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  OptimizerState() = default;
  OptimizerState(const PolicyParams& params, AdamWConfig cfg) : hp(cfg) {
    for (const auto& p : params.all()) {
      m.emplace_back(p.value.shape());
      v.emplace_back(p.value.shape());
    }
  }
};

inline double grad_norm(const PolicyParams& params) {
  double s = 0.0;
  for (const auto& p : params.all())
    for (double g : p.grad.data()) s += g * g;
  return std::sqrt(s);
}

/// One bias-corrected AdamW update with decoupled weight decay. A non-finite
/// gradient aborts before anything is modified.
inline void adamw_step(PolicyParams& params, OptimizerState& state) {
  if (state.m.size() != params.count()) {
    throw ContractError("optimizer state does not match parameter count");
  }
  for (std::size_t i = 0; i < params.count(); ++i) {
    const Parameter& p = params[i];
    if (p.grad.shape() != p.value.shape() || state.m[i].shape() != p.value.shape()) {
      throw DimensionError("adamw_step: shape mismatch for " + p.name);
    }
    for (double g : p.grad.data()) {
      if (!std::isfinite(g)) {
        throw NumericAbort("non-finite gradient in " + p.name + " at optimizer step " +
                           std::to_string(state.step + 1));
      }
    }
  }
  const auto& hp = state.hp;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(hp.beta1, t);
  const double bc2 = 1.0 - std::pow(hp.beta2, t);
  for (std::size_t i = 0; i < params.count(); ++i) {
    Parameter& p = params[i];
    auto w = p.value.data();
    auto g = p.grad.data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g[j];
      v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= hp.lr * hp.weight_decay * w[j];
      w[j] -= hp.lr * mhat / (std::sqrt(vhat) + hp.eps);
    }
  }
}

}  // namespace grace
