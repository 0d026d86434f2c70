#pragma once

// Rationale sampling. Queries and negatives get one reference rollout, the
// positive document gets K exploratory rollouts; unsupervised texts get an
// anchor plus K rollouts from the same prompt.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "grace/errors.hpp"
#include "grace/model.hpp"
#include "grace/parallel.hpp"
#include "grace/rng.hpp"
#include "grace/tokenizer.hpp"

namespace grace {

struct TrainingInstance {
  std::string query;
  std::string positive;
  std::vector<std::string> negatives;
};

struct Rollout {
  PromptedInput prompted;
  std::vector<TokenId> response_ids;  // includes the terminating EOS, if any
  std::vector<double> per_token_logprobs;
  bool ended_with_eos = false;
  bool truncated = false;
  bool is_reference = false;
  std::uint64_t rng_stream_id = 0;
  std::uint64_t snapshot_id = 0;
};

struct RolloutGroup {
  std::size_t instance_index = 0;
  bool unsupervised = false;
  Rollout query;  // the anchor in unsupervised mode
  std::vector<Rollout> negatives;
  std::vector<Rollout> positives;

  std::size_t size() const { return 1 + negatives.size() + positives.size(); }
};

struct SamplingOptions {
  double temperature = 1.0;
  std::size_t max_response_len = 256;
  bool greedy = false;
};

/// Everything a rollout needs besides the text: the parameter snapshot, the
/// prompting setup and the coordinates of its random streams.
struct RolloutContext {
  const PolicyParams* params = nullptr;
  std::uint64_t snapshot_id = 0;
  InstructionTemplate instruction;
  std::size_t max_prompt_len = 1024;
  SamplingOptions sampling;
  bool greedy_reference = false;
  std::uint64_t global_seed = 0;
  std::uint64_t step = 0;
  std::size_t workers = 1;
  // Earlier negative rationales keyed by document text; hits skip sampling.
  const std::map<std::string, Rollout>* negative_cache = nullptr;
};

namespace detail {
inline std::atomic<std::uint64_t>& sample_counter() {
  static std::atomic<std::uint64_t> n{0};
  return n;
}
}  // namespace detail

/// Number of sample_rationale() calls made by this process.
inline std::uint64_t rollout_invocations() { return detail::sample_counter().load(); }

/// Draws r ~ pi(. | prompt) token by token until EOS or the length cap.
/// Recorded log-probabilities are those of the policy itself (temperature 1),
/// which is what the training loss differentiates.
inline Rollout sample_rationale(const PolicyParams& params,
                                const PromptedInput& prompted,
                                const SamplingOptions& opts, RngStream& rng,
                                std::uint64_t snapshot_id = 0) {
  ++detail::sample_counter();
  if (!opts.greedy && !(opts.temperature > 0.0)) {
    throw ConfigError("sampling temperature must be positive");
  }
  Rollout r;
  r.prompted = prompted;
  r.rng_stream_id = rng.id();
  r.snapshot_id = snapshot_id;
  if (opts.max_response_len == 0) return r;

  const std::size_t capacity = prompted.token_ids.size() + opts.max_response_len;
  if (capacity > static_cast<std::size_t>(params.config().max_seq_len)) {
    throw LengthError("prompt + max_response_len exceeds max_seq_len");
  }
  Decoder dec(params, capacity);
  dec.extend(prompted.token_ids);

  const std::size_t V = static_cast<std::size_t>(params.config().vocab_size);
  std::vector<double> probs(V);
  while (true) {
    auto logits = dec.logits();
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    const double lse = mx + std::log(z);

    TokenId tok = 0;
    if (opts.greedy) {
      tok = static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) -
                                 logits.begin());
    } else {
      const double inv_t = 1.0 / opts.temperature;
      const double smx = mx * inv_t;
      double total = 0.0;
      for (std::size_t v = 0; v < V; ++v) {
        probs[v] = std::exp(logits[v] * inv_t - smx);
        total += probs[v];
      }
      const double u = rng.uniform() * total;
      double acc = 0.0;
      tok = -1;
      for (std::size_t v = 0; v < V; ++v) {
        if (probs[v] <= 0.0) continue;
        acc += probs[v];
        tok = static_cast<TokenId>(v);
        if (acc > u) break;
      }
    }
    r.response_ids.push_back(tok);
    r.per_token_logprobs.push_back(logits[static_cast<std::size_t>(tok)] - lse);
    if (tok == Vocab::kEos) {
      r.ended_with_eos = true;
      break;
    }
    if (r.response_ids.size() >= opts.max_response_len) break;
    const TokenId next[1] = {tok};
    dec.extend(next);
  }
  r.truncated = !r.ended_with_eos && r.response_ids.size() == opts.max_response_len;
  return r;
}

/// Rollout slot numbering inside one instance: 0 is the query (or anchor),
/// 1..K the positives, K+1.. the negatives.
inline constexpr std::uint64_t query_slot() { return 0; }
inline constexpr std::uint64_t positive_slot(std::size_t k) { return 1 + k; }
inline constexpr std::uint64_t negative_slot(std::size_t K, std::size_t m) {
  return 1 + K + m;
}

namespace detail {

struct RolloutJob {
  const PromptedInput* prompt;
  std::uint64_t slot;
  bool reference;
  Rollout* out;
};

inline void run_jobs(const RolloutContext& ctx, std::size_t instance_index,
                     std::vector<RolloutJob>& jobs) {
  parallel_for(jobs.size(), ctx.workers, [&](std::size_t j) {
    const RolloutJob& job = jobs[j];
    RngStream rng(StreamKey{ctx.global_seed, ctx.step, instance_index, job.slot});
    SamplingOptions opts = ctx.sampling;
    if (job.reference && ctx.greedy_reference) opts.greedy = true;
    *job.out = sample_rationale(*ctx.params, *job.prompt, opts, rng, ctx.snapshot_id);
    job.out->is_reference = job.reference;
  });
}

}  // namespace detail

inline RolloutGroup rollout_supervised(const RolloutContext& ctx,
                                       const TrainingInstance& instance,
                                       std::size_t instance_index,
                                       std::size_t K) {
  if (K < 1) throw ContractError("rollout_supervised needs K >= 1");
  if (instance.positive.empty()) throw InputError("empty positive document");
  if (instance.negatives.empty()) {
    throw ContractError("training instance has no negatives");
  }
  const PromptedInput q =
      wrap(instance.query, SourceRole::kQuery, ctx.instruction, ctx.max_prompt_len);
  const PromptedInput pos = wrap(instance.positive, SourceRole::kPositive,
                                 ctx.instruction, ctx.max_prompt_len);
  std::vector<PromptedInput> negs;
  for (const auto& n : instance.negatives)
    negs.push_back(wrap(n, SourceRole::kNegative, ctx.instruction, ctx.max_prompt_len));

  RolloutGroup g;
  g.instance_index = instance_index;
  g.positives.resize(K);
  g.negatives.resize(negs.size());
  std::vector<detail::RolloutJob> jobs;
  jobs.push_back({&q, query_slot(), true, &g.query});
  for (std::size_t k = 0; k < K; ++k)
    jobs.push_back({&pos, positive_slot(k), false, &g.positives[k]});
  for (std::size_t m = 0; m < negs.size(); ++m) {
    if (ctx.negative_cache) {
      const auto hit = ctx.negative_cache->find(instance.negatives[m]);
      if (hit != ctx.negative_cache->end()) {
        g.negatives[m] = hit->second;
        continue;
      }
    }
    jobs.push_back({&negs[m], negative_slot(K, m), true, &g.negatives[m]});
  }
  detail::run_jobs(ctx, instance_index, jobs);
  return g;
}

inline RolloutGroup rollout_unsupervised(const RolloutContext& ctx,
                                         const std::string& text,
                                         std::size_t instance_index,
                                         std::size_t K) {
  if (K < 1) throw ContractError("rollout_unsupervised needs K >= 1");
  if (text.empty()) throw InputError("empty text");
  const PromptedInput p =
      wrap(text, SourceRole::kUnsupervised, ctx.instruction, ctx.max_prompt_len);
  RolloutGroup g;
  g.instance_index = instance_index;
  g.unsupervised = true;
  g.positives.resize(K);
  std::vector<detail::RolloutJob> jobs;
  jobs.push_back({&p, query_slot(), true, &g.query});
  for (std::size_t k = 0; k < K; ++k)
    jobs.push_back({&p, positive_slot(k), false, &g.positives[k]});
  detail::run_jobs(ctx, instance_index, jobs);
  return g;
}

}  // namespace grace
