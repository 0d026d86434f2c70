#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "grace/rollout.hpp"
#include "support/tiny.hpp"

namespace grace {
namespace {

using testing::tiny_params;
using testing::uniform_params;

PromptedInput prompt_for(const std::string& text) {
  return wrap(text, SourceRole::kPositive, InstructionTemplate{}, 64);
}

RolloutContext context(const PolicyParams& p, std::size_t max_len = 12) {
  RolloutContext ctx;
  ctx.params = &p;
  ctx.global_seed = 99;
  ctx.step = 3;
  ctx.sampling.max_response_len = max_len;
  return ctx;
}

TEST(SampleRationale, DominantEosLogitStopsImmediately) {
  PolicyParams p = uniform_params();
  p.by_name("lm_head.b").value[Vocab::kEos] = 1e4;
  RngStream rng(1);
  const Rollout r = sample_rationale(p, prompt_for("text"), {1.0, 16, false}, rng);
  EXPECT_EQ(r.response_ids, (std::vector<TokenId>{Vocab::kEos}));
  EXPECT_TRUE(r.ended_with_eos);
  EXPECT_FALSE(r.truncated);
}

TEST(SampleRationale, UniformModelWithoutEosHitsTheCap) {
  PolicyParams p = uniform_params();
  p.by_name("lm_head.b").value[Vocab::kEos] = -1e4;
  RngStream rng(2);
  const Rollout r = sample_rationale(p, prompt_for("text"), {1.0, 3, false}, rng);
  EXPECT_EQ(r.response_ids.size(), 3u);
  EXPECT_TRUE(r.truncated);
  EXPECT_FALSE(r.ended_with_eos);
  EXPECT_EQ(r.per_token_logprobs.size(), 3u);
  for (double lp : r.per_token_logprobs) EXPECT_NEAR(lp, std::log(1.0 / 256.0), 1e-12);
}

TEST(SampleRationale, FixedSeedReplaysBitIdentically) {
  const PolicyParams p = tiny_params(1, 3.0);
  RngStream a(StreamKey{5, 1, 2, 3}), b(StreamKey{5, 1, 2, 3});
  const Rollout ra = sample_rationale(p, prompt_for("replay"), {1.0, 24, false}, a);
  const Rollout rb = sample_rationale(p, prompt_for("replay"), {1.0, 24, false}, b);
  EXPECT_EQ(ra.response_ids, rb.response_ids);
  EXPECT_EQ(ra.per_token_logprobs, rb.per_token_logprobs);
  EXPECT_EQ(ra.rng_stream_id, rb.rng_stream_id);
}

TEST(SampleRationale, DrawsFromTemperatureScaledSoftmax) {
  PolicyParams p = uniform_params();
  auto& bias = p.by_name("lm_head.b").value;
  for (std::size_t v = 0; v < bias.size(); ++v) bias[v] = -1e4;
  bias['a'] = std::log(3.0);
  bias['b'] = 0.0;
  for (double temp : {1.0, 2.0}) {
    int count_a = 0;
    const int n = 4000;
    for (int i = 0; i < n; ++i) {
      RngStream rng(StreamKey{1, 0, 0, static_cast<std::uint64_t>(i)});
      const Rollout r = sample_rationale(p, prompt_for("t"), {temp, 1, false}, rng);
      count_a += r.response_ids[0] == 'a';
      // Recorded log-probs are the policy's own, independent of temperature.
      EXPECT_NEAR(r.per_token_logprobs[0], std::log(r.response_ids[0] == 'a' ? 0.75 : 0.25),
                  1e-9);
    }
    const double expected = std::pow(3.0, 1.0 / temp) / (std::pow(3.0, 1.0 / temp) + 1.0);
    EXPECT_NEAR(count_a / static_cast<double>(n), expected, 0.03) << "T=" << temp;
  }
}

TEST(SampleRationale, NonPositiveTemperatureIsAConfigError) {
  const PolicyParams p = tiny_params();
  RngStream rng(0);
  EXPECT_THROW(sample_rationale(p, prompt_for("x"), {0.0, 4, false}, rng), ConfigError);
}

TEST(SampleRationale, RecordedLogprobsMatchRecomputation) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const PolicyParams p = tiny_params(seed, 3.0);
    RngStream rng(seed);
    const PromptedInput pr = prompt_for("on-policy check " + std::to_string(seed));
    const Rollout r = sample_rationale(p, pr, {1.0, 40, false}, rng);
    const auto [total, per] = sequence_logprob(p, pr.token_ids, r.response_ids);
    ASSERT_EQ(per.size(), r.per_token_logprobs.size());
    double sum = 0.0;
    for (std::size_t t = 0; t < per.size(); ++t) {
      EXPECT_NEAR(per[t], r.per_token_logprobs[t], 1e-10);
      sum += r.per_token_logprobs[t];
    }
    EXPECT_NEAR(total, sum, 1e-10);
  }
}

TEST(RolloutSupervised, AsymmetricCountsAndDistinctStreams) {
  const PolicyParams p = tiny_params(2, 3.0);
  const RolloutContext ctx = context(p);
  const TrainingInstance inst{"query", "positive doc", {"negative doc"}};
  const RolloutGroup g = rollout_supervised(ctx, inst, 0, 8);
  EXPECT_EQ(g.size(), 10u);
  EXPECT_EQ(g.positives.size(), 8u);
  EXPECT_EQ(g.negatives.size(), 1u);
  EXPECT_TRUE(g.query.is_reference);
  EXPECT_TRUE(g.negatives[0].is_reference);
  std::set<std::uint64_t> ids = {g.query.rng_stream_id, g.negatives[0].rng_stream_id};
  for (const auto& r : g.positives) {
    EXPECT_FALSE(r.is_reference);
    EXPECT_EQ(r.prompted.role, SourceRole::kPositive);
    EXPECT_LE(r.response_ids.size(), ctx.sampling.max_response_len);
    EXPECT_EQ(r.per_token_logprobs.size(), r.response_ids.size());
    EXPECT_EQ(r.truncated,
              r.response_ids.size() == ctx.sampling.max_response_len && !r.ended_with_eos);
    ids.insert(r.rng_stream_id);
  }
  EXPECT_EQ(ids.size(), 10u);
}

TEST(RolloutSupervised, SingleRolloutGroupIsValid) {
  const PolicyParams p = tiny_params(2, 3.0);
  const RolloutGroup g = rollout_supervised(context(p), {"q", "d", {"n"}}, 0, 1);
  EXPECT_EQ(g.positives.size(), 1u);
}

TEST(RolloutSupervised, SiblingRolloutsDiffer) {
  const PolicyParams p = tiny_params(4, 3.0);
  RolloutContext ctx = context(p, 8);
  int differ = 0;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    ctx.step = trial;
    const RolloutGroup g = rollout_supervised(ctx, {"q", "doc", {"n"}}, 0, 2);
    differ += g.positives[0].response_ids != g.positives[1].response_ids;
  }
  EXPECT_GE(differ, 99);
}

TEST(RolloutSupervised, RejectsMalformedInstances) {
  const PolicyParams p = tiny_params();
  const RolloutContext ctx = context(p);
  EXPECT_THROW(rollout_supervised(ctx, {"q", "", {"n"}}, 0, 2), InputError);
  EXPECT_THROW(rollout_supervised(ctx, {"q", "d", {}}, 0, 2), ContractError);
  EXPECT_THROW(rollout_supervised(ctx, {"q", "d", {"n"}}, 0, 0), ContractError);
}

TEST(RolloutSupervised, WorkerCountDoesNotChangeResults) {
  const PolicyParams p = tiny_params(5, 3.0);
  RolloutContext ctx = context(p);
  const TrainingInstance inst{"query", "positive", {"neg a", "neg b"}};
  const RolloutGroup a = rollout_supervised(ctx, inst, 3, 4);
  ctx.workers = 3;
  const RolloutGroup b = rollout_supervised(ctx, inst, 3, 4);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(a.positives[k].response_ids, b.positives[k].response_ids);
    EXPECT_EQ(a.positives[k].per_token_logprobs, b.positives[k].per_token_logprobs);
  }
  EXPECT_EQ(a.negatives[1].response_ids, b.negatives[1].response_ids);
}

TEST(RolloutSupervised, GreedyReferenceFlag) {
  const PolicyParams p = tiny_params(6, 3.0);
  RolloutContext ctx = context(p);
  ctx.greedy_reference = true;
  const TrainingInstance inst{"query", "positive", {"neg"}};
  const RolloutGroup a = rollout_supervised(ctx, inst, 0, 2);
  ctx.step = 77;
  const RolloutGroup b = rollout_supervised(ctx, inst, 0, 2);
  EXPECT_EQ(a.query.response_ids, b.query.response_ids);
  EXPECT_EQ(a.negatives[0].response_ids, b.negatives[0].response_ids);
}

TEST(RolloutUnsupervised, AnchorPlusKFromOnePrompt) {
  const PolicyParams p = tiny_params(7, 3.0);
  const RolloutContext ctx = context(p);
  const RolloutGroup g = rollout_unsupervised(ctx, "raw text", 0, 8);
  EXPECT_EQ(g.size(), 9u);
  EXPECT_TRUE(g.unsupervised);
  for (const auto& r : g.positives) EXPECT_EQ(r.prompted.token_ids, g.query.prompted.token_ids);
  EXPECT_THROW(rollout_unsupervised(ctx, "", 0, 2), InputError);
}

TEST(RolloutUnsupervised, TextsInOneBatchUseDisjointStreams) {
  const PolicyParams p = tiny_params(7, 3.0);
  const RolloutContext ctx = context(p);
  const RolloutGroup a = rollout_unsupervised(ctx, "first", 0, 4);
  const RolloutGroup b = rollout_unsupervised(ctx, "second", 1, 4);
  std::set<std::uint64_t> ids;
  for (const RolloutGroup* g : {&a, &b}) {
    ids.insert(g->query.rng_stream_id);
    for (const auto& r : g->positives) ids.insert(r.rng_stream_id);
  }
  EXPECT_EQ(ids.size(), 10u);
}

TEST(RolloutContext, AllRolloutsCarryTheSnapshotId) {
  const PolicyParams p = tiny_params();
  RolloutContext ctx = context(p);
  ctx.snapshot_id = 1234;
  const RolloutGroup g = rollout_supervised(ctx, {"q", "d", {"n"}}, 0, 3);
  EXPECT_EQ(g.query.snapshot_id, 1234u);
  for (const auto& r : g.positives) EXPECT_EQ(r.snapshot_id, 1234u);
}

}  // namespace
}  // namespace grace
