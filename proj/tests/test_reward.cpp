#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "grace/reward.hpp"
#include "support/reward_oracle.hpp"

namespace grace {
namespace {

using testing::naive_cos;
using testing::oracle_rewards;
using testing::random_batch;

Embedding E(std::vector<double> v) {
  return Embedding(std::move(v), SourceRole::kPositive, PoolingMode::kMeanLast);
}

TEST(RewardCl, AlignedPositiveOrthogonalNegative) {
  const std::vector<Embedding> negs = {E({0, 1})};
  EXPECT_DOUBLE_EQ(reward_cl(E({1, 0}), E({1, 0}), negs), 1.0);
}

TEST(RewardCl, NegativeEqualToPositiveCancels) {
  const std::vector<Embedding> negs = {E({1, 0})};
  EXPECT_DOUBLE_EQ(reward_cl(E({1, 0}), E({1, 0}), negs), 0.0);
}

TEST(RewardCl, SumsOverNegatives) {
  const double r2 = 1.0 / std::sqrt(2.0);
  const std::vector<Embedding> negs = {E({0, 1}), E({-1, 0})};
  EXPECT_NEAR(reward_cl(E({1, 0}), E({r2, r2}), negs), 1.70711, 1e-5);
  EXPECT_NEAR(reward_cl(E({1, 0}), E({r2, r2}), negs, NegativesAggregation::kMean),
              r2 + 0.5, 1e-12);
}

TEST(RewardCl, ZeroNormIsDegenerate) {
  const std::vector<Embedding> negs = {E({0, 1})};
  EXPECT_THROW(reward_cl(E({0, 0}), E({1, 0}), negs), DegenerateInputError);
}

TEST(RewardConsist, IdenticalGroupScoresOne) {
  const std::vector<Embedding> g = {E({1, 2}), E({1, 2}), E({1, 2})};
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(reward_consist(k, g), 1.0, 1e-15);
}

TEST(RewardConsist, OrthogonalPairScoresZero) {
  const std::vector<Embedding> g = {E({1, 0}), E({0, 1})};
  EXPECT_EQ(reward_consist(0, g), 0.0);
  EXPECT_EQ(reward_consist(1, g), 0.0);
}

TEST(RewardConsist, SingleRolloutIsZero) {
  const std::vector<Embedding> g = {E({1, 0})};
  EXPECT_EQ(reward_consist(0, g), 0.0);
}

TEST(RewardConsist, MatchesPairwiseAverage) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  std::vector<Embedding> g;
  for (int k = 0; k < 3; ++k) g.push_back(E({n(rng), n(rng), n(rng)}));
  for (std::size_t k = 0; k < 3; ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < 3; ++j)
      if (j != k) s += naive_cos(g[k].vector, g[j].vector);
    EXPECT_NEAR(reward_consist(k, g), s / 2.0, 1e-12);
  }
}

TEST(RewardHard, MaxThenNegate) {
  // q_1 = [1, 0]; instance 0's rollouts have cosines 0.2 and 0.5 to it.
  BatchEmbeddings b;
  b.queries = {E({0, 1}), E({1, 0})};
  auto at = [](double c) { return E({c, std::sqrt(1 - c * c)}); };
  b.positives = {{at(0.2), at(0.5)}, {E({1, 0})}};
  EXPECT_NEAR(reward_hard(1, b), -0.5, 1e-12);
}

TEST(RewardHard, OrthogonalDistractorsScoreZero) {
  BatchEmbeddings b;
  b.queries = {E({1, 0, 0}), E({0, 1, 0})};
  b.positives = {{E({0, 0, 1})}, {E({0, 0, 1}), E({0, 0, -1})}};
  EXPECT_EQ(reward_hard(0, b), 0.0);
}

TEST(RewardHard, SingleInstanceBatchIsZero) {
  BatchEmbeddings b;
  b.queries = {E({1, 0})};
  b.positives = {{E({1, 0})}};
  EXPECT_EQ(reward_hard(0, b), 0.0);
}

TEST(RewardHard, RaisingAnyDistractorCosineNeverIncreasesIt) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 200; ++trial) {
    BatchEmbeddings b;
    for (int i = 0; i < 3; ++i) {
      b.queries.push_back(E({n(rng), n(rng), n(rng)}));
      b.positives.push_back({E({n(rng), n(rng), n(rng)}), E({n(rng), n(rng), n(rng)})});
    }
    const double before = reward_hard(0, b);
    // Move one distractor rollout toward q_0.
    const std::size_t j = 1 + rng() % 2, l = rng() % 2;
    auto& h = b.positives[j][l];
    const auto& q = b.queries[0].vector;
    std::vector<double> moved(3);
    const double hn = h.norm, qn = b.queries[0].norm;
    for (int c = 0; c < 3; ++c) moved[c] = 0.5 * h.vector[c] / hn + 0.5 * q[c] / qn;
    h = E(moved);
    EXPECT_LE(reward_hard(0, b), before + 1e-15);
  }
}

TEST(RewardSelf, IdentityOrthogonalityAndOracle) {
  EXPECT_NEAR(reward_self(E({3, 4}), E({3, 4})), 1.0, 1e-15);
  EXPECT_EQ(reward_self(E({1, 0}), E({0, 2})), 0.0);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  for (int t = 0; t < 50; ++t) {
    const Embedding a = E({n(rng), n(rng), n(rng), n(rng)});
    const Embedding b = E({n(rng), n(rng), n(rng), n(rng)});
    EXPECT_NEAR(reward_self(a, b), naive_cos(a.vector, b.vector), 1e-12);
  }
}

TEST(Finalize, WeightedTotalAndScaling) {
  RewardWeights w;
  RewardBreakdown r;
  r.r_cl = 1.0;
  r.r_consist = 0.5;
  r.r_hard = -0.2;
  const RewardBreakdown f = finalize(r, 10, true, w);
  EXPECT_NEAR(f.r_total, 1.06, 1e-12);
  EXPECT_NEAR(f.r_scaled, 0.106, 1e-12);
  EXPECT_EQ(f.r_final, f.r_scaled);
  EXPECT_FALSE(f.penalized);
}

TEST(Finalize, CapWithoutEosIsPenalized) {
  RewardWeights w;
  w.max_response_len = 8;
  RewardBreakdown r;
  r.r_cl = 5.0;
  const RewardBreakdown f = finalize(r, 8, false, w);
  EXPECT_TRUE(f.penalized);
  EXPECT_EQ(f.r_final, -1.0);
}

TEST(Finalize, EosExactlyAtTheCapIsNotPenalized) {
  RewardWeights w;
  w.max_response_len = 8;
  RewardBreakdown r;
  r.r_cl = 0.3;
  const RewardBreakdown f = finalize(r, 8, true, w);
  EXPECT_FALSE(f.penalized);
  EXPECT_EQ(f.r_final, f.r_scaled);
}

TEST(Finalize, NonPositiveTemperatureIsAConfigError) {
  RewardWeights w;
  w.tau = 0.0;
  EXPECT_THROW(finalize(RewardBreakdown{}, 1, true, w), ConfigError);
}

TEST(ComputeRewards, MatchesTripleLoopOracle) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    RewardWeights w;
    w.max_response_len = 16;
    w.lambda1 = std::uniform_real_distribution<double>(0, 1)(rng);
    w.lambda2 = std::uniform_real_distribution<double>(0, 1)(rng);
    w.negatives = trial % 2 ? NegativesAggregation::kMean : NegativesAggregation::kSum;
    const auto rb = random_batch(rng, w.max_response_len, trial % 5 == 0);
    const auto got = compute_rewards(rb.batch, rb.status, w);
    const auto want = oracle_rewards(rb.batch, rb.status, w);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t n = 0; n < got.size(); ++n) {
      EXPECT_EQ(got[n].instance, want[n].instance);
      EXPECT_EQ(got[n].rollout, want[n].rollout);
      EXPECT_NEAR(got[n].r_cl, want[n].r_cl, 1e-10);
      EXPECT_NEAR(got[n].r_consist, want[n].r_consist, 1e-10);
      EXPECT_NEAR(got[n].r_hard, want[n].r_hard, 1e-10);
      EXPECT_NEAR(got[n].r_total, want[n].r_total, 1e-10);
      EXPECT_NEAR(got[n].r_scaled, want[n].r_scaled, 1e-10);
      EXPECT_NEAR(got[n].r_final, want[n].r_final, 1e-10);
      EXPECT_EQ(got[n].penalized, want[n].penalized);
      EXPECT_EQ(got[n].response_len, want[n].response_len);
      // Decomposition identity.
      EXPECT_NEAR(got[n].r_total - (got[n].r_cl + w.lambda1 * got[n].r_consist +
                                    w.lambda2 * got[n].r_hard),
                  0.0, 1e-12);
    }
  }
}

TEST(ComputeRewards, HardTermIsBroadcastAcrossRollouts) {
  std::mt19937_64 rng(5);
  RewardWeights w;
  const auto rb = random_batch(rng, w.max_response_len);
  const auto got = compute_rewards(rb.batch, rb.status, w);
  for (const auto& r : got) {
    for (const auto& s : got)
      if (s.instance == r.instance) EXPECT_EQ(s.r_hard, r.r_hard);
  }
}

TEST(ComputeRewards, MisalignedInputsAreContractErrors) {
  std::mt19937_64 rng(6);
  RewardWeights w;
  auto rb = random_batch(rng, w.max_response_len);
  rb.status.pop_back();
  EXPECT_THROW(compute_rewards(rb.batch, rb.status, w), ContractError);
}

}  // namespace
}  // namespace grace
