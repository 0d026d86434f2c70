#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "grace/corpus.hpp"
#include "grace/eval.hpp"
#include "support/tiny.hpp"

using namespace grace;
using grace::testing::tiny_config;

namespace {

CorpusOptions small_corpus() {
  CorpusOptions o;
  o.topics = 4;
  o.docs_per_topic = 3;
  o.queries_per_topic = 2;
  o.sts_pairs = 9;
  o.seed = 21;
  return o;
}

EvalOptions tiny_eval() {
  EvalOptions o;
  o.max_prompt_len = 100;
  o.max_response_len = 12;
  return o;
}

std::vector<std::string> split_lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  for (std::string line; std::getline(is, line);) out.push_back(line);
  return out;
}

}  // namespace

TEST(Corpus, DefaultShapeAndInvariants) {
  const SyntheticCorpus c = make_corpus(CorpusOptions{});
  EXPECT_EQ(c.topics, 8u);
  EXPECT_EQ(c.documents.size(), 64u);
  EXPECT_EQ(c.queries.size(), 32u);
  EXPECT_EQ(c.sts.size(), 96u);
  ASSERT_EQ(c.relevant.size(), c.queries.size());
  for (std::size_t q = 0; q < c.queries.size(); ++q) {
    EXPECT_FALSE(c.relevant[q].empty());
    for (std::size_t d : c.relevant[q]) EXPECT_EQ(c.doc_topic[d], c.query_topic[q]);
    for (std::size_t d = 0; d < c.documents.size(); ++d)
      if (c.doc_topic[d] == c.query_topic[q]) EXPECT_TRUE(c.relevant[q].count(d));
  }
  for (const auto& t : c.documents) EXPECT_FALSE(t.empty());
  for (const auto& t : c.queries) EXPECT_FALSE(t.empty());
}

TEST(Corpus, StsLabelsAreConsistent) {
  const SyntheticCorpus c = make_corpus(CorpusOptions{});
  std::size_t dup = 0, cross = 0;
  for (const auto& p : c.sts) {
    EXPECT_TRUE(p.score == 0.0 || p.score == 0.5 || p.score == 1.0);
    EXPECT_EQ(p.duplicate, p.score == 1.0 ? 1 : 0);
    EXPECT_NE(p.a, p.b);
    dup += p.duplicate;
    cross += p.score == 0.0;
  }
  EXPECT_EQ(dup, 32u);
  EXPECT_EQ(cross, 32u);
}

TEST(Corpus, SeededAndReproducible) {
  const auto a = make_corpus(CorpusOptions{});
  const auto b = make_corpus(CorpusOptions{});
  EXPECT_EQ(a.documents, b.documents);
  EXPECT_EQ(a.queries, b.queries);
  CorpusOptions other;
  other.seed = 1001;
  EXPECT_NE(make_corpus(other).documents, a.documents);
}

TEST(Corpus, TopicBoundsAreConfigErrors) {
  CorpusOptions o;
  o.topics = 0;
  EXPECT_THROW(make_corpus(o), ConfigError);
  o.topics = 9;
  EXPECT_THROW(make_corpus(o), ConfigError);
  EXPECT_THROW(make_training_triples(4, 1, 1, 0), ConfigError);
}

TEST(Corpus, TrainingTriplesNegativesComeFromOtherTopics) {
  // Every content word belongs to exactly one topic, so a negative sharing a
  // content word with its query would reveal a same-topic negative.
  const auto triples = make_training_triples(40, 3, 8, 7);
  ASSERT_EQ(triples.size(), 40u);
  for (std::size_t i = 0; i < triples.size(); ++i) {
    const std::size_t t = i % 8;
    ASSERT_EQ(triples[i].negatives.size(), 3u);
    for (const auto& neg : triples[i].negatives) {
      for (const auto& forms : corpus_detail::kLexicon[t])
        for (const char* w : forms) {
          EXPECT_EQ(neg.find(std::string(" ") + w + " "), std::string::npos) << neg;
        }
    }
  }
  EXPECT_EQ(make_raw_texts(10, 8, 3).size(), 10u);
}

TEST(Evaluate, MetricsInRangeAndDeterministic) {
  const PolicyParams params = init_params(tiny_config(4));
  const SyntheticCorpus corpus = make_corpus(small_corpus());
  for (EvalMode mode : {EvalMode::kBase, EvalMode::kBaseWithReasoning}) {
    const EvalReport a = evaluate(params, corpus, mode, PoolingMode::kMeanLast, tiny_eval());
    const EvalReport b = evaluate(params, corpus, mode, PoolingMode::kMeanLast, tiny_eval());
    EXPECT_GE(a.ndcg_at_10, 0.0);
    EXPECT_LE(a.ndcg_at_10, 1.0);
    EXPECT_GE(a.spearman, -1.0);
    EXPECT_LE(a.spearman, 1.0);
    EXPECT_GT(a.avg_precision, 0.0);
    EXPECT_LE(a.avg_precision, 1.0);
    EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
    EXPECT_EQ(a.queries, 8u);
    EXPECT_EQ(a.documents, 12u);
  }
}

TEST(Evaluate, BaseModeNeverGenerates) {
  const PolicyParams params = init_params(tiny_config(4));
  const SyntheticCorpus corpus = make_corpus(small_corpus());
  const auto before = rollout_invocations();
  const EvalReport r = evaluate(params, corpus, EvalMode::kBase, PoolingMode::kMeanLast, tiny_eval());
  EXPECT_EQ(rollout_invocations(), before);
  EXPECT_EQ(r.mean_rationale_len, 0.0);
  evaluate(params, corpus, EvalMode::kBaseWithReasoning, PoolingMode::kMeanLast, tiny_eval());
  EXPECT_GT(rollout_invocations(), before);
}

TEST(Evaluate, PoolingSweepGivesFourReports) {
  const PolicyParams params = init_params(tiny_config(4));
  const SyntheticCorpus corpus = make_corpus(small_corpus());
  std::vector<EvalReport> reports;
  for (PoolingMode p : kAllPoolingModes)
    reports.push_back(evaluate(params, corpus, EvalMode::kBase, p, tiny_eval()));
  ASSERT_EQ(reports.size(), 4u);
  for (std::size_t i = 0; i < reports.size(); ++i) EXPECT_EQ(reports[i].pooling, kAllPoolingModes[i]);
}

TEST(Evaluate, UntrainedRetrievalSitsInTheRandomRankingBand) {
  // Monte-Carlo distribution of the query-averaged nDCG@10 under uniformly
  // random rankings of the default corpus.
  const SyntheticCorpus corpus = make_corpus(CorpusOptions{});
  std::mt19937_64 rng(99);
  std::vector<double> draws;
  std::vector<std::size_t> ranking(corpus.documents.size());
  for (int trial = 0; trial < 2000; ++trial) {
    double sum = 0.0;
    for (std::size_t q = 0; q < corpus.queries.size(); ++q) {
      std::iota(ranking.begin(), ranking.end(), 0);
      std::shuffle(ranking.begin(), ranking.end(), rng);
      sum += ndcg_at_10(ranking, corpus.relevant[q]);
    }
    draws.push_back(sum / static_cast<double>(corpus.queries.size()));
  }
  std::sort(draws.begin(), draws.end());
  const double lo = draws.front(), hi = draws.back();
  // Widen the observed range by half its width: the untrained model is not a
  // uniform ranker, only a near-chance one.
  const double pad = 0.5 * (hi - lo);

  PolicyConfig cfg = tiny_config(1, 200);
  cfg.d_model = 32;
  const PolicyParams params = init_params(cfg);
  EvalOptions eo = tiny_eval();
  eo.max_prompt_len = 150;
  const EvalReport r = evaluate(params, corpus, EvalMode::kBase, PoolingMode::kMeanLast, eo);
  EXPECT_GE(r.ndcg_at_10, lo - pad);
  EXPECT_LE(r.ndcg_at_10, hi + pad);
}

TEST(Evaluate, CorpusMismatchIsADataError) {
  const PolicyParams params = init_params(tiny_config(4));
  SyntheticCorpus corpus = make_corpus(small_corpus());
  corpus.relevant.pop_back();
  EXPECT_THROW(evaluate(params, corpus, EvalMode::kBase, PoolingMode::kMeanLast, tiny_eval()),
               DataError);
  corpus = make_corpus(small_corpus());
  corpus.relevant[0] = {999};
  EXPECT_THROW(evaluate(params, corpus, EvalMode::kBase, PoolingMode::kMeanLast, tiny_eval()),
               DataError);
  corpus = make_corpus(small_corpus());
  corpus.relevant[0].clear();
  EXPECT_THROW(evaluate(params, corpus, EvalMode::kBase, PoolingMode::kMeanLast, tiny_eval()),
               DataError);
}

TEST(Evaluate, EvalModeNames) {
  for (EvalMode m : {EvalMode::kBase, EvalMode::kBaseWithReasoning, EvalMode::kTrained})
    EXPECT_EQ(parse_eval_mode(eval_mode_name(m)), m);
  EXPECT_THROW(parse_eval_mode("finetuned"), ConfigError);
}

namespace {

TrainConfig tiny_train() {
  TrainConfig t;
  t.batch_size = 2;
  t.rollouts = 2;
  t.max_steps = 1;
  t.max_prompt_len = 100;
  t.reward.max_response_len = 12;
  t.global_seed = 3;
  return t;
}

Dataset tiny_data() {
  Dataset d;
  d.triples = make_training_triples(4, 1, 4, 5);
  return d;
}

}  // namespace

TEST(Ablation, SingleNoConstraintCell) {
  const auto rows = ablation_grid(tiny_config(2), tiny_train(), tiny_data(),
                                  make_corpus(small_corpus()), tiny_eval(), {0.0}, {0.0});
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].lambda1, 0.0);
  EXPECT_EQ(rows[0].lambda2, 0.0);
  EXPECT_EQ(rows[0].report.mode, EvalMode::kTrained);
}

TEST(Ablation, CsvIsWellFormedAndSortable) {
  const auto rows = ablation_grid(tiny_config(2), tiny_train(), tiny_data(),
                                  make_corpus(small_corpus()), tiny_eval(), {0.0, 1.0}, {0.3, 0.7});
  ASSERT_EQ(rows.size(), 4u);
  const auto lines = split_lines(ablation_csv(rows));
  ASSERT_EQ(lines.size(), 5u);
  EXPECT_EQ(lines[0], kAblationHeader);
  std::vector<std::pair<double, std::string>> by_metric;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    EXPECT_EQ(std::count(lines[i].begin(), lines[i].end(), ','), 4);
    std::istringstream is(lines[i]);
    std::string l1, l2, ndcg;
    std::getline(is, l1, ',');
    std::getline(is, l2, ',');
    std::getline(is, ndcg, ',');
    by_metric.emplace_back(std::stod(ndcg), lines[i]);
  }
  std::sort(by_metric.begin(), by_metric.end(), [](auto& a, auto& b) { return a.first > b.first; });
  EXPECT_GE(by_metric.front().first, by_metric.back().first);
  EXPECT_EQ(lines[1].substr(0, 8), "0,0.3,0.");
}

TEST(Ablation, InfonceModeIsRejected) {
  TrainConfig t = tiny_train();
  t.mode = TrainMode::kInfonceBaseline;
  EXPECT_THROW(ablation_grid(tiny_config(2), t, tiny_data(), make_corpus(small_corpus()),
                             tiny_eval(), {0.0}, {0.0}),
               ConfigError);
}

TEST(Sweep, RolloutCountRows) {
  const auto rows = knob_sweep(tiny_config(2), tiny_train(), tiny_data(), make_corpus(small_corpus()),
                               tiny_eval(), SweepKnob::kRollouts, {2, 3});
  ASSERT_EQ(rows.size(), 2u);
  const auto lines = split_lines(sweep_csv(SweepKnob::kRollouts, rows));
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0], "rollouts,ndcg_at_10,spearman,avg_precision");
  EXPECT_EQ(lines[1].substr(0, 2), "2,");
  EXPECT_EQ(lines[2].substr(0, 2), "3,");
}
