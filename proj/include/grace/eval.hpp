#pragma once

// Embedding evaluation on a synthetic corpus: retrieval nDCG@10, STS
// Spearman and duplicate-pair average precision, plus the lambda ablation
// grid.

#include <algorithm>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "grace/corpus.hpp"
#include "grace/errors.hpp"
#include "grace/metrics.hpp"
#include "grace/model.hpp"
#include "grace/parallel.hpp"
#include "grace/representation.hpp"
#include "grace/rollout.hpp"
#include "grace/trainer.hpp"

namespace grace {

enum class EvalMode { kBase, kBaseWithReasoning, kTrained };

inline const char* eval_mode_name(EvalMode m) {
  switch (m) {
    case EvalMode::kBase: return "base";
    case EvalMode::kBaseWithReasoning: return "base_with_reasoning";
    case EvalMode::kTrained: return "trained";
  }
  return "?";
}

inline EvalMode parse_eval_mode(const std::string& s) {
  if (s == "base") return EvalMode::kBase;
  if (s == "base_with_reasoning") return EvalMode::kBaseWithReasoning;
  if (s == "trained") return EvalMode::kTrained;
  throw ConfigError("unknown eval mode '" + s +
                    "' (expected base, base_with_reasoning or trained)");
}

/// base encodes the prompt alone; the other modes decode a greedy rationale
/// first.
inline bool uses_reasoning(EvalMode m) { return m != EvalMode::kBase; }

struct EvalOptions {
  InstructionTemplate instruction;
  std::size_t max_prompt_len = 256;
  std::size_t max_response_len = 256;
  std::size_t workers = 1;
};

struct EvalReport {
  double ndcg_at_10 = 0.0;
  double spearman = 0.0;
  double avg_precision = 0.0;
  EvalMode mode = EvalMode::kBase;
  PoolingMode pooling = PoolingMode::kMeanLast;
  double mean_rationale_len = 0.0;
  std::size_t queries = 0;
  std::size_t documents = 0;
  std::size_t sts_pairs = 0;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["ndcg_at_10"] = ndcg_at_10;
    j["spearman"] = spearman;
    j["avg_precision"] = avg_precision;
    j["mode"] = eval_mode_name(mode);
    j["pooling"] = pooling_name(pooling);
    j["mean_rationale_len"] = mean_rationale_len;
    j["queries"] = queries;
    j["documents"] = documents;
    j["sts_pairs"] = sts_pairs;
    j["config"] = config;
    return j;
  }
};

/// Embeds each text once; `role` selects the instruction.
inline std::vector<Embedding> embed_texts(const PolicyParams& params,
                                          const std::vector<std::string>& texts,
                                          SourceRole role, EvalMode mode, PoolingMode pooling,
                                          const EvalOptions& opt,
                                          std::vector<std::size_t>* rationale_lens = nullptr) {
  std::vector<Embedding> out(texts.size());
  std::vector<std::size_t> lens(texts.size(), 0);
  parallel_for(texts.size(), opt.workers, [&](std::size_t i) {
    if (texts[i].empty()) throw DataError("corpus contains an empty text");
    const PromptedInput p = wrap(texts[i], role, opt.instruction, opt.max_prompt_len);
    if (!uses_reasoning(mode)) {
      out[i] = embed(params, p, std::span<const TokenId>{}, pooling);
      return;
    }
    RngStream unused(0);
    const Rollout r = sample_rationale(params, p, {1.0, opt.max_response_len, true}, unused);
    lens[i] = r.response_ids.size();
    out[i] = embed_rollout(params, r, pooling);
  });
  if (rationale_lens) *rationale_lens = std::move(lens);
  return out;
}

inline void check_corpus(const SyntheticCorpus& c) {
  if (c.documents.empty() || c.queries.empty()) throw DataError("corpus has no queries or documents");
  if (c.relevant.size() != c.queries.size()) {
    throw DataError("corpus relevance map does not cover every query");
  }
  for (std::size_t q = 0; q < c.relevant.size(); ++q) {
    if (c.relevant[q].empty()) throw DataError("query " + std::to_string(q) + " has no relevant document");
    for (std::size_t d : c.relevant[q])
      if (d >= c.documents.size()) throw DataError("relevance map names unknown document " + std::to_string(d));
  }
  if (c.sts.size() < 2) throw DataError("corpus needs at least two STS pairs");
}

inline EvalReport evaluate(const PolicyParams& params, const SyntheticCorpus& corpus,
                           EvalMode mode, PoolingMode pooling, const EvalOptions& opt) {
  check_corpus(corpus);
  EvalReport rep;
  rep.mode = mode;
  rep.pooling = pooling;
  rep.queries = corpus.queries.size();
  rep.documents = corpus.documents.size();
  rep.sts_pairs = corpus.sts.size();

  std::vector<std::size_t> lq, ld, ls;
  const auto qe = embed_texts(params, corpus.queries, SourceRole::kQuery, mode, pooling, opt, &lq);
  const auto de =
      embed_texts(params, corpus.documents, SourceRole::kPositive, mode, pooling, opt, &ld);

  double ndcg = 0.0;
  for (std::size_t q = 0; q < qe.size(); ++q) {
    std::vector<double> s(de.size());
    for (std::size_t d = 0; d < de.size(); ++d) s[d] = cosine(qe[q], de[d]);
    std::vector<std::size_t> rank(de.size());
    std::iota(rank.begin(), rank.end(), 0);
    std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
    ndcg += ndcg_at_10(rank, corpus.relevant[q]);
  }
  rep.ndcg_at_10 = ndcg / static_cast<double>(qe.size());

  // STS sides are symmetric texts; embed them with the query instruction.
  std::vector<std::string> sts_texts;
  for (const auto& p : corpus.sts) {
    sts_texts.push_back(p.a);
    sts_texts.push_back(p.b);
  }
  const auto se = embed_texts(params, sts_texts, SourceRole::kQuery, mode, pooling, opt, &ls);
  std::vector<double> pred, gold;
  std::vector<int> dup;
  for (std::size_t i = 0; i < corpus.sts.size(); ++i) {
    pred.push_back(cosine(se[2 * i], se[2 * i + 1]));
    gold.push_back(corpus.sts[i].score);
    dup.push_back(corpus.sts[i].duplicate);
  }
  rep.spearman = spearman(pred, gold);
  rep.avg_precision = average_precision(pred, dup);

  double total = 0.0;
  std::size_t count = 0;
  for (const auto* v : {&lq, &ld, &ls}) {
    for (std::size_t x : *v) total += static_cast<double>(x);
    count += v->size();
  }
  rep.mean_rationale_len = total / static_cast<double>(count);
  return rep;
}

// ------------------------------------------------------------ ablation

inline constexpr double kAblationValues[] = {0.0, 0.3, 0.5, 0.7, 1.0};

struct AblationRow {
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  EvalReport report;
};

inline constexpr const char* kAblationHeader = "lambda1,lambda2,ndcg_at_10,spearman,avg_precision";

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << kAblationHeader << '\n';
  for (const auto& r : rows) {
    os << format_double(r.lambda1) << ',' << format_double(r.lambda2) << ','
       << format_double(r.report.ndcg_at_10) << ',' << format_double(r.report.spearman) << ','
       << format_double(r.report.avg_precision) << '\n';
  }
  return os.str();
}

/// One short training run per (lambda1, lambda2) cell from the same initial
/// weights, each evaluated in trained mode.
inline std::vector<AblationRow> ablation_grid(
    const PolicyConfig& model, const TrainConfig& base, const Dataset& data,
    const SyntheticCorpus& corpus, const EvalOptions& eval_opt,
    const std::vector<double>& lambda1s = {std::begin(kAblationValues), std::end(kAblationValues)},
    const std::vector<double>& lambda2s = {std::begin(kAblationValues), std::end(kAblationValues)},
    const std::function<void(const AblationRow&)>& on_row = {}) {
  check_dataset(data, base.mode);
  if (base.mode == TrainMode::kInfonceBaseline) {
    throw ConfigError("the lambda ablation needs a GRACE training mode");
  }
  std::vector<AblationRow> rows;
  for (double l1 : lambda1s)
    for (double l2 : lambda2s) {
      TrainConfig cfg = base;
      cfg.reward.lambda1 = l1;
      cfg.reward.lambda2 = l2;
      PolicyParams params = init_params(model);
      Trainer trainer(params, cfg);
      const std::size_t total = planned_steps(cfg, data.size());
      while (trainer.step() < total) train_next_batch(trainer, data);
      AblationRow row{l1, l2, evaluate(params, corpus, EvalMode::kTrained, cfg.pooling, eval_opt)};
      if (on_row) on_row(row);
      rows.push_back(std::move(row));
    }
  return rows;
}

/// A single-knob sweep (rollout count K or batch size B); other settings come
/// from `base`.
enum class SweepKnob { kRollouts, kBatchSize };

inline const char* sweep_knob_name(SweepKnob k) {
  return k == SweepKnob::kRollouts ? "rollouts" : "batch_size";
}

struct SweepRow {
  std::size_t value = 0;
  EvalReport report;
};

inline std::string sweep_csv(SweepKnob knob, const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << sweep_knob_name(knob) << ",ndcg_at_10,spearman,avg_precision\n";
  for (const auto& r : rows) {
    os << r.value << ',' << format_double(r.report.ndcg_at_10) << ','
       << format_double(r.report.spearman) << ',' << format_double(r.report.avg_precision) << '\n';
  }
  return os.str();
}

inline std::vector<SweepRow> knob_sweep(const PolicyConfig& model, const TrainConfig& base,
                                        const Dataset& data, const SyntheticCorpus& corpus,
                                        const EvalOptions& eval_opt, SweepKnob knob,
                                        const std::vector<std::size_t>& values,
                                        const std::function<void(const SweepRow&)>& on_row = {}) {
  check_dataset(data, base.mode);
  const EvalMode mode =
      base.mode == TrainMode::kInfonceBaseline ? EvalMode::kBase : EvalMode::kTrained;
  std::vector<SweepRow> rows;
  for (std::size_t v : values) {
    TrainConfig cfg = base;
    (knob == SweepKnob::kRollouts ? cfg.rollouts : cfg.batch_size) = v;
    PolicyParams params = init_params(model);
    Trainer trainer(params, cfg);
    const std::size_t total = planned_steps(cfg, data.size());
    while (trainer.step() < total) train_next_batch(trainer, data);
    SweepRow row{v, evaluate(params, corpus, mode, cfg.pooling, eval_opt)};
    if (on_row) on_row(row);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace grace
