// grace: train, embed, eval, reward-debug, ablate, gen-data.
//
// Exit codes: 0 ok, 2 configuration error, 3 numeric abort, 4 data error,
// 1 anything else. Data goes to stdout or files, logs to stderr.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "grace/checkpoint.hpp"
#include "grace/config.hpp"
#include "grace/corpus.hpp"
#include "grace/dataset.hpp"
#include "grace/eval.hpp"
#include "grace/trainer.hpp"

namespace fs = std::filesystem;
using namespace grace;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitData = 4;

void log(const std::string& msg) { std::cerr << "grace: " << msg << '\n'; }

RunConfig resolve_config(const std::string& path, std::optional<std::uint64_t> seed) {
  RunConfig cfg = path.empty() ? desk_preset() : load_config(path);
  apply_env_seed(cfg);
  if (seed) cfg.apply_seed(*seed);
  return cfg;
}

EvalOptions eval_options(const RunConfig& cfg) {
  EvalOptions o;
  o.instruction = cfg.train.instruction;
  o.max_prompt_len = cfg.train.max_prompt_len;
  o.max_response_len = cfg.train.reward.max_response_len;
  o.workers = cfg.train.workers;
  return o;
}

/// Parameters and run config stored in a checkpoint written by `train`.
struct LoadedModel {
  RunConfig cfg;
  PolicyParams params;
};

LoadedModel load_model(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  RunConfig cfg = parse_config(ck.config.dump(2), path + " (embedded config)");
  PolicyParams params(cfg.model);
  restore_params(ck, params);
  return {std::move(cfg), std::move(params)};
}

Dataset dataset_for(const RunConfig& cfg) {
  if (cfg.dataset.empty()) throw ConfigError("config names no dataset");
  if (!fs::exists(cfg.dataset)) throw ConfigError("dataset file not found: " + cfg.dataset);
  return load_dataset(cfg.dataset);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

constexpr const char* kEvalHistoryHeader =
    "step,mode,pooling,ndcg_at_10,spearman,avg_precision,mean_rationale_len";

void append_history(const fs::path& path, std::uint64_t step, const EvalReport& r) {
  const bool fresh = !fs::exists(path);
  std::ofstream out(path, std::ios::app);
  if (!out) throw DataError("cannot write " + path.string());
  if (fresh) out << kEvalHistoryHeader << '\n';
  out << step << ',' << eval_mode_name(r.mode) << ',' << pooling_name(r.pooling) << ','
      << format_double(r.ndcg_at_10) << ',' << format_double(r.spearman) << ','
      << format_double(r.avg_precision) << ',' << format_double(r.mean_rationale_len) << '\n';
}

// ------------------------------------------------------------------ train

struct TrainArgs {
  std::string config, mode, out, resume;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers, max_steps;
  bool no_eval = false;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg = resolve_config(a.config, a.seed);
  if (!a.mode.empty()) cfg.train.mode = parse_mode(a.mode);
  if (a.workers) cfg.train.workers = *a.workers;
  if (a.max_steps) cfg.train.max_steps = *a.max_steps;
  cfg.validate();
  const Dataset data = dataset_for(cfg);
  check_dataset(data, cfg.train.mode);

  const fs::path out = a.out;
  fs::create_directories(out);
  const auto snapshot = dump_config(cfg);
  write_text(out / "config.json", snapshot.dump(2) + "\n");

  PolicyParams params = init_params(cfg.model);
  const SyntheticCorpus corpus = make_corpus(cfg.eval_corpus);
  const EvalMode eval_mode =
      cfg.train.mode == TrainMode::kInfonceBaseline ? EvalMode::kBase : EvalMode::kTrained;

  RunOptions opts;
  opts.out_dir = out;
  opts.config_snapshot = snapshot;
  if (!a.resume.empty()) opts.resume_from = a.resume;
  if (!a.no_eval) {
    if (a.resume.empty()) fs::remove(out / "eval_history.csv");
    opts.on_eval = [&](std::uint64_t step, const PolicyParams& p) {
      const EvalReport r = evaluate(p, corpus, eval_mode, cfg.train.pooling, eval_options(cfg));
      append_history(out / "eval_history.csv", step, r);
      log("eval step " + std::to_string(step) + ": ndcg@10 " + format_double(r.ndcg_at_10) +
          ", spearman " + format_double(r.spearman));
    };
  }
  opts.on_step = [](const StepTelemetry& t) {
    log("step " + std::to_string(t.step) + " r_final " + format_double(t.mean_r_final) +
        " len " + format_double(t.mean_resp_len) + (t.partial ? " (partial batch)" : ""));
  };
  const RunResult res = run_training(params, cfg.train, data, opts);
  nlohmann::ordered_json summary;
  summary["steps"] = res.steps;
  summary["final_checkpoint"] = res.final_checkpoint.string();
  summary["telemetry"] = (out / "telemetry.csv").string();
  std::cout << summary.dump() << '\n';
  return 0;
}

// ------------------------------------------------------------------ embed

struct EmbedArgs {
  std::string model, input, output, pooling = "mean_last";
  bool reasoning = false;
};

int cmd_embed(const EmbedArgs& a) {
  const PoolingMode pooling = parse_pooling(a.pooling);
  const LoadedModel m = load_model(a.model);
  std::ifstream in(a.input);
  if (!in) throw DataError("cannot open input " + a.input);
  std::vector<std::string> texts;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = a.input + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      throw DataError(where + ": invalid JSON");
    }
    if (!j.is_object() || !j.contains("text") || !j["text"].is_string() ||
        j["text"].get<std::string>().empty()) {
      throw DataError(where + ": expected {\"text\": nonempty string}");
    }
    texts.push_back(j["text"].get<std::string>());
  }
  const EvalMode mode = a.reasoning ? EvalMode::kTrained : EvalMode::kBase;
  const auto embs = embed_texts(m.params, texts, SourceRole::kQuery, mode, pooling, eval_options(m.cfg));
  std::ostringstream os;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    nlohmann::ordered_json j;
    j["text"] = texts[i];
    j["embedding"] = embs[i].vector;
    os << j.dump() << '\n';
  }
  if (a.output.empty() || a.output == "-") {
    std::cout << os.str();
  } else {
    write_text(a.output, os.str());
  }
  return 0;
}

// ------------------------------------------------------------------- eval

struct EvalArgs {
  std::string model, config, mode = "trained", pooling, out;
  std::optional<std::uint64_t> seed;
  bool all_pooling = false;
};

int cmd_eval(const EvalArgs& a) {
  RunConfig cfg;
  PolicyParams params;
  std::uint64_t step = 0;
  if (!a.model.empty()) {
    LoadedModel m = load_model(a.model);
    cfg = std::move(m.cfg);
    params = std::move(m.params);
    step = load_checkpoint(a.model).step;
  } else {
    cfg = resolve_config(a.config, a.seed);
    params = init_params(cfg.model);
  }
  const EvalMode mode = parse_eval_mode(a.mode);
  std::vector<PoolingMode> poolings;
  if (a.all_pooling) {
    poolings.assign(std::begin(kAllPoolingModes), std::end(kAllPoolingModes));
  } else {
    poolings.push_back(a.pooling.empty() ? cfg.train.pooling : parse_pooling(a.pooling));
  }
  const SyntheticCorpus corpus = make_corpus(cfg.eval_corpus);
  nlohmann::ordered_json reports = nlohmann::ordered_json::array();
  for (PoolingMode p : poolings) {
    EvalReport r = evaluate(params, corpus, mode, p, eval_options(cfg));
    r.config = dump_config(cfg);
    reports.push_back(r.to_json());
    if (!a.out.empty()) {
      fs::create_directories(a.out);
      append_history(fs::path(a.out) / "eval_history.csv", step, r);
    }
  }
  const auto doc = reports.size() == 1 ? reports[0] : reports;
  if (!a.out.empty()) write_text(fs::path(a.out) / "eval_report.json", doc.dump(2) + "\n");
  std::cout << doc.dump(2) << '\n';
  return 0;
}

// ----------------------------------------------------------- reward-debug

struct RewardDebugArgs {
  std::string config, model, output;
  std::optional<std::uint64_t> seed;
  std::size_t step = 0;
};

constexpr const char* kRewardDebugHeader =
    "instance,rollout,response_len,penalized,r_cl,r_consist,r_hard,r_total,r_scaled,r_final,"
    "advantage";

int cmd_reward_debug(const RewardDebugArgs& a) {
  RunConfig cfg = resolve_config(a.config, a.seed);
  const Dataset data = dataset_for(cfg);
  PolicyParams params = init_params(cfg.model);
  if (!a.model.empty()) restore_params(load_checkpoint(a.model), params);
  TrainConfig tc = cfg.train;
  if (!data.supervised()) tc.mode = TrainMode::kGraceUnsupervised;
  check_dataset(data, tc.mode == TrainMode::kInfonceBaseline ? TrainMode::kGraceSupervised : tc.mode);
  Trainer trainer(params, tc);
  trainer.set_step(a.step);
  // The first B records, in file order.
  const std::size_t B = std::min(tc.batch_size, data.size());
  StepDetail d;
  if (data.supervised()) {
    d = trainer.score_supervised({data.triples.begin(), data.triples.begin() + static_cast<long>(B)});
  } else {
    d = trainer.score_unsupervised({data.texts.begin(), data.texts.begin() + static_cast<long>(B)});
  }
  std::ostringstream os;
  os << kRewardDebugHeader << '\n';
  std::size_t off = 0;
  for (std::size_t i = 0; i < d.groups.size(); ++i) {
    const std::size_t K = d.groups[i].positives.size();
    std::vector<double> finals;
    for (std::size_t k = 0; k < K; ++k) finals.push_back(d.rewards[off + k].r_final);
    const AdvantageGroup adv = grace_advantages(finals, i);
    for (std::size_t k = 0; k < K; ++k) {
      const RewardBreakdown& r = d.rewards[off + k];
      os << r.instance << ',' << r.rollout << ',' << r.response_len << ',' << (r.penalized ? 1 : 0);
      for (double v : {r.r_cl, r.r_consist, r.r_hard, r.r_total, r.r_scaled, r.r_final, adv.advantages[k]})
        os << ',' << format_double(v);
      os << '\n';
    }
    off += K;
  }
  if (a.output.empty() || a.output == "-") {
    std::cout << os.str();
  } else {
    write_text(a.output, os.str());
  }
  return 0;
}

// ------------------------------------------------------------------ ablate

struct AblateArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> max_steps;
  std::vector<double> lambda1, lambda2;
  std::string sweep = "lambda";
  std::vector<std::size_t> values;
};

int cmd_ablate(const AblateArgs& a) {
  RunConfig cfg = resolve_config(a.config, a.seed);
  if (a.max_steps) cfg.train.max_steps = *a.max_steps;
  cfg.validate();
  const Dataset data = dataset_for(cfg);
  const SyntheticCorpus corpus = make_corpus(cfg.eval_corpus);
  if (a.sweep != "lambda") {
    if (a.sweep != "rollouts" && a.sweep != "batch_size") {
      throw ConfigError("unknown sweep '" + a.sweep + "' (expected lambda, rollouts or batch_size)");
    }
    const SweepKnob knob = a.sweep == "rollouts" ? SweepKnob::kRollouts : SweepKnob::kBatchSize;
    const std::vector<std::size_t> values =
        !a.values.empty() ? a.values
        : knob == SweepKnob::kRollouts ? std::vector<std::size_t>{2, 4, 8}
                                       : std::vector<std::size_t>{4, 8, 16};
    const auto rows = knob_sweep(cfg.model, cfg.train, data, corpus, eval_options(cfg), knob, values,
                                 [&](const SweepRow& r) {
                                   log(std::string(sweep_knob_name(knob)) + "=" + std::to_string(r.value) +
                                       ": ndcg@10 " + format_double(r.report.ndcg_at_10));
                                 });
    const std::string csv = sweep_csv(knob, rows);
    if (!a.out.empty()) {
      fs::create_directories(a.out);
      write_text(fs::path(a.out) / (a.sweep + "_sweep.csv"), csv);
    }
    std::cout << csv;
    return 0;
  }
  const std::vector<double> def(std::begin(kAblationValues), std::end(kAblationValues));
  const auto rows = ablation_grid(
      cfg.model, cfg.train, data, corpus, eval_options(cfg), a.lambda1.empty() ? def : a.lambda1,
      a.lambda2.empty() ? def : a.lambda2, [](const AblationRow& r) {
        log("cell lambda1=" + format_double(r.lambda1) + " lambda2=" + format_double(r.lambda2) +
            ": ndcg@10 " + format_double(r.report.ndcg_at_10));
      });
  const std::string csv = ablation_csv(rows);
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_text(fs::path(a.out) / "ablation.csv", csv);
    write_text(fs::path(a.out) / "config.json", dump_config(cfg).dump(2) + "\n");
  }
  std::cout << csv;
  return 0;
}

// ---------------------------------------------------------------- gen-data

struct GenDataArgs {
  std::string out;
  std::size_t triples = 200, texts = 200, negatives = 1;
  std::uint64_t seed = 7;
};

int cmd_gen_data(const GenDataArgs& a) {
  const fs::path out = a.out;
  fs::create_directories(out);
  Dataset sup, unsup;
  sup.triples = make_training_triples(a.triples, a.negatives, 8, a.seed);
  unsup.texts = make_raw_texts(a.texts, 8, a.seed + 1);
  write_text(out / "toy_supervised.jsonl", dataset_jsonl(sup));
  write_text(out / "toy_unsupervised.jsonl", dataset_jsonl(unsup));
  const std::pair<const char*, const char*> configs[] = {
      {"desk_supervised.json", R"({"preset": "desk", "mode": "grace_supervised", "dataset": "toy_supervised.jsonl"})"},
      {"desk_unsupervised.json", R"({"preset": "desk", "mode": "grace_unsupervised", "dataset": "toy_unsupervised.jsonl"})"},
      {"desk_infonce.json", R"({"preset": "desk", "mode": "infonce_baseline", "dataset": "toy_supervised.jsonl"})"},
  };
  for (const auto& [name, body] : configs) write_text(out / name, std::string(body) + "\n");
  std::cout << out.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GRACE: contrastive-reward policy optimization for text embeddings"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a policy from a config file");
  train->add_option("--config", ta.config, "Run config (JSON)")->required();
  train->add_option("--mode", ta.mode, "Override the training mode");
  train->add_option("--seed", ta.seed, "Override the run seed");
  train->add_option("--out", ta.out, "Output directory")->required();
  train->add_option("--workers", ta.workers, "Rollout/embedding threads");
  train->add_option("--max-steps", ta.max_steps, "Stop after this many steps");
  train->add_option("--resume", ta.resume, "Continue from a checkpoint in --out");
  train->add_flag("--no-eval", ta.no_eval, "Skip evaluation during and after training");

  EmbedArgs ea;
  auto* emb = app.add_subcommand("embed", "Embed JSONL texts with a checkpoint");
  emb->add_option("--model", ea.model, "Checkpoint")->required();
  emb->add_option("--input", ea.input, "JSONL with {\"text\": ...} per line")->required();
  emb->add_option("--output", ea.output, "Output JSONL (default stdout)");
  emb->add_option("--pooling", ea.pooling, "mean_last, mean_penultimate, eos or max");
  emb->add_option("--reasoning", ea.reasoning, "Generate a rationale before pooling (true/false)");

  EvalArgs va;
  auto* ev = app.add_subcommand("eval", "Evaluate on the synthetic corpus");
  ev->add_option("--model", va.model, "Checkpoint (omit to evaluate fresh weights)");
  ev->add_option("--config", va.config, "Config for fresh weights");
  ev->add_option("--seed", va.seed, "Seed for fresh weights");
  ev->add_option("--mode", va.mode, "base, base_with_reasoning or trained");
  ev->add_option("--pooling", va.pooling, "Pooling mode (default: the config's)");
  ev->add_flag("--all-pooling", va.all_pooling, "Report every pooling mode");
  ev->add_option("--out", va.out, "Directory for eval_report.json and eval_history.csv");

  RewardDebugArgs ra;
  auto* rd = app.add_subcommand("reward-debug", "Reward breakdown for the first batch");
  rd->add_option("--config", ra.config, "Run config")->required();
  rd->add_option("--model", ra.model, "Checkpoint (default: fresh weights)");
  rd->add_option("--seed", ra.seed, "Override the run seed");
  rd->add_option("--step", ra.step, "Step counter selecting the random streams");
  rd->add_option("--output", ra.output, "CSV path (default stdout)");

  AblateArgs aa;
  auto* ab = app.add_subcommand("ablate", "Short-run sweeps: lambda1 x lambda2 grid, rollout count, batch size");
  ab->add_option("--config", aa.config, "Run config")->required();
  ab->add_option("--seed", aa.seed, "Override the run seed");
  ab->add_option("--max-steps", aa.max_steps, "Steps per cell");
  ab->add_option("--lambda1", aa.lambda1, "lambda1 values")->delimiter(',');
  ab->add_option("--lambda2", aa.lambda2, "lambda2 values")->delimiter(',');
  ab->add_option("--sweep", aa.sweep, "lambda (5x5 grid), rollouts or batch_size");
  ab->add_option("--values", aa.values, "Values for a rollouts/batch_size sweep")->delimiter(',');
  ab->add_option("--out", aa.out, "Directory for the CSV");

  GenDataArgs ga;
  auto* gd = app.add_subcommand("gen-data", "Write the toy datasets and desk configs");
  gd->add_option("--out", ga.out, "Output directory")->required();
  gd->add_option("--triples", ga.triples, "Supervised triples");
  gd->add_option("--texts", ga.texts, "Raw texts");
  gd->add_option("--negatives", ga.negatives, "Negatives per triple");
  gd->add_option("--seed", ga.seed, "Generator seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*train) return cmd_train(ta);
    if (*emb) return cmd_embed(ea);
    if (*ev) return cmd_eval(va);
    if (*rd) return cmd_reward_debug(ra);
    if (*ab) return cmd_ablate(aa);
    if (*gd) return cmd_gen_data(ga);
  } catch (const ConfigError& e) {
    log(std::string("config error: ") + e.what());
    return kExitConfig;
  } catch (const NumericAbort& e) {
    log(std::string("numeric abort: ") + e.what());
    return kExitNumeric;
  } catch (const DataError& e) {
    log(std::string("data error: ") + e.what());
    return kExitData;
  } catch (const InputError& e) {
    log(std::string("data error: ") + e.what());
    return kExitData;
  } catch (const std::exception& e) {
    log(std::string("error: ") + e.what());
    return 1;
  }
  return 1;
}
