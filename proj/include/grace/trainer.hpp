#pragma once

// Training loop: rollouts, embeddings, rewards, advantages, update. Also the
// unsupervised variant and the InfoNCE baseline, which share telemetry and
// checkpointing.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "grace/checkpoint.hpp"
#include "grace/errors.hpp"
#include "grace/model.hpp"
#include "grace/optimizer.hpp"
#include "grace/parallel.hpp"
#include "grace/representation.hpp"
#include "grace/reward.hpp"
#include "grace/rng.hpp"
#include "grace/rollout.hpp"

namespace grace {

enum class TrainMode { kGraceSupervised, kGraceUnsupervised, kInfonceBaseline };
enum class PolicyAlgo { kGrace, kGrpoClip };

inline const char* mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::kGraceSupervised: return "grace_supervised";
    case TrainMode::kGraceUnsupervised: return "grace_unsupervised";
    case TrainMode::kInfonceBaseline: return "infonce_baseline";
  }
  return "?";
}

inline TrainMode parse_mode(const std::string& s) {
  if (s == "grace_supervised" || s == "supervised") return TrainMode::kGraceSupervised;
  if (s == "grace_unsupervised" || s == "unsupervised") return TrainMode::kGraceUnsupervised;
  if (s == "infonce_baseline" || s == "infonce") return TrainMode::kInfonceBaseline;
  throw ConfigError("unknown mode '" + s +
                    "' (expected grace_supervised, grace_unsupervised or infonce_baseline)");
}

inline const char* algo_name(PolicyAlgo a) {
  return a == PolicyAlgo::kGrace ? "grace" : "grpo_clip";
}

inline PolicyAlgo parse_algo(const std::string& s) {
  if (s == "grace") return PolicyAlgo::kGrace;
  if (s == "grpo_clip") return PolicyAlgo::kGrpoClip;
  throw ConfigError("unknown algo '" + s + "' (expected grace or grpo_clip)");
}

struct TrainConfig {
  TrainMode mode = TrainMode::kGraceSupervised;
  PolicyAlgo algo = PolicyAlgo::kGrace;
  double clip_eps = 0.2;
  std::size_t batch_size = 8;
  std::size_t rollouts = 4;  // K
  std::size_t epochs = 1;
  std::size_t max_steps = 0;  // 0 = run all epochs
  RewardWeights reward;
  double tau_cl = 0.05;
  std::size_t max_prompt_len = 256;
  double temperature = 1.0;
  std::uint64_t global_seed = 0;
  PoolingMode pooling = PoolingMode::kMeanLast;
  AdamWConfig adamw;
  LossNormalization loss_norm = LossNormalization::kMean;
  bool greedy_reference = false;
  // Reuse each negative document's first rationale for the rest of the run.
  // The cache is not checkpointed, so resumed runs regenerate it.
  bool cache_negatives = false;
  std::size_t eval_every = 0;  // 0 = never
  std::size_t workers = 1;
  bool record_wall_time = false;
  InstructionTemplate instruction;

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (rollouts < 1) throw ConfigError("rollouts (K) must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
    if (!(tau_cl > 0.0)) throw ConfigError("tau_cl must be > 0");
    if (!(clip_eps > 0.0)) throw ConfigError("clip_eps must be > 0");
    if (algo == PolicyAlgo::kGrpoClip && rollouts < 2) {
      throw ConfigError("grpo_clip needs rollouts >= 2");
    }
    if (workers < 1) throw ConfigError("workers must be >= 1");
    reward.validate();
    if (mode == TrainMode::kInfonceBaseline && pooling != PoolingMode::kMeanLast &&
        pooling != PoolingMode::kMeanPenultimate) {
      throw ConfigError("infonce_baseline trains through mean pooling only");
    }
  }
};

struct StepTelemetry {
  std::uint64_t step = 0;
  double mean_r_cl = 0.0;
  double mean_r_consist = 0.0;
  double mean_r_hard = 0.0;
  double mean_r_final = 0.0;
  double frac_penalized = 0.0;
  double mean_resp_len = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
  std::size_t batch = 0;
  bool partial = false;
  bool updated = false;
};

inline constexpr const char* kTelemetryHeader =
    "step,mean_r_cl,mean_r_consist,mean_r_hard,mean_r_final,frac_penalized,"
    "mean_resp_len,loss,grad_norm,wall_ms";

/// Shortest round-trip decimal form, so CSV rows are a pure function of the
/// numbers.
inline std::string format_double(double v) {
  if (v == 0.0) return "0";
  char buf[32];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline std::string telemetry_row(const StepTelemetry& t) {
  std::ostringstream os;
  os << t.step;
  for (double v : {t.mean_r_cl, t.mean_r_consist, t.mean_r_hard, t.mean_r_final,
                   t.frac_penalized, t.mean_resp_len, t.loss, t.grad_norm, t.wall_ms})
    os << ',' << format_double(v);
  return os.str();
}

/// Training data for one run: supervised triples or raw texts.
struct Dataset {
  std::vector<TrainingInstance> triples;
  std::vector<std::string> texts;

  bool supervised() const { return !triples.empty(); }
  std::size_t size() const { return supervised() ? triples.size() : texts.size(); }
};

/// Everything one supervised/unsupervised step produced, for inspection.
struct StepDetail {
  std::vector<RolloutGroup> groups;
  BatchEmbeddings embeddings;
  std::vector<RewardBreakdown> rewards;
  std::vector<AdvantageGroup> advantages;
};

class Trainer {
 public:
  Trainer(PolicyParams& params, TrainConfig cfg)
      : params_(params), cfg_(std::move(cfg)), opt_(params, cfg_.adamw) {
    cfg_.validate();
    const auto need = cfg_.max_prompt_len + cfg_.reward.max_response_len;
    if (cfg_.mode != TrainMode::kInfonceBaseline &&
        need > static_cast<std::size_t>(params.config().max_seq_len)) {
      throw ConfigError("max_prompt_len + max_response_len (" + std::to_string(need) +
                        ") exceeds max_seq_len (" +
                        std::to_string(params.config().max_seq_len) + ")");
    }
  }

  const TrainConfig& config() const { return cfg_; }
  OptimizerState& optimizer() { return opt_; }
  std::uint64_t step() const { return step_; }
  void set_step(std::uint64_t s) { step_ = s; }

  RolloutContext rollout_context() const {
    RolloutContext ctx;
    ctx.params = &params_;
    ctx.snapshot_id = step_;
    ctx.instruction = cfg_.instruction;
    ctx.max_prompt_len = cfg_.max_prompt_len;
    ctx.sampling.temperature = cfg_.temperature;
    ctx.sampling.max_response_len = cfg_.reward.max_response_len;
    ctx.greedy_reference = cfg_.greedy_reference;
    ctx.global_seed = cfg_.global_seed;
    ctx.step = step_;
    ctx.workers = cfg_.workers;
    if (cfg_.cache_negatives) ctx.negative_cache = &negative_cache_;
    return ctx;
  }

  /// Phases 1-3 only: rollouts, embeddings and rewards, no update.
  StepDetail score_supervised(const std::vector<TrainingInstance>& batch) const {
    if (batch.empty()) throw ContractError("empty training batch");
    const RolloutContext ctx = rollout_context();
    StepDetail d;
    for (std::size_t i = 0; i < batch.size(); ++i)
      d.groups.push_back(rollout_supervised(ctx, batch[i], i, cfg_.rollouts));
    if (cfg_.cache_negatives) {
      for (std::size_t i = 0; i < batch.size(); ++i)
        for (std::size_t m = 0; m < batch[i].negatives.size(); ++m)
          negative_cache_.emplace(batch[i].negatives[m], d.groups[i].negatives[m]);
    }
    embed_and_reward(d);
    return d;
  }

  StepDetail score_unsupervised(const std::vector<std::string>& batch) const {
    if (batch.empty()) throw ContractError("empty training batch");
    const RolloutContext ctx = rollout_context();
    StepDetail d;
    for (std::size_t i = 0; i < batch.size(); ++i)
      d.groups.push_back(rollout_unsupervised(ctx, batch[i], i, cfg_.rollouts));
    embed_and_reward(d);
    return d;
  }

  StepTelemetry step_supervised(const std::vector<TrainingInstance>& batch,
                                StepDetail* detail = nullptr) {
    const auto t0 = std::chrono::steady_clock::now();
    StepDetail d = score_supervised(batch);
    StepTelemetry tel = update_policy(d);
    finish(tel, batch.size(), t0);
    if (detail) *detail = std::move(d);
    return tel;
  }

  StepTelemetry step_unsupervised(const std::vector<std::string>& batch,
                                  StepDetail* detail = nullptr) {
    const auto t0 = std::chrono::steady_clock::now();
    StepDetail d = score_unsupervised(batch);
    StepTelemetry tel = update_policy(d);
    finish(tel, batch.size(), t0);
    if (detail) *detail = std::move(d);
    return tel;
  }

  /// In-batch InfoNCE on directly encoded prompts; no rationale generation.
  StepTelemetry step_infonce(const std::vector<TrainingInstance>& batch) {
    if (batch.empty()) throw ContractError("empty training batch");
    const auto t0 = std::chrono::steady_clock::now();
    params_.zero_grad();
    Tape tape;
    std::vector<Var> qs, ps;
    for (const auto& inst : batch) {
      if (inst.positive.empty()) throw InputError("empty positive document");
      qs.push_back(embed_var(tape, params_,
                             wrap(inst.query, SourceRole::kQuery, cfg_.instruction,
                                  cfg_.max_prompt_len),
                             cfg_.pooling));
      ps.push_back(embed_var(tape, params_,
                             wrap(inst.positive, SourceRole::kPositive, cfg_.instruction,
                                  cfg_.max_prompt_len),
                             cfg_.pooling));
    }
    Var loss = infonce_loss(stack_rows(qs), stack_rows(ps), cfg_.tau_cl);
    StepTelemetry tel;
    tel.loss = loss.value().item();
    tape.backward(loss);
    tel.grad_norm = grad_norm(params_);
    adamw_step(params_, opt_);
    tel.updated = true;
    finish(tel, batch.size(), t0);
    return tel;
  }

 private:
  void embed_and_reward(StepDetail& d) const {
    // Every embedding of the batch exists before any reward is computed:
    // the hard-negative term looks across instances.
    std::vector<std::pair<const Rollout*, Embedding*>> jobs;
    BatchEmbeddings& be = d.embeddings;
    const std::size_t B = d.groups.size();
    be.unsupervised = d.groups.front().unsupervised;
    be.queries.resize(B);
    be.positives.resize(B);
    be.negatives.resize(B);
    for (std::size_t i = 0; i < B; ++i) {
      const RolloutGroup& g = d.groups[i];
      jobs.emplace_back(&g.query, &be.queries[i]);
      be.positives[i].resize(g.positives.size());
      for (std::size_t k = 0; k < g.positives.size(); ++k)
        jobs.emplace_back(&g.positives[k], &be.positives[i][k]);
      be.negatives[i].resize(g.negatives.size());
      for (std::size_t m = 0; m < g.negatives.size(); ++m)
        jobs.emplace_back(&g.negatives[m], &be.negatives[i][m]);
    }
    parallel_for(jobs.size(), cfg_.workers, [&](std::size_t j) {
      *jobs[j].second = embed_rollout(params_, *jobs[j].first, cfg_.pooling);
    });

    std::vector<std::vector<RolloutStatus>> status(B);
    for (std::size_t i = 0; i < B; ++i)
      for (const auto& r : d.groups[i].positives)
        status[i].push_back({r.response_ids.size(), r.ended_with_eos});
    d.rewards = compute_rewards(be, status, cfg_.reward);
  }

  StepTelemetry update_policy(StepDetail& d) {
    const std::size_t B = d.groups.size();
    StepTelemetry tel;
    std::size_t n = 0;
    for (const auto& r : d.rewards) {
      tel.mean_r_cl += r.r_cl;
      tel.mean_r_consist += r.r_consist;
      tel.mean_r_hard += r.r_hard;
      tel.mean_r_final += r.r_final;
      tel.frac_penalized += r.penalized ? 1.0 : 0.0;
      tel.mean_resp_len += static_cast<double>(r.response_len);
      ++n;
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    for (double* v : {&tel.mean_r_cl, &tel.mean_r_consist, &tel.mean_r_hard, &tel.mean_r_final,
                      &tel.frac_penalized, &tel.mean_resp_len})
      *v *= inv_n;

    // Advantages per positive group; rewards are row-major in (i, k).
    std::size_t off = 0;
    bool any_signal = false;
    for (std::size_t i = 0; i < B; ++i) {
      const std::size_t K = d.groups[i].positives.size();
      std::vector<double> finals(K);
      for (std::size_t k = 0; k < K; ++k) finals[k] = d.rewards[off + k].r_final;
      off += K;
      AdvantageGroup g = grace_advantages(finals, i);
      if (cfg_.algo == PolicyAlgo::kGrpoClip) g.advantages = grpo_advantages_std(finals);
      for (double a : g.advantages) any_signal |= a != 0.0;
      d.advantages.push_back(std::move(g));
    }

    params_.zero_grad();
    const double norm = cfg_.loss_norm == LossNormalization::kMean ? 1.0 / static_cast<double>(n)
                                                                    : 1.0;
    // One tape per rollout keeps peak memory at a single sequence; the
    // gradient is the same sum either way.
    for (std::size_t i = 0; i < B; ++i) {
      const RolloutGroup& g = d.groups[i];
      for (std::size_t k = 0; k < g.positives.size(); ++k) {
        const double A = d.advantages[i].advantages[k];
        if (A == 0.0) continue;
        const Rollout& r = g.positives[k];
        Tape tape;
        SequenceLogprob lp = sequence_logprob(tape, params_, r.prompted.token_ids, r.response_ids);
        Var part;
        if (cfg_.algo == PolicyAlgo::kGrace) {
          part = scale(lp.total, -A * norm);
        } else {
          part = scale(grpo_clipped_loss(tape, {{A}}, {{lp.tokens}}, {{r.per_token_logprobs}},
                                         cfg_.clip_eps),
                       norm);
        }
        tel.loss += part.value().item();
        tape.backward(part);
      }
    }
    tel.grad_norm = grad_norm(params_);
    if (any_signal) {
      adamw_step(params_, opt_);
      tel.updated = true;
    }
    return tel;
  }

  void finish(StepTelemetry& tel, std::size_t batch,
              std::chrono::steady_clock::time_point t0) {
    tel.step = step_;
    tel.batch = batch;
    tel.partial = batch < cfg_.batch_size;
    if (cfg_.record_wall_time) {
      tel.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                        .count();
    }
    if (!params_.all_finite()) {
      throw NumericAbort("non-finite parameters after step " + std::to_string(step_));
    }
    ++step_;
  }

  PolicyParams& params_;
  TrainConfig cfg_;
  OptimizerState opt_;
  std::uint64_t step_ = 0;
  mutable std::map<std::string, Rollout> negative_cache_;
};

// ------------------------------------------------------------------ run()

struct RunOptions {
  std::filesystem::path out_dir;
  nlohmann::ordered_json config_snapshot = nlohmann::ordered_json::object();
  std::optional<std::filesystem::path> resume_from;
  // Called after every eval_every-th step and once at the end.
  std::function<void(std::uint64_t step, const PolicyParams&)> on_eval;
  std::function<void(const StepTelemetry&)> on_step;
};

struct RunResult {
  std::uint64_t steps = 0;
  std::vector<StepTelemetry> telemetry;
  std::filesystem::path final_checkpoint;
};

/// Deterministic epoch order: Fisher-Yates driven by a stream keyed on
/// (global_seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  RngStream rng(StreamKey{seed, epoch, ~0ull, ~0ull});
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform() * static_cast<double>(i));
    std::swap(order[i - 1], order[std::min(j, i - 1)]);
  }
  return order;
}

inline Checkpoint make_checkpoint(const PolicyParams& params, const OptimizerState& opt,
                                  std::uint64_t step, const nlohmann::ordered_json& config) {
  Checkpoint ck;
  ck.step = step;
  ck.config = config;
  append_params(ck, params);
  for (std::size_t i = 0; i < params.count(); ++i) {
    ck.tensors.emplace_back("opt.m/" + params[i].name, opt.m[i]);
    ck.tensors.emplace_back("opt.v/" + params[i].name, opt.v[i]);
  }
  ck.tensors.emplace_back("opt.t", Tensor::scalar(static_cast<double>(opt.step)));
  return ck;
}

inline void restore_optimizer(const Checkpoint& ck, const PolicyParams& params,
                              OptimizerState& opt) {
  for (std::size_t i = 0; i < params.count(); ++i) {
    const Tensor* m = ck.find("opt.m/" + params[i].name);
    const Tensor* v = ck.find("opt.v/" + params[i].name);
    if (!m || !v) throw DataError("checkpoint lacks optimizer state for " + params[i].name);
    if (m->shape() != opt.m[i].shape() || v->shape() != opt.v[i].shape()) {
      throw DataError("optimizer state shape mismatch for " + params[i].name);
    }
    opt.m[i] = *m;
    opt.v[i] = *v;
  }
  const Tensor* t = ck.find("opt.t");
  if (!t) throw DataError("checkpoint lacks opt.t");
  opt.step = static_cast<std::uint64_t>(t->item());
}

inline void check_dataset(const Dataset& data, TrainMode mode) {
  if (data.size() == 0) throw DataError("dataset is empty");
  if (data.supervised() && !data.texts.empty()) {
    throw DataError("dataset mixes supervised triples and raw texts");
  }
  if (mode == TrainMode::kGraceUnsupervised && data.supervised()) {
    throw DataError("mode grace_unsupervised needs raw texts ({\"text\": ...}), got triples");
  }
  if (mode != TrainMode::kGraceUnsupervised && !data.supervised()) {
    throw DataError(std::string("mode ") + mode_name(mode) +
                    " needs (query, positive, negatives) triples, got raw texts");
  }
}

/// Steps one epoch takes: ceil(n / B), the last batch possibly partial.
inline std::size_t steps_per_epoch(std::size_t n, std::size_t B) { return (n + B - 1) / B; }

/// Total steps of a run: all epochs, capped by max_steps.
inline std::size_t planned_steps(const TrainConfig& cfg, std::size_t n) {
  const std::size_t total = steps_per_epoch(n, cfg.batch_size) * cfg.epochs;
  return cfg.max_steps > 0 ? std::min(total, cfg.max_steps) : total;
}

/// Trains on the batch the trainer's step counter points at. The position
/// within the shuffled epoch is derived from the counter alone, which is
/// what makes resuming exact.
inline StepTelemetry train_next_batch(Trainer& trainer, const Dataset& data) {
  const TrainConfig& cfg = trainer.config();
  const std::size_t n = data.size();
  const std::size_t spe = steps_per_epoch(n, cfg.batch_size);
  const std::uint64_t s = trainer.step();
  const auto order = epoch_order(n, cfg.global_seed, s / spe);
  const std::size_t lo = (s % spe) * cfg.batch_size;
  const std::size_t hi = std::min(n, lo + cfg.batch_size);
  if (data.supervised()) {
    std::vector<TrainingInstance> batch;
    for (std::size_t j = lo; j < hi; ++j) batch.push_back(data.triples[order[j]]);
    return cfg.mode == TrainMode::kInfonceBaseline ? trainer.step_infonce(batch)
                                                   : trainer.step_supervised(batch);
  }
  std::vector<std::string> batch;
  for (std::size_t j = lo; j < hi; ++j) batch.push_back(data.texts[order[j]]);
  return trainer.step_unsupervised(batch);
}

/// Epochs x batches with checkpoints at epoch ends (checkpoint_epoch<N>.grce)
/// and at the end (final.grce). Telemetry rows go to telemetry.csv.
inline RunResult run_training(PolicyParams& params, const TrainConfig& cfg, const Dataset& data,
                              const RunOptions& opts) {
  check_dataset(data, cfg.mode);
  Trainer trainer(params, cfg);
  std::filesystem::create_directories(opts.out_dir);
  const auto telemetry_path = opts.out_dir / "telemetry.csv";

  const std::size_t n = data.size();
  const std::size_t spe = steps_per_epoch(n, cfg.batch_size);
  const std::size_t total = planned_steps(cfg, n);

  std::vector<std::string> kept_rows;
  if (opts.resume_from) {
    const Checkpoint ck = load_checkpoint(*opts.resume_from);
    restore_params(ck, params);
    restore_optimizer(ck, params, trainer.optimizer());
    trainer.set_step(ck.step);
    // Keep telemetry up to the saved step; later rows are replayed.
    std::ifstream in(telemetry_path);
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
      if (header) {
        header = false;
        continue;
      }
      if (line.empty()) continue;
      if (std::stoull(line.substr(0, line.find(','))) < ck.step) kept_rows.push_back(line);
    }
  }

  std::ofstream csv(telemetry_path, std::ios::trunc);
  if (!csv) throw DataError("cannot write " + telemetry_path.string());
  csv << kTelemetryHeader << '\n';
  for (const auto& r : kept_rows) csv << r << '\n';
  csv.flush();

  RunResult result;
  auto save = [&](const std::string& name) {
    const auto path = opts.out_dir / name;
    save_checkpoint(path, make_checkpoint(params, trainer.optimizer(), trainer.step(),
                                          opts.config_snapshot));
    return path;
  };

  while (trainer.step() < total) {
    const StepTelemetry tel = train_next_batch(trainer, data);
    csv << telemetry_row(tel) << '\n';
    csv.flush();
    result.telemetry.push_back(tel);
    if (opts.on_step) opts.on_step(tel);
    if (trainer.step() % spe == 0) {
      save("checkpoint_epoch" + std::to_string(trainer.step() / spe) + ".grce");
    }
    if (cfg.eval_every > 0 && trainer.step() % cfg.eval_every == 0 && opts.on_eval) {
      opts.on_eval(trainer.step(), params);
    }
  }
  result.steps = trainer.step();
  result.final_checkpoint = save("final.grce");
  if (opts.on_eval && (cfg.eval_every == 0 || result.steps % cfg.eval_every != 0)) {
    opts.on_eval(result.steps, params);
  }
  return result;
}

}  // namespace grace
