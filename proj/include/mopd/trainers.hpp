#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mopd/batch.hpp"
#include "mopd/distill.hpp"
#include "mopd/oracles.hpp"
#include "mopd/policy.hpp"

namespace mopd {

struct TrainConfig {
  std::size_t steps = 200;
  std::size_t batch_size = 16;
  double lr = 3e-3;
  double beta = 0.5;
  std::uint64_t seed = 0;
  std::size_t eval_every = 10;
  bool per_token_mean = true;

  // Rollouts (OPD and policy gradient).
  double rollout_temperature = 1.0;
  std::optional<std::size_t> top_k = Vocabulary::kSize;
  std::optional<double> top_p = 0.95;
  std::size_t max_len = 64;

  // Evaluation snapshots; 0 samples disables them.
  std::size_t eval_samples = 256;
  double eval_temperature = 0.7;

  Execution exec = Execution::parallel;

  void validate() const;
  SamplerConfig rollout_sampler() const;
  SamplerConfig eval_sampler() const;
};

struct EvalSnapshot {
  double sol = 0.0;
  double thermo = 0.0;
  double fold = 0.0;
  double get(Property p) const;
};

struct LedgerRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double mean_neg_z = 0.0;
  double max_neg_z = 0.0;
  std::uint64_t oracle_queries = 0;  // cumulative, training-time
  std::uint64_t params_hash = 0;     // parameters the batch was sampled from / evaluated at
  bool skipped = false;              // degenerate policy-gradient group
  double wall_time = 0.0;            // seconds since run start
};

struct EvalRecord {
  std::size_t step = 0;  // number of updates applied so far
  std::uint64_t oracle_queries = 0;
  std::uint64_t eval_oracle_queries = 0;
  std::optional<EvalSnapshot> scores;
  std::optional<double> heldout_ppl;
  double wall_time = 0.0;
};

struct RunLedger {
  std::string run;
  std::size_t num_teachers = 0;  // > 0 for distillation runs
  std::vector<LedgerRecord> records;
  std::vector<EvalRecord> evals;

  // Deterministic content. Wall-clock times go to a separate timing document.
  std::string to_jsonl() const;
  std::string timing_jsonl() const;
  static RunLedger from_jsonl(std::string_view text);
};

struct DisagreementRow {
  std::size_t step;
  std::size_t trajectory_id;
  std::size_t token_index;
  double neg_z;
};

std::string disagreement_jsonl(std::span<const DisagreementRow> rows);

// Mean property scores of `n` samples drawn at the evaluation temperature.
EvalSnapshot evaluate_policy(const PolicyParams& params, const TrainConfig& cfg, std::uint64_t* eval_queries = nullptr);

struct PretrainOptions {
  std::size_t patience = 3;          // evaluations without sufficient improvement
  double min_rel_improvement = 2e-3; // relative held-out PPL improvement that counts
};

// Maximum-likelihood training on the natural corpus; stops when held-out
// perplexity plateaus or cfg.steps is reached.
PolicyParams pretrain_base(const PolicyParams& init, std::span<const Sequence> train,
                           std::span<const Sequence> heldout, const TrainConfig& cfg, const PretrainOptions& opts,
                           RunLedger* ledger = nullptr);

// SFT on a preference dataset. `construction_queries` is the oracle cost of building it.
PolicyParams train_teacher_sft(const PolicyParams& base, std::span<const Sequence> dataset, const TrainConfig& cfg,
                               std::uint64_t construction_queries = 0, RunLedger* ledger = nullptr);

// Union of preference datasets, deduplicated by record id, first occurrence order.
Corpus pooled_dataset(std::span<const Corpus> datasets);

PolicyParams train_opd(const PolicyParams& student, const TeacherEnsemble& ensemble, const TrainConfig& cfg,
                       std::uint64_t teacher_construction_queries = 0, RunLedger* ledger = nullptr,
                       std::vector<DisagreementRow>* trace = nullptr);

struct PgOptions {
  // Stop once an evaluation snapshot's mean reward property reaches this value.
  std::optional<double> stop_at_score;
};

PolicyParams train_pg_baseline(const PolicyParams& student, CountingOracle& reward, const TrainConfig& cfg,
                               const PgOptions& opts = {}, RunLedger* ledger = nullptr);

// Group-normalized advantages; empty when the group is degenerate (std = 0).
std::vector<double> group_advantages(std::span<const double> rewards);

struct Crossing {
  std::size_t step;
  std::uint64_t oracle_queries;
};

struct EfficiencyReport {
  Property property;
  double target;
  std::optional<Crossing> opd;
  std::optional<Crossing> pg;
  std::optional<double> step_ratio;   // pg step / opd step
  std::optional<double> query_ratio;  // pg queries / opd queries
};

std::optional<Crossing> first_crossing(const RunLedger& ledger, Property p, double target);
EfficiencyReport efficiency_compare(const RunLedger& opd, const RunLedger& pg, Property p, double target);
std::string efficiency_json(const EfficiencyReport& r);

}  // namespace mopd
