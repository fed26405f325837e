#include "mopd/trainers.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>

#include "json.hpp"
#include "mopd/eval.hpp"
#include "mopd/rng.hpp"

namespace mopd {

using json = nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kEvalSalt = 0x45564131ULL;
constexpr std::uint64_t kBatchSalt = 0x42415443ULL;

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void scale(std::vector<double>& v, double s) {
  for (double& x : v) x *= s;
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 1) throw Error("batch_size must be >= 1");
  if (!(lr > 0.0)) throw Error("lr must be positive");
  if (!(beta >= 0.0 && beta <= 1.0)) throw Error("beta must lie in [0, 1]");
  rollout_sampler().validate();
  if (eval_samples > 0) eval_sampler().validate();
}

SamplerConfig TrainConfig::rollout_sampler() const {
  return {rollout_temperature, top_k, top_p, max_len, seed};
}

SamplerConfig TrainConfig::eval_sampler() const {
  return {eval_temperature, top_k, top_p, max_len, splitmix64(seed ^ kEvalSalt)};
}

double EvalSnapshot::get(Property p) const {
  switch (p) {
    case Property::sol: return sol;
    case Property::thermo: return thermo;
    case Property::fold: return fold;
  }
  throw Error("unknown property");
}

EvalSnapshot evaluate_policy(const PolicyParams& params, const TrainConfig& cfg, std::uint64_t* eval_queries) {
  if (cfg.eval_samples == 0) throw Error("evaluation requested with zero samples");
  const auto trajs = sample_batch(params, {}, cfg.eval_sampler(), 0, cfg.eval_samples, cfg.exec);
  std::vector<Sequence> seqs;
  seqs.reserve(trajs.size());
  for (const auto& t : trajs) seqs.push_back(t.body);
  auto mean_of = [&](Property p) {
    const auto s = score_batch(p, seqs, cfg.exec);
    return std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
  };
  EvalSnapshot snap{mean_of(Property::sol), mean_of(Property::thermo), mean_of(Property::fold)};
  if (eval_queries) *eval_queries += 3 * seqs.size();
  return snap;
}

// ---------------------------------------------------------------------------

std::string RunLedger::to_jsonl() const {
  std::string out;
  json head;
  head["kind"] = "run";
  head["run"] = run;
  head["num_teachers"] = num_teachers;
  out += head.dump() + "\n";
  for (const auto& r : records) {
    json j;
    j["kind"] = "train";
    j["step"] = r.step;
    j["loss"] = r.loss;
    j["mean_neg_z"] = r.mean_neg_z;
    j["max_neg_z"] = r.max_neg_z;
    j["oracle_queries"] = r.oracle_queries;
    j["params_hash"] = r.params_hash;
    j["skipped"] = r.skipped;
    out += j.dump() + "\n";
  }
  for (const auto& e : evals) {
    json j;
    j["kind"] = "eval";
    j["step"] = e.step;
    j["oracle_queries"] = e.oracle_queries;
    j["eval_oracle_queries"] = e.eval_oracle_queries;
    if (e.scores) {
      j["sol"] = e.scores->sol;
      j["thermo"] = e.scores->thermo;
      j["fold"] = e.scores->fold;
    }
    if (e.heldout_ppl) j["heldout_ppl"] = *e.heldout_ppl;
    out += j.dump() + "\n";
  }
  return out;
}

std::string RunLedger::timing_jsonl() const {
  std::string out;
  for (const auto& r : records) {
    json j;
    j["kind"] = "train";
    j["step"] = r.step;
    j["wall_time"] = r.wall_time;
    out += j.dump() + "\n";
  }
  for (const auto& e : evals) {
    json j;
    j["kind"] = "eval";
    j["step"] = e.step;
    j["wall_time"] = e.wall_time;
    out += j.dump() + "\n";
  }
  return out;
}

RunLedger RunLedger::from_jsonl(std::string_view text) {
  RunLedger ledger;
  std::size_t start = 0;
  while (start < text.size()) {
    auto nl = text.find('\n', start);
    auto line = text.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
    start = nl == std::string_view::npos ? text.size() : nl + 1;
    if (line.empty()) continue;
    const auto j = json::parse(line);
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "run") {
      ledger.run = j.at("run").get<std::string>();
      ledger.num_teachers = j.at("num_teachers").get<std::size_t>();
    } else if (kind == "train") {
      LedgerRecord r;
      r.step = j.at("step").get<std::size_t>();
      r.loss = j.at("loss").get<double>();
      r.mean_neg_z = j.at("mean_neg_z").get<double>();
      r.max_neg_z = j.at("max_neg_z").get<double>();
      r.oracle_queries = j.at("oracle_queries").get<std::uint64_t>();
      r.params_hash = j.at("params_hash").get<std::uint64_t>();
      r.skipped = j.at("skipped").get<bool>();
      ledger.records.push_back(r);
    } else if (kind == "eval") {
      EvalRecord e;
      e.step = j.at("step").get<std::size_t>();
      e.oracle_queries = j.at("oracle_queries").get<std::uint64_t>();
      e.eval_oracle_queries = j.at("eval_oracle_queries").get<std::uint64_t>();
      if (j.contains("sol")) {
        e.scores = EvalSnapshot{j.at("sol").get<double>(), j.at("thermo").get<double>(), j.at("fold").get<double>()};
      }
      if (j.contains("heldout_ppl")) e.heldout_ppl = j.at("heldout_ppl").get<double>();
      ledger.evals.push_back(e);
    } else {
      throw Error("ledger: unknown record kind '" + kind + "'");
    }
  }
  return ledger;
}

std::string disagreement_jsonl(std::span<const DisagreementRow> rows) {
  std::string out;
  for (const auto& r : rows) {
    json j;
    j["step"] = r.step;
    j["trajectory_id"] = r.trajectory_id;
    j["token_index"] = r.token_index;
    j["neg_z"] = r.neg_z;
    out += j.dump() + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

// Shared supervised loop used by pretraining and teacher SFT. Returns early
// when `should_stop` (evaluated at each snapshot) says so.
template <class Snapshot>
PolicyParams supervised_loop(const PolicyParams& init, std::span<const Sequence> data, const TrainConfig& cfg,
                             std::uint64_t queries, RunLedger* ledger, Snapshot&& snapshot) {
  cfg.validate();
  if (data.empty()) throw Error("supervised training on an empty dataset");
  PolicyParams params = init;
  params.append_lineage(cfg.seed);
  if (cfg.steps == 0) return init;
  AdamState opt;
  const AdamConfig adam{.lr = cfg.lr};
  Stopwatch clock;
  std::vector<Example> batch(cfg.batch_size);
  for (std::size_t step = 0; step <= cfg.steps; ++step) {
    if (cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps)) {
      EvalRecord e;
      e.step = step;
      e.oracle_queries = queries;
      const bool stop = snapshot(params, e);
      e.wall_time = clock.seconds();
      if (ledger) ledger->evals.push_back(e);
      if (stop) break;
    }
    if (step == cfg.steps) break;
    Rng rng(splitmix64(cfg.seed ^ kBatchSalt), step);
    for (auto& ex : batch) ex.target = data[rng.below(data.size())];
    const std::uint64_t hash = params.hash();
    auto res = nll_batch(params, batch, cfg.exec);
    const double norm = 1.0 / static_cast<double>(cfg.batch_size);
    scale(res.grad, norm);
    adam_step(params.mutable_weights(), res.grad, opt, adam);
    if (ledger) {
      LedgerRecord r;
      r.step = step;
      r.loss = res.loss_sum * norm;
      r.oracle_queries = queries;
      r.params_hash = hash;
      r.wall_time = clock.seconds();
      ledger->records.push_back(r);
    }
  }
  return params;
}

}  // namespace

PolicyParams pretrain_base(const PolicyParams& init, std::span<const Sequence> train,
                           std::span<const Sequence> heldout, const TrainConfig& cfg, const PretrainOptions& opts,
                           RunLedger* ledger) {
  if (heldout.empty()) throw Error("pretraining needs a held-out split");
  if (ledger) ledger->run = "pretrain";
  double best = HUGE_VAL;
  std::size_t stale = 0;
  auto snapshot = [&](const PolicyParams& p, EvalRecord& e) {
    const auto ppl = perplexity_batch(p, heldout, cfg.exec);
    // Corpus-level perplexity: geometric mean weighted by token count.
    double nll = 0.0;
    std::size_t tokens = 0;
    for (std::size_t i = 0; i < heldout.size(); ++i) {
      const auto len = heldout[i].length() + 1;
      nll += std::log(ppl[i]) * static_cast<double>(len);
      tokens += len;
    }
    const double value = std::exp(nll / static_cast<double>(tokens));
    e.heldout_ppl = value;
    if (value < best * (1.0 - opts.min_rel_improvement)) {
      best = value;
      stale = 0;
    } else {
      ++stale;
    }
    return stale >= opts.patience;
  };
  return supervised_loop(init, train, cfg, 0, ledger, snapshot);
}

PolicyParams train_teacher_sft(const PolicyParams& base, std::span<const Sequence> dataset, const TrainConfig& cfg,
                               std::uint64_t construction_queries, RunLedger* ledger) {
  if (dataset.empty()) throw Error("teacher SFT on an empty dataset");
  if (ledger && ledger->run.empty()) ledger->run = "teacher_sft";
  auto snapshot = [&](const PolicyParams& p, EvalRecord& e) {
    if (cfg.eval_samples > 0) e.scores = evaluate_policy(p, cfg, &e.eval_oracle_queries);
    return false;
  };
  return supervised_loop(base, dataset, cfg, construction_queries, ledger, snapshot);
}

Corpus pooled_dataset(std::span<const Corpus> datasets) {
  Corpus out;
  std::set<std::string> seen;
  for (const auto& d : datasets) {
    for (const auto& r : d) {
      if (seen.insert(r.id).second) out.push_back(r);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

PolicyParams train_opd(const PolicyParams& student, const TeacherEnsemble& ensemble, const TrainConfig& cfg,
                       std::uint64_t teacher_construction_queries, RunLedger* ledger,
                       std::vector<DisagreementRow>* trace) {
  cfg.validate();
  PolicyParams params = student;
  if (cfg.steps == 0) return params;
  params.append_lineage(cfg.seed);
  if (ledger) {
    if (ledger->run.empty()) ledger->run = ensemble.size() > 1 ? "opd_multi" : "opd_single";
    ledger->num_teachers = ensemble.size();
  }
  AdamState opt;
  const AdamConfig adam{.lr = cfg.lr};
  const auto sampler = cfg.rollout_sampler();
  std::uint64_t eval_queries = 0;
  Stopwatch clock;
  for (std::size_t step = 0; step <= cfg.steps; ++step) {
    if (ledger && cfg.eval_every > 0 && cfg.eval_samples > 0 && (step % cfg.eval_every == 0 || step == cfg.steps)) {
      EvalRecord e;
      e.step = step;
      e.oracle_queries = teacher_construction_queries;
      e.scores = evaluate_policy(params, cfg, &eval_queries);
      e.eval_oracle_queries = eval_queries;
      e.wall_time = clock.seconds();
      ledger->evals.push_back(e);
    }
    if (step == cfg.steps) break;

    const std::uint64_t hash = params.hash();
    const auto trajs = sample_batch(params, {}, sampler, step * cfg.batch_size, cfg.batch_size, cfg.exec);
    auto res = opd_batch(params, ensemble, trajs, cfg.beta, cfg.exec);
    if (res.off_policy != 0) throw Error("on-policy contract violated: rollouts from stale parameters");
    const double norm = cfg.per_token_mean ? 1.0 / static_cast<double>(res.tokens)
                                           : 1.0 / static_cast<double>(cfg.batch_size);
    scale(res.grad, norm);
    adam_step(params.mutable_weights(), res.grad, opt, adam);

    double z_sum = 0.0, z_max = 0.0;
    std::size_t z_count = 0;
    for (std::size_t t = 0; t < res.neg_z.size(); ++t) {
      for (std::size_t n = 0; n < res.neg_z[t].size(); ++n) {
        const double nz = res.neg_z[t][n];
        z_sum += nz;
        z_max = std::max(z_max, nz);
        ++z_count;
        if (trace) trace->push_back({step, t, n, nz});
      }
    }
    if (ledger) {
      LedgerRecord r;
      r.step = step;
      r.loss = res.loss_sum * norm;
      r.mean_neg_z = z_count ? z_sum / static_cast<double>(z_count) : 0.0;
      r.max_neg_z = z_max;
      r.oracle_queries = teacher_construction_queries;
      r.params_hash = hash;
      r.wall_time = clock.seconds();
      ledger->records.push_back(r);
    }
  }
  return params;
}

std::vector<double> group_advantages(std::span<const double> rewards) {
  if (rewards.empty()) return {};
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  if (!(sd > 1e-12)) return {};
  std::vector<double> adv(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / sd;
  return adv;
}

PolicyParams train_pg_baseline(const PolicyParams& student, CountingOracle& reward, const TrainConfig& cfg,
                               const PgOptions& opts, RunLedger* ledger) {
  cfg.validate();
  PolicyParams params = student;
  if (cfg.steps == 0) return params;
  params.append_lineage(cfg.seed);
  if (ledger && ledger->run.empty()) ledger->run = "pg_" + std::string(property_name(reward.property()));
  AdamState opt;
  const AdamConfig adam{.lr = cfg.lr};
  const auto sampler = cfg.rollout_sampler();
  std::uint64_t eval_queries = 0;
  Stopwatch clock;
  const std::uint64_t base_queries = reward.queries();
  for (std::size_t step = 0; step <= cfg.steps; ++step) {
    if (cfg.eval_every > 0 && cfg.eval_samples > 0 && (step % cfg.eval_every == 0 || step == cfg.steps)) {
      const auto snap = evaluate_policy(params, cfg, &eval_queries);
      if (ledger) {
        EvalRecord e;
        e.step = step;
        e.oracle_queries = reward.queries() - base_queries;
        e.scores = snap;
        e.eval_oracle_queries = eval_queries;
        e.wall_time = clock.seconds();
        ledger->evals.push_back(e);
      }
      if (opts.stop_at_score && snap.get(reward.property()) >= *opts.stop_at_score) break;
    }
    if (step == cfg.steps) break;

    const std::uint64_t hash = params.hash();
    const auto trajs = sample_batch(params, {}, sampler, step * cfg.batch_size, cfg.batch_size, cfg.exec);
    std::vector<Sequence> seqs;
    std::vector<double> rewards;
    for (const auto& t : trajs) {
      seqs.push_back(t.body);
      rewards.push_back(reward(t.body));
    }
    const auto adv = group_advantages(rewards);
    LedgerRecord r;
    r.step = step;
    r.params_hash = hash;
    r.skipped = adv.empty();
    if (!adv.empty()) {
      auto res = pg_batch(params, {}, seqs, adv, cfg.exec);
      const double norm = 1.0 / static_cast<double>(cfg.per_token_mean ? res.tokens : cfg.batch_size);
      scale(res.grad, norm);
      adam_step(params.mutable_weights(), res.grad, opt, adam);
      r.loss = res.loss_sum * norm;
    }
    r.oracle_queries = reward.queries() - base_queries;
    r.wall_time = clock.seconds();
    if (ledger) ledger->records.push_back(r);
  }
  return params;
}

// ---------------------------------------------------------------------------

std::optional<Crossing> first_crossing(const RunLedger& ledger, Property p, double target) {
  for (const auto& e : ledger.evals) {
    if (e.scores && e.scores->get(p) >= target) return Crossing{e.step, e.oracle_queries};
  }
  return std::nullopt;
}

EfficiencyReport efficiency_compare(const RunLedger& opd, const RunLedger& pg, Property p, double target) {
  auto has_scores = [](const RunLedger& l) {
    return std::any_of(l.evals.begin(), l.evals.end(), [](const EvalRecord& e) { return e.scores.has_value(); });
  };
  if (!has_scores(opd) || !has_scores(pg)) throw Error("efficiency_compare: both ledgers need evaluation snapshots");
  EfficiencyReport r{p, target, first_crossing(opd, p, target), first_crossing(pg, p, target), {}, {}};
  if (r.opd && r.pg) {
    if (r.opd->step > 0) r.step_ratio = static_cast<double>(r.pg->step) / static_cast<double>(r.opd->step);
    else if (r.pg->step == 0) r.step_ratio = 1.0;
    if (r.opd->oracle_queries > 0) {
      r.query_ratio = static_cast<double>(r.pg->oracle_queries) / static_cast<double>(r.opd->oracle_queries);
    } else if (r.pg->oracle_queries == 0) {
      r.query_ratio = 1.0;
    }
  }
  return r;
}

std::string efficiency_json(const EfficiencyReport& r) {
  json j;
  j["property"] = std::string(property_name(r.property));
  j["target"] = r.target;
  auto crossing = [](const std::optional<Crossing>& c) {
    json x;
    x["reached"] = c.has_value();
    if (c) {
      x["step"] = c->step;
      x["oracle_queries"] = c->oracle_queries;
    }
    return x;
  };
  j["opd"] = crossing(r.opd);
  j["pg"] = crossing(r.pg);
  j["step_ratio"] = r.step_ratio ? json(*r.step_ratio) : json(nullptr);
  j["query_ratio"] = r.query_ratio ? json(*r.query_ratio) : json(nullptr);
  return j.dump(2) + "\n";
}

}  // namespace mopd
