#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "mopd/pipeline.hpp"

using namespace mopd;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"({
  "seed": 3,
  "corpus": {"n_train": 240, "n_heldout": 40, "min_len": 16, "max_len": 32},
  "pretrain": {"context_width": 4, "embed_dim": 6, "hidden_dim": 12, "init_scale": 0.1,
               "steps": 30, "batch": 16, "lr": 0.01, "eval_every": 10, "patience": 3,
               "min_rel_improvement": 0.002},
  "teachers": [
    {"property": "sol", "threshold": 0.55, "max_count": 30, "steps": 10, "batch": 8, "lr": 0.005},
    {"property": "thermo", "threshold": 0.5, "max_count": 30, "steps": 10, "batch": 8, "lr": 0.005}
  ],
  "opd": {"weights": {"sol": 0.5, "thermo": 0.5}, "beta": 0.5, "steps": 6, "batch": 4, "lr": 0.005,
          "teacher_temperature": 0.7, "rollout_temperature": 1.0, "top_k": 22, "top_p": 0.95,
          "eval_every": 3, "single_property": "thermo"},
  "pg_baseline": {"property": "thermo", "steps": 6, "batch": 4, "lr": 0.005, "target_fraction": 0.5,
                  "stop_at_target": false, "eval_every": 3},
  "eval": {"n_samples": 12, "temperature": 0.7, "max_len": 40, "novelty_threshold": 0.7,
           "hv_axes": ["ppl", "novelty_t", "sol", "thermo"], "snapshot_samples": 12}
})";

std::string with_replacement(std::string text, const std::string& from, const std::string& to) {
  const auto pos = text.find(from);
  REQUIRE(pos != std::string::npos);
  return text.replace(pos, from.size(), to);
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("mopd_test_cli_" + name);
  fs::remove_all(dir);
  return dir;
}

// One full run shared by the read-only checks below.
const fs::path& full_run() {
  static const fs::path root = [] {
    auto dir = scratch("full");
    Pipeline(ExperimentConfig::parse(kTinyConfig), dir).run_all();
    return dir;
  }();
  return root;
}

int run_cli(const std::string& args, std::string* err = nullptr) {
  const auto log = fs::temp_directory_path() / "mopd_test_cli_stderr.txt";
  const std::string cmd = std::string(MOPD_CLI_PATH) + " " + args + " > /dev/null 2> " + log.string();
  const int status = std::system(cmd.c_str());
  if (err) *err = read_text(log);
  return WEXITSTATUS(status);
}

}  // namespace

TEST_CASE("config parsing is strict") {
  CHECK_NOTHROW(ExperimentConfig::parse(kTinyConfig));
  const std::string base = kTinyConfig;
  CHECK_THROWS_WITH_AS(ExperimentConfig::parse(with_replacement(base, "\"beta\"", "\"betta\"")),
                       doctest::Contains("unknown key 'opd.betta'"), Error);
  CHECK_THROWS_WITH_AS(ExperimentConfig::parse(with_replacement(base, "\"property\": \"sol\"", "\"property\": \"salt\"")),
                       doctest::Contains("unknown property"), Error);
  CHECK_THROWS_AS(ExperimentConfig::parse(with_replacement(base, "\"thermo\": 0.5}", "\"thermo\": 0.6}")), Error);
  CHECK_THROWS_AS(ExperimentConfig::parse(with_replacement(base, "\"threshold\": 0.55", "\"threshold\": 1.5")), Error);
  CHECK_THROWS_AS(ExperimentConfig::parse(with_replacement(base, "\"sol\": 0.5,", "\"fold\": 0.5,")), Error);
  CHECK_THROWS_AS(ExperimentConfig::parse(with_replacement(base, "\"max_len\": 40", "\"max_len\": 20")), Error);
  CHECK_THROWS_AS(ExperimentConfig::parse("{not json"), Error);
}

TEST_CASE("canonical form is stable") {
  const auto a = ExperimentConfig::parse(kTinyConfig);
  const auto b = ExperimentConfig::parse(a.canonical());
  CHECK(a.canonical() == b.canonical());
  CHECK(a.hash() == b.hash());
  const auto c = ExperimentConfig::parse(with_replacement(kTinyConfig, "\"seed\": 3", "\"seed\": 4"));
  CHECK(c.hash() != a.hash());
}

TEST_CASE("stages refuse to run without their inputs") {
  const auto dir = scratch("missing");
  Pipeline p(ExperimentConfig::parse(kTinyConfig), dir);
  CHECK_THROWS_WITH_AS(p.run(Stage::pretrain), doctest::Contains("needs stage 'corpus'"), Error);
  CHECK_THROWS_WITH_AS(p.run(Stage::report), doctest::Contains("has not been run"), Error);
  fs::remove_all(dir);
}

TEST_CASE("a full run records every output in the manifest") {
  const auto& root = full_run();
  const auto manifest = RunManifest::from_json(read_text(root / "manifest.json"));
  CHECK(manifest.stages.size() == std::size(kAllStages));
  for (const auto& st : manifest.stages) {
    for (const auto& f : st.files) {
      INFO(f.path);
      REQUIRE(fs::exists(root / f.path));
      if (f.hash) {
        CHECK(fs::file_size(root / f.path) == f.bytes);
        CHECK(*f.hash == fnv1a64(read_text(root / f.path)));
      }
      CHECK(f.hash.has_value() == (f.path.find(".timing.") == std::string::npos));
    }
  }
  CHECK(fs::exists(root / "models" / "opd_multi.ckpt"));
  CHECK(fs::exists(root / "reports" / "table.csv"));
}

TEST_CASE("re-running an up-to-date stage does nothing") {
  const auto& root = full_run();
  const auto before = read_text(root / "manifest.json");
  Pipeline p(ExperimentConfig::parse(kTinyConfig), root);
  for (Stage s : kAllStages) CHECK(p.run(s) == StageOutcome::up_to_date);
  CHECK(read_text(root / "manifest.json") == before);
}

TEST_CASE("changing one section reruns only the stages that read it") {
  const auto dir = scratch("invalidate");
  fs::copy(full_run(), dir, fs::copy_options::recursive);
  const auto before = read_text(dir / "reports" / "pg_target.json");
  Pipeline p(ExperimentConfig::parse(with_replacement(kTinyConfig, "\"target_fraction\": 0.5", "\"target_fraction\": 0.6")),
             dir);
  CHECK(p.run(Stage::corpus) == StageOutcome::up_to_date);
  CHECK(p.run(Stage::distill) == StageOutcome::up_to_date);
  CHECK(p.run(Stage::pg) == StageOutcome::ran);
  CHECK(read_text(dir / "reports" / "pg_target.json") != before);
  fs::remove_all(dir);
}

TEST_CASE("corpus output is not overwritten without force") {
  const auto dir = scratch("overwrite");
  fs::copy(full_run(), dir, fs::copy_options::recursive);
  const auto changed = with_replacement(kTinyConfig, "\"n_train\": 240", "\"n_train\": 250");
  CHECK_THROWS_WITH_AS(Pipeline(ExperimentConfig::parse(changed), dir).run(Stage::corpus),
                       doctest::Contains("--force"), Error);
  RunOptions force;
  force.force = true;
  CHECK(Pipeline(ExperimentConfig::parse(changed), dir, force).run(Stage::corpus) == StageOutcome::ran);
  CHECK(read_fasta(dir / "corpus" / "train.fasta").size() == 250);
  fs::remove_all(dir);
}

TEST_CASE("tampered outputs are detected") {
  const auto dir = scratch("tamper");
  fs::copy(full_run(), dir, fs::copy_options::recursive);
  write_text(dir / "metrics" / "base.csv", "sequence_id,ppl,novelty_u,novelty_t,sol,thermo,fold\n");
  Pipeline p(ExperimentConfig::parse(kTinyConfig), dir);
  CHECK(p.run(Stage::eval) == StageOutcome::ran);
  CHECK(parse_metric_records_csv(read_text(dir / "metrics" / "base.csv")).size() == 12);
  fs::remove_all(dir);
}

TEST_CASE("the report grid can be recomputed from the metric files") {
  const auto& root = full_run();
  Pipeline p(ExperimentConfig::parse(kTinyConfig), root);
  std::vector<MethodRecords> methods;
  for (const auto& m : p.methods()) {
    const auto records = parse_metric_records_csv(read_text(root / "metrics" / (m + ".csv")));
    const auto samples = read_fasta(root / "samples" / (m + ".fasta"));
    REQUIRE(records.size() == samples.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
      CHECK(records[i].sequence_id == samples[i].id);
      CHECK(records[i].sol == score_sol(samples[i].sequence).value);
      CHECK(records[i].thermo == score_thermo(samples[i].sequence).value);
    }
    methods.push_back({m, records});
  }
  const auto grid = parse_grid_csv(read_text(root / "reports" / "table.csv"));
  const auto expected = comparison_grid(methods, p.config().eval.hv_axes);
  REQUIRE(grid.size() == expected.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    CHECK(grid[i].method == expected[i].method);
    CHECK(grid[i].ppl == expected[i].ppl);
    CHECK(grid[i].hv == expected[i].hv);
  }
  const auto fronts = parse_front_points_csv(read_text(root / "reports" / "fronts.csv"));
  const auto candidates = parse_front_points_csv(read_text(root / "reports" / "front_candidates.csv"));
  CHECK(fronts_from_points(candidates) == fronts);
  const auto methods_expected = std::vector<std::string>{
      "base", "teacher_sol", "teacher_thermo", "pooled_sft", "opd_single_thermo", "opd_multi", "pg_thermo"};
  CHECK(p.methods() == methods_expected);
}

TEST_CASE("disagreement summaries") {
  const auto& root = full_run();
  const auto ledger = RunLedger::from_jsonl(read_text(root / "ledgers" / "opd_multi.jsonl"));
  const auto s = summarize_disagreement(ledger);
  CHECK(s.steps.size() == 6);
  CHECK(s.all_non_negative);
  for (double v : s.mean_neg_z) CHECK(v > 0.0);
  const auto csv = disagreement_csv(s);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);

  const auto single = RunLedger::from_jsonl(read_text(root / "ledgers" / "opd_single_thermo.jsonl"));
  CHECK_THROWS_WITH_AS(summarize_disagreement(single), doctest::Contains("M >= 2"), Error);

  RunLedger same;
  same.num_teachers = 2;
  same.records.resize(3);
  const auto z = summarize_disagreement(same);
  for (double v : z.max_neg_z) CHECK(v == 0.0);
  same.records[1].mean_neg_z = -0.1;
  CHECK_FALSE(summarize_disagreement(same).all_non_negative);
}

TEST_CASE("output roots are locked") {
  const auto dir = scratch("lock");
  {
    const OutputLock lock(dir);
    CHECK_THROWS_AS(OutputLock{dir}, Error);
  }
  CHECK_NOTHROW(OutputLock{dir});
  fs::remove_all(dir);
}

TEST_CASE("command-line tool") {
  const auto dir = scratch("cli");
  fs::create_directories(dir);
  write_text(dir / "tiny.config", kTinyConfig);
  const auto cfg = (dir / "tiny.config").string();
  const auto out = (dir / "out").string();
  std::string err;

  CHECK(run_cli("", &err) == 2);
  CHECK(err.rfind("mopd: error:", 0) == 0);
  CHECK(run_cli("pretrain --config " + cfg + " --out " + out + " -q", &err) == 1);
  CHECK(err.find("mopd: error: stage 'pretrain' needs stage 'corpus'") != std::string::npos);
  CHECK(std::count(err.begin(), err.end(), '\n') == 1);
  CHECK(run_cli("corpus --config " + cfg + " --out " + out + " -q") == 0);
  CHECK(fs::exists(dir / "out" / "corpus" / "train.fasta"));
  CHECK(run_cli("corpus --config " + (dir / "absent.config").string() + " --out " + out, &err) == 2);

  const auto ledger = (full_run() / "ledgers" / "opd_multi.jsonl").string();
  CHECK(run_cli("disagreement --ledger " + ledger + " --csv " + (dir / "d.csv").string()) == 0);
  CHECK(read_text(dir / "d.csv").rfind("step,mean_neg_z,max_neg_z\n", 0) == 0);
  const auto single = (full_run() / "ledgers" / "opd_single_thermo.jsonl").string();
  CHECK(run_cli("disagreement --ledger " + single, &err) == 1);
  CHECK(err.find("M >= 2") != std::string::npos);
  fs::remove_all(dir);
}
