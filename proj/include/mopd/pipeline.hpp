#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mopd/eval.hpp"
#include "mopd/oracles.hpp"
#include "mopd/policy.hpp"
#include "mopd/trainers.hpp"

namespace mopd {

inline constexpr std::string_view kToolVersion = "0.1.0";

struct TeacherSpec {
  Property property = Property::sol;
  double threshold = 0.5;
  std::size_t max_count = 200;
  std::size_t steps = 50;
  std::size_t batch = 32;
  double lr = 3e-3;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;

  struct {
    std::size_t n_train = 2000;
    std::size_t n_heldout = 300;
    LengthRange lengths{24, 48};
  } corpus;

  struct {
    Architecture arch;
    double init_scale = 0.1;
    std::size_t steps = 600;
    std::size_t batch = 32;
    double lr = 3e-3;
    std::size_t eval_every = 25;
    std::size_t patience = 3;
    double min_rel_improvement = 2e-3;
  } pretrain;

  std::vector<TeacherSpec> teachers;

  struct {
    std::vector<std::pair<Property, double>> weights;
    double beta = 0.5;
    std::size_t steps = 200;
    std::size_t batch = 16;
    double lr = 3e-3;
    double teacher_temperature = 0.7;
    double rollout_temperature = 1.0;
    std::size_t top_k = Vocabulary::kSize;
    double top_p = 0.95;
    std::size_t eval_every = 10;
    Property single_property = Property::thermo;
  } opd;

  struct {
    Property property = Property::thermo;
    std::size_t steps = 2000;
    std::size_t batch = 16;
    double lr = 3e-3;
    double target_fraction = 0.5;
    bool stop_at_target = true;
    std::size_t eval_every = 10;
  } pg_baseline;

  struct {
    std::size_t n_samples = 256;
    double temperature = 0.7;
    std::size_t max_len = 64;
    double novelty_threshold = 0.7;
    std::vector<Metric> hv_axes = kDefaultHvAxes;
    std::size_t snapshot_samples = 256;
  } eval;

  // Strict: unknown keys, bad properties and non-simplex weights are rejected.
  static ExperimentConfig parse(std::string_view text);
  static ExperimentConfig load(const std::filesystem::path& path);
  std::string canonical() const;  // normalized JSON text
  std::uint64_t hash() const;

  const TeacherSpec& teacher_for(Property p) const;
};

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t x);

enum class Stage { corpus, pretrain, teachers, distill, pg, eval, report };

std::string_view stage_name(Stage s);
Stage parse_stage(std::string_view name);
inline constexpr Stage kAllStages[] = {Stage::corpus, Stage::pretrain, Stage::teachers, Stage::distill,
                                       Stage::pg,     Stage::eval,     Stage::report};

struct ManifestFile {
  std::string path;  // relative to the output root
  std::uint64_t bytes = 0;
  std::optional<std::uint64_t> hash;  // absent for non-deterministic files (timings)
};

struct ManifestStage {
  Stage stage;
  std::string fingerprint;
  std::vector<ManifestFile> files;
};

struct RunManifest {
  std::string tool_version{kToolVersion};
  std::string config_hash;
  std::vector<ManifestStage> stages;

  const ManifestStage* find(Stage s) const;
  std::string to_json() const;
  static RunManifest from_json(std::string_view text);
};

struct RunOptions {
  bool force = false;
  Execution exec = Execution::parallel;
  std::function<void(std::string_view)> log;  // progress lines; may be empty
};

enum class StageOutcome { ran, up_to_date };

// Exclusive lock on an output root for the lifetime of the object.
class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& root);
  ~OutputLock();
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::filesystem::path path_;
};

class Pipeline {
 public:
  Pipeline(ExperimentConfig config, std::filesystem::path root, RunOptions options = {});

  StageOutcome run(Stage stage);
  void run_all();

  const RunManifest& manifest() const { return manifest_; }
  const ExperimentConfig& config() const { return config_; }
  const std::filesystem::path& root() const { return root_; }

  // Methods evaluated by the eval stage, in report order.
  std::vector<std::string> methods() const;

 private:
  std::string fingerprint(Stage s) const;
  void require(Stage upstream, Stage by) const;
  void record(Stage s, const std::string& fingerprint, const std::vector<std::pair<std::string, bool>>& files);
  void save_manifest() const;
  void log(std::string_view line) const;
  std::filesystem::path path(std::string_view rel) const { return root_ / std::filesystem::path(rel); }

  std::vector<std::pair<std::string, bool>> stage_corpus();
  std::vector<std::pair<std::string, bool>> stage_pretrain();
  std::vector<std::pair<std::string, bool>> stage_teachers();
  std::vector<std::pair<std::string, bool>> stage_distill();
  std::vector<std::pair<std::string, bool>> stage_pg();
  std::vector<std::pair<std::string, bool>> stage_eval();
  std::vector<std::pair<std::string, bool>> stage_report();

  TrainConfig train_config(std::uint64_t seed_salt) const;

  ExperimentConfig config_;
  std::filesystem::path root_;
  RunOptions options_;
  RunManifest manifest_;
};

// Summary of the disagreement series stored in a distillation ledger.
struct DisagreementSummary {
  std::vector<std::size_t> steps;
  std::vector<double> mean_neg_z;
  std::vector<double> max_neg_z;
  bool all_non_negative = true;
};

DisagreementSummary summarize_disagreement(const RunLedger& ledger);
std::string disagreement_csv(const DisagreementSummary& s);

// Rows of the comparison grid written by the report stage.
struct GridRow {
  std::string method;
  double ppl = 0.0;
  double novelty_u = 0.0;
  double novelty_t = 0.0;
  double sol = 0.0;
  double thermo = 0.0;
  double fold = 0.0;
  double hv = 0.0;
};

std::vector<GridRow> comparison_grid(std::span<const MethodRecords> methods, const std::vector<Metric>& hv_axes);
std::string grid_csv(std::span<const GridRow> rows);
std::vector<GridRow> parse_grid_csv(std::string_view text);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);

}  // namespace mopd
