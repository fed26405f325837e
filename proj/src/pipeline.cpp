#include "mopd/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mopd/batch.hpp"
#include "mopd/distill.hpp"
#include "mopd/rng.hpp"

namespace mopd {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t x) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(x));
  return buf;
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, std::string_view text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write " + path.string());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!os) throw Error("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Config

namespace {

// Reads keys from one JSON object and rejects any it was not asked about.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw Error("config: '" + name_ + "' must be an object");
  }

  template <class T>
  T get(const std::string& key, T fallback) {
    used_.insert(key);
    if (!j_.contains(key)) return fallback;
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw Error("config: '" + name_ + "." + key + "' has the wrong type");
    }
  }

  const json* child(const std::string& key) {
    used_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!used_.count(key)) throw Error("config: unknown key '" + name_ + "." + key + "'");
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> used_;
};

Property property_from(const std::string& where, const std::string& name) {
  try {
    return parse_property(name);
  } catch (const Error&) {
    throw Error("config: '" + where + "' names unknown property '" + name + "'");
  }
}

}  // namespace

ExperimentConfig ExperimentConfig::parse(std::string_view text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(std::string("config: invalid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Section top(root, "config");
  c.seed = top.get<std::uint64_t>("seed", c.seed);

  if (const json* j = top.child("corpus")) {
    Section s(*j, "corpus");
    c.corpus.n_train = s.get("n_train", c.corpus.n_train);
    c.corpus.n_heldout = s.get("n_heldout", c.corpus.n_heldout);
    c.corpus.lengths.min = s.get("min_len", c.corpus.lengths.min);
    c.corpus.lengths.max = s.get("max_len", c.corpus.lengths.max);
    s.finish();
  }
  if (const json* j = top.child("pretrain")) {
    Section s(*j, "pretrain");
    c.pretrain.arch.context_width = s.get("context_width", c.pretrain.arch.context_width);
    c.pretrain.arch.embed_dim = s.get("embed_dim", c.pretrain.arch.embed_dim);
    c.pretrain.arch.hidden_dim = s.get("hidden_dim", c.pretrain.arch.hidden_dim);
    c.pretrain.init_scale = s.get("init_scale", c.pretrain.init_scale);
    c.pretrain.steps = s.get("steps", c.pretrain.steps);
    c.pretrain.batch = s.get("batch", c.pretrain.batch);
    c.pretrain.lr = s.get("lr", c.pretrain.lr);
    c.pretrain.eval_every = s.get("eval_every", c.pretrain.eval_every);
    c.pretrain.patience = s.get("patience", c.pretrain.patience);
    c.pretrain.min_rel_improvement = s.get("min_rel_improvement", c.pretrain.min_rel_improvement);
    s.finish();
  }
  if (const json* j = top.child("teachers")) {
    if (!j->is_array()) throw Error("config: 'teachers' must be an array");
    for (std::size_t i = 0; i < j->size(); ++i) {
      const std::string where = "teachers[" + std::to_string(i) + "]";
      Section s(j->at(i), where);
      TeacherSpec t;
      t.property = property_from(where + ".property", s.get<std::string>("property", ""));
      t.threshold = s.get("threshold", t.threshold);
      t.max_count = s.get("max_count", t.max_count);
      t.steps = s.get("steps", t.steps);
      t.batch = s.get("batch", t.batch);
      t.lr = s.get("lr", t.lr);
      s.finish();
      if (!(t.threshold >= 0.0 && t.threshold <= 1.0)) throw Error("config: " + where + ".threshold outside [0,1]");
      for (const auto& other : c.teachers) {
        if (other.property == t.property) throw Error("config: duplicate teacher for " + std::string(property_name(t.property)));
      }
      c.teachers.push_back(t);
    }
  }
  if (const json* j = top.child("opd")) {
    Section s(*j, "opd");
    if (const json* w = s.child("weights")) {
      if (!w->is_object()) throw Error("config: 'opd.weights' must be an object");
      for (const auto& [name, value] : w->items()) {
        if (!value.is_number()) throw Error("config: 'opd.weights." + name + "' must be a number");
        c.opd.weights.emplace_back(property_from("opd.weights", name), value.get<double>());
      }
    }
    c.opd.beta = s.get("beta", c.opd.beta);
    c.opd.steps = s.get("steps", c.opd.steps);
    c.opd.batch = s.get("batch", c.opd.batch);
    c.opd.lr = s.get("lr", c.opd.lr);
    c.opd.teacher_temperature = s.get("teacher_temperature", c.opd.teacher_temperature);
    c.opd.rollout_temperature = s.get("rollout_temperature", c.opd.rollout_temperature);
    c.opd.top_k = s.get("top_k", c.opd.top_k);
    c.opd.top_p = s.get("top_p", c.opd.top_p);
    c.opd.eval_every = s.get("eval_every", c.opd.eval_every);
    c.opd.single_property = property_from("opd.single_property",
                                          s.get<std::string>("single_property", std::string(property_name(c.opd.single_property))));
    s.finish();
  }
  if (const json* j = top.child("pg_baseline")) {
    Section s(*j, "pg_baseline");
    c.pg_baseline.property = property_from("pg_baseline.property",
                                           s.get<std::string>("property", std::string(property_name(c.pg_baseline.property))));
    c.pg_baseline.steps = s.get("steps", c.pg_baseline.steps);
    c.pg_baseline.batch = s.get("batch", c.pg_baseline.batch);
    c.pg_baseline.lr = s.get("lr", c.pg_baseline.lr);
    c.pg_baseline.target_fraction = s.get("target_fraction", c.pg_baseline.target_fraction);
    c.pg_baseline.stop_at_target = s.get("stop_at_target", c.pg_baseline.stop_at_target);
    c.pg_baseline.eval_every = s.get("eval_every", c.pg_baseline.eval_every);
    s.finish();
  }
  if (const json* j = top.child("eval")) {
    Section s(*j, "eval");
    c.eval.n_samples = s.get("n_samples", c.eval.n_samples);
    c.eval.temperature = s.get("temperature", c.eval.temperature);
    c.eval.max_len = s.get("max_len", c.eval.max_len);
    c.eval.novelty_threshold = s.get("novelty_threshold", c.eval.novelty_threshold);
    c.eval.snapshot_samples = s.get("snapshot_samples", c.eval.snapshot_samples);
    if (const json* axes = s.child("hv_axes")) {
      if (!axes->is_array()) throw Error("config: 'eval.hv_axes' must be an array");
      c.eval.hv_axes.clear();
      for (const auto& a : *axes) c.eval.hv_axes.push_back(parse_metric(a.get<std::string>()));
    }
    s.finish();
  }
  top.finish();

  // Cross-field checks.
  if (c.corpus.n_train == 0 || c.corpus.n_heldout == 0) throw Error("config: corpus splits must be non-empty");
  if (c.corpus.lengths.min == 0 || c.corpus.lengths.min > c.corpus.lengths.max) {
    throw Error("config: invalid corpus length range");
  }
  if (c.corpus.lengths.max > c.eval.max_len) throw Error("config: corpus max_len exceeds eval.max_len");
  if (c.teachers.empty()) throw Error("config: at least one teacher is required");
  if (c.opd.weights.empty()) throw Error("config: opd.weights is required");
  std::vector<double> w;
  for (const auto& [p, x] : c.opd.weights) {
    w.push_back(x);
    c.teacher_for(p);
  }
  try {
    check_simplex(w);
  } catch (const Error& e) {
    throw Error(std::string("config: opd.weights: ") + e.what());
  }
  c.teacher_for(c.opd.single_property);
  c.teacher_for(c.pg_baseline.property);
  if (c.eval.hv_axes.empty() || c.eval.hv_axes.size() > 6) throw Error("config: eval.hv_axes needs 1 to 6 metrics");
  if (c.eval.n_samples == 0) throw Error("config: eval.n_samples must be positive");
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) { return parse(read_text(path)); }

const TeacherSpec& ExperimentConfig::teacher_for(Property p) const {
  for (const auto& t : teachers) {
    if (t.property == p) return t;
  }
  throw Error("config: no teacher configured for property " + std::string(property_name(p)));
}

namespace {

json canonical_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["corpus"] = {{"n_train", c.corpus.n_train},
                 {"n_heldout", c.corpus.n_heldout},
                 {"min_len", c.corpus.lengths.min},
                 {"max_len", c.corpus.lengths.max}};
  j["pretrain"] = {{"context_width", c.pretrain.arch.context_width},
                   {"embed_dim", c.pretrain.arch.embed_dim},
                   {"hidden_dim", c.pretrain.arch.hidden_dim},
                   {"init_scale", c.pretrain.init_scale},
                   {"steps", c.pretrain.steps},
                   {"batch", c.pretrain.batch},
                   {"lr", c.pretrain.lr},
                   {"eval_every", c.pretrain.eval_every},
                   {"patience", c.pretrain.patience},
                   {"min_rel_improvement", c.pretrain.min_rel_improvement}};
  j["teachers"] = json::array();
  for (const auto& t : c.teachers) {
    j["teachers"].push_back({{"property", property_name(t.property)},
                             {"threshold", t.threshold},
                             {"max_count", t.max_count},
                             {"steps", t.steps},
                             {"batch", t.batch},
                             {"lr", t.lr}});
  }
  json w;
  for (const auto& [p, x] : c.opd.weights) w[std::string(property_name(p))] = x;
  j["opd"] = {{"weights", w},
              {"beta", c.opd.beta},
              {"steps", c.opd.steps},
              {"batch", c.opd.batch},
              {"lr", c.opd.lr},
              {"teacher_temperature", c.opd.teacher_temperature},
              {"rollout_temperature", c.opd.rollout_temperature},
              {"top_k", c.opd.top_k},
              {"top_p", c.opd.top_p},
              {"eval_every", c.opd.eval_every},
              {"single_property", property_name(c.opd.single_property)}};
  j["pg_baseline"] = {{"property", property_name(c.pg_baseline.property)},
                      {"steps", c.pg_baseline.steps},
                      {"batch", c.pg_baseline.batch},
                      {"lr", c.pg_baseline.lr},
                      {"target_fraction", c.pg_baseline.target_fraction},
                      {"stop_at_target", c.pg_baseline.stop_at_target},
                      {"eval_every", c.pg_baseline.eval_every}};
  json axes = json::array();
  for (auto m : c.eval.hv_axes) axes.push_back(metric_name(m));
  j["eval"] = {{"n_samples", c.eval.n_samples},
               {"temperature", c.eval.temperature},
               {"max_len", c.eval.max_len},
               {"novelty_threshold", c.eval.novelty_threshold},
               {"hv_axes", axes},
               {"snapshot_samples", c.eval.snapshot_samples}};
  return j;
}

}  // namespace

std::string ExperimentConfig::canonical() const { return canonical_json(*this).dump(); }
std::uint64_t ExperimentConfig::hash() const { return fnv1a64(canonical()); }

// ---------------------------------------------------------------------------
// Manifest

std::string_view stage_name(Stage s) {
  switch (s) {
    case Stage::corpus: return "corpus";
    case Stage::pretrain: return "pretrain";
    case Stage::teachers: return "teachers";
    case Stage::distill: return "distill";
    case Stage::pg: return "pg";
    case Stage::eval: return "eval";
    case Stage::report: return "report";
  }
  return "?";
}

Stage parse_stage(std::string_view name) {
  for (Stage s : kAllStages) {
    if (stage_name(s) == name) return s;
  }
  throw Error("unknown stage '" + std::string(name) + "'");
}

const ManifestStage* RunManifest::find(Stage s) const {
  for (const auto& st : stages) {
    if (st.stage == s) return &st;
  }
  return nullptr;
}

std::string RunManifest::to_json() const {
  json j;
  j["tool"] = "mopd";
  j["tool_version"] = tool_version;
  j["config_hash"] = config_hash;
  json st = json::array();
  for (const auto& s : stages) {
    json e;
    e["stage"] = stage_name(s.stage);
    e["fingerprint"] = s.fingerprint;
    json files = json::array();
    for (const auto& f : s.files) {
      json fj;
      fj["path"] = f.path;
      if (f.hash) {
        fj["bytes"] = f.bytes;
        fj["fnv1a64"] = hex64(*f.hash);
      } else {
        fj["deterministic"] = false;
      }
      files.push_back(fj);
    }
    e["files"] = files;
    st.push_back(e);
  }
  j["stages"] = st;
  return j.dump(2) + "\n";
}

RunManifest RunManifest::from_json(std::string_view text) {
  const auto j = json::parse(text);
  RunManifest m;
  m.tool_version = j.at("tool_version").get<std::string>();
  m.config_hash = j.at("config_hash").get<std::string>();
  for (const auto& e : j.at("stages")) {
    ManifestStage s{parse_stage(e.at("stage").get<std::string>()), e.at("fingerprint").get<std::string>(), {}};
    for (const auto& fj : e.at("files")) {
      ManifestFile f;
      f.path = fj.at("path").get<std::string>();
      if (fj.contains("fnv1a64")) {
        f.bytes = fj.at("bytes").get<std::uint64_t>();
        f.hash = std::stoull(fj.at("fnv1a64").get<std::string>(), nullptr, 16);
      }
      s.files.push_back(std::move(f));
    }
    m.stages.push_back(std::move(s));
  }
  return m;
}

OutputLock::OutputLock(const fs::path& root) : path_(root / ".mopd.lock") {
  fs::create_directories(root);
  std::FILE* f = std::fopen(path_.c_str(), "wx");
  if (!f) throw Error("output root " + root.string() + " is locked by another invocation (" + path_.string() + ")");
  std::fclose(f);
}

OutputLock::~OutputLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

std::vector<Stage> upstream_of(Stage s) {
  switch (s) {
    case Stage::corpus: return {};
    case Stage::pretrain: return {Stage::corpus};
    case Stage::teachers: return {Stage::corpus, Stage::pretrain};
    case Stage::distill: return {Stage::corpus, Stage::pretrain, Stage::teachers};
    case Stage::pg: return {Stage::pretrain, Stage::teachers};
    case Stage::eval: return {Stage::corpus, Stage::pretrain, Stage::teachers, Stage::distill, Stage::pg};
    case Stage::report: return {Stage::distill, Stage::pg, Stage::eval};
  }
  return {};
}

std::vector<std::string> config_sections(Stage s) {
  switch (s) {
    case Stage::corpus: return {"seed", "corpus"};
    case Stage::pretrain: return {"seed", "pretrain"};
    case Stage::teachers: return {"seed", "teachers", "opd", "eval"};
    case Stage::distill: return {"seed", "opd", "eval"};
    case Stage::pg: return {"seed", "pg_baseline", "opd", "eval"};
    case Stage::eval: return {"seed", "eval", "opd"};
    case Stage::report: return {"seed", "eval", "opd", "pg_baseline"};
  }
  return {};
}

std::uint64_t derived_seed(std::uint64_t seed, std::string_view purpose) {
  return splitmix64(seed ^ fnv1a64(purpose));
}

std::string teacher_method(Property p) { return "teacher_" + std::string(property_name(p)); }

}  // namespace

Pipeline::Pipeline(ExperimentConfig config, fs::path root, RunOptions options)
    : config_(std::move(config)), root_(std::move(root)), options_(std::move(options)) {
  manifest_.config_hash = hex64(config_.hash());
  const auto mpath = root_ / "manifest.json";
  if (fs::exists(mpath)) {
    auto existing = RunManifest::from_json(read_text(mpath));
    if (existing.config_hash == manifest_.config_hash) {
      manifest_ = std::move(existing);
    } else {
      // Keep stage records; fingerprints decide which ones are still valid.
      manifest_.stages = std::move(existing.stages);
    }
  }
}

void Pipeline::log(std::string_view line) const {
  if (options_.log) options_.log(line);
}

std::vector<std::string> Pipeline::methods() const {
  std::vector<std::string> m = {"base"};
  for (const auto& t : config_.teachers) m.push_back(teacher_method(t.property));
  m.push_back("pooled_sft");
  m.push_back("opd_single_" + std::string(property_name(config_.opd.single_property)));
  m.push_back("opd_multi");
  m.push_back("pg_" + std::string(property_name(config_.pg_baseline.property)));
  return m;
}

std::string Pipeline::fingerprint(Stage s) const {
  const auto cj = json::parse(config_.canonical());
  json f;
  f["stage"] = stage_name(s);
  f["tool_version"] = kToolVersion;
  for (const auto& key : config_sections(s)) f["config"][key] = cj.at(key);
  for (Stage up : upstream_of(s)) {
    const auto* rec = manifest_.find(up);
    if (!rec) continue;
    for (const auto& file : rec->files) {
      if (file.hash) f["inputs"][file.path] = hex64(*file.hash);
    }
  }
  return hex64(fnv1a64(f.dump()));
}

void Pipeline::require(Stage upstream, Stage by) const {
  const auto* rec = manifest_.find(upstream);
  if (!rec) {
    throw Error("stage '" + std::string(stage_name(by)) + "' needs stage '" + std::string(stage_name(upstream)) +
                "', which has not been run");
  }
  for (const auto& f : rec->files) {
    if (!fs::exists(path(f.path))) {
      throw Error("stage '" + std::string(stage_name(by)) + "' needs " + f.path + " from stage '" +
                  std::string(stage_name(upstream)) + "', which is missing");
    }
  }
}

void Pipeline::record(Stage s, const std::string& fp, const std::vector<std::pair<std::string, bool>>& files) {
  ManifestStage st{s, fp, {}};
  for (const auto& [rel, deterministic] : files) {
    const auto full = path(rel);
    if (!fs::exists(full)) throw Error("stage wrote no file at " + rel);
    ManifestFile mf;
    mf.path = rel;
    if (deterministic) {
      const auto text = read_text(full);
      mf.bytes = text.size();
      mf.hash = fnv1a64(text);
    }
    st.files.push_back(std::move(mf));
  }
  std::erase_if(manifest_.stages, [s](const ManifestStage& m) { return m.stage == s; });
  manifest_.stages.push_back(std::move(st));
  std::sort(manifest_.stages.begin(), manifest_.stages.end(),
            [](const ManifestStage& a, const ManifestStage& b) { return a.stage < b.stage; });
  manifest_.config_hash = hex64(config_.hash());
  save_manifest();
}

void Pipeline::save_manifest() const { write_text(root_ / "manifest.json", manifest_.to_json()); }

StageOutcome Pipeline::run(Stage stage) {
  for (Stage up : upstream_of(stage)) require(up, stage);
  const auto fp = fingerprint(stage);
  const auto* existing = manifest_.find(stage);
  if (existing && existing->fingerprint == fp && !options_.force) {
    const bool intact = std::all_of(existing->files.begin(), existing->files.end(), [&](const ManifestFile& f) {
      if (!fs::exists(path(f.path))) return false;
      return !f.hash || fnv1a64(read_text(path(f.path))) == *f.hash;
    });
    if (intact) {
      log(std::string(stage_name(stage)) + ": up to date");
      return StageOutcome::up_to_date;
    }
  }
  if (stage == Stage::corpus && !options_.force && fs::exists(path("corpus/train.fasta"))) {
    throw Error("corpus output already exists under " + root_.string() + " (use --force to overwrite)");
  }
  log(std::string(stage_name(stage)) + ": running");
  std::vector<std::pair<std::string, bool>> files;
  switch (stage) {
    case Stage::corpus: files = stage_corpus(); break;
    case Stage::pretrain: files = stage_pretrain(); break;
    case Stage::teachers: files = stage_teachers(); break;
    case Stage::distill: files = stage_distill(); break;
    case Stage::pg: files = stage_pg(); break;
    case Stage::eval: files = stage_eval(); break;
    case Stage::report: files = stage_report(); break;
  }
  record(stage, fp, files);
  log(std::string(stage_name(stage)) + ": done");
  return StageOutcome::ran;
}

void Pipeline::run_all() {
  for (Stage s : kAllStages) run(s);
}

TrainConfig Pipeline::train_config(std::uint64_t seed) const {
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.beta = config_.opd.beta;
  cfg.rollout_temperature = config_.opd.rollout_temperature;
  cfg.top_k = config_.opd.top_k;
  cfg.top_p = config_.opd.top_p;
  cfg.max_len = config_.eval.max_len;
  cfg.eval_samples = config_.eval.snapshot_samples;
  cfg.eval_temperature = config_.eval.temperature;
  cfg.exec = options_.exec;
  return cfg;
}

// ---------------------------------------------------------------------------
// Stages

using FileList = std::vector<std::pair<std::string, bool>>;

namespace {

void write_ledger(const fs::path& root, const std::string& name, const RunLedger& ledger, FileList& files) {
  write_text(root / "ledgers" / (name + ".jsonl"), ledger.to_jsonl());
  write_text(root / "ledgers" / (name + ".timing.jsonl"), ledger.timing_jsonl());
  files.emplace_back("ledgers/" + name + ".jsonl", true);
  files.emplace_back("ledgers/" + name + ".timing.jsonl", false);
}

void write_model(const fs::path& root, const std::string& name, const PolicyParams& p, FileList& files) {
  fs::create_directories(root / "models");
  save_checkpoint(root / "models" / (name + ".ckpt"), p);
  files.emplace_back("models/" + name + ".ckpt", true);
}

}  // namespace

FileList Pipeline::stage_corpus() {
  const auto& cc = config_.corpus;
  auto full = generate_natural_corpus(derived_seed(config_.seed, "corpus"), cc.n_train + cc.n_heldout, cc.lengths);
  Corpus train(full.begin(), full.begin() + static_cast<std::ptrdiff_t>(cc.n_train));
  Corpus heldout(full.begin() + static_cast<std::ptrdiff_t>(cc.n_train), full.end());
  fs::create_directories(path("corpus"));
  write_fasta(path("corpus/train.fasta"), train);
  write_fasta(path("corpus/heldout.fasta"), heldout);

  json survivors = json::array();
  for (const auto& t : config_.teachers) {
    const auto n = count_survivors(train, {t.property, t.threshold});
    survivors.push_back({{"property", property_name(t.property)},
                         {"threshold", t.threshold},
                         {"survivors", n},
                         {"scan_cost", preference_scan_cost(train, {t.property, t.threshold}, t.max_count)}});
    log("corpus: " + std::string(property_name(t.property)) + " >= " + format_double(t.threshold) + ": " +
        std::to_string(n) + " survivors");
  }
  write_text(path("corpus/survivors.json"), survivors.dump(2) + "\n");
  return {{"corpus/train.fasta", true}, {"corpus/heldout.fasta", true}, {"corpus/survivors.json", true}};
}

FileList Pipeline::stage_pretrain() {
  const auto train = sequences_of(read_fasta(path("corpus/train.fasta")));
  const auto heldout = sequences_of(read_fasta(path("corpus/heldout.fasta")));
  const auto& pc = config_.pretrain;
  const auto init = PolicyParams::random(pc.arch, derived_seed(config_.seed, "init"), pc.init_scale);
  auto cfg = train_config(derived_seed(config_.seed, "pretrain"));
  cfg.steps = pc.steps;
  cfg.batch_size = pc.batch;
  cfg.lr = pc.lr;
  cfg.eval_every = pc.eval_every;
  cfg.eval_samples = 0;
  RunLedger ledger;
  const auto base = pretrain_base(init, train, heldout, cfg, {pc.patience, pc.min_rel_improvement}, &ledger);
  FileList files;
  write_model(root_, "base", base, files);
  write_ledger(root_, "pretrain", ledger, files);
  if (!ledger.evals.empty() && ledger.evals.back().heldout_ppl) {
    log("pretrain: held-out ppl " + format_double(*ledger.evals.back().heldout_ppl) + " after " +
        std::to_string(ledger.evals.back().step) + " steps");
  }
  return files;
}

FileList Pipeline::stage_teachers() {
  const auto train = read_fasta(path("corpus/train.fasta"));
  const auto base = load_checkpoint(path("models/base.ckpt"));
  FileList files;
  std::vector<Corpus> datasets;
  std::size_t pooled_steps = 0;
  std::uint64_t pooled_queries = 0;
  for (const auto& t : config_.teachers) {
    const std::string name(property_name(t.property));
    auto dataset = build_preference_dataset(train, {t.property, t.threshold}, t.max_count);
    write_fasta(path("datasets/" + name + ".fasta"), dataset);
    files.emplace_back("datasets/" + name + ".fasta", true);
    auto cfg = train_config(derived_seed(config_.seed, "teacher_" + name));
    cfg.steps = t.steps;
    cfg.batch_size = t.batch;
    cfg.lr = t.lr;
    cfg.eval_every = config_.opd.eval_every;
    RunLedger ledger;
    ledger.run = teacher_method(t.property);
    const auto queries = preference_scan_cost(train, {t.property, t.threshold}, t.max_count);
    pooled_queries += queries;
    const auto teacher = train_teacher_sft(base, sequences_of(dataset), cfg, queries, &ledger);
    write_model(root_, teacher_method(t.property), teacher, files);
    write_ledger(root_, teacher_method(t.property), ledger, files);
    log("teachers: " + name + " dataset " + std::to_string(dataset.size()) + " sequences");
    datasets.push_back(std::move(dataset));
    pooled_steps = std::max(pooled_steps, t.steps);
  }

  // Pooled comparator: one SFT run on the union of every preference dataset.
  const auto pooled = pooled_dataset(datasets);
  write_fasta(path("datasets/pooled.fasta"), pooled);
  files.emplace_back("datasets/pooled.fasta", true);
  auto cfg = train_config(derived_seed(config_.seed, "pooled_sft"));
  cfg.steps = pooled_steps;
  cfg.batch_size = config_.teachers.front().batch;
  cfg.lr = config_.teachers.front().lr;
  cfg.eval_every = config_.opd.eval_every;
  RunLedger ledger;
  ledger.run = "pooled_sft";
  const auto model =
      train_teacher_sft(base, sequences_of(pooled), cfg, pooled_queries, &ledger);
  write_model(root_, "pooled_sft", model, files);
  write_ledger(root_, "pooled_sft", ledger, files);
  return files;
}

FileList Pipeline::stage_distill() {
  const auto train = read_fasta(path("corpus/train.fasta"));
  auto construction_cost = [&](Property p) -> std::uint64_t {
    const auto& t = config_.teacher_for(p);
    return preference_scan_cost(train, {t.property, t.threshold}, t.max_count);
  };
  const auto base = load_checkpoint(path("models/base.ckpt"));
  FileList files;
  auto opd_cfg = [&](std::string_view name) {
    auto cfg = train_config(derived_seed(config_.seed, name));
    cfg.steps = config_.opd.steps;
    cfg.batch_size = config_.opd.batch;
    cfg.lr = config_.opd.lr;
    cfg.eval_every = config_.opd.eval_every;
    return cfg;
  };

  {
    std::vector<PolicyParams> teachers;
    std::vector<double> weights;
    std::uint64_t queries = 0;
    for (const auto& [p, w] : config_.opd.weights) {
      queries += construction_cost(p);
      teachers.push_back(load_checkpoint(path("models/" + teacher_method(p) + ".ckpt")));
      weights.push_back(w);
    }
    const TeacherEnsemble ensemble(std::move(teachers), std::move(weights), config_.opd.teacher_temperature);
    RunLedger ledger;
    ledger.run = "opd_multi";
    std::vector<DisagreementRow> trace;
    const auto model = train_opd(base, ensemble, opd_cfg("opd_multi"), queries, &ledger, &trace);
    write_model(root_, "opd_multi", model, files);
    write_ledger(root_, "opd_multi", ledger, files);
    write_text(path("traces/opd_multi.disagreement.jsonl"), disagreement_jsonl(trace));
    files.emplace_back("traces/opd_multi.disagreement.jsonl", true);
  }
  {
    const auto p = config_.opd.single_property;
    const std::string name = "opd_single_" + std::string(property_name(p));
    const TeacherEnsemble ensemble({load_checkpoint(path("models/" + teacher_method(p) + ".ckpt"))}, {1.0},
                                   config_.opd.teacher_temperature);
    RunLedger ledger;
    ledger.run = name;
    const auto model = train_opd(base, ensemble, opd_cfg(name), construction_cost(p), &ledger);
    write_model(root_, name, model, files);
    write_ledger(root_, name, ledger, files);
  }
  return files;
}

FileList Pipeline::stage_pg() {
  const auto& pc = config_.pg_baseline;
  const std::string prop(property_name(pc.property));
  const auto base = load_checkpoint(path("models/base.ckpt"));
  const auto teacher = load_checkpoint(path("models/" + teacher_method(pc.property) + ".ckpt"));

  auto cfg = train_config(derived_seed(config_.seed, "pg_" + prop));
  cfg.steps = pc.steps;
  cfg.batch_size = pc.batch;
  cfg.lr = pc.lr;
  cfg.eval_every = pc.eval_every;

  // Shared mid-range target between the base model and the property teacher.
  std::uint64_t eval_queries = 0;
  const double base_score = evaluate_policy(base, cfg, &eval_queries).get(pc.property);
  const double teacher_score = evaluate_policy(teacher, cfg, &eval_queries).get(pc.property);
  const double target = base_score + pc.target_fraction * (teacher_score - base_score);
  json tj;
  tj["property"] = prop;
  tj["base_score"] = base_score;
  tj["teacher_score"] = teacher_score;
  tj["target_fraction"] = pc.target_fraction;
  tj["target"] = target;
  write_text(path("reports/pg_target.json"), tj.dump(2) + "\n");

  CountingOracle oracle(pc.property);
  PgOptions opts;
  if (pc.stop_at_target) opts.stop_at_score = target;
  RunLedger ledger;
  ledger.run = "pg_" + prop;
  const auto model = train_pg_baseline(base, oracle, cfg, opts, &ledger);
  FileList files{{"reports/pg_target.json", true}};
  write_model(root_, "pg_" + prop, model, files);
  write_ledger(root_, "pg_" + prop, ledger, files);
  log("pg: " + std::to_string(oracle.queries()) + " oracle queries, target " + format_double(target));
  return files;
}

FileList Pipeline::stage_eval() {
  const auto natural = sequences_of(read_fasta(path("corpus/train.fasta")));
  const auto base = load_checkpoint(path("models/base.ckpt"));
  const auto& ec = config_.eval;
  const SamplerConfig sampler{ec.temperature, config_.opd.top_k, config_.opd.top_p, ec.max_len,
                              derived_seed(config_.seed, "eval")};
  FileList files;
  for (const auto& method : methods()) {
    const auto model = load_checkpoint(path("models/" + method + ".ckpt"));
    std::vector<Sequence> training_set = natural;
    if (method.rfind("teacher_", 0) == 0) {
      training_set = sequences_of(read_fasta(path("datasets/" + method.substr(8) + ".fasta")));
    } else if (method == "pooled_sft") {
      training_set = sequences_of(read_fasta(path("datasets/pooled.fasta")));
    }
    const auto trajs = sample_batch(model, {}, sampler, 0, ec.n_samples, options_.exec);
    Corpus samples;
    std::vector<Sequence> seqs;
    for (std::size_t i = 0; i < trajs.size(); ++i) {
      char id[96];
      std::snprintf(id, sizeof id, "%s_%04zu", method.c_str(), i);
      samples.push_back({id, trajs[i].body, ScoreSet::of(trajs[i].body)});
      seqs.push_back(trajs[i].body);
    }
    const auto ppl = perplexity_batch(base, seqs, options_.exec);
    const auto nov_u = novelty_batch(seqs, natural, options_.exec);
    const auto nov_t = novelty_batch(seqs, training_set, options_.exec);
    std::vector<MetricRecord> records;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto s = *samples[i].scores;
      MetricRecord r{samples[i].id, ppl[i], nov_u[i], nov_t[i], s.sol, s.thermo, s.fold};
      r.validate();
      records.push_back(std::move(r));
    }
    write_fasta(path("samples/" + method + ".fasta"), samples);
    write_text(path("metrics/" + method + ".jsonl"), metric_records_jsonl(records));
    write_text(path("metrics/" + method + ".csv"), metric_records_csv(records));
    files.emplace_back("samples/" + method + ".fasta", true);
    files.emplace_back("metrics/" + method + ".jsonl", true);
    files.emplace_back("metrics/" + method + ".csv", true);
    log("eval: " + method);
  }
  return files;
}

FileList Pipeline::stage_report() {
  std::vector<MethodRecords> methods;
  for (const auto& m : this->methods()) {
    methods.push_back({m, parse_metric_records_csv(read_text(path("metrics/" + m + ".csv")))});
  }
  const auto grid = comparison_grid(methods, config_.eval.hv_axes);
  write_text(path("reports/table.csv"), grid_csv(grid));

  const auto candidates = front_candidates(methods, config_.eval.novelty_threshold);
  const auto fronts = pareto_front_report(methods, config_.eval.novelty_threshold);
  write_text(path("reports/front_candidates.csv"), front_points_csv(candidates));
  write_text(path("reports/fronts.csv"), front_points_csv(fronts.points));

  const auto prop = config_.pg_baseline.property;
  const auto target = json::parse(read_text(path("reports/pg_target.json"))).at("target").get<double>();
  const auto opd = RunLedger::from_jsonl(
      read_text(path("ledgers/opd_single_" + std::string(property_name(config_.opd.single_property)) + ".jsonl")));
  const auto pg = RunLedger::from_jsonl(read_text(path("ledgers/pg_" + std::string(property_name(prop)) + ".jsonl")));
  const auto eff = efficiency_compare(opd, pg, prop, target);
  write_text(path("reports/efficiency.json"), efficiency_json(eff));

  const auto multi = RunLedger::from_jsonl(read_text(path("ledgers/opd_multi.jsonl")));
  write_text(path("reports/disagreement.csv"), disagreement_csv(summarize_disagreement(multi)));

  json summary;
  summary["empty_fronts"] = fronts.empty_fronts;
  std::vector<MetricRecord> universe;
  for (const auto& m : methods) universe.insert(universe.end(), m.records.begin(), m.records.end());
  summary["normalization_warnings"] = Normalizer(universe, config_.eval.hv_axes).warnings();
  write_text(path("reports/summary.json"), summary.dump(2) + "\n");

  return {{"reports/table.csv", true},        {"reports/front_candidates.csv", true},
          {"reports/fronts.csv", true},       {"reports/efficiency.json", true},
          {"reports/disagreement.csv", true}, {"reports/summary.json", true}};
}

// ---------------------------------------------------------------------------

DisagreementSummary summarize_disagreement(const RunLedger& ledger) {
  if (ledger.num_teachers < 2) {
    throw Error("ledger '" + ledger.run + "' comes from a single-teacher run; disagreement needs M >= 2 teachers");
  }
  DisagreementSummary s;
  for (const auto& r : ledger.records) {
    s.steps.push_back(r.step);
    s.mean_neg_z.push_back(r.mean_neg_z);
    s.max_neg_z.push_back(r.max_neg_z);
    if (r.mean_neg_z < -1e-12 || r.max_neg_z < -1e-12) s.all_non_negative = false;
  }
  return s;
}

std::string disagreement_csv(const DisagreementSummary& s) {
  std::string out = "step,mean_neg_z,max_neg_z\n";
  for (std::size_t i = 0; i < s.steps.size(); ++i) {
    out += std::to_string(s.steps[i]) + "," + format_double(s.mean_neg_z[i]) + "," + format_double(s.max_neg_z[i]) +
           "\n";
  }
  return out;
}

std::vector<GridRow> comparison_grid(std::span<const MethodRecords> methods, const std::vector<Metric>& hv_axes) {
  std::vector<MetricRecord> universe;
  for (const auto& m : methods) universe.insert(universe.end(), m.records.begin(), m.records.end());
  const Normalizer norm(universe, hv_axes);
  std::vector<GridRow> rows;
  for (const auto& m : methods) {
    if (m.records.empty()) throw Error("method " + m.method + " has no records");
    GridRow row;
    row.method = m.method;
    std::vector<ParetoPoint> pts;
    for (const auto& r : m.records) {
      row.ppl += r.ppl;
      row.novelty_u += r.novelty_u;
      row.novelty_t += r.novelty_t;
      row.sol += r.sol;
      row.thermo += r.thermo;
      row.fold += r.fold;
      pts.push_back(norm.apply(r));
    }
    const double n = static_cast<double>(m.records.size());
    row.ppl /= n;
    row.novelty_u /= n;
    row.novelty_t /= n;
    row.sol /= n;
    row.thermo /= n;
    row.fold /= n;
    row.hv = hypervolume(pts);
    rows.push_back(row);
  }
  return rows;
}

std::string grid_csv(std::span<const GridRow> rows) {
  std::string out = "method,ppl,novelty_u,novelty_t,sol,thermo,fold,hv\n";
  for (const auto& r : rows) {
    out += r.method;
    for (double x : {r.ppl, r.novelty_u, r.novelty_t, r.sol, r.thermo, r.fold, r.hv}) out += "," + format_double(x);
    out += "\n";
  }
  return out;
}

std::vector<GridRow> parse_grid_csv(std::string_view text) {
  std::vector<GridRow> rows;
  std::istringstream in{std::string(text)};
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw Error("grid csv: expected 8 fields");
    rows.push_back({f[0], std::stod(f[1]), std::stod(f[2]), std::stod(f[3]), std::stod(f[4]), std::stod(f[5]),
                    std::stod(f[6]), std::stod(f[7])});
  }
  return rows;
}

}  // namespace mopd
