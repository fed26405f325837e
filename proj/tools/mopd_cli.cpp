#include <cstdio>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "mopd/pipeline.hpp"

namespace {

struct Common {
  std::string config;
  std::string out;
  bool force = false;
  bool serial = false;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "experiment config file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", c.out, "output root")->required();
  cmd->add_flag("--force", c.force, "recompute even if outputs are up to date");
  cmd->add_flag("--serial", c.serial, "use the single-threaded reference kernels");
  cmd->add_flag("-q,--quiet", c.quiet, "suppress progress lines");
}

mopd::Pipeline make_pipeline(const Common& c) {
  mopd::RunOptions opts;
  opts.force = c.force;
  opts.exec = c.serial ? mopd::Execution::serial : mopd::Execution::parallel;
  if (!c.quiet) opts.log = [](std::string_view line) { std::cerr << "mopd: " << line << "\n"; };
  return mopd::Pipeline(mopd::ExperimentConfig::load(c.config), c.out, opts);
}

int run_disagreement(const std::string& ledger_path, const std::string& csv_path) {
  const auto ledger = mopd::RunLedger::from_jsonl(mopd::read_text(ledger_path));
  const auto summary = mopd::summarize_disagreement(ledger);
  const auto csv = mopd::disagreement_csv(summary);
  if (csv_path.empty()) {
    std::cout << csv;
  } else {
    mopd::write_text(csv_path, csv);
  }
  std::cerr << "mopd: " << summary.steps.size() << " steps, all -z >= 0: "
            << (summary.all_non_negative ? "yes" : "no") << "\n";
  return summary.all_non_negative ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-objective on-policy distillation for toy protein policies"};
  app.set_version_flag("--version", std::string(mopd::kToolVersion));
  app.require_subcommand(1);

  Common common;
  std::vector<std::pair<CLI::App*, mopd::Stage>> stage_cmds;
  for (mopd::Stage s : mopd::kAllStages) {
    const std::string name(mopd::stage_name(s));
    auto* cmd = app.add_subcommand(name, "run the " + name + " stage");
    add_common(cmd, common);
    stage_cmds.emplace_back(cmd, s);
  }
  auto* all = app.add_subcommand("all", "run every stage in order");
  add_common(all, common);

  std::string ledger_path, csv_path;
  auto* dis = app.add_subcommand("disagreement", "summarize the -z series of a multi-teacher ledger");
  dis->add_option("--ledger", ledger_path, "ledger JSONL file")->required()->check(CLI::ExistingFile);
  dis->add_option("--csv", csv_path, "write the series here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "mopd: error: usage: " << e.what() << "\n";
    return 2;
  }

  try {
    if (dis->parsed()) return run_disagreement(ledger_path, csv_path);
    const mopd::OutputLock lock(common.out);
    auto pipeline = make_pipeline(common);
    if (all->parsed()) {
      pipeline.run_all();
      return 0;
    }
    for (const auto& [cmd, stage] : stage_cmds) {
      if (cmd->parsed()) pipeline.run(stage);
    }
    return 0;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (auto& ch : msg) {
      if (ch == '\n') ch = ' ';
    }
    std::cerr << "mopd: error: " << msg << "\n";
    return 1;
  }
}
