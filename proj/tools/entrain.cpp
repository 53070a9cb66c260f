#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "entrain/pipeline.hpp"
#include "entrain/run_config.hpp"

namespace {

using entrain::FlatConfig;

struct Flags {
  std::string config;
  std::map<std::string, std::string> raw;  // config key -> flag text
  std::string out;
  std::string stages = "measure,discover,ablate,capability,stability,report";
  entrain::ReportOptions report;
};

// Adds `--name` as an override of config key `key`.
void override_flag(CLI::App* app, Flags& f, const std::string& name, const std::string& key, const std::string& help) {
  app->add_option_function<std::string>(name, [&f, key](const std::string& v) { f.raw[key] = v; }, help);
}

void common_flags(CLI::App* app, Flags& f) {
  app->add_option("--config", f.config, "TOML or JSON run config")->check(CLI::ExistingFile);
  override_flag(app, f, "--model", "model", "model id: ref:LxH[:seedN][:copy=l.h|:nocopy][:gain=g], gpt2:<dir>, or a path");
  override_flag(app, f, "--relations", "relations", "relation file, directory or glob (comma separated)");
  override_flag(app, f, "--seed", "seed", "root seed");
  override_flag(app, f, "--data-dir", "data_dir", "bundled data directory");
  app->add_option("--out", f.out, "output directory, or output file for single-relation verbs (*.json)");
}

void relation_flag(CLI::App* app, Flags& f) {
  override_flag(app, f, "--relation", "relation_ids", "relation id(s), comma separated");
}

void discovery_flags(CLI::App* app, Flags& f) {
  override_flag(app, f, "--epochs", "discovery.epochs", "training epochs");
  override_flag(app, f, "--lambda", "discovery.lambda", "sparsity weight");
  override_flag(app, f, "--tau", "discovery.tau", "Gumbel-sigmoid temperature");
  override_flag(app, f, "--lr", "discovery.lr", "learning rate");
  override_flag(app, f, "--max-heads", "discovery.max_removed", "cap on the number of removed heads");
}

entrain::RunConfig build_config(const Flags& f, std::string* out_file) {
  entrain::RunConfig cfg;
  if (!f.config.empty()) entrain::apply_config(cfg, entrain::read_flat_config(f.config));
  FlatConfig overrides;
  for (const auto& [k, v] : f.raw) overrides[k] = {v};
  entrain::apply_config(cfg, overrides);
  if (!f.out.empty()) {
    if (f.out.size() > 5 && f.out.ends_with(".json") && out_file) {
      *out_file = f.out;
    } else {
      cfg.output_dir = f.out;
    }
  }
  entrain::validate_config(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contextual entrainment measurement and entrainment-head discovery"};
  app.require_subcommand(1);
  Flags f;

  auto* measure = app.add_subcommand("measure", "measure entrainment across context settings");
  common_flags(measure, f);
  relation_flag(measure, f);
  override_flag(measure, f, "--settings", "settings", "related,irrelevant,random,counterfactual,none");
  override_flag(measure, f, "--cap", "cap", "maximum instances per relation and setting");

  auto* discover = app.add_subcommand("discover", "learn head gates and select entrainment heads");
  common_flags(discover, f);
  relation_flag(discover, f);
  discovery_flags(discover, f);

  auto* ablate = app.add_subcommand("ablate", "evaluate a head set on the test split");
  common_flags(ablate, f);
  relation_flag(ablate, f);
  override_flag(ablate, f, "--heads", "heads", "heads.json from discover");

  auto* capability = app.add_subcommand("capability", "few-shot capability tasks with and without a head set");
  common_flags(capability, f);
  relation_flag(capability, f);
  override_flag(capability, f, "--heads", "heads", "heads.json from discover");
  override_flag(capability, f, "--tasks", "capability.tasks", "arithmetic,spelling,translation");
  override_flag(capability, f, "--shots", "capability.shots", "shot counts, e.g. 1,2,5");
  override_flag(capability, f, "--count", "capability.count", "items per task");

  auto* stability = app.add_subcommand("stability", "repeat discovery across seeds and compare head sets");
  common_flags(stability, f);
  relation_flag(stability, f);
  discovery_flags(stability, f);
  override_flag(stability, f, "--runs", "stability.runs", "number of seeds");

  auto* report = app.add_subcommand("report", "aggregate tables from results.jsonl");
  common_flags(report, f);
  report->add_option("--format", f.report.format, "csv or md")->check(CLI::IsMember({"csv", "md"}));
  report->add_flag("--plot-data", f.report.plot_data, "also write plot_data.json");

  auto* run = app.add_subcommand("run", "run several stages in order");
  common_flags(run, f);
  relation_flag(run, f);
  discovery_flags(run, f);
  override_flag(run, f, "--heads", "heads", "heads.json for ablate/capability");
  run->add_option("--stages", f.stages, "comma separated stage list");
  run->add_option("--format", f.report.format, "report format, csv or md")->check(CLI::IsMember({"csv", "md"}));
  run->add_flag("--plot-data", f.report.plot_data, "also write plot_data.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    std::string out_file;
    entrain::Pipeline p(build_config(f, &out_file));
    if (measure->parsed()) {
      p.measure();
    } else if (discover->parsed()) {
      p.discover(out_file);
    } else if (ablate->parsed()) {
      p.ablate(out_file);
    } else if (capability->parsed()) {
      p.capability(out_file);
    } else if (stability->parsed()) {
      p.stability(out_file);
    } else if (report->parsed()) {
      p.report(f.report);
    } else if (run->parsed()) {
      std::vector<entrain::Stage> stages;
      for (const auto& s : entrain::detail::split_list({f.stages})) stages.push_back(entrain::parse_stage(s));
      p.run(stages, f.report);
    }
  } catch (const entrain::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return entrain::exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
