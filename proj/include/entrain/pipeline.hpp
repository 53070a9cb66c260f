#ifndef ENTRAIN_PIPELINE_HPP_
#define ENTRAIN_PIPELINE_HPP_

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "entrain/ablation_bench.hpp"
#include "entrain/entrainment_metrics.hpp"
#include "entrain/error.hpp"
#include "entrain/mask_discovery.hpp"
#include "entrain/model_registry.hpp"
#include "entrain/prompt_factory.hpp"
#include "entrain/relation_store.hpp"
#include "entrain/run_config.hpp"

namespace entrain {

enum class Stage { Measure, Discover, Ablate, Capability, Stability, Report };

inline std::string to_string(Stage s) {
  switch (s) {
    case Stage::Measure: return "measure";
    case Stage::Discover: return "discover";
    case Stage::Ablate: return "ablate";
    case Stage::Capability: return "capability";
    case Stage::Stability: return "stability";
    case Stage::Report: return "report";
  }
  return "?";
}

inline Stage parse_stage(std::string_view s) {
  for (Stage st : {Stage::Measure, Stage::Discover, Stage::Ablate, Stage::Capability, Stage::Stability, Stage::Report}) {
    if (s == to_string(st)) return st;
  }
  fail(ErrorCode::ConfigInvalid, "unknown stage '" + std::string(s) + "'");
}

/// 0 success, 2 configuration problems, 3 failures inside a stage.
inline int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::ConfigInvalid:
    case ErrorCode::MissingDependencyArtifact: return 2;
    default: return 3;
  }
}

/// File-name-safe form of a relation id ("country capital city" ->
/// "country_capital_city").
inline std::string slug(const std::string& id) {
  std::string out;
  for (unsigned char c : id) out.push_back(std::isalnum(c) ? static_cast<char>(std::tolower(c)) : '_');
  return out;
}

struct ReportOptions {
  std::string format = "csv";  // csv | md
  bool plot_data = false;
};

/// Loaded relations, model and paths shared by the stages of one run.
class Pipeline {
 public:
  explicit Pipeline(RunConfig cfg, std::ostream& log = std::cerr) : cfg_(std::move(cfg)), log_(log) {
    validate_config(cfg_);
    ctx_.data_dir = data_dir(cfg_.data_dir);
    std::vector<std::string> paths = cfg_.relation_paths;
    if (paths.empty()) paths.push_back((ctx_.data_dir / "relations").string());
    for (const auto& p : paths) {
      require(std::filesystem::exists(p) || p.find_first_of("*?[") != std::string::npos, ErrorCode::ConfigInvalid,
              "relation path does not exist: " + p);
      try {
        for (auto& r : load_relations(p)) ctx_.relations.push_back(std::move(r));
      } catch (const Error& e) {
        if (e.code() == ErrorCode::Io) fail(ErrorCode::ConfigInvalid, e.what());
        throw;
      }
    }
    require(!ctx_.relations.empty(), ErrorCode::ConfigInvalid, "no relations loaded");
    for (const auto& id : cfg_.relation_ids) {
      require(std::any_of(ctx_.relations.begin(), ctx_.relations.end(),
                          [&](const Relation& r) { return r.relation_id == id || slug(r.relation_id) == slug(id); }),
              ErrorCode::ConfigInvalid, "unknown relation '" + id + "'");
    }
    const auto wl = ctx_.data_dir / "wordlist.txt";
    require(std::filesystem::exists(wl), ErrorCode::ConfigInvalid, "missing word list " + wl.string());
    ctx_.wordlist = load_wordlist(wl);
    hash_ = config_hash(cfg_);
  }

  const RunConfig& config() const { return cfg_; }
  const ModelContext& context() const { return ctx_; }
  std::filesystem::path out_dir() const { return cfg_.output_dir; }

  Backend& backend() {
    if (!backend_) {
      try {
        backend_ = open_model(cfg_.model_id, ctx_);
      } catch (const Error& e) {
        if (e.code() == ErrorCode::ModelLoad) fail(ErrorCode::ConfigInvalid, e.what());
        throw;
      }
    }
    return *backend_;
  }

  /// Relations selected for this run, in load order.
  std::vector<const Relation*> selected() const {
    std::vector<const Relation*> out;
    for (const auto& r : ctx_.relations) {
      if (cfg_.relation_ids.empty() ||
          std::any_of(cfg_.relation_ids.begin(), cfg_.relation_ids.end(),
                      [&](const std::string& id) { return id == r.relation_id || slug(id) == slug(r.relation_id); })) {
        out.push_back(&r);
      }
    }
    return out;
  }

  RelationSplit split(const Relation& rel) const {
    SplitSpec s = cfg_.split;
    s.seed = cfg_.seed;
    return split_relation(rel, s);
  }

  GeneratorOptions generator_options() const {
    GeneratorOptions o;
    o.seed = cfg_.seed;
    o.cap = cfg_.cap;
    return o;
  }

  /// {schema_version, tool_version, seed, config_hash, ...}; no timestamps so
  /// reruns are byte-identical.
  nlohmann::json header(const std::string& kind) const {
    return {{"schema_version", kSchemaVersion},
            {"tool_version", kToolVersion},
            {"kind", kind},
            {"seed", cfg_.seed},
            {"config_hash", hash_},
            {"model", cfg_.model_id}};
  }

  void write_json(const std::filesystem::path& path, const std::string& kind, const nlohmann::json& payload) {
    nlohmann::json doc = header(kind);
    doc["config"] = config_to_json(cfg_);
    doc["result"] = payload;
    write_text(path, doc.dump(2) + "\n");
  }

  void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
    out << text;
    require(static_cast<bool>(out), ErrorCode::Io, "write failed for " + path.string());
    artifacts_.push_back(path);
    log_ << "wrote " << path.string() << "\n";
  }

  const std::vector<std::filesystem::path>& artifacts() const { return artifacts_; }

  // -------------------------------------------------------------------------
  // Stages

  /// All context settings over every triple of each selected relation:
  /// results.jsonl (one MeasurementRecord per line after a header line) and
  /// aggregate.csv.
  void measure() {
    Backend& be = backend();
    const auto words = usable_words(ctx_.wordlist, be.tokenizer());
    std::vector<MeasurementRecord> records;
    nlohmann::json stats = nlohmann::json::object();
    for (const Relation* rel : selected()) {
      for (ContextSetting s : cfg_.settings) {
        InstanceSet set;
        const auto opt = generator_options();
        switch (s) {
          case ContextSetting::Related: set = generate_related(*rel, rel->triples, rel->triples, be.tokenizer(), opt); break;
          case ContextSetting::Irrelevant:
            set = generate_irrelevant(*rel, rel->triples, ctx_.relations, be.tokenizer(), opt);
            break;
          case ContextSetting::Random: set = generate_random(*rel, rel->triples, words, be.tokenizer(), opt); break;
          case ContextSetting::Counterfactual:
            set = generate_counterfactual(*rel, rel->triples, rel->triples, be.tokenizer(), opt);
            break;
          case ContextSetting::None: set = generate_query_only(*rel, rel->triples, be.tokenizer(), opt); break;
        }
        stats[rel->relation_id][std::string(to_string(s))] = {{"candidates", set.stats.candidates},
                                                              {"emitted", set.stats.emitted},
                                                              {"skipped_collision", set.stats.skipped_collision},
                                                              {"skipped_oov", set.stats.skipped_oov},
                                                              {"skipped_other", set.stats.skipped_other}};
        log_ << "measure " << rel->relation_id << " / " << to_string(s) << ": " << set.instances.size()
             << " instances\n";
        auto recs = measure_sweep(set.instances, be);
        records.insert(records.end(), std::make_move_iterator(recs.begin()), std::make_move_iterator(recs.end()));
      }
    }
    nlohmann::json head = header("measurements");
    head["config"] = config_to_json(cfg_);
    head["generation"] = stats;
    head["rank_rule"] = "1 + count of strictly greater logits";
    std::string text = head.dump() + "\n";
    for (const auto& r : records) text += record_to_json(r).dump() + "\n";
    write_text(out_dir() / "results.jsonl", text);
    write_text(out_dir() / "aggregate.csv", csv_preamble() + aggregate_csv(summarize(records)));
  }

  /// Gate training per selected relation: heads/<relation>.json, or `out`
  /// when given and exactly one relation is selected.
  void discover(const std::string& out = "") {
    Backend& be = backend();
    const auto rels = selected();
    require(out.empty() || rels.size() == 1, ErrorCode::ConfigInvalid, "--out with discover needs exactly one relation");
    for (const Relation* rel : rels) {
      DiscoveryConfig dc = cfg_.discovery;
      dc.seed = cfg_.seed;
      log_ << "discover " << rel->relation_id << " (" << dc.epochs << " epochs)\n";
      const DiscoveryResult r = train_gates(*rel, split(*rel), be, dc);
      log_ << "  selected " << r.selected_heads.size() << " head(s) at epoch " << r.chosen_epoch << ", dev delta "
           << r.dev_delta_before << " -> " << r.dev_delta_after << "\n";
      write_json(out.empty() ? heads_file(*rel) : std::filesystem::path(out), "heads", discovery_to_json(r));
    }
  }

  /// Test-split ablation per selected relation, plus query-only accuracy
  /// before and after.
  void ablate(const std::string& out = "") {
    Backend& be = backend();
    const auto rels = selected();
    require(out.empty() || rels.size() == 1, ErrorCode::ConfigInvalid, "--out with ablate needs exactly one relation");
    for (const Relation* rel : rels) {
      const auto heads = load_heads(*rel);
      const RelationSplit sp = split(*rel);
      const auto opt = generator_options();
      const auto inst = generate_related(*rel, sp.test, rel->triples, be.tokenizer(), opt);
      const AblationReport rep = evaluate_ablation(inst.instances, be, heads, rel->relation_id);
      nlohmann::json payload = ablation_to_json(rep);
      const auto q = generate_query_only(*rel, sp.test, be.tokenizer(), opt);
      if (!q.instances.empty()) {
        payload["accuracy_original"] = accuracy_to_json(accuracy(q.instances, be, ones_mask(be.grid()), rel->relation_id));
        payload["accuracy_ablated"] =
            accuracy_to_json(accuracy(q.instances, be, ablation_mask(be.grid(), heads), rel->relation_id));
      }
      log_ << "ablate " << rel->relation_id << ": delta " << rep.original_with_context.delta << " -> "
           << rep.ablated_with_context.delta << ", distracting rank " << rep.original_with_context.mean_distracting_rank
           << " -> " << rep.ablated_with_context.mean_distracting_rank << "\n";
      write_json(out.empty() ? out_dir() / "ablation" / (slug(rel->relation_id) + ".json")
                             : std::filesystem::path(out),
                 "ablation", payload);
    }
  }

  /// Capability tasks with and without the head set.
  void capability(const std::string& out = "") {
    Backend& be = backend();
    const auto heads = load_heads(*selected().front());
    const auto tasks = build_capability_tasks(cfg_.seed, load_pairs(ctx_.data_dir / "spelling_pairs.json"),
                                              load_pairs(ctx_.data_dir / "translation_pairs.json"), cfg_.task_counts,
                                              cfg_.shots, cfg_.tasks);
    const MaskVector base = ones_mask(be.grid());
    const MaskVector abl = ablation_mask(be.grid(), heads);
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& t : tasks) {
      nlohmann::json row = {{"task", t.id()}, {"items", t.items.size()}};
      try {
        const auto b = evaluate_capability(t, be, base);
        const auto a = evaluate_capability(t, be, abl);
        row["original"] = accuracy_to_json(b);
        row["ablated"] = accuracy_to_json(a);
        log_ << "capability " << t.id() << ": strict " << b.strict << " -> " << a.strict << " (n=" << b.n << ")\n";
      } catch (const Error& e) {
        if (e.code() != ErrorCode::EmptyInstanceSet) throw;
        row["skipped"] = e.what();
        log_ << "capability " << t.id() << ": skipped (" << e.what() << ")\n";
      }
      rows.push_back(row);
    }
    nlohmann::json payload = {{"heads", heads_to_json(heads)},
                              {"prompt_format", {{"arithmetic", "A + B = "}, {"k_shot", "x => y, newline separated"}}},
                              {"tasks", rows}};
    write_json(out.empty() ? out_dir() / "capability.json" : std::filesystem::path(out), "capability", payload);
  }

  void stability(const std::string& out = "") {
    Backend& be = backend();
    const auto rels = selected();
    require(out.empty() || rels.size() == 1, ErrorCode::ConfigInvalid, "--out with stability needs exactly one relation");
    for (const Relation* rel : rels) {
      DiscoveryConfig dc = cfg_.discovery;
      dc.seed = cfg_.seed;
      const StabilityReport r = entrain::stability(*rel, split(*rel), be, cfg_.stability_runs, cfg_.seed, dc);
      log_ << "stability " << rel->relation_id << ": head counts";
      for (auto c : r.counts) log_ << " " << c;
      log_ << "\n";
      write_json(out.empty() ? out_dir() / "stability" / (slug(rel->relation_id) + ".json")
                             : std::filesystem::path(out),
                 "stability", stability_to_json(r));
    }
  }

  /// Aggregate tables from results.jsonl (written by measure).
  void report(const ReportOptions& opt = {}) {
    const auto path = out_dir() / "results.jsonl";
    require(std::filesystem::exists(path), ErrorCode::MissingDependencyArtifact,
            path.string() + " not found; run the measure stage first");
    std::ifstream in(path);
    std::vector<MeasurementRecord> records;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      if (first && j.contains("schema_version")) {
        first = false;
        continue;
      }
      first = false;
      records.push_back(record_from_json(j));
    }
    const auto rows = summarize(records);
    require(opt.format == "csv" || opt.format == "md", ErrorCode::ConfigInvalid, "report format must be csv or md");
    if (opt.format == "csv") {
      write_text(out_dir() / "aggregate.csv", csv_preamble() + aggregate_csv(rows));
    } else {
      write_text(out_dir() / "aggregate.md", aggregate_markdown(rows));
    }
    if (opt.plot_data) {
      nlohmann::json doc = header("plot_data");
      doc["series"] = plot_data(rows);
      write_text(out_dir() / "plot_data.json", doc.dump(2) + "\n");
    }
  }

  void run(const std::vector<Stage>& stages, const ReportOptions& report_opt = {}) {
    for (Stage s : stages) {
      switch (s) {
        case Stage::Measure: measure(); break;
        case Stage::Discover: discover(); break;
        case Stage::Ablate: ablate(); break;
        case Stage::Capability: capability(); break;
        case Stage::Stability: stability(); break;
        case Stage::Report: report(report_opt); break;
      }
    }
  }

 private:
  std::filesystem::path heads_file(const Relation& rel) const {
    return out_dir() / "heads" / (slug(rel.relation_id) + ".json");
  }

  std::vector<HeadId> load_heads(const Relation& rel) const {
    const std::filesystem::path p = cfg_.heads_path.empty() ? heads_file(rel) : std::filesystem::path(cfg_.heads_path);
    require(std::filesystem::exists(p), ErrorCode::MissingDependencyArtifact,
            "no head set for '" + rel.relation_id + "' (" + p.string() + "); run discover first or pass --heads");
    std::ifstream in(p);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::ConfigInvalid, p.string() + ": " + e.what());
    }
    // Accepts both a pipeline artifact and a bare heads document.
    const nlohmann::json& body = j.contains("result") ? j["result"] : j;
    require(body.contains("selected"), ErrorCode::ConfigInvalid, p.string() + ": missing 'selected'");
    return heads_from_json(body["selected"]);
  }

  static std::vector<AggregateStats> summarize(const std::vector<MeasurementRecord>& records) {
    return aggregate_all(records);
  }

  std::string csv_preamble() const {
    return "# entrain aggregate schema_version=" + std::to_string(kSchemaVersion) + " tool_version=" + kToolVersion +
           " seed=" + std::to_string(cfg_.seed) + " config_hash=" + hash_ + "\n";
  }

  RunConfig cfg_;
  std::ostream& log_;
  ModelContext ctx_;
  std::shared_ptr<Backend> backend_;
  std::string hash_;
  std::vector<std::filesystem::path> artifacts_;
};

}  // namespace entrain

#endif  // ENTRAIN_PIPELINE_HPP_
