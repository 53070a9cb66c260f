#ifndef ENTRAIN_RELATION_STORE_HPP_
#define ENTRAIN_RELATION_STORE_HPP_

#include <glob.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "entrain/error.hpp"
#include "entrain/rng.hpp"

namespace entrain {

struct FactTriple {
  std::string subject;
  std::string target;
  std::string relation_id;

  friend bool operator==(const FactTriple&, const FactTriple&) = default;
};

struct Relation {
  std::string relation_id;
  std::string display_name;
  std::string domain_type;
  std::string range_type;
  std::vector<std::string> context_templates;
  std::vector<std::string> query_templates;
  std::vector<FactTriple> triples;

  friend bool operator==(const Relation&, const Relation&) = default;
};

struct SplitSpec {
  double train_fraction = 0.8;
  double dev_fraction = 0.1;
  double test_fraction = 0.1;
  std::uint64_t seed = 0;
};

struct RelationSplit {
  std::vector<FactTriple> train;
  std::vector<FactTriple> dev;
  std::vector<FactTriple> test;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

inline std::size_t count_placeholders(std::string_view tmpl) {
  std::size_t count = 0;
  for (auto pos = tmpl.find("{}"); pos != std::string_view::npos; pos = tmpl.find("{}", pos + 2)) {
    ++count;
  }
  return count;
}

inline const nlohmann::json& field(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) {
    fail(ErrorCode::MissingField, where + ": missing \"" + key + "\"");
  }
  return j.at(key);
}

inline std::string string_field(const nlohmann::json& j, const char* key, const std::string& where) {
  const auto& v = field(j, key, where);
  if (!v.is_string()) fail(ErrorCode::MissingField, where + ": \"" + key + "\" must be a string");
  return v.get<std::string>();
}

inline std::vector<std::string> template_list(const nlohmann::json& j, const char* key,
                                              const std::string& where) {
  const auto& v = field(j, key, where);
  if (!v.is_array() || v.empty()) {
    fail(ErrorCode::MissingField, where + ": \"" + key + "\" must be a non-empty list");
  }
  std::vector<std::string> out;
  for (const auto& t : v) {
    if (!t.is_string()) fail(ErrorCode::MissingField, where + ": templates must be strings");
    out.push_back(t.get<std::string>());
  }
  return out;
}

}  // namespace detail

/// Checks every Relation invariant; throws on the first violation.
inline void validate(const Relation& rel) {
  const std::string where = "relation '" + rel.relation_id + "'";
  require(!detail::trim(rel.relation_id).empty(), ErrorCode::MissingField, "relation without a name");
  require(!detail::trim(rel.domain_type).empty(), ErrorCode::MissingField, where + ": empty domain");
  require(!detail::trim(rel.range_type).empty(), ErrorCode::MissingField, where + ": empty range");
  require(!rel.context_templates.empty(), ErrorCode::MissingField, where + ": no context templates");
  require(!rel.query_templates.empty(), ErrorCode::MissingField, where + ": no query templates");
  require(!rel.triples.empty(), ErrorCode::MissingField, where + ": no samples");
  for (const auto* list : {&rel.context_templates, &rel.query_templates}) {
    for (const auto& t : *list) {
      const auto n = detail::count_placeholders(t);
      require(n == 1, ErrorCode::BadTemplate,
              where + ": template \"" + t + "\" has " + std::to_string(n) + " placeholders");
    }
  }
  std::set<std::string> subjects;
  for (const auto& t : rel.triples) {
    require(!detail::trim(t.subject).empty() && !detail::trim(t.target).empty(),
            ErrorCode::MissingField, where + ": empty subject or target");
    require(t.relation_id == rel.relation_id, ErrorCode::MissingField,
            where + ": triple tagged with relation '" + t.relation_id + "'");
    require(subjects.insert(t.subject).second, ErrorCode::DuplicateTriple,
            where + ": duplicate subject \"" + t.subject + "\"");
  }
}

inline Relation relation_from_json(const nlohmann::json& j, const std::string& where = "relation") {
  Relation rel;
  rel.relation_id = detail::string_field(j, "name", where);
  rel.display_name = rel.relation_id;
  rel.domain_type = detail::string_field(j, "domain", where);
  rel.range_type = detail::string_field(j, "range", where);
  rel.context_templates = detail::template_list(j, "context_templates", where);
  rel.query_templates = detail::template_list(j, "query_templates", where);
  const auto& samples = detail::field(j, "samples", where);
  if (!samples.is_array()) fail(ErrorCode::MissingField, where + ": \"samples\" must be a list");
  for (const auto& s : samples) {
    rel.triples.push_back({detail::trim(detail::string_field(s, "subject", where)),
                           detail::trim(detail::string_field(s, "object", where)), rel.relation_id});
  }
  validate(rel);
  return rel;
}

inline nlohmann::json relation_to_json(const Relation& rel) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& t : rel.triples) samples.push_back({{"subject", t.subject}, {"object", t.target}});
  return {{"name", rel.relation_id},
          {"domain", rel.domain_type},
          {"range", rel.range_type},
          {"context_templates", rel.context_templates},
          {"query_templates", rel.query_templates},
          {"samples", samples}};
}

inline Relation load_relation_file(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) fail(ErrorCode::Io, "cannot open " + file.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::MissingField, file.string() + ": " + e.what());
  }
  return relation_from_json(j, file.string());
}

inline void save_relation(const Relation& rel, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) fail(ErrorCode::Io, "cannot write " + file.string());
  out << relation_to_json(rel).dump(2) << '\n';
}

/// Expands a file, a directory (all *.json inside) or a shell glob into a
/// sorted list of relation files.
inline std::vector<std::filesystem::path> expand_relation_paths(const std::string& pattern) {
  namespace fs = std::filesystem;
  std::vector<fs::path> files;
  if (fs::is_directory(pattern)) {
    for (const auto& entry : fs::directory_iterator(pattern)) {
      if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
    }
  } else if (fs::is_regular_file(pattern)) {
    files.emplace_back(pattern);
  } else {
    glob_t g{};
    if (::glob(pattern.c_str(), 0, nullptr, &g) == 0) {
      for (std::size_t i = 0; i < g.gl_pathc; ++i) files.emplace_back(g.gl_pathv[i]);
    }
    ::globfree(&g);
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) fail(ErrorCode::Io, "no relation files match '" + pattern + "'");
  return files;
}

inline std::vector<Relation> load_relations(const std::string& path_or_glob) {
  std::vector<Relation> out;
  for (const auto& f : expand_relation_paths(path_or_glob)) out.push_back(load_relation_file(f));
  return out;
}

/// Deterministic train/dev/test partition. Dev and test get floor(n * fraction)
/// triples (at least one each); the remainder goes to train.
inline RelationSplit split_relation(const Relation& rel, const SplitSpec& spec) {
  const double total = spec.train_fraction + spec.dev_fraction + spec.test_fraction;
  require(std::abs(total - 1.0) <= 1e-9, ErrorCode::PreconditionViolation,
          "split fractions must sum to 1");
  require(spec.train_fraction >= 0 && spec.dev_fraction >= 0 && spec.test_fraction >= 0,
          ErrorCode::PreconditionViolation, "split fractions must be non-negative");
  const std::size_t n = rel.triples.size();
  require(n >= 3, ErrorCode::TooFewTriples,
          "relation '" + rel.relation_id + "' has " + std::to_string(n) + " triples; need >= 3");

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = substream(spec.seed, "split/" + rel.relation_id);
  std::shuffle(order.begin(), order.end(), rng);

  const auto n_dev = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(n * spec.dev_fraction)));
  const auto n_test = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(n * spec.test_fraction)));
  const std::size_t n_train = n - n_dev - n_test;

  RelationSplit split;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& t = rel.triples[order[i]];
    if (i < n_train) {
      split.train.push_back(t);
    } else if (i < n_train + n_dev) {
      split.dev.push_back(t);
    } else {
      split.test.push_back(t);
    }
  }
  return split;
}

/// Caps an enumeration at `cap` elements by uniform sampling without
/// replacement. Inputs at or under the cap are returned unchanged.
template <typename T>
std::vector<T> cap_combinations(std::vector<T> pairs, std::size_t cap, std::uint64_t seed) {
  require(cap >= 1, ErrorCode::PreconditionViolation, "cap must be >= 1");
  if (pairs.size() <= cap) return pairs;
  Rng rng = substream(seed, "cap");
  std::vector<T> out;
  out.reserve(cap);
  std::sample(pairs.begin(), pairs.end(), std::back_inserter(out), cap, rng);
  return out;
}

inline const Relation& find_relation(const std::vector<Relation>& relations, const std::string& id) {
  for (const auto& r : relations) {
    if (r.relation_id == id) return r;
  }
  fail(ErrorCode::ConfigInvalid, "unknown relation '" + id + "'");
}

}  // namespace entrain

#endif  // ENTRAIN_RELATION_STORE_HPP_
