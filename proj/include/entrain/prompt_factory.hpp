#ifndef ENTRAIN_PROMPT_FACTORY_HPP_
#define ENTRAIN_PROMPT_FACTORY_HPP_

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "entrain/error.hpp"
#include "entrain/relation_store.hpp"
#include "entrain/rng.hpp"
#include "entrain/tokenizer.hpp"

namespace entrain {

enum class ContextSetting { Related, Irrelevant, Random, Counterfactual, None };

constexpr std::string_view to_string(ContextSetting s) {
  switch (s) {
    case ContextSetting::Related: return "related";
    case ContextSetting::Irrelevant: return "irrelevant";
    case ContextSetting::Random: return "random";
    case ContextSetting::Counterfactual: return "counterfactual";
    case ContextSetting::None: return "none";
  }
  return "none";
}

inline ContextSetting parse_setting(std::string_view name) {
  for (auto s : {ContextSetting::Related, ContextSetting::Irrelevant, ContextSetting::Random,
                 ContextSetting::Counterfactual, ContextSetting::None}) {
    if (to_string(s) == name) return s;
  }
  fail(ErrorCode::ConfigInvalid, "unknown context setting '" + std::string(name) + "'");
}

enum class TrackedRole { Correct, Distracting, Counterfactual };

constexpr std::string_view to_string(TrackedRole r) {
  switch (r) {
    case TrackedRole::Correct: return "correct";
    case TrackedRole::Distracting: return "distracting";
    case TrackedRole::Counterfactual: return "counterfactual";
  }
  return "correct";
}

inline TrackedRole parse_role(std::string_view name) {
  for (auto r : {TrackedRole::Correct, TrackedRole::Distracting, TrackedRole::Counterfactual}) {
    if (to_string(r) == name) return r;
  }
  fail(ErrorCode::ConfigInvalid, "unknown tracked role '" + std::string(name) + "'");
}

struct TrackedToken {
  TrackedRole role = TrackedRole::Correct;
  std::string surface;
  TokenId token_id = 0;
  std::string piece;  // decoded first sub-token

  friend bool operator==(const TrackedToken&, const TrackedToken&) = default;
};

struct PromptInstance {
  std::string id;
  ContextSetting setting = ContextSetting::None;
  std::string context_text;
  std::string query_text;
  std::string full_prompt;
  std::vector<TrackedToken> tracked;
  FactTriple query_triple;
  std::optional<FactTriple> context_triple;
  std::optional<std::string> random_word;

  const TrackedToken* find(TrackedRole role) const {
    for (const auto& t : tracked) {
      if (t.role == role) return &t;
    }
    return nullptr;
  }

  friend bool operator==(const PromptInstance&, const PromptInstance&) = default;
};

struct FirstToken {
  TokenId id = 0;
  std::string piece;
};

/// First sub-token of `surface` in continuation position: a leading space is
/// added for tokenizers where spacing changes the split.
inline FirstToken resolve_first_token(std::string_view surface, const Tokenizer& tokenizer) {
  const std::string s = detail::trim(surface);
  require(!s.empty(), ErrorCode::EmptyTokenization, "empty surface form");
  const std::string text = tokenizer.space_sensitive() ? " " + s : s;
  const auto tokens = tokenizer.tokenize(text);
  require(!tokens.empty(), ErrorCode::EmptyTokenization, "\"" + s + "\" produced no tokens");
  const auto unk = tokenizer.unknown_id();
  require(!unk || tokens.front().id != *unk, ErrorCode::TokenOutOfVocab, "\"" + s + "\" is out of vocabulary");
  return {tokens.front().id, tokens.front().piece};
}

inline std::string render_template(const std::string& tmpl, const std::string& subject) {
  const auto pos = tmpl.find("{}");
  require(pos != std::string::npos, ErrorCode::BadTemplate, "template \"" + tmpl + "\" has no placeholder");
  return tmpl.substr(0, pos) + subject + tmpl.substr(pos + 2);
}

/// Context sentence stating ⟨subject, target⟩: the filled template, a space,
/// the target and a period.
inline std::string render_fact(const std::string& tmpl, const std::string& subject, const std::string& target) {
  return render_template(tmpl, subject) + " " + target + ".";
}

namespace detail {

inline TrackedToken track(TrackedRole role, const std::string& surface, const Tokenizer& tok) {
  const FirstToken ft = resolve_first_token(surface, tok);
  return {role, surface, ft.id, ft.piece};
}

inline void check_distinct(const std::vector<TrackedToken>& tracked) {
  for (std::size_t i = 0; i < tracked.size(); ++i) {
    for (std::size_t j = i + 1; j < tracked.size(); ++j) {
      require(tracked[i].token_id != tracked[j].token_id, ErrorCode::TokenCollision,
              std::string(to_string(tracked[i].role)) + " \"" + tracked[i].surface + "\" and " +
                  std::string(to_string(tracked[j].role)) + " \"" + tracked[j].surface + "\" share token " +
                  std::to_string(tracked[i].token_id));
    }
  }
}

inline PromptInstance assemble(ContextSetting setting, std::string context, std::string query,
                               std::vector<TrackedToken> tracked, const FactTriple& q,
                               std::optional<FactTriple> ctx, std::optional<std::string> word, std::string id) {
  check_distinct(tracked);
  PromptInstance p;
  p.id = std::move(id);
  p.setting = setting;
  p.full_prompt = setting == ContextSetting::None ? query : context + " " + query;
  p.context_text = std::move(context);
  p.query_text = std::move(query);
  p.tracked = std::move(tracked);
  p.query_triple = q;
  p.context_triple = std::move(ctx);
  p.random_word = std::move(word);
  return p;
}

inline std::string instance_id(ContextSetting s, const FactTriple& q, const std::string& ctx_key, std::size_t ci,
                               std::size_t qi) {
  return std::string(to_string(s)) + "|" + q.relation_id + "|" + q.subject + "|" + ctx_key + "|c" +
         std::to_string(ci) + "q" + std::to_string(qi);
}

}  // namespace detail

inline PromptInstance build_related(const FactTriple& query, const FactTriple& ctx, const Relation& rel, Rng& rng,
                                    const Tokenizer& tok) {
  require(ctx.relation_id == query.relation_id && query.relation_id == rel.relation_id,
          ErrorCode::PreconditionViolation, "related context must come from the query's relation");
  require(ctx.subject != query.subject, ErrorCode::PreconditionViolation, "context and query share a subject");
  const std::size_t ci = uniform_index(rng, rel.context_templates.size());
  const std::size_t qi = uniform_index(rng, rel.query_templates.size());
  return detail::assemble(ContextSetting::Related, render_fact(rel.context_templates[ci], ctx.subject, ctx.target),
                          render_template(rel.query_templates[qi], query.subject),
                          {detail::track(TrackedRole::Correct, query.target, tok),
                           detail::track(TrackedRole::Distracting, ctx.target, tok)},
                          query, ctx, std::nullopt,
                          detail::instance_id(ContextSetting::Related, query, ctx.relation_id + ":" + ctx.subject, ci, qi));
}

inline PromptInstance build_irrelevant(const FactTriple& query, const FactTriple& ctx, const Relation& rel_q,
                                       const Relation& rel_c, Rng& rng, const Tokenizer& tok) {
  require(rel_c.domain_type != rel_q.domain_type && rel_c.range_type != rel_q.range_type &&
              rel_c.relation_id != rel_q.relation_id,
          ErrorCode::OverlapViolation,
          "relations '" + rel_q.relation_id + "' and '" + rel_c.relation_id + "' share a domain or range");
  require(query.relation_id == rel_q.relation_id && ctx.relation_id == rel_c.relation_id,
          ErrorCode::PreconditionViolation, "triples do not belong to the given relations");
  const std::size_t ci = uniform_index(rng, rel_c.context_templates.size());
  const std::size_t qi = uniform_index(rng, rel_q.query_templates.size());
  return detail::assemble(ContextSetting::Irrelevant, render_fact(rel_c.context_templates[ci], ctx.subject, ctx.target),
                          render_template(rel_q.query_templates[qi], query.subject),
                          {detail::track(TrackedRole::Correct, query.target, tok),
                           detail::track(TrackedRole::Distracting, ctx.target, tok)},
                          query, ctx, std::nullopt,
                          detail::instance_id(ContextSetting::Irrelevant, query, ctx.relation_id + ":" + ctx.subject, ci, qi));
}

/// Context is a single word drawn uniformly from `word_list`.
inline PromptInstance build_random(const FactTriple& query, const std::vector<std::string>& word_list,
                                   const Relation& rel, Rng& rng, const Tokenizer& tok) {
  require(!word_list.empty(), ErrorCode::PreconditionViolation, "empty word list");
  const std::string word = word_list[uniform_index(rng, word_list.size())];
  const std::size_t qi = uniform_index(rng, rel.query_templates.size());
  return detail::assemble(ContextSetting::Random, word, render_template(rel.query_templates[qi], query.subject),
                          {detail::track(TrackedRole::Correct, query.target, tok),
                           detail::track(TrackedRole::Distracting, word, tok)},
                          query, std::nullopt, word,
                          detail::instance_id(ContextSetting::Random, query, "word:" + word, 0, qi));
}

inline PromptInstance build_counterfactual(const FactTriple& query, const FactTriple& ctx, const std::string& cf_target,
                                           const Relation& rel, Rng& rng, const Tokenizer& tok) {
  require(ctx.relation_id == query.relation_id && query.relation_id == rel.relation_id,
          ErrorCode::PreconditionViolation, "counterfactual context must come from the query's relation");
  require(ctx.subject != query.subject, ErrorCode::PreconditionViolation, "context and query share a subject");
  require(detail::trim(cf_target) != detail::trim(ctx.target), ErrorCode::PreconditionViolation,
          "counterfactual target equals the true context target");
  const std::size_t ci = uniform_index(rng, rel.context_templates.size());
  const std::size_t qi = uniform_index(rng, rel.query_templates.size());
  return detail::assemble(ContextSetting::Counterfactual, render_fact(rel.context_templates[ci], ctx.subject, cf_target),
                          render_template(rel.query_templates[qi], query.subject),
                          {detail::track(TrackedRole::Counterfactual, cf_target, tok),
                           detail::track(TrackedRole::Distracting, ctx.target, tok),
                           detail::track(TrackedRole::Correct, query.target, tok)},
                          query, ctx, std::nullopt,
                          detail::instance_id(ContextSetting::Counterfactual, query,
                                              ctx.relation_id + ":" + ctx.subject + "=" + cf_target, ci, qi));
}

/// Query alone; only the correct token is tracked.
inline PromptInstance build_query_only(const FactTriple& query, const Relation& rel, Rng& rng, const Tokenizer& tok) {
  const std::size_t qi = uniform_index(rng, rel.query_templates.size());
  return detail::assemble(ContextSetting::None, "", render_template(rel.query_templates[qi], query.subject),
                          {detail::track(TrackedRole::Correct, query.target, tok)}, query, std::nullopt,
                          std::nullopt, detail::instance_id(ContextSetting::None, query, "-", 0, qi));
}

// ---------------------------------------------------------------------------
// Enumeration over a relation. Every instance draws its template choice from a
// substream keyed by the instance's own identity, so the output does not
// depend on enumeration order or on the cap.

struct GenerationStats {
  std::size_t candidates = 0;  // pairs enumerated before the cap
  std::size_t emitted = 0;
  std::size_t skipped_collision = 0;
  std::size_t skipped_oov = 0;
  std::size_t skipped_other = 0;

  GenerationStats& operator+=(const GenerationStats& o) {
    candidates += o.candidates;
    emitted += o.emitted;
    skipped_collision += o.skipped_collision;
    skipped_oov += o.skipped_oov;
    skipped_other += o.skipped_other;
    return *this;
  }
};

struct InstanceSet {
  std::vector<PromptInstance> instances;
  GenerationStats stats;
};

struct GeneratorOptions {
  std::uint64_t seed = 0;
  std::size_t cap = 100000;
  std::size_t random_words_per_query = 0;  // 0: one per other triple of the relation
};

namespace detail {

template <typename Build>
void try_emit(InstanceSet& out, Build&& build) {
  try {
    out.instances.push_back(build());
    ++out.stats.emitted;
  } catch (const Error& e) {
    switch (e.code()) {
      case ErrorCode::TokenCollision: ++out.stats.skipped_collision; break;
      case ErrorCode::TokenOutOfVocab: ++out.stats.skipped_oov; break;
      case ErrorCode::EmptyTokenization:
      case ErrorCode::PreconditionViolation: ++out.stats.skipped_other; break;
      default: throw;
    }
  }
}

inline Rng instance_rng(std::uint64_t seed, std::string_view setting, const FactTriple& q, std::string_view key) {
  return substream(seed, "templates/" + std::string(setting) + "/" + q.relation_id + "/" + q.subject + "/" +
                             std::string(key));
}

}  // namespace detail

/// Every (query, context) pair with distinct subjects. `contexts` defaults to
/// the queries themselves.
inline InstanceSet generate_related(const Relation& rel, const std::vector<FactTriple>& queries,
                                    const std::vector<FactTriple>& contexts, const Tokenizer& tok,
                                    const GeneratorOptions& opt) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    for (std::size_t j = 0; j < contexts.size(); ++j) {
      if (queries[i].subject != contexts[j].subject) pairs.emplace_back(i, j);
    }
  }
  InstanceSet out;
  out.stats.candidates = pairs.size();
  pairs = cap_combinations(std::move(pairs), opt.cap, opt.seed ^ fnv1a("related/" + rel.relation_id));
  for (const auto& [i, j] : pairs) {
    detail::try_emit(out, [&] {
      Rng rng = detail::instance_rng(opt.seed, "related", queries[i], contexts[j].subject);
      return build_related(queries[i], contexts[j], rel, rng, tok);
    });
  }
  return out;
}

/// Pairs each query with every triple of every relation that shares neither
/// domain nor range with the query's relation.
inline InstanceSet generate_irrelevant(const Relation& rel, const std::vector<FactTriple>& queries,
                                       const std::vector<Relation>& all, const Tokenizer& tok,
                                       const GeneratorOptions& opt) {
  std::vector<std::pair<std::size_t, std::pair<std::size_t, std::size_t>>> pairs;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    for (std::size_t r = 0; r < all.size(); ++r) {
      const auto& other = all[r];
      if (other.relation_id == rel.relation_id || other.domain_type == rel.domain_type ||
          other.range_type == rel.range_type) {
        continue;
      }
      for (std::size_t j = 0; j < other.triples.size(); ++j) pairs.push_back({i, {r, j}});
    }
  }
  InstanceSet out;
  out.stats.candidates = pairs.size();
  pairs = cap_combinations(std::move(pairs), opt.cap, opt.seed ^ fnv1a("irrelevant/" + rel.relation_id));
  for (const auto& [i, rj] : pairs) {
    const auto& other = all[rj.first];
    const auto& ctx = other.triples[rj.second];
    detail::try_emit(out, [&] {
      Rng rng = detail::instance_rng(opt.seed, "irrelevant", queries[i], other.relation_id + ":" + ctx.subject);
      return build_irrelevant(queries[i], ctx, rel, other, rng, tok);
    });
  }
  return out;
}

inline InstanceSet generate_random(const Relation& rel, const std::vector<FactTriple>& queries,
                                   const std::vector<std::string>& word_list, const Tokenizer& tok,
                                   const GeneratorOptions& opt) {
  const std::size_t per_query =
      opt.random_words_per_query > 0 ? opt.random_words_per_query : std::max<std::size_t>(1, rel.triples.size() - 1);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    for (std::size_t k = 0; k < per_query; ++k) pairs.emplace_back(i, k);
  }
  InstanceSet out;
  out.stats.candidates = pairs.size();
  pairs = cap_combinations(std::move(pairs), opt.cap, opt.seed ^ fnv1a("random/" + rel.relation_id));
  for (const auto& [i, k] : pairs) {
    detail::try_emit(out, [&] {
      Rng rng = substream(opt.seed, "random-words/" + rel.relation_id + "/" + queries[i].subject + "/" + std::to_string(k));
      auto inst = build_random(queries[i], word_list, rel, rng, tok);
      inst.id += "|k" + std::to_string(k);
      return inst;
    });
  }
  return out;
}

/// Related pairs whose context asserts a false target drawn uniformly from the
/// relation's other targets (those whose first token differs from all three
/// tracked tokens).
inline InstanceSet generate_counterfactual(const Relation& rel, const std::vector<FactTriple>& queries,
                                           const std::vector<FactTriple>& contexts, const Tokenizer& tok,
                                           const GeneratorOptions& opt) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    for (std::size_t j = 0; j < contexts.size(); ++j) {
      if (queries[i].subject != contexts[j].subject) pairs.emplace_back(i, j);
    }
  }
  InstanceSet out;
  out.stats.candidates = pairs.size();
  pairs = cap_combinations(std::move(pairs), opt.cap, opt.seed ^ fnv1a("counterfactual/" + rel.relation_id));

  // First-token ids of all targets, resolved once.
  std::vector<std::pair<std::string, std::optional<TokenId>>> targets;
  for (const auto& t : rel.triples) {
    if (std::any_of(targets.begin(), targets.end(), [&](const auto& p) { return p.first == t.target; })) continue;
    std::optional<TokenId> id;
    try {
      id = resolve_first_token(t.target, tok).id;
    } catch (const Error&) {
    }
    targets.emplace_back(t.target, id);
  }

  for (const auto& [i, j] : pairs) {
    const auto& q = queries[i];
    const auto& c = contexts[j];
    detail::try_emit(out, [&] {
      const TokenId qid = resolve_first_token(q.target, tok).id;
      const TokenId cid = resolve_first_token(c.target, tok).id;
      std::vector<std::string> options;
      for (const auto& [surface, id] : targets) {
        if (id && *id != qid && *id != cid && surface != c.target) options.push_back(surface);
      }
      require(!options.empty(), ErrorCode::TokenCollision, "no counterfactual target with a distinct first token");
      Rng rng = detail::instance_rng(opt.seed, "counterfactual", q, c.subject);
      const std::string cf = options[uniform_index(rng, options.size())];
      return build_counterfactual(q, c, cf, rel, rng, tok);
    });
  }
  return out;
}

inline InstanceSet generate_query_only(const Relation& rel, const std::vector<FactTriple>& queries,
                                       const Tokenizer& tok, const GeneratorOptions& opt) {
  InstanceSet out;
  out.stats.candidates = queries.size();
  for (const auto& q : queries) {
    detail::try_emit(out, [&] {
      Rng rng = detail::instance_rng(opt.seed, "none", q, "-");
      return build_query_only(q, rel, rng, tok);
    });
  }
  return out;
}

/// Words whose first sub-token is in vocabulary (all words for open-vocabulary
/// tokenizers).
inline std::vector<std::string> usable_words(const std::vector<std::string>& words, const Tokenizer& tok) {
  if (!tok.unknown_id()) return words;
  std::vector<std::string> out;
  for (const auto& w : words) {
    try {
      resolve_first_token(w, tok);
      out.push_back(w);
    } catch (const Error&) {
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL serialization

inline nlohmann::json triple_to_json(const FactTriple& t) {
  return {{"subject", t.subject}, {"target", t.target}, {"relation", t.relation_id}};
}

inline FactTriple triple_from_json(const nlohmann::json& j) {
  return {j.at("subject").get<std::string>(), j.at("target").get<std::string>(), j.at("relation").get<std::string>()};
}

inline nlohmann::json instance_to_json(const PromptInstance& p) {
  nlohmann::json tracked = nlohmann::json::array();
  for (const auto& t : p.tracked) {
    tracked.push_back({{"role", to_string(t.role)}, {"surface", t.surface}, {"token_id", t.token_id}, {"piece", t.piece}});
  }
  return {{"id", p.id},
          {"setting", to_string(p.setting)},
          {"context_text", p.context_text},
          {"query_text", p.query_text},
          {"full_prompt", p.full_prompt},
          {"tracked", tracked},
          {"query_triple", triple_to_json(p.query_triple)},
          {"context_triple", p.context_triple ? triple_to_json(*p.context_triple) : nlohmann::json(nullptr)},
          {"random_word", p.random_word ? nlohmann::json(*p.random_word) : nlohmann::json(nullptr)}};
}

inline PromptInstance instance_from_json(const nlohmann::json& j) {
  PromptInstance p;
  p.id = j.at("id").get<std::string>();
  p.setting = parse_setting(j.at("setting").get<std::string>());
  p.context_text = j.at("context_text").get<std::string>();
  p.query_text = j.at("query_text").get<std::string>();
  p.full_prompt = j.at("full_prompt").get<std::string>();
  for (const auto& t : j.at("tracked")) {
    p.tracked.push_back({parse_role(t.at("role").get<std::string>()), t.at("surface").get<std::string>(),
                         t.at("token_id").get<TokenId>(), t.at("piece").get<std::string>()});
  }
  p.query_triple = triple_from_json(j.at("query_triple"));
  if (!j.at("context_triple").is_null()) p.context_triple = triple_from_json(j.at("context_triple"));
  if (!j.at("random_word").is_null()) p.random_word = j.at("random_word").get<std::string>();
  return p;
}

}  // namespace entrain

#endif  // ENTRAIN_PROMPT_FACTORY_HPP_
