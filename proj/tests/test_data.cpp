#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "entrain/bpe_tokenizer.hpp"
#include "entrain/model_registry.hpp"
#include "entrain/prompt_factory.hpp"
#include "entrain/relation_store.hpp"
#include "entrain/rng.hpp"
#include "entrain/safetensors.hpp"
#include "entrain/tokenizer.hpp"

using namespace entrain;
namespace fs = std::filesystem;

namespace {

fs::path data() { return data_dir(); }

const std::vector<Relation>& relations() {
  static const auto r = load_relations((data() / "relations").string());
  return r;
}

const Gpt2BpeTokenizer& bpe() {
  static const auto t = Gpt2BpeTokenizer::from_directory(data() / "gpt2");
  return *t;
}

Relation tiny_relation(int n) {
  Relation r;
  r.relation_id = "tiny";
  r.display_name = "tiny";
  r.domain_type = "thing";
  r.range_type = "color";
  r.context_templates = {"The {} is"};
  r.query_templates = {"What color is the {}? It is"};
  for (int i = 0; i < n; ++i) r.triples.push_back({"s" + std::to_string(i), "t" + std::to_string(i), "tiny"});
  return r;
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("entrain_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no entrain::Error thrown";
  return ErrorCode::Io;
}

}  // namespace

// ---------------------------------------------------------------------------
// relation_store

TEST(RelationStore, LoadsBundledCountryCapital) {
  const Relation& r = find_relation(relations(), "country capital city");
  EXPECT_EQ(r.triples.size(), 24u);
  EXPECT_EQ(r.context_templates.size(), 2u);
  EXPECT_EQ(r.query_templates.size(), 2u);
  EXPECT_EQ(r.domain_type, "country");
  for (const auto& t : r.triples) EXPECT_EQ(t.relation_id, r.relation_id);
}

TEST(RelationStore, EveryBundledRelationValidates) {
  EXPECT_EQ(relations().size(), 9u);
  for (const auto& r : relations()) EXPECT_NO_THROW(validate(r)) << r.relation_id;
}

TEST(RelationStore, TemplateWithoutPlaceholderIsBadTemplate) {
  auto j = relation_to_json(tiny_relation(5));
  j["query_templates"] = {"no placeholder here"};
  EXPECT_EQ(code_of([&] { relation_from_json(j); }), ErrorCode::BadTemplate);
  j["query_templates"] = {"{} and {}"};
  EXPECT_EQ(code_of([&] { relation_from_json(j); }), ErrorCode::BadTemplate);
}

TEST(RelationStore, EmptySamplesIsMissingField) {
  auto j = relation_to_json(tiny_relation(5));
  j["samples"] = nlohmann::json::array();
  EXPECT_EQ(code_of([&] { relation_from_json(j); }), ErrorCode::MissingField);
  j.erase("samples");
  EXPECT_EQ(code_of([&] { relation_from_json(j); }), ErrorCode::MissingField);
}

TEST(RelationStore, DuplicateSubjectIsRejected) {
  auto j = relation_to_json(tiny_relation(5));
  j["samples"].push_back({{"subject", "s1"}, {"object", "other"}});
  EXPECT_EQ(code_of([&] { relation_from_json(j); }), ErrorCode::DuplicateTriple);
}

TEST(RelationStore, BlankSubjectOrTargetIsRejected) {
  auto j = relation_to_json(tiny_relation(5));
  j["samples"][0]["object"] = "   ";
  EXPECT_EQ(code_of([&] { relation_from_json(j); }), ErrorCode::MissingField);
}

TEST(RelationStore, SaveLoadRoundTrip) {
  const auto dir = temp_dir("roundtrip");
  for (const auto& r : relations()) {
    const auto p = dir / "r.json";
    save_relation(r, p);
    const Relation back = load_relation_file(p);
    EXPECT_EQ(back.relation_id, r.relation_id);
    EXPECT_EQ(back.domain_type, r.domain_type);
    EXPECT_EQ(back.range_type, r.range_type);
    EXPECT_EQ(back.context_templates, r.context_templates);
    EXPECT_EQ(back.query_templates, r.query_templates);
    EXPECT_EQ(back.triples, r.triples);
  }
}

TEST(RelationStore, GlobAndDirectoryExpansion) {
  const auto dir = temp_dir("glob");
  save_relation(tiny_relation(4), dir / "a.json");
  auto b = tiny_relation(4);
  b.relation_id = "other";
  for (auto& t : b.triples) t.relation_id = "other";
  save_relation(b, dir / "b.json");
  write(dir / "notes.txt", "ignored");
  EXPECT_EQ(load_relations(dir.string()).size(), 2u);
  EXPECT_EQ(load_relations((dir / "a*.json").string()).size(), 1u);
  EXPECT_EQ(code_of([&] { load_relations((dir / "zzz*.json").string()); }), ErrorCode::Io);
}

TEST(RelationStore, SplitSizes) {
  SplitSpec spec;
  spec.seed = 7;
  const auto s24 = split_relation(tiny_relation(24), spec);
  EXPECT_EQ(s24.train.size(), 20u);
  EXPECT_EQ(s24.dev.size(), 2u);
  EXPECT_EQ(s24.test.size(), 2u);
  const auto s10 = split_relation(tiny_relation(10), spec);
  EXPECT_EQ(s10.train.size(), 8u);
  EXPECT_EQ(s10.dev.size(), 1u);
  EXPECT_EQ(s10.test.size(), 1u);
  const auto s3 = split_relation(tiny_relation(3), spec);
  EXPECT_EQ(s3.train.size(), 1u);
  EXPECT_EQ(s3.dev.size(), 1u);
  EXPECT_EQ(s3.test.size(), 1u);
}

TEST(RelationStore, SplitIsAPartitionAndDeterministic) {
  for (std::uint64_t seed : {0ull, 1ull, 7ull, 12345ull}) {
    for (const auto& r : relations()) {
      SplitSpec spec;
      spec.seed = seed;
      const auto a = split_relation(r, spec);
      const auto b = split_relation(r, spec);
      EXPECT_EQ(a.train, b.train);
      EXPECT_EQ(a.dev, b.dev);
      EXPECT_EQ(a.test, b.test);
      std::multiset<std::string> seen;
      for (const auto* part : {&a.train, &a.dev, &a.test}) {
        for (const auto& t : *part) seen.insert(t.subject);
      }
      std::multiset<std::string> all;
      for (const auto& t : r.triples) all.insert(t.subject);
      EXPECT_EQ(seen, all);
    }
  }
}

TEST(RelationStore, SplitNeedsThreeTriples) {
  EXPECT_EQ(code_of([] { split_relation(tiny_relation(2), SplitSpec{}); }), ErrorCode::TooFewTriples);
}

TEST(RelationStore, CapUnderLimitPreservesOrder) {
  std::vector<int> v(12);
  std::iota(v.begin(), v.end(), 0);
  EXPECT_EQ(cap_combinations(v, 100000, 3), v);
}

TEST(RelationStore, CapSamplesDistinctSubset) {
  std::vector<int> v(200000);
  std::iota(v.begin(), v.end(), 0);
  const auto a = cap_combinations(v, 100000, 5);
  const auto b = cap_combinations(v, 100000, 5);
  const auto c = cap_combinations(v, 100000, 6);
  EXPECT_EQ(a.size(), 100000u);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_EQ(std::set<int>(a.begin(), a.end()).size(), a.size());
  for (int x : a) EXPECT_TRUE(x >= 0 && x < 200000);
}

// ---------------------------------------------------------------------------
// rng

TEST(Rng, SubstreamsAreStableAndIndependent) {
  Rng a = substream(42, "gumbel");
  Rng b = substream(42, "gumbel");
  Rng c = substream(42, "split");
  const auto x = a();
  EXPECT_EQ(x, b());
  EXPECT_NE(x, c());
  // FNV-1a reference value for "a".
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(Rng, OpenUniformNeverHitsEndpoints) {
  Rng r = substream(1, "u");
  for (int i = 0; i < 100000; ++i) {
    const double u = open_uniform(r);
    ASSERT_GT(u, 0.0);
    ASSERT_LT(u, 1.0);
  }
}

// ---------------------------------------------------------------------------
// tokenizers

TEST(WordTokenizer, SplitsLettersDigitsAndPunctuation) {
  EXPECT_EQ(WordTokenizer::split_words("The capital of Nigeria is Abuja."),
            (std::vector<std::string>{"The", "capital", "of", "Nigeria", "is", "Abuja", "."}));
  EXPECT_EQ(WordTokenizer::split_words("23 + 18 = "), (std::vector<std::string>{"2", "3", "+", "1", "8", "="}));
  EXPECT_EQ(WordTokenizer::split_words("x => y\nz"), (std::vector<std::string>{"x", "=", ">", "y", "z"}));
}

TEST(WordTokenizer, UnknownWordsMapToUnk) {
  WordTokenizer t({"hello", "world"});
  EXPECT_EQ(t.encode("hello there world"), (std::vector<TokenId>{2, WordTokenizer::kUnk, 3}));
  EXPECT_EQ(t.decode(2), "hello");
  EXPECT_FALSE(t.space_sensitive());
}

TEST(BpeTokenizer, MatchesReferenceTokenizerGoldens) {
  std::ifstream in(fs::path(ENTRAIN_FIXTURES) / "bpe_golden.json");
  ASSERT_TRUE(in);
  const auto j = nlohmann::json::parse(in);
  ASSERT_GE(j["cases"].size(), 10u);
  for (const auto& c : j["cases"]) {
    const std::string text = c["text"];
    EXPECT_EQ(bpe().encode(text), c["ids"].get<std::vector<TokenId>>()) << text;
    // Byte-level BPE is lossless.
    std::string back;
    for (TokenId id : bpe().encode(text)) back += bpe().decode(id);
    EXPECT_EQ(back, text);
  }
}

TEST(BpeTokenizer, FirstWordpieceOfAbuja) {
  const FirstToken ft = resolve_first_token("Abuja", bpe());
  EXPECT_EQ(ft.piece, " Abu");
  EXPECT_EQ(bpe().decode(ft.id), " Abu");
}

TEST(BpeTokenizer, SingleTokenWordResolvesToItself) {
  const auto ids = bpe().encode(" Berlin");
  ASSERT_EQ(ids.size(), 1u);
  EXPECT_EQ(resolve_first_token("Berlin", bpe()).id, ids[0]);
}

TEST(BpeTokenizer, EmptySurfaceIsEmptyTokenization) {
  EXPECT_EQ(code_of([] { resolve_first_token("", bpe()); }), ErrorCode::EmptyTokenization);
  EXPECT_EQ(code_of([] { resolve_first_token("   ", bpe()); }), ErrorCode::EmptyTokenization);
}

// ---------------------------------------------------------------------------
// safetensors

TEST(Safetensors, WriterReaderRoundTrip) {
  const auto dir = temp_dir("st");
  safetensors::Writer w;
  const std::vector<double> a{1.5, -2.25, 3.0, 4.0, 5.0, 6.0};
  w.add("a", {2, 3}, a.data(), a.size());
  w.set_metadata("format", "test");
  w.write(dir / "x.safetensors");
  safetensors::File f(dir / "x.safetensors");
  EXPECT_TRUE(f.contains("a"));
  EXPECT_FALSE(f.contains("b"));
  EXPECT_EQ(f.shape("a"), (std::vector<std::int64_t>{2, 3}));
  EXPECT_EQ(f.read<double>("a"), a);
  EXPECT_EQ(f.metadata().at("format"), "test");
}

TEST(Safetensors, HalfPrecisionDecoding) {
  EXPECT_EQ(safetensors::detail::half_to_float(0x3c00), 1.0f);
  EXPECT_EQ(safetensors::detail::half_to_float(0xc000), -2.0f);
  EXPECT_EQ(safetensors::detail::half_to_float(0x0000), 0.0f);
  EXPECT_EQ(safetensors::detail::half_to_float(0x7bff), 65504.0f);
  EXPECT_FLOAT_EQ(safetensors::detail::half_to_float(0x0001), 5.960464477539063e-8f);  // smallest subnormal
}

// ---------------------------------------------------------------------------
// prompt_factory

TEST(PromptFactory, RelatedMatchesTableOneExample) {
  const Relation& fruit = find_relation(relations(), "fruit inside color");
  const FactTriple q{"mangoes", "orange", fruit.relation_id};
  const FactTriple c{"bananas", "white", fruit.relation_id};
  Rng rng = substream(0, "t");
  const auto p = build_related(q, c, fruit, rng, bpe());
  EXPECT_EQ(p.context_text, "On the inside, bananas are white.");
  EXPECT_EQ(p.query_text, "What color are mangoes on the inside? They are");
  EXPECT_EQ(p.full_prompt, "On the inside, bananas are white. What color are mangoes on the inside? They are");
  ASSERT_NE(p.find(TrackedRole::Distracting), nullptr);
  EXPECT_EQ(p.find(TrackedRole::Distracting)->surface, "white");
  EXPECT_EQ(p.find(TrackedRole::Correct)->surface, "orange");
  EXPECT_NE(p.full_prompt.find(". What"), std::string::npos);
  EXPECT_EQ(p.full_prompt.find(".  What"), std::string::npos);
}

TEST(PromptFactory, RelatedCollisionAndPreconditions) {
  const Relation& fruit = find_relation(relations(), "fruit inside color");
  Rng rng = substream(0, "t");
  const FactTriple q{"mangoes", "orange", fruit.relation_id};
  EXPECT_EQ(code_of([&] { build_related(q, {"oranges", "orange", fruit.relation_id}, fruit, rng, bpe()); }),
            ErrorCode::TokenCollision);
  EXPECT_EQ(code_of([&] { build_related(q, q, fruit, rng, bpe()); }), ErrorCode::PreconditionViolation);
}

TEST(PromptFactory, IrrelevantUsesForeignTarget) {
  const Relation& fruit = find_relation(relations(), "fruit inside color");
  const Relation& cap = find_relation(relations(), "country capital city");
  Rng rng = substream(0, "t");
  const auto p = build_irrelevant({"mangoes", "orange", fruit.relation_id}, {"Canada", "Ottawa", cap.relation_id}, fruit,
                                  cap, rng, bpe());
  EXPECT_EQ(p.find(TrackedRole::Distracting)->surface, "Ottawa");
  EXPECT_TRUE(p.context_text == "The capital city of Canada is Ottawa." ||
              p.context_text == "The capital of Canada is Ottawa.");
  ASSERT_TRUE(p.context_triple.has_value());
  EXPECT_NE(p.context_triple->relation_id, p.query_triple.relation_id);
  EXPECT_EQ(code_of([&] {
              build_irrelevant({"mangoes", "orange", fruit.relation_id}, {"bananas", "white", fruit.relation_id}, fruit,
                               fruit, rng, bpe());
            }),
            ErrorCode::OverlapViolation);
}

TEST(PromptFactory, RandomWordContext) {
  const Relation& fruit = find_relation(relations(), "fruit inside color");
  const FactTriple q{"mangoes", "orange", fruit.relation_id};
  Rng rng = substream(0, "t");
  const auto p = build_random(q, {"Promotion"}, fruit, rng, bpe());
  EXPECT_EQ(p.context_text, "Promotion");
  EXPECT_EQ(p.find(TrackedRole::Distracting)->surface, "Promotion");
  EXPECT_EQ(p.full_prompt, "Promotion What color are mangoes on the inside? They are");
  EXPECT_EQ(code_of([&] { build_random(q, {"orange"}, fruit, rng, bpe()); }), ErrorCode::TokenCollision);
  const std::vector<std::string> words{"alpha", "beta", "gamma", "delta", "epsilon"};
  Rng r1 = substream(9, "w"), r2 = substream(9, "w");
  EXPECT_EQ(build_random(q, words, fruit, r1, bpe()).random_word, build_random(q, words, fruit, r2, bpe()).random_word);
}

TEST(PromptFactory, CounterfactualTracksThreeRoles) {
  const Relation& fruit = find_relation(relations(), "fruit inside color");
  Rng rng = substream(0, "t");
  const auto p = build_counterfactual({"mangoes", "orange", fruit.relation_id}, {"bananas", "white", fruit.relation_id},
                                      "green", fruit, rng, bpe());
  EXPECT_EQ(p.context_text, "On the inside, bananas are green.");
  EXPECT_EQ(p.find(TrackedRole::Counterfactual)->surface, "green");
  EXPECT_EQ(p.find(TrackedRole::Distracting)->surface, "white");
  EXPECT_EQ(p.find(TrackedRole::Correct)->surface, "orange");
  EXPECT_EQ(code_of([&] {
              build_counterfactual({"mangoes", "orange", fruit.relation_id}, {"bananas", "white", fruit.relation_id},
                                   "white", fruit, rng, bpe());
            }),
            ErrorCode::PreconditionViolation);
}

TEST(PromptFactory, CounterfactualGermanyMoscow) {
  const Relation& cap = find_relation(relations(), "country capital city");
  Rng rng = substream(0, "t");
  const auto p = build_counterfactual({"Nigeria", "Abuja", cap.relation_id}, {"Germany", "Berlin", cap.relation_id},
                                      "Moscow", cap, rng, bpe());
  EXPECT_EQ(p.find(TrackedRole::Counterfactual)->piece, " Moscow");
  EXPECT_EQ(p.find(TrackedRole::Distracting)->piece, " Berlin");
  EXPECT_EQ(p.find(TrackedRole::Correct)->piece, " Abu");
  EXPECT_TRUE(p.context_text == "The capital city of Germany is Moscow." ||
              p.context_text == "The capital of Germany is Moscow.");
}

TEST(PromptFactory, GeneratedInstancesSatisfyInvariants) {
  const auto words = load_wordlist(data() / "wordlist.txt");
  GeneratorOptions opt;
  opt.seed = 3;
  for (const auto& rel : relations()) {
    std::vector<InstanceSet> sets{generate_related(rel, rel.triples, rel.triples, bpe(), opt),
                                  generate_irrelevant(rel, rel.triples, relations(), bpe(), opt),
                                  generate_random(rel, rel.triples, words, bpe(), opt),
                                  generate_counterfactual(rel, rel.triples, rel.triples, bpe(), opt),
                                  generate_query_only(rel, rel.triples, bpe(), opt)};
    for (const auto& set : sets) {
      EXPECT_EQ(set.stats.emitted, set.instances.size());
      EXPECT_EQ(set.stats.emitted + set.stats.skipped_collision + set.stats.skipped_oov + set.stats.skipped_other,
                std::min(set.stats.candidates, opt.cap));
      for (const auto& p : set.instances) {
        std::set<TokenId> ids;
        for (const auto& t : p.tracked) ids.insert(t.token_id);
        EXPECT_EQ(ids.size(), p.tracked.size()) << p.id;
        if (p.setting == ContextSetting::None) {
          EXPECT_EQ(p.full_prompt, p.query_text);
          EXPECT_TRUE(p.context_text.empty());
        } else {
          EXPECT_EQ(p.full_prompt, p.context_text + " " + p.query_text);
          EXPECT_EQ(p.full_prompt.substr(p.context_text.size() + 1), p.query_text);
        }
        if (p.setting == ContextSetting::Related || p.setting == ContextSetting::Counterfactual) {
          ASSERT_TRUE(p.context_triple);
          EXPECT_EQ(p.context_triple->relation_id, p.query_triple.relation_id);
          EXPECT_NE(p.context_triple->subject, p.query_triple.subject);
        }
      }
    }
  }
}

TEST(PromptFactory, GenerationIsPureFunctionOfSeed) {
  const Relation& cap = find_relation(relations(), "country capital city");
  GeneratorOptions opt;
  opt.seed = 11;
  const auto a = generate_related(cap, cap.triples, cap.triples, bpe(), opt);
  const auto b = generate_related(cap, cap.triples, cap.triples, bpe(), opt);
  ASSERT_EQ(a.instances.size(), b.instances.size());
  for (std::size_t i = 0; i < a.instances.size(); ++i) {
    EXPECT_EQ(instance_to_json(a.instances[i]), instance_to_json(b.instances[i]));
  }
  // Instance JSON round-trips.
  for (const auto& p : a.instances) EXPECT_EQ(instance_to_json(instance_from_json(instance_to_json(p))), instance_to_json(p));
  // Capping keeps a subset of the same instances.
  opt.cap = 50;
  const auto capped = generate_related(cap, cap.triples, cap.triples, bpe(), opt);
  EXPECT_LE(capped.instances.size(), 50u);
  std::set<std::string> all;
  for (const auto& p : a.instances) all.insert(instance_to_json(p).dump());
  for (const auto& p : capped.instances) EXPECT_TRUE(all.count(instance_to_json(p).dump())) << p.id;
}

TEST(PromptFactory, UsableWordsFiltersClosedVocabularies) {
  WordTokenizer t({"apple", "pear"});
  EXPECT_EQ(usable_words({"apple", "kiwi", "pear"}, t), (std::vector<std::string>{"apple", "pear"}));
  EXPECT_EQ(usable_words({"apple", "kiwi"}, bpe()).size(), 2u);
}
