#include <algorithm>
#include <cmath>
#include <fstream>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "entrain/ablation_bench.hpp"
#include "entrain/gpt2.hpp"
#include "support.hpp"

using namespace entrain;
using namespace entrain::testing;

namespace {

const Relation& capital_rel() { return find_relation(relations(), "country capital city"); }

// Related instances over the test split of the capital relation.
const std::vector<PromptInstance>& test_instances(const Backend& b) {
  static std::map<std::string, std::vector<PromptInstance>> cache;
  auto& slot = cache[b.id()];
  if (slot.empty()) {
    const auto sp = split_relation(capital_rel(), SplitSpec{});
    slot = generate_related(capital_rel(), sp.test, capital_rel().triples, b.tokenizer(), GeneratorOptions{}).instances;
  }
  return slot;
}

std::shared_ptr<Gpt2Model> tiny_gpt2() {
  static auto m = Gpt2Model::load(fixtures() / "tiny_gpt2", data() / "gpt2");
  return m;
}

double mean_rank(const std::vector<MeasurementRecord>& recs, bool with) {
  double s = 0.0;
  for (const auto& r : recs) {
    const auto* d = r.find(TrackedRole::Distracting);
    s += static_cast<double>(with ? d->rank_with : d->rank_without);
  }
  return s / static_cast<double>(recs.size());
}

// Rank by sorting a copy: one plus the length of the prefix strictly above
// the answer's logit.
std::size_t sorted_rank(std::vector<double> logits, std::size_t answer) {
  const double v = logits[answer];
  std::sort(logits.begin(), logits.end(), std::greater<>());
  const auto above = std::partition_point(logits.begin(), logits.end(), [v](double x) { return x > v; });
  return static_cast<std::size_t>(above - logits.begin()) + 1;
}

}  // namespace

// ---------------------------------------------------------------------------
// Ablation

TEST(Ablation, EmptyHeadSetChangesNothing) {
  auto ref = reference();
  const auto& inst = test_instances(*ref);
  ASSERT_FALSE(inst.empty());
  const auto rep = evaluate_ablation(inst, *ref, {}, capital_rel().relation_id);
  ASSERT_EQ(rep.original_records.size(), rep.ablated_records.size());
  for (std::size_t i = 0; i < rep.n; ++i) {
    for (const auto& m : rep.original_records[i].roles) {
      const auto* a = rep.ablated_records[i].find(m.role);
      ASSERT_NE(a, nullptr);
      EXPECT_EQ(a->logit_with, m.logit_with);
      EXPECT_EQ(a->logit_without, m.logit_without);
      EXPECT_EQ(a->rank_with, m.rank_with);
    }
  }
  EXPECT_EQ(rep.ablated_with_context.delta, rep.original_with_context.delta);
  EXPECT_TRUE(rep.rank_test_zero_variance);
  EXPECT_FALSE(rep.distracting_rank_test.has_value());
  ASSERT_TRUE(rep.gap_closure.has_value());
  EXPECT_EQ(*rep.gap_closure, 0.0);
}

TEST(Ablation, PlantedHeadClosesTheRankGap) {
  auto ref = reference();
  const auto& inst = test_instances(*ref);
  const auto rep = evaluate_ablation(inst, *ref, {{0, 1}}, capital_rel().relation_id);
  // Recomputed from the raw records.
  const double orig_no = mean_rank(rep.original_records, false);
  const double orig_with = mean_rank(rep.original_records, true);
  const double abl_with = mean_rank(rep.ablated_records, true);
  EXPECT_NEAR(rep.original_no_context.mean_distracting_rank, orig_no, 1e-9);
  EXPECT_NEAR(rep.original_with_context.mean_distracting_rank, orig_with, 1e-9);
  ASSERT_TRUE(rep.gap_closure.has_value());
  EXPECT_NEAR(*rep.gap_closure, (abl_with - orig_with) / (orig_no - orig_with), 1e-12);
  EXPECT_GE(*rep.gap_closure, 0.9);
  // Context pulls the distractor up the ranking; removing the head pushes it back.
  EXPECT_LT(orig_with, orig_no);
  ASSERT_TRUE(rep.distracting_rank_test.has_value());
  EXPECT_GT(rep.distracting_rank_test->t, 0.0);
  EXPECT_LT(rep.distracting_rank_test->p, 1e-6);
  EXPECT_GT(rep.ablated_with_context.delta, rep.original_with_context.delta);
}

TEST(Ablation, ConditionStatsAreMeansOfRecords) {
  auto ref = reference();
  const auto rep = evaluate_ablation(test_instances(*ref), *ref, {{1, 0}}, capital_rel().relation_id);
  double c = 0.0, d = 0.0;
  for (const auto& r : rep.ablated_records) {
    c += r.find(TrackedRole::Correct)->logit_with;
    d += r.find(TrackedRole::Distracting)->logit_with;
  }
  const double n = static_cast<double>(rep.n);
  EXPECT_NEAR(rep.ablated_with_context.mean_correct_logit, c / n, 1e-12);
  EXPECT_NEAR(rep.ablated_with_context.mean_distracting_logit, d / n, 1e-12);
  EXPECT_NEAR(rep.ablated_with_context.delta, c / n - d / n, 1e-12);
}

TEST(Ablation, HeadSetIsSortedAndSerialized) {
  auto ref = reference();
  const auto rep = evaluate_ablation(test_instances(*ref), *ref, {{1, 1}, {0, 1}}, "x");
  EXPECT_EQ(rep.head_set, (std::vector<HeadId>{{0, 1}, {1, 1}}));
  const auto j = ablation_to_json(rep);
  EXPECT_EQ(j["heads"], nlohmann::json::parse("[[0,1],[1,1]]"));
  EXPECT_EQ(j["n"], rep.n);
  for (const char* k : {"original", "ablated"}) {
    for (const char* c : {"no_context", "with_context"}) EXPECT_TRUE(j[k][c].contains("mean_distracting_rank"));
  }
  EXPECT_TRUE(j.contains("gap_closure"));
}

TEST(Ablation, RejectsEmptyInstanceSet) {
  auto ref = reference();
  EXPECT_EQ(code_of([&] { evaluate_ablation({}, *ref, {}, "x"); }), ErrorCode::EmptyInstanceSet);
}

// ---------------------------------------------------------------------------
// Accuracy

TEST(Accuracy, MatchesSortedRankOracle) {
  auto ref = reference();
  const auto q = generate_query_only(capital_rel(), capital_rel().triples, ref->tokenizer(), GeneratorOptions{});
  ASSERT_FALSE(q.instances.empty());
  for (const MaskVector& mask : {ones_mask(ref->grid()), ablation_mask(ref->grid(), {{0, 0}, {1, 1}})}) {
    std::size_t e = 0, s = 0, c = 0;
    for (const auto& inst : q.instances) {
      const auto logits = ref->forward_masked(ref->encode_prompt(inst.full_prompt), mask).logits;
      const auto r = sorted_rank(logits, static_cast<std::size_t>(inst.find(TrackedRole::Correct)->token_id));
      e += r <= 1;
      s += r <= 3;
      c += r <= 10;
    }
    const auto rep = accuracy(q.instances, *ref, mask, "cap");
    const double n = static_cast<double>(q.instances.size());
    EXPECT_EQ(rep.n, q.instances.size());
    EXPECT_DOUBLE_EQ(rep.exact, static_cast<double>(e) / n);
    EXPECT_DOUBLE_EQ(rep.strict, static_cast<double>(s) / n);
    EXPECT_DOUBLE_EQ(rep.credulous, static_cast<double>(c) / n);
    EXPECT_LE(rep.exact, rep.strict);
    EXPECT_LE(rep.strict, rep.credulous);
  }
}

TEST(Accuracy, CutoffAtVocabularySizeAlwaysHits) {
  auto ref = reference();
  const auto q = generate_query_only(capital_rel(), capital_rel().triples, ref->tokenizer(), GeneratorOptions{});
  const std::size_t V = ref->vocab_size();
  const auto rep = accuracy(q.instances, *ref, ones_mask(ref->grid()), "cap", Cutoffs{V, V, V});
  EXPECT_EQ(rep.exact, 1.0);
  EXPECT_EQ(rep.credulous, 1.0);
  const auto none = accuracy(q.instances, *ref, ones_mask(ref->grid()), "cap", Cutoffs{0, 0, 0});
  EXPECT_EQ(none.credulous, 0.0);
}

TEST(Accuracy, RejectsEmptyItems) {
  auto ref = reference();
  EXPECT_EQ(code_of([&] { accuracy_on({}, *ref, ones_mask(ref->grid()), "x"); }), ErrorCode::EmptyInstanceSet);
}

// ---------------------------------------------------------------------------
// Capability tasks

TEST(Capability, ArithmeticAnswersAreExactSums) {
  const auto items = arithmetic_items(0, 1000);
  ASSERT_EQ(items.size(), 1000u);
  const std::regex form(R"((\d+) \+ (\d+) = )");
  std::set<std::string> distinct;
  for (const auto& it : items) {
    std::smatch m;
    ASSERT_TRUE(std::regex_match(it.prompt, m, form)) << it.prompt;
    const int a = std::stoi(m[1]);
    const int b = std::stoi(m[2]);
    EXPECT_GE(a, 10);
    EXPECT_LE(a, 99);
    EXPECT_GE(b, 10);
    EXPECT_LE(b, 99);
    EXPECT_EQ(it.answer, std::to_string(a + b));
    EXPECT_TRUE(it.demonstrations.empty());
    distinct.insert(it.prompt);
  }
  EXPECT_GT(distinct.size(), 500u);
  EXPECT_EQ(arithmetic_prompt(23, 18), "23 + 18 = ");
  EXPECT_EQ(arithmetic_items(0, 1000)[17].prompt, items[17].prompt);
  EXPECT_NE(arithmetic_items(1, 50)[0].prompt + arithmetic_items(1, 50)[1].prompt,
            items[0].prompt + items[1].prompt);
}

TEST(Capability, ShotPromptFormat) {
  EXPECT_EQ(shot_prompt({{"gaot", "goat"}, {"brid", "bird"}}, "fsih"), "gaot => goat\nbrid => bird\nfsih =>");
  EXPECT_EQ(shot_prompt({}, "fsih"), "fsih =>");
}

TEST(Capability, DemonstrationsNeverLeakTheQuery) {
  const auto pairs = load_pairs(data() / "spelling_pairs.json");
  ASSERT_GE(pairs.size(), 6u);
  for (int shots : {1, 2, 5}) {
    const auto items = shot_items(pairs, shots, 3, 300, "spelling");
    ASSERT_EQ(items.size(), 300u);
    for (const auto& it : items) {
      ASSERT_EQ(it.demonstrations.size(), static_cast<std::size_t>(shots));
      std::set<std::string> seen;
      for (const auto& [x, y] : it.demonstrations) {
        EXPECT_NE(x, it.query);
        EXPECT_TRUE(seen.insert(x).second) << "repeated demonstration " << x;
        EXPECT_NE(std::find(pairs.begin(), pairs.end(), std::make_pair(x, y)), pairs.end());
      }
      EXPECT_NE(std::find(pairs.begin(), pairs.end(), std::make_pair(it.query, it.answer)), pairs.end());
      EXPECT_EQ(it.prompt, shot_prompt(it.demonstrations, it.query));
    }
  }
}

TEST(Capability, TooFewPairsForShotCount) {
  const WordPairs pairs{{"a", "b"}, {"c", "d"}};
  EXPECT_NO_THROW(shot_items(pairs, 1, 0, 5, "t"));
  EXPECT_EQ(code_of([&] { shot_items(pairs, 2, 0, 5, "t"); }), ErrorCode::InsufficientPairs);
}

TEST(Capability, TaskListCoversKindsAndShots) {
  const auto tasks = build_capability_tasks(0, load_pairs(data() / "spelling_pairs.json"),
                                            load_pairs(data() / "translation_pairs.json"), TaskCounts{20, 30, 40});
  std::vector<std::string> ids;
  for (const auto& t : tasks) ids.push_back(t.id());
  EXPECT_EQ(ids, (std::vector<std::string>{"arithmetic/0-shot", "spelling/1-shot", "spelling/2-shot", "spelling/5-shot",
                                           "translation/1-shot", "translation/2-shot", "translation/5-shot"}));
  EXPECT_EQ(tasks[0].items.size(), 20u);
  EXPECT_EQ(tasks[1].items.size(), 30u);
  EXPECT_EQ(tasks[6].items.size(), 40u);
  EXPECT_EQ(parse_task("spelling"), TaskKind::Spelling);
  EXPECT_EQ(code_of([] { parse_task("poetry"); }), ErrorCode::ConfigInvalid);
}

TEST(Capability, PromptIsTrimmedAndAnswerCarriesLeadingSpace) {
  auto gpt = tiny_gpt2();
  CapabilityTask t{TaskKind::Arithmetic, 0, {{{}, "23 + 18", "23 + 18 = ", "41"}}};
  std::size_t skipped = 9;
  const auto items = scored_items(t, *gpt, &skipped);
  ASSERT_EQ(items.size(), 1u);
  EXPECT_EQ(skipped, 0u);
  EXPECT_EQ(items[0].tokens, gpt->encode_prompt("23 + 18 ="));
  EXPECT_EQ(items[0].answer, bpe().encode(" 41").at(0));
}

TEST(Capability, EmptyHeadSetMatchesBaselineBitExactly) {
  auto gpt = tiny_gpt2();
  const auto tasks = build_capability_tasks(0, load_pairs(data() / "spelling_pairs.json"),
                                            load_pairs(data() / "translation_pairs.json"), TaskCounts{200, 40, 40},
                                            {1, 2});
  for (const auto& t : tasks) {
    const auto base = evaluate_capability(t, *gpt, ones_mask(gpt->grid()));
    const auto same = evaluate_capability(t, *gpt, ablation_mask(gpt->grid(), {}));
    EXPECT_EQ(base.exact, same.exact) << t.id();
    EXPECT_EQ(base.strict, same.strict) << t.id();
    EXPECT_EQ(base.credulous, same.credulous) << t.id();
    EXPECT_EQ(base.n + base.skipped, t.items.size());
    const auto abl = evaluate_capability(t, *gpt, ablation_mask(gpt->grid(), {{0, 0}, {1, 2}}));
    for (const auto* r : {&base, &abl}) {
      EXPECT_LE(r->exact, r->strict);
      EXPECT_LE(r->strict, r->credulous);
    }
  }
  // Logits themselves, not only the accuracies.
  const auto ids = gpt->encode_prompt("23 + 18 =");
  EXPECT_EQ(gpt->forward_masked(ids, ones_mask(gpt->grid())).logits,
            gpt->forward_masked(ids, ablation_mask(gpt->grid(), {})).logits);
}

TEST(Capability, UntokenizableItemsAreSkipped) {
  // Neither made-up word is in the reference vocabulary: one item has an
  // unknown prompt word, the other an unknown answer.
  auto ref = reference();
  CapabilityTask t{TaskKind::Translation, 0,
                   {{{}, "zqxv", shot_prompt({}, "zqxv"), "water"}, {{}, "water", shot_prompt({}, "water"), "zqxv"}}};
  std::size_t skipped = 0;
  EXPECT_TRUE(scored_items(t, *ref, &skipped).empty());
  EXPECT_EQ(skipped, 2u);
  EXPECT_EQ(code_of([&] { evaluate_capability(t, *ref, ones_mask(ref->grid())); }), ErrorCode::EmptyInstanceSet);
}

TEST(Capability, PairFileErrors) {
  const auto dir = temp_dir("pairs");
  EXPECT_EQ(code_of([&] { load_pairs(dir / "missing.json"); }), ErrorCode::Io);
  std::ofstream(dir / "bad.json") << R"({"task": "x"})";
  EXPECT_EQ(code_of([&] { load_pairs(dir / "bad.json"); }), ErrorCode::MissingField);
  std::ofstream(dir / "short.json") << R"({"pairs": [["a"]]})";
  EXPECT_EQ(code_of([&] { load_pairs(dir / "short.json"); }), ErrorCode::MissingField);
}

// ---------------------------------------------------------------------------
// Stability

TEST(Stability, MatrixIsSymmetricWithUnitDiagonal) {
  auto ref = reference();
  const auto sp = split_relation(capital_rel(), SplitSpec{});
  DiscoveryConfig cfg;
  cfg.epochs = 30;
  const auto r = stability(capital_rel(), sp, *ref, 3, 10, cfg);
  ASSERT_EQ(r.seeds, (std::vector<std::uint64_t>{10, 11, 12}));
  ASSERT_EQ(r.jaccard.size(), 3u);
  EXPECT_EQ(r.total_heads, 4u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(r.jaccard[i][i], 1.0);
    EXPECT_EQ(r.counts[i], r.head_sets[i].size());
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_EQ(r.jaccard[i][j], r.jaccard[j][i]);
      if (i == j) continue;
      EXPECT_EQ(r.jaccard[i][j], jaccard(r.head_sets[i], r.head_sets[j]));
      EXPECT_EQ(r.expected_random[i][j], expected_random_jaccard(4, r.counts[i], r.counts[j]));
    }
  }
  const auto j = stability_to_json(r);
  EXPECT_EQ(j["seeds"].size(), 3u);
  EXPECT_EQ(j["total_heads"], 4);
}

TEST(Stability, NeedsTwoRuns) {
  auto ref = reference();
  const auto sp = split_relation(capital_rel(), SplitSpec{});
  EXPECT_EQ(code_of([&] { stability(capital_rel(), sp, *ref, 1, 0); }), ErrorCode::PreconditionViolation);
}
