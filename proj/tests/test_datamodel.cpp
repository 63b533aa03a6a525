#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "fsic/datamodel.hpp"
#include "fsic/synthetic.hpp"

using namespace fsic;

namespace {

LabeledCorpus corpus_with_intents(int n) {
  std::vector<RawRecord> r;
  for (int i = 0; i < n; ++i) r.push_back({"u" + std::to_string(i), "text " + std::to_string(i), "intent" + std::to_string(i)});
  return validate_corpus(r);
}

bool disjoint(const std::vector<IntentLabel>& a, const std::vector<IntentLabel>& b) {
  std::set<IntentLabel> s(a.begin(), a.end());
  return std::none_of(b.begin(), b.end(), [&](const auto& x) { return s.count(x) > 0; });
}

}  // namespace

TEST(ValidateCorpus, MinimalRecord) {
  const auto c = validate_corpus({{"u1", "book a flight", "flight"}});
  EXPECT_EQ(c.size(), 1u);
  ASSERT_EQ(c.intents().size(), 1u);
  EXPECT_EQ(c.intents()[0].name, "flight");
}

TEST(ValidateCorpus, DuplicateIdNamesTheId) {
  try {
    validate_corpus({{"u1", "a", "x"}, {"u1", "b", "y"}});
    FAIL() << "expected a duplicate-id error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("u1"), std::string::npos);
  }
}

TEST(ValidateCorpus, EmptyTextAndEmptyCorpusRejected) {
  EXPECT_THROW(validate_corpus({{"u1", "   ", "x"}}), ValidationError);
  EXPECT_THROW(validate_corpus({}), ValidationError);
  EXPECT_THROW(validate_corpus({{"u1", "a", " "}}), ValidationError);
}

TEST(ValidateCorpus, TrimsAndPreservesOrder) {
  const auto c = validate_corpus({{"b", "  second  ", "y"}, {"a", "first\t", "x"}});
  EXPECT_EQ(c.utterances()[0].id, "b");
  EXPECT_EQ(c.utterances()[0].text, "second");
  EXPECT_EQ(c.utterances()[1].text, "first");
  EXPECT_EQ(c.members(IntentLabel{"x"}), std::vector<std::size_t>{1});
}

TEST(ValidateCorpus, ClincSizedCorpusHas150Intents) {
  EXPECT_EQ(corpus_with_intents(150).intents().size(), 150u);
}

TEST(SplitIntents, ClincCountsGiveThreeDisjointBlocks) {
  const auto c = corpus_with_intents(150);
  const auto s = split_intents(c, {50, 50, 50}, 7);
  EXPECT_EQ(s.train_intents.size(), 50u);
  EXPECT_EQ(s.valid_intents.size(), 50u);
  EXPECT_EQ(s.test_intents.size(), 50u);
  EXPECT_TRUE(disjoint(s.train_intents, s.valid_intents));
  EXPECT_TRUE(disjoint(s.train_intents, s.test_intents));
  EXPECT_TRUE(disjoint(s.valid_intents, s.test_intents));
}

TEST(SplitIntents, BankingCounts) {
  const auto s = split_intents(corpus_with_intents(77), {25, 25, 27}, 3);
  EXPECT_EQ(s.train_intents.size(), 25u);
  EXPECT_EQ(s.valid_intents.size(), 25u);
  EXPECT_EQ(s.test_intents.size(), 27u);
  EXPECT_TRUE(disjoint(s.train_intents, s.test_intents));
}

TEST(SplitIntents, TooFewIntentsRejected) {
  EXPECT_THROW(split_intents(corpus_with_intents(2), {1, 1, 1}, 0), ValidationError);
}

TEST(SplitIntents, DeterministicAndSeedSensitive) {
  const auto c = corpus_with_intents(30);
  EXPECT_EQ(split_intents(c, {10, 10, 10}, 5, 2), split_intents(c, {10, 10, 10}, 5, 2));
  EXPECT_NE(split_intents(c, {10, 10, 10}, 5).train_intents, split_intents(c, {10, 10, 10}, 6).train_intents);
}

TEST(SplitIntents, PinnedShuffle) {
  // Fisher-Yates with the documented uniform_int, recomputed by hand here.
  const auto c = corpus_with_intents(6);
  std::vector<IntentLabel> order = c.intents();
  std::mt19937_64 eng(11);
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % i);
    std::uint64_t x = eng();
    while (x >= limit) x = eng();
    std::swap(order[i - 1], order[x % i]);
  }
  const auto s = split_intents(c, {2, 2, 2}, 11);
  std::vector<IntentLabel> first(order.begin(), order.begin() + 2);
  std::sort(first.begin(), first.end());
  EXPECT_EQ(s.train_intents, first);
}

TEST(SplitIntents, PropertyDisjointAcrossSeeds) {
  const auto c = corpus_with_intents(20);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto s = split_intents(c, {9, 5, 6}, seed);
    ASSERT_TRUE(disjoint(s.train_intents, s.valid_intents));
    ASSERT_TRUE(disjoint(s.train_intents, s.test_intents));
    ASSERT_TRUE(disjoint(s.valid_intents, s.test_intents));
  }
}

TEST(ParseCorpus, JsonLines) {
  std::istringstream in(R"({"id":"a","text":"hello there","label":"greet"}
{"id":"b","text":"bye","label":"leave"}
)");
  const auto c = validate_corpus(parse_corpus(in));
  EXPECT_EQ(c.size(), 2u);
  EXPECT_EQ(c.utterances()[1].label.name, "leave");
}

TEST(ParseCorpus, TabSeparatedGetsRowIds) {
  std::istringstream in("hello there\tgreet\n\nbye now\tleave\n");
  const auto c = validate_corpus(parse_corpus(in));
  EXPECT_EQ(c.utterances()[0].id, "000000");
  EXPECT_EQ(c.utterances()[1].id, "000001");
  EXPECT_EQ(c.utterances()[1].text, "bye now");
}

TEST(ParseCorpus, ErrorsCarryLineNumbers) {
  std::istringstream bad_json("{\"id\":\"a\",\"text\":\"x\",\"label\":\"y\"}\n{\"id\":\"b\"}\n");
  try {
    parse_corpus(bad_json);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  std::istringstream bad_tsv("a\tb\nno tab here\n");
  EXPECT_THROW(parse_corpus(bad_tsv), ValidationError);
}

TEST(SyntheticCorpus, CountsAndDeterminism) {
  const auto a = make_synthetic_corpus(15, 40, {}, 1);
  EXPECT_EQ(a.size(), 600u);
  EXPECT_EQ(a.intents().size(), 15u);
  const auto b = make_synthetic_corpus(15, 40, {}, 1);
  EXPECT_EQ(a.utterances(), b.utterances());
  EXPECT_NE(a.utterances(), make_synthetic_corpus(15, 40, {}, 2).utterances());
  EXPECT_THROW(make_synthetic_corpus(0, 40, {}, 1), ValidationError);
}

TEST(SyntheticCorpus, NineThreeThreeSplitKeepsTestIntentsUnseen) {
  const auto c = make_synthetic_corpus(15, 40, {}, 1);
  const auto s = split_intents(c, {9, 3, 3}, 4);
  EXPECT_TRUE(disjoint(s.train_intents, s.test_intents));
  EXPECT_TRUE(disjoint(s.valid_intents, s.test_intents));
}

TEST(SyntheticCorpus, IntentsShareNoKeywordButShareFillers) {
  const auto c = make_synthetic_corpus(6, 30, {}, 8);
  std::map<std::string, std::set<std::string>> words_by_intent;
  for (const auto& u : c.utterances()) {
    std::istringstream is(u.text);
    std::string w;
    while (is >> w) words_by_intent[u.label.name].insert(w);
  }
  std::map<std::string, int> owners;
  for (const auto& [_, words] : words_by_intent) {
    for (const auto& w : words) ++owners[w];
  }
  int shared = 0, private_words = 0;
  for (const auto& [_, n] : owners) (n > 1 ? shared : private_words)++;
  EXPECT_GT(shared, 0);
  EXPECT_EQ(private_words, 6 * 3);
}
