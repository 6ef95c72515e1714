#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <set>

#include "diffdt/cohort.hpp"
#include "diffdt/tokenizer.hpp"

using namespace diffdt;

TEST_CASE("vocabulary: reserved slots, sorting, dedup") {
  auto v = Vocabulary::from_codes({"I25", "E11", "I10", "E11"});
  REQUIRE(v.size() == 5);
  CHECK(v.code(kHealthyToken) == "healthy");
  CHECK(v.code(kMaskToken) == "MASK");
  CHECK(v.code(2) == "E11");
  CHECK(v.code(3) == "I10");
  CHECK(v.code(4) == "I25");
  CHECK(v.index("I10") == 3);
  CHECK(v.contains("E11"));
  CHECK_FALSE(v.contains("Z99"));
  CHECK_THROWS_AS(v.index("Z99"), VocabError);
  CHECK_THROWS_AS(Vocabulary::from_codes({"healthy"}), VocabError);
  CHECK_THROWS_AS(Vocabulary::from_codes({"MASK"}), VocabError);
}

TEST_CASE("content hash depends only on the ordered code list") {
  auto a = Vocabulary::from_codes({"A", "B"});
  auto b = Vocabulary::from_codes({"B", "A"});  // sorted: same list
  auto c = Vocabulary::from_codes({"A", "C"});
  CHECK(a.content_hash() == b.content_hash());
  CHECK(a.content_hash() != c.content_hash());
}

TEST_CASE("vocabulary save/load round trip") {
  auto v = Vocabulary::from_codes({"I25", "E11", "I10"});
  const std::string path = "vocab_test.txt";
  v.save(path);
  auto loaded = Vocabulary::load(path);
  CHECK(loaded.codes() == v.codes());
  CHECK(loaded.content_hash() == v.content_hash());
  std::remove(path.c_str());
}

TEST_CASE("tokenize: yearly grid with healthy fill") {
  auto v = Vocabulary::from_codes({"A", "B"});
  TemporalGrid grid{40, 44};
  EventSequence seq;
  seq.subject_id = 1;
  seq.events = {{"A", 41.7}, {"B", 43.0}};
  auto ts = tokenize(seq, grid, v);
  // years: 40 healthy, 41 A, 42 healthy, 43 B, 44 healthy
  CHECK(ts.tokens == std::vector<int>({0, v.index("A"), 0, v.index("B"), 0}));
  CHECK(ts.ages == std::vector<int>({40, 41, 42, 43, 44}));
}

TEST_CASE("simultaneous events ordered by vocabulary index") {
  auto v = Vocabulary::from_codes({"Z", "A"});
  TemporalGrid grid{50, 51};
  EventSequence seq;
  seq.events = {{"Z", 50.2}, {"A", 50.9}};
  auto ts = tokenize(seq, grid, v);
  CHECK(ts.tokens == std::vector<int>({v.index("A"), v.index("Z"), 0}));
  CHECK(ts.ages == std::vector<int>({50, 50, 51}));
}

TEST_CASE("age deltas between consecutive tokens are 0 or 1") {
  auto v = Vocabulary::from_codes({"A", "B", "C"});
  TemporalGrid grid{40, 60};
  EventSequence seq;
  seq.events = {{"A", 40.0}, {"B", 40.5}, {"C", 55.0}};
  auto ts = tokenize(seq, grid, v);
  for (std::size_t i = 1; i < ts.ages.size(); ++i) {
    const int d = ts.ages[i] - ts.ages[i - 1];
    CHECK((d == 0 || d == 1));
  }
}

TEST_CASE("events outside the grid are rejected") {
  auto v = Vocabulary::from_codes({"A"});
  TemporalGrid grid{40, 50};
  EventSequence early;
  early.events = {{"A", 39.2}};
  CHECK_THROWS_AS(tokenize(early, grid, v), RangeError);
  EventSequence late;
  late.events = {{"A", 51.0}};
  CHECK_THROWS_AS(tokenize(late, grid, v), RangeError);
}

TEST_CASE("unknown code is rejected") {
  auto v = Vocabulary::from_codes({"A"});
  TemporalGrid grid{40, 50};
  EventSequence seq;
  seq.events = {{"Q", 45.0}};
  CHECK_THROWS_AS(tokenize(seq, grid, v), VocabError);
}

TEST_CASE("over-length streams drop the oldest whole years") {
  auto v = Vocabulary::from_codes({"A", "B"});
  TemporalGrid grid{0, 9};  // 10 years
  EventSequence seq;
  seq.events = {{"A", 0.0}, {"B", 0.0}, {"A", 9.0}};
  // full stream: ages 0,0,1..8,9 -> 11 tokens; max_len 10 drops year 0 entirely
  auto ts = tokenize(seq, grid, v, 10);
  REQUIRE(ts.tokens.size() <= 10);
  CHECK(ts.ages.front() == 1);
  CHECK(ts.ages.back() == 9);
  CHECK(ts.tokens.back() == v.index("A"));
  // no partial years: every surviving age appears with all its tokens
  for (int a : ts.ages) CHECK(a >= 1);
}

TEST_CASE("detokenize drops healthy and inverts event years") {
  auto v = Vocabulary::from_codes({"A", "B"});
  TemporalGrid grid{40, 49};
  EventSequence seq;
  seq.subject_id = 42;
  seq.events = {{"A", 41.3}, {"B", 44.8}};
  auto back = detokenize(tokenize(seq, grid, v), v, 42);
  CHECK(back.subject_id == 42);
  REQUIRE(back.events.size() == 2);
  CHECK(back.events[0].code == "A");
  CHECK(back.events[0].age == 41.0);  // floored to the year grid
  CHECK(back.events[1].code == "B");
  CHECK(back.events[1].age == 44.0);
}

TEST_CASE("detokenize rejects MASK") {
  auto v = Vocabulary::from_codes({"A"});
  TokenStream ts;
  ts.tokens = {0, kMaskToken};
  ts.ages = {40, 41};
  CHECK_THROWS_AS(detokenize(ts, v), VocabError);
}

TEST_CASE("tokenize/detokenize round trip on random sequences") {
  Rng rng(6);
  auto v = Vocabulary::from_codes({"C0", "C1", "C2", "C3", "C4"});
  TemporalGrid grid{40, 70};
  for (int rep = 0; rep < 100; ++rep) {
    EventSequence seq;
    std::set<std::pair<int, std::string>> used;
    const int n = static_cast<int>(rng.integer(6));
    for (int e = 0; e < n; ++e) {
      const int year = 40 + static_cast<int>(rng.integer(31));
      const std::string code = "C" + std::to_string(rng.integer(5));
      if (!used.insert({year, code}).second) continue;  // one code per year
      seq.events.push_back({code, year + rng.uniform()});
    }
    std::sort(seq.events.begin(), seq.events.end(),
              [](const Event& a, const Event& b) { return a.age < b.age; });
    auto back = detokenize(tokenize(seq, grid, v, 256), v);
    REQUIRE(back.events.size() == seq.events.size());
    // same (year, code) multiset, ages floored
    std::multiset<std::pair<int, std::string>> want, got;
    for (const auto& ev : seq.events) want.insert({static_cast<int>(ev.age), ev.code});
    for (const auto& ev : back.events) got.insert({static_cast<int>(ev.age), ev.code});
    CHECK(want == got);
  }
}

TEST_CASE("vocabulary built from a cohort covers every event code") {
  CohortConfig cfg;
  cfg.n_subjects = 40;
  cfg.organs = {{"heart", 3, 0.2}};
  auto cohort = generate_synthetic_cohort(cfg, 9);
  auto v = Vocabulary::build(cohort);
  for (const auto& s : cohort.subjects)
    for (const auto& ev : s.seq.events) CHECK(v.contains(ev.code));
}
