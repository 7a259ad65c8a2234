#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <array>
#include <map>
#include <set>

#include "icser/selection.hpp"

using namespace icser;

namespace {

Corpus one_speaker_corpus(int per_emotion, std::uint64_t seed = 1234) {
  CorpusSpec spec;
  spec.train_speakers = 1;
  spec.valid_speakers = 1;
  spec.test_speakers = 1;
  spec.utterances_per_emotion = per_emotion;
  spec.seed = seed;
  return generate_corpus(spec);
}

std::vector<const Utterance*> pool_of(const Corpus& corpus) {
  std::vector<const Utterance*> pool;
  for (const Utterance& u : corpus.train) pool.push_back(&u);
  return pool;
}

std::array<int, kNumEmotions> label_counts(const EnrollmentSet& set) {
  std::array<int, kNumEmotions> c{};
  for (const Utterance* u : set.items) c[static_cast<size_t>(u->emotion)] += 1;
  return c;
}

// chi-square statistic against a uniform expectation
double chi_square(const std::map<std::array<int, kNumEmotions>, int>& observed,
                  int n_draws, int n_categories) {
  const double expected = static_cast<double>(n_draws) / n_categories;
  double stat = 0.0;
  int seen = 0;
  for (const auto& [key, count] : observed) {
    stat += (count - expected) * (count - expected) / expected;
    ++seen;
  }
  stat += (n_categories - seen) * expected;  // categories never drawn
  return stat;
}

}  // namespace

TEST_CASE("setting strings parse and round-trip") {
  for (const char* s : {"TU+LU", "TU+LD", "TO+LD", "TE+LU", "TE+LD", "TO+LU"})
    CHECK(SelectionSetting::parse(s).str() == s);
  CHECK(SelectionSetting::parse("TU+LO:neutral").str() == "TU+LO:neutral");
  CHECK(SelectionSetting::parse("TE+LO:joy").lo_emotion == EmotionLabel::kJoy);
  CHECK_THROWS(SelectionSetting::parse("XX+LU"));
  CHECK_THROWS(SelectionSetting::parse("TU-LU"));
  CHECK_THROWS(SelectionSetting::parse("TU+LO"));
  CHECK_THROWS(SelectionSetting::parse("TU+LO:boredom"));
}

TEST_CASE("k=0 with TU gives the empty set") {
  Corpus corpus = one_speaker_corpus(3);
  auto pool = pool_of(corpus);
  std::mt19937_64 rng(1);
  EnrollmentSet set = select_procedure(corpus.train[0], 0, pool,
                                       SelectionSetting::parse("TU+LU"), rng);
  CHECK(set.k() == 0);
  CHECK(check_constraints(set, corpus.train[0], SelectionSetting::parse("TU+LU")).ok);
}

TEST_CASE("TO+LD at k=7 forces all seven emotions exactly once") {
  Corpus corpus = one_speaker_corpus(3);
  auto pool = pool_of(corpus);
  std::mt19937_64 rng(2);
  const SelectionSetting setting = SelectionSetting::parse("TO+LD");
  for (int trial = 0; trial < 200; ++trial) {
    EnrollmentSet set = select_procedure(corpus.train[0], 7, pool, setting, rng);
    REQUIRE(set.k() == 7);
    auto counts = label_counts(set);
    for (int e = 0; e < kNumEmotions; ++e) CHECK(counts[static_cast<size_t>(e)] == 1);
  }
}

TEST_CASE("TU+LD draws distinct labels uniformly and never the target") {
  Corpus corpus = one_speaker_corpus(3);
  auto pool = pool_of(corpus);
  const Utterance& target = corpus.train[0];
  const SelectionSetting setting = SelectionSetting::parse("TU+LD");
  std::mt19937_64 rng(3);

  std::map<std::array<int, kNumEmotions>, int> combos;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    EnrollmentSet set = select_procedure(target, 3, pool, setting, rng);
    REQUIRE(set.k() == 3);
    std::set<EmotionLabel> labels;
    for (const Utterance* u : set.items) {
      labels.insert(u->emotion);
      CHECK(!u->same_utterance(target));
    }
    CHECK(labels.size() == 3u);
    combos[label_counts(set)] += 1;
  }
  // 35 possible distinct-label triples; chi-square df=34, p=0.01 -> 56.06
  CHECK(combos.size() == 35u);
  CHECK(chi_square(combos, draws, 35) < 56.06);
}

TEST_CASE("check_constraints reports violations") {
  Corpus corpus = one_speaker_corpus(3);
  const Utterance& target = corpus.train[0];

  EnrollmentSet empty;
  CHECK(check_constraints(empty, target, SelectionSetting::parse("TU+LU")).ok);

  // build a set that contains the target's emotion and check TE flags it
  EnrollmentSet bad;
  for (const Utterance& u : corpus.train)
    if (u.emotion == target.emotion && !u.same_utterance(target)) {
      bad.items.push_back(&u);
      break;
    }
  ConstraintReport rep = check_constraints(bad, target, SelectionSetting::parse("TE+LU"));
  CHECK(!rep.ok);
  REQUIRE(!rep.violations.empty());
  CHECK(rep.violations[0].find("target emotion present") != std::string::npos);

  EnrollmentSet self;
  self.items.push_back(&target);
  ConstraintReport rep2 = check_constraints(self, target, SelectionSetting::parse("TU+LU"));
  CHECK(!rep2.ok);
}

TEST_CASE("soundness: sampled sets always satisfy their setting") {
  Corpus corpus = one_speaker_corpus(8);
  auto pool = pool_of(corpus);
  std::mt19937_64 rng(4);
  std::vector<std::string> settings = {"TU+LU", "TU+LD", "TO+LD", "TE+LD", "TE+LU"};
  for (EmotionLabel e : all_emotions()) settings.push_back("TU+LO:" + emotion_key(e));

  std::uniform_int_distribution<size_t> pick_target(0, corpus.train.size() - 1);
  for (const std::string& s : settings) {
    const SelectionSetting setting = SelectionSetting::parse(s);
    int drawn = 0;
    while (drawn < 2000) {
      const Utterance& target = corpus.train[pick_target(rng)];
      std::uniform_int_distribution<int> pick_k(setting.target == SelectionSetting::Target::kTO ? 1 : 0,
                                                setting.label == SelectionSetting::Label::kLD ? 7 : 7);
      int k = pick_k(rng);
      // skip combinations that are genuinely infeasible for this target
      if (satisfying_label_multisets(k, target.emotion, setting).empty()) continue;
      if (setting.label == SelectionSetting::Label::kLO &&
          setting.lo_emotion == target.emotion && k > 7)
        continue;
      EnrollmentSet set;
      try {
        set = select_procedure(target, k, pool, setting, rng);
      } catch (const std::runtime_error&) {
        continue;  // pool exhausted for this draw
      }
      ConstraintReport rep = check_constraints(set, target, setting);
      CHECK(rep.ok);
      ++drawn;
    }
  }
}

TEST_CASE("coverage: every feasible label multiset appears on a small pool") {
  Corpus corpus = one_speaker_corpus(2);  // 14 utterances
  auto pool = pool_of(corpus);
  const Utterance& target = corpus.train[0];
  const SelectionSetting setting = SelectionSetting::parse("TU+LU");
  const int k = 3;

  // brute-force feasibility: counts <= per-emotion availability
  std::array<int, kNumEmotions> avail{};
  for (const Utterance* u : pool)
    if (!u->same_utterance(target)) avail[static_cast<size_t>(u->emotion)] += 1;
  std::set<std::array<int, kNumEmotions>> feasible;
  for (const auto& c : satisfying_label_multisets(k, target.emotion, setting)) {
    bool ok = true;
    for (int e = 0; e < kNumEmotions; ++e)
      ok = ok && c[static_cast<size_t>(e)] <= avail[static_cast<size_t>(e)];
    if (ok) feasible.insert(c);
  }
  REQUIRE(!feasible.empty());

  std::set<std::array<int, kNumEmotions>> seen;
  std::mt19937_64 rng(5);
  for (int i = 0; i < 50000 && seen.size() < feasible.size(); ++i)
    seen.insert(label_counts(select_procedure(target, k, pool, setting, rng)));
  CHECK(seen == feasible);
}

TEST_CASE("meta episodes draw k uniformly and stay valid") {
  Corpus corpus = one_speaker_corpus(8);
  auto pool = pool_of(corpus);
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<size_t> pick_target(0, corpus.train.size() - 1);

  std::array<int, 8> k_hist{};
  const int draws = 80000;
  const SelectionSetting tulu = SelectionSetting::parse("TU+LU");
  for (int i = 0; i < draws; ++i) {
    const Utterance& target = corpus.train[pick_target(rng)];
    EnrollmentSet set = sample_meta_episode(target, pool, rng);
    k_hist[static_cast<size_t>(set.k())] += 1;
    if (i < 2000) {
      CHECK(check_constraints(set, target, tulu).ok);
      for (const Utterance* u : set.items) CHECK(!u->same_utterance(target));
    }
  }
  // chi-square df=7, p=0.01 -> 18.475
  const double expected = draws / 8.0;
  double stat = 0.0;
  for (int c : k_hist) stat += (c - expected) * (c - expected) / expected;
  CHECK(stat < 18.475);
}

TEST_CASE("infeasible combinations fail fast with a reason") {
  Corpus corpus = one_speaker_corpus(3);
  auto pool = pool_of(corpus);
  const Utterance& target = corpus.train[0];  // anger, by generation order
  std::mt19937_64 rng(7);

  // TO with k=0 cannot contain the target emotion
  CHECK_THROWS_WITH_AS(
      select_procedure(target, 0, pool, SelectionSetting::parse("TO+LU"), rng),
      doctest::Contains("no satisfying label multiset"), std::invalid_argument);

  // TO+LO over a different emotion contradicts itself
  SelectionSetting bad = SelectionSetting::parse("TO+LO:neutral");
  REQUIRE(target.emotion != EmotionLabel::kNeutral);
  CHECK_THROWS_AS(select_procedure(target, 2, pool, bad, rng), std::invalid_argument);

  // TE+LO of the target's own emotion contradicts itself
  SelectionSetting bad2 = SelectionSetting::parse("TE+LO:" + emotion_key(target.emotion));
  CHECK_THROWS_AS(select_procedure(target, 2, pool, bad2, rng), std::invalid_argument);

  // k=8 is out of range
  CHECK_THROWS_AS(select_procedure(target, 8, pool, SelectionSetting::parse("TU+LU"), rng),
                  std::invalid_argument);

  // pool exhaustion: 3 per emotion minus the target leaves 2 of its label
  SelectionSetting lo_own = SelectionSetting::parse("TU+LO:" + emotion_key(target.emotion));
  CHECK_THROWS_WITH_AS(select_procedure(target, 3, pool, lo_own, rng),
                       doctest::Contains("pool exhausted"), std::runtime_error);

  // speaker mismatch between pool and target
  std::vector<const Utterance*> wrong_pool;
  for (const Utterance& u : corpus.valid) wrong_pool.push_back(&u);
  CHECK_THROWS_AS(
      select_procedure(target, 1, wrong_pool, SelectionSetting::parse("TU+LU"), rng),
      std::invalid_argument);
}

TEST_CASE("selection is deterministic under a fixed seed") {
  Corpus corpus = one_speaker_corpus(8);
  auto pool = pool_of(corpus);
  const Utterance& target = corpus.train[5];
  const SelectionSetting setting = SelectionSetting::parse("TU+LD");

  std::mt19937_64 rng_a(99), rng_b(99);
  for (int i = 0; i < 50; ++i) {
    EnrollmentSet a = select_procedure(target, 4, pool, setting, rng_a);
    EnrollmentSet b = select_procedure(target, 4, pool, setting, rng_b);
    REQUIRE(a.k() == b.k());
    for (int j = 0; j < a.k(); ++j)
      CHECK(a.items[static_cast<size_t>(j)] == b.items[static_cast<size_t>(j)]);
  }
}
