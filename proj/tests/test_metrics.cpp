#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <random>

#include "icser/config.hpp"
#include "icser/experiment.hpp"
#include "icser/metrics.hpp"

using namespace icser;

namespace {

SpeakerResult speaker(int id, std::initializer_list<bool> matches) {
  SpeakerResult r;
  r.speaker_id = id;
  r.matches.assign(matches);
  return r;
}

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.feature_dim = 16;
  cfg.model_dim = 16;
  cfg.ffn_dim = 32;
  cfg.heads = 2;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.qformer_layers = 1;
  cfg.query_len = 2;
  cfg.dropout_rate = 0.0;
  return cfg;
}

Corpus tiny_corpus() {
  CorpusSpec spec;
  spec.train_speakers = 1;
  spec.valid_speakers = 1;
  spec.test_speakers = 3;
  spec.utterances_per_emotion = 2;
  spec.seed = 77;
  return generate_corpus(spec);
}

}  // namespace

TEST_CASE("ua_spk hand-computed example") {
  MetricsRow row = ua_spk({speaker(0, {true, false}), speaker(1, {true, true})});
  CHECK(row.ua_spk == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(row.median == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(row.max == 1.0);
  CHECK(row.min == 0.5);
  CHECK(row.sigma == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("ua_spk perfect speakers") {
  MetricsRow row = ua_spk({speaker(0, {true, true}), speaker(1, {true})});
  CHECK(row.ua_spk == 1.0);
  CHECK(row.sigma == 0.0);
}

TEST_CASE("ua_spk equals an independent mean-of-means oracle") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::uniform_int_distribution<int> n_speakers(1, 10), n_utts(1, 12), coin(0, 1);
    std::vector<SpeakerResult> results;
    const int s = n_speakers(rng);
    for (int i = 0; i < s; ++i) {
      SpeakerResult r;
      r.speaker_id = i;
      const int n = n_utts(rng);
      for (int j = 0; j < n; ++j) r.matches.push_back(coin(rng) == 1);
      results.push_back(std::move(r));
    }
    double oracle = 0.0;
    for (const SpeakerResult& r : results) {
      double hits = 0.0;
      for (bool b : r.matches) hits += b;
      oracle += hits / static_cast<double>(r.matches.size());
    }
    oracle /= static_cast<double>(results.size());
    CHECK(std::abs(ua_spk(results).ua_spk - oracle) <= 1e-12);
  }
}

TEST_CASE("ua_spk invariances") {
  std::vector<SpeakerResult> results = {speaker(0, {true, false, true}),
                                        speaker(1, {false}),
                                        speaker(2, {true, true, false, false})};
  MetricsRow base = ua_spk(results);

  SUBCASE("speaker order does not matter") {
    std::reverse(results.begin(), results.end());
    CHECK(ua_spk(results).ua_spk == base.ua_spk);
    CHECK(ua_spk(results).sigma == base.sigma);
  }

  SUBCASE("utterance order within a speaker does not matter") {
    std::reverse(results[2].matches.begin(), results[2].matches.end());
    CHECK(ua_spk(results).ua_spk == base.ua_spk);
  }

  SUBCASE("speakers weigh equally regardless of utterance counts") {
    // doubling one speaker's utterances (same accuracy) changes nothing
    std::vector<SpeakerResult> padded = results;
    padded[1].matches = {false, false, false};
    CHECK(ua_spk(padded).ua_spk == doctest::Approx(base.ua_spk).epsilon(1e-15));
    // but flipping that speaker's accuracy moves the mean by exactly 1/(3*n)
    padded[1].matches = {true, false, false};
    CHECK(ua_spk(padded).ua_spk ==
          doctest::Approx(base.ua_spk + (1.0 / 3.0) / 3.0).epsilon(1e-12));
  }
}

TEST_CASE("ua_spk rejects empty input") {
  CHECK_THROWS(ua_spk({}));
  CHECK_THROWS(ua_spk({SpeakerResult{}}));
}

TEST_CASE("csv schema is stable") {
  CHECK(std::string(kMetricsCsvHeader) == "model,k,setting,ua_spk,sigma,median,max,min");
  MetricsRow row;
  row.model = "meta";
  row.k = 2;
  row.setting = "TU+LD";
  row.ua_spk = 0.5;
  row.sigma = 0.1;
  row.median = 0.5;
  row.max = 0.9;
  row.min = 0.1;
  CHECK(row.csv_line() == "meta,2,TU+LD,0.500000,0.100000,0.500000,0.900000,0.100000");

  MetricsRow inf;
  inf.model = "meta";
  inf.k = 0;
  inf.setting = "TO+LD";
  inf.infeasible = true;
  CHECK(inf.csv_line() == "meta,0,TO+LD,infeasible,,,,");
}

TEST_CASE("evaluate_cell is deterministic and thread-count independent") {
  ModelConfig mc = tiny_model();
  SpeechLM model(mc, 123);
  Corpus corpus = tiny_corpus();
  EncodedSplit encoded1 = encode_split(model, corpus.test, 1);
  EncodedSplit encoded2 = encode_split(model, corpus.test, 2);

  EvalCell cell;
  cell.k = 2;
  cell.setting = SelectionSetting::parse("TU+LD");
  CellOptions opts;
  opts.seed = 99;
  opts.infer.beam_size = 2;
  opts.threads = 1;
  MetricsRow a = evaluate_cell(model, encoded1, cell, opts);
  opts.threads = 2;
  MetricsRow b = evaluate_cell(model, encoded2, cell, opts);
  CHECK(a.ua_spk == b.ua_spk);
  CHECK(a.sigma == b.sigma);
  CHECK(a.median == b.median);

  SUBCASE("prediction records align with the metrics") {
    std::vector<PredictionRecord> recs;
    MetricsRow c = evaluate_cell_predictions(model, encoded1, cell, opts, &recs);
    CHECK(c.ua_spk == a.ua_spk);
    CHECK(recs.size() == corpus.test.size());
    for (const PredictionRecord& r : recs) {
      CHECK(r.k == 2);
      CHECK(r.setting == "TU+LD");
      CHECK(r.match == exact_match(r.predicted, r.reference));
    }
  }
}

TEST_CASE("infeasible cells are marked, not skipped") {
  ModelConfig mc = tiny_model();
  SpeechLM model(mc, 123);
  Corpus corpus = tiny_corpus();
  EncodedSplit encoded = encode_split(model, corpus.test, 1);

  EvalCell cell;
  cell.k = 0;
  cell.setting = SelectionSetting::parse("TO+LD");  // k=0 cannot overlap the target
  CellOptions opts;
  opts.threads = 1;
  MetricsRow row = evaluate_cell(model, encoded, cell, opts);
  CHECK(row.infeasible);
}

TEST_CASE("config round-trips through json") {
  CorpusSpec spec;
  spec.noise_sigma = 0.75;
  spec.confusable_a = EmotionLabel::kFear;
  spec.confusable_b = EmotionLabel::kDisgust;
  nlohmann::json j = spec;
  CorpusSpec back = j.get<CorpusSpec>();
  CHECK(back.noise_sigma == 0.75);
  CHECK(back.confusable_a == EmotionLabel::kFear);
  CHECK(back.confusable_b == EmotionLabel::kDisgust);

  TrainConfig tc;
  tc.max_steps = 123;
  tc.meta_setting = "TO+LD";
  nlohmann::json tj = tc;
  TrainConfig tback = tj.get<TrainConfig>();
  CHECK(tback.max_steps == 123);
  CHECK(tback.meta_setting == "TO+LD");

  nlohmann::json bad = {{"max_stepz", 5}};
  CHECK_THROWS_WITH_AS(bad.get<TrainConfig>(), doctest::Contains("max_stepz"),
                       std::invalid_argument);
}
