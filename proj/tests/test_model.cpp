#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "icser/model.hpp"

using namespace icser;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.feature_dim = 6;
  cfg.model_dim = 16;
  cfg.ffn_dim = 32;
  cfg.heads = 2;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.qformer_layers = 1;
  cfg.query_len = 4;
  cfg.max_sequences = 16;
  cfg.dropout_rate = 0.0;
  return cfg;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::int64_t i = 0; i < a.size(); ++i)
    if (a.data()[static_cast<size_t>(i)] != b.data()[static_cast<size_t>(i)])
      return false;
  return true;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a.data()[static_cast<size_t>(i)] -
                                     b.data()[static_cast<size_t>(i)]));
  return worst;
}

}  // namespace

TEST_CASE("speech encoder downsamples time by four with ceil") {
  ModelConfig cfg = tiny_config();
  std::mt19937_64 rng(1);
  ParamRegistry reg;
  SpeechEncoder enc(cfg, rng, reg, "speech");
  ForwardCtx fwd;

  Tensor eight = Tensor::randn(Shape{8, cfg.feature_dim}, rng);
  CHECK(enc.forward(eight, fwd).rows() == 2);
  Tensor seven = Tensor::randn(Shape{7, cfg.feature_dim}, rng);
  CHECK(enc.forward(seven, fwd).rows() == 2);
  Tensor one = Tensor::randn(Shape{1, cfg.feature_dim}, rng);
  CHECK(enc.forward(one, fwd).rows() == 1);
  for (int m : {1, 2, 3, 4, 5, 9, 16, 33})
    CHECK(SpeechEncoder::output_len(m) == (m + 3) / 4);
  CHECK(enc.forward(eight, fwd).cols() == cfg.model_dim);

  SUBCASE("identical inputs, identical outputs with dropout off") {
    CHECK(tensors_equal(enc.forward(eight, fwd), enc.forward(eight, fwd)));
  }

  SUBCASE("empty input rejected") {
    CHECK_THROWS(enc.forward(Tensor::zeros(Shape{0, cfg.feature_dim}), fwd));
  }
}

TEST_CASE("attentive pooling") {
  std::mt19937_64 rng(2);
  ParamRegistry reg;
  AttentivePooling pool(8, rng, reg, "pool");

  SUBCASE("single row pools to itself") {
    Tensor h = Tensor::randn(Shape{1, 8}, rng);
    Tensor out = pool.forward(h);
    for (int j = 0; j < 8; ++j)
      CHECK(out.at(j) == doctest::Approx(h.at(0, j)).epsilon(1e-12));
  }

  SUBCASE("two identical rows pool to that row") {
    Tensor row = Tensor::randn(Shape{1, 8}, rng);
    Tensor h = concat_rows({row, row});
    Tensor out = pool.forward(h);
    for (int j = 0; j < 8; ++j)
      CHECK(out.at(j) == doctest::Approx(row.at(0, j)).epsilon(1e-12));
  }

  SUBCASE("matches the explicit weighted-sum oracle") {
    Tensor h = Tensor::randn(Shape{5, 8}, rng);
    Tensor w = pool.weights(h);
    double total = 0.0;
    for (int t = 0; t < 5; ++t) {
      CHECK(w.at(t) >= 0.0);
      total += w.at(t);
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    Tensor out = pool.forward(h);
    for (int j = 0; j < 8; ++j) {
      double oracle = 0.0;
      for (int t = 0; t < 5; ++t) oracle += w.at(t) * h.at(t, j);
      CHECK(out.at(j) == doctest::Approx(oracle).epsilon(1e-12));
    }
  }
}

TEST_CASE("classifier outputs a stable probability vector") {
  ModelConfig cfg = tiny_config();
  ClassifierModel model(cfg, 77);
  std::mt19937_64 rng(3);
  Tensor frames = Tensor::randn(Shape{9, cfg.feature_dim}, rng);

  Tensor p = model.classify(frames);
  CHECK(p.dim(0) == kNumEmotions);
  double total = 0.0;
  for (int i = 0; i < kNumEmotions; ++i) {
    CHECK(p.at(i) >= 0.0);
    total += p.at(i);
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));

  const int first = model.predict(frames);
  for (int trial = 0; trial < 5; ++trial) CHECK(model.predict(frames) == first);
}

TEST_CASE("qformer emits a fixed-length representation") {
  ModelConfig cfg = tiny_config();
  std::mt19937_64 rng(4);
  ParamRegistry reg;
  QFormer qf(cfg, rng, reg, "qf");
  ForwardCtx fwd;

  for (int len : {1, 3, 17, 300, 500}) {
    Tensor h = Tensor::randn(Shape{len, cfg.model_dim}, rng);
    Tensor u = qf.forward(h, fwd);
    CHECK(u.rows() == cfg.query_len);
    CHECK(u.cols() == cfg.model_dim);
  }

  SUBCASE("row order of the input is visible through key positions") {
    Tensor h = Tensor::randn(Shape{6, cfg.model_dim}, rng);
    std::vector<Tensor> reversed_rows;
    for (int r = 5; r >= 0; --r) reversed_rows.push_back(slice_rows(h, r, 1));
    Tensor h_rev = concat_rows(reversed_rows);
    Tensor u = qf.forward(h, fwd);
    Tensor u_rev = qf.forward(h_rev, fwd);
    CHECK(max_abs_diff(u, u_rev) > 1e-6);
  }

  SUBCASE("gradient flows to the query embedding") {
    Tensor h = Tensor::randn(Shape{5, cfg.model_dim}, rng);
    Tensor* queries = reg.find("qf.queries");
    REQUIRE(queries != nullptr);
    std::mt19937_64 wrng(8);
    Tensor w = Tensor::randn(Shape{cfg.query_len, cfg.model_dim}, wrng);
    const double err = param_finite_diff_check(
        [&] { return sum(mul(qf.forward(h, fwd), w)); }, *queries, 1e-5);
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("prompt assembly follows the interleaving rule") {
  ModelConfig cfg = tiny_config();
  SpeechLM model(cfg, 5);
  const Vocabulary& vocab = model.vocab();
  ForwardCtx fwd;
  std::mt19937_64 rng(6);

  const TokenSeq instruction = vocab.tokenize(instruction_text());
  Tensor target = Tensor::randn(Shape{10, cfg.feature_dim}, rng);

  SUBCASE("k=0 gives instruction + target speech") {
    PromptContext ctx = model.assemble_context(instruction, {}, target, fwd);
    REQUIRE(ctx.segments.size() == 2);
    CHECK(ctx.enrollment_count() == 0);
    CHECK(!ctx.segments[0].is_speech);
    CHECK(ctx.segments[1].is_speech);
    CHECK(ctx.embedded.rows() ==
          static_cast<int>(instruction.size()) + cfg.query_len);
  }

  SUBCASE("k=2 interleaves speech/label pairs in order") {
    std::vector<SpeechLabelPair> pairs = {
        {Tensor::randn(Shape{8, cfg.feature_dim}, rng), vocab.label_text(EmotionLabel::kJoy)},
        {Tensor::randn(Shape{5, cfg.feature_dim}, rng), vocab.label_text(EmotionLabel::kFear)}};
    PromptContext ctx = model.assemble_context(instruction, pairs, target, fwd);
    REQUIRE(ctx.segments.size() == 6);
    CHECK(ctx.enrollment_count() == 2);
    const bool expected_speech[6] = {false, true, false, true, false, true};
    for (int i = 0; i < 6; ++i) {
      CHECK(ctx.segments[static_cast<size_t>(i)].is_speech == expected_speech[i]);
      CHECK(ctx.segments[static_cast<size_t>(i)].seq_index == i);
    }
    // metadata identifies the enrollment labels in order
    CHECK(ctx.segments[2].tokens == vocab.label_text(EmotionLabel::kJoy));
    CHECK(ctx.segments[4].tokens == vocab.label_text(EmotionLabel::kFear));
    // row-count arithmetic
    const int label_rows = static_cast<int>(vocab.label_text(EmotionLabel::kJoy).size());
    CHECK(ctx.embedded.rows() == static_cast<int>(instruction.size()) +
                                     2 * (cfg.query_len + label_rows) + cfg.query_len);
  }

  SUBCASE("capacity error beyond max_sequences") {
    ModelConfig small = cfg;
    small.max_sequences = 5;  // fits at most one pair
    SpeechLM tight(small, 5);
    std::vector<SpeechLabelPair> pairs = {
        {Tensor::randn(Shape{4, cfg.feature_dim}, rng), vocab.label_text(EmotionLabel::kJoy)},
        {Tensor::randn(Shape{4, cfg.feature_dim}, rng), vocab.label_text(EmotionLabel::kFear)}};
    CHECK_THROWS(tight.assemble_context(instruction, pairs, target, fwd));
  }
}

TEST_CASE("context encoding is live in segments and order") {
  ModelConfig cfg = tiny_config();
  SpeechLM model(cfg, 7);
  const Vocabulary& vocab = model.vocab();
  ForwardCtx fwd;
  std::mt19937_64 rng(8);

  const TokenSeq instruction = vocab.tokenize("Please select the appropriate emotion");
  std::vector<SpeechLabelPair> pairs = {
      {Tensor::randn(Shape{6, cfg.feature_dim}, rng), vocab.label_text(EmotionLabel::kJoy)},
      {Tensor::randn(Shape{9, cfg.feature_dim}, rng), vocab.label_text(EmotionLabel::kAnger)}};
  Tensor target = Tensor::randn(Shape{7, cfg.feature_dim}, rng);

  PromptContext ctx = model.assemble_context(instruction, pairs, target, fwd);
  Tensor c = model.encode_context(ctx, fwd);
  CHECK(c.rows() == ctx.embedded.rows());
  CHECK(c.rows() == ctx.total_rows());

  SUBCASE("swapping the two enrollment pairs changes the encoding") {
    std::vector<SpeechLabelPair> swapped = {pairs[1], pairs[0]};
    PromptContext ctx2 = model.assemble_context(instruction, swapped, target, fwd);
    Tensor c2 = model.encode_context(ctx2, fwd);
    CHECK(max_abs_diff(c, c2) > 1e-6);
  }

  SUBCASE("deterministic with dropout off") {
    PromptContext ctx2 = model.assemble_context(instruction, pairs, target, fwd);
    Tensor c2 = model.encode_context(ctx2, fwd);
    CHECK(tensors_equal(c, c2));
  }
}

TEST_CASE("decoder is causal and closed over the vocabulary") {
  ModelConfig cfg = tiny_config();
  SpeechLM model(cfg, 9);
  const Vocabulary& vocab = model.vocab();
  ForwardCtx fwd;
  std::mt19937_64 rng(10);

  const TokenSeq instruction = vocab.tokenize("Please select the appropriate emotion");
  Tensor target = Tensor::randn(Shape{8, cfg.feature_dim}, rng);
  PromptContext ctx = model.assemble_context(instruction, {}, target, fwd);
  Tensor c = model.encode_context(ctx, fwd);

  SUBCASE("logits cover the vocabulary") {
    Tensor step = model.decode_step(c, {}, fwd);
    CHECK(step.dim(0) == vocab.size());
  }

  SUBCASE("appending tokens never changes earlier logits") {
    TokenSeq prefix = {vocab.emotion_token(EmotionLabel::kJoy)};
    Tensor before = model.decode_logits(c, prefix, fwd);
    TokenSeq longer = prefix;
    longer.push_back(vocab.eos_id());
    longer.push_back(vocab.emotion_token(EmotionLabel::kFear));
    Tensor after = model.decode_logits(c, longer, fwd);
    for (int r = 0; r < before.rows(); ++r)
      for (int col = 0; col < before.cols(); ++col)
        CHECK(before.at(r, col) == after.at(r, col));  // bit-identical
  }

  SUBCASE("unknown token in prefix is a vocabulary error") {
    CHECK_THROWS(model.decode_logits(c, {vocab.size() + 3}, fwd));
  }

  SUBCASE("uniform-logits stub scores one token at -log vocab") {
    // Zeroing the output projection makes every logit equal.
    Tensor* w = model.params().find("lm.out.w");
    Tensor* b = model.params().find("lm.out.b");
    REQUIRE(w != nullptr);
    std::fill(w->mutable_data().begin(), w->mutable_data().end(), 0.0);
    std::fill(b->mutable_data().begin(), b->mutable_data().end(), 0.0);
    const double lp = model.sequence_log_prob(c, {vocab.emotion_token(EmotionLabel::kJoy)});
    CHECK(lp == doctest::Approx(-std::log(static_cast<double>(vocab.size()))).epsilon(1e-12));
  }
}

TEST_CASE("prompt metadata is invertible") {
  ModelConfig cfg = tiny_config();
  SpeechLM model(cfg, 11);
  const Vocabulary& vocab = model.vocab();
  ForwardCtx fwd;
  std::mt19937_64 rng(12);

  for (int k = 0; k <= 3; ++k) {
    std::vector<SpeechLabelPair> pairs;
    for (int i = 0; i < k; ++i)
      pairs.push_back({Tensor::randn(Shape{5, cfg.feature_dim}, rng),
                       vocab.label_text(static_cast<EmotionLabel>(i))});
    PromptContext ctx = model.assemble_context(vocab.tokenize("Please select"), pairs,
                                               Tensor::randn(Shape{6, cfg.feature_dim}, rng),
                                               fwd);
    CHECK(ctx.enrollment_count() == k);
    // sequence position indices are 0..2k+1 with no gaps
    for (size_t i = 0; i < ctx.segments.size(); ++i)
      CHECK(ctx.segments[i].seq_index == static_cast<int>(i));
    // modality pattern: text, (speech, text)*k, speech
    CHECK(!ctx.segments.front().is_speech);
    CHECK(ctx.segments.back().is_speech);
    for (int i = 0; i < k; ++i) {
      CHECK(ctx.segments[static_cast<size_t>(2 * i + 1)].is_speech);
      CHECK(!ctx.segments[static_cast<size_t>(2 * i + 2)].is_speech);
    }
  }
}

TEST_CASE("frozen speech encoder receives no gradient") {
  ModelConfig cfg = tiny_config();
  SpeechLM model(cfg, 13);
  model.set_group_trainable("speech.", false);
  const Vocabulary& vocab = model.vocab();
  ForwardCtx fwd;
  std::mt19937_64 rng(14);

  Tensor target = Tensor::randn(Shape{8, cfg.feature_dim}, rng);
  PromptContext ctx = model.assemble_context(vocab.tokenize("Please select"), {}, target, fwd);
  Tensor c = model.encode_context(ctx, fwd);
  Tensor logits = model.decode_step(c, {}, fwd);
  Tensor loss = label_smoothing_ce(logits, vocab.emotion_token(EmotionLabel::kJoy), 0.1);
  backward(loss);

  for (const auto& [name, t] : model.params().items) {
    if (name.rfind("speech.", 0) == 0) {
      CHECK(!t.requires_grad());
      CHECK(!t.has_grad());
    }
  }
  // trainable parts did get gradients
  Tensor* queries = model.params().find("qf.queries");
  REQUIRE(queries != nullptr);
  CHECK(queries->has_grad());
}
