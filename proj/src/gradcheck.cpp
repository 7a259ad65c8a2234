#include "icser/gradcheck.hpp"

#include <cmath>
#include <functional>
#include <random>

#include "icser/model.hpp"
#include "icser/rng_util.hpp"
#include "icser/tensor.hpp"

namespace icser {

namespace {

constexpr double kTol = 1e-4;

/// Random fixed projection so reductions of vector-valued ops have
/// non-degenerate gradients.
Tensor projector(const Shape& shape, std::mt19937_64& rng) {
  return Tensor::randn(shape, rng, 1.0);
}

using PointFn = std::function<double(std::mt19937_64&)>;

GradCheckReport run_points(const std::string& name, int points, std::uint64_t seed,
                           const PointFn& point) {
  GradCheckReport rep;
  rep.name = name;
  for (int i = 0; i < points; ++i) {
    std::mt19937_64 rng(seed_mix({seed, static_cast<std::uint64_t>(i)}));
    rep.max_rel_err = std::max(rep.max_rel_err, point(rng));
  }
  rep.pass = rep.max_rel_err <= kTol;
  return rep;
}

double end_to_end_point(std::mt19937_64& rng, int which_param) {
  ModelConfig cfg;
  cfg.feature_dim = 5;
  cfg.model_dim = 8;
  cfg.ffn_dim = 16;
  cfg.heads = 2;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.qformer_layers = 1;
  cfg.query_len = 2;
  cfg.dropout_rate = 0.0;
  SpeechLM model(cfg, rng());
  const Vocabulary& vocab = model.vocab();
  const TokenSeq instruction = vocab.tokenize("Please select the appropriate emotion");

  Tensor target_frames = Tensor::randn(Shape{6, cfg.feature_dim}, rng);
  Tensor enroll_frames = Tensor::randn(Shape{5, cfg.feature_dim}, rng);
  const TokenSeq enroll_label = vocab.label_text(EmotionLabel::kFear);
  const TokenSeq target_label = vocab.label_text(EmotionLabel::kJoy);

  ForwardCtx fwd;
  auto loss_from = [&](const Tensor& frames) {
    PromptContext prompt = model.assemble_context(
        instruction, {{enroll_frames, enroll_label}}, frames, fwd);
    Tensor c = model.encode_context(prompt, fwd);
    TokenSeq prefix(target_label.begin(), target_label.end() - 1);
    Tensor logits = model.decode_logits(c, prefix, fwd);
    Tensor total = Tensor::scalar(0.0);
    for (size_t t = 0; t < target_label.size(); ++t)
      total = add(total, label_smoothing_ce(
                             reshape(slice_rows(logits, static_cast<int>(t), 1),
                                     Shape{vocab.size()}),
                             target_label[t], 0.1));
    return total;
  };

  if (which_param == 0)
    return finite_diff_check([&](const Tensor& x) { return loss_from(x); },
                             target_frames, 1e-5);
  const char* names[] = {"", "qf.queries", "lm.seg", "lm.seqpos"};
  Tensor* p = model.params().find(names[which_param]);
  return param_finite_diff_check([&] { return loss_from(target_frames); }, *p, 1e-5);
}

}  // namespace

std::vector<GradCheckReport> run_gradient_suite(int points, std::uint64_t seed) {
  std::vector<GradCheckReport> out;

  out.push_back(run_points("matmul.lhs", points, seed_mix({seed, 1}), [](std::mt19937_64& rng) {
    Tensor a = Tensor::randn(Shape{5, 4}, rng);
    Tensor b = Tensor::randn(Shape{4, 3}, rng);
    return finite_diff_check([&](const Tensor& x) { return sum(matmul(x, b)); }, a);
  }));
  out.push_back(run_points("matmul.rhs", points, seed_mix({seed, 2}), [](std::mt19937_64& rng) {
    Tensor a = Tensor::randn(Shape{5, 4}, rng);
    Tensor b = Tensor::randn(Shape{4, 3}, rng);
    return finite_diff_check([&](const Tensor& x) { return sum(matmul(a, x)); }, b);
  }));
  out.push_back(run_points("linear", points, seed_mix({seed, 30}), [](std::mt19937_64& rng) {
    Tensor x = Tensor::randn(Shape{5, 4}, rng);
    Tensor w = Tensor::randn(Shape{4, 3}, rng);
    Tensor b = Tensor::randn(Shape{3}, rng);
    Tensor proj = Tensor::randn(Shape{5, 3}, rng);
    double e = finite_diff_check(
        [&](const Tensor& t) { return sum(mul(linear(t, w, b), proj)); }, x);
    e = std::max(e, finite_diff_check(
                        [&](const Tensor& t) { return sum(mul(linear(x, t, b), proj)); }, w));
    e = std::max(e, finite_diff_check(
                        [&](const Tensor& t) { return sum(mul(linear(x, w, t), proj)); }, b));
    return e;
  }));
  out.push_back(run_points("attention", points, seed_mix({seed, 31}), [](std::mt19937_64& rng) {
    const int t = 5, d = 8, heads = 2;
    Tensor q = Tensor::randn(Shape{t, d}, rng);
    Tensor k = Tensor::randn(Shape{t, d}, rng);
    Tensor v = Tensor::randn(Shape{t, d}, rng);
    Tensor proj = Tensor::randn(Shape{t, d}, rng);
    double e = 0.0;
    for (bool causal : {false, true}) {
      e = std::max(e, finite_diff_check(
                          [&](const Tensor& x) {
                            return sum(mul(multi_head_attention_op(x, k, v, heads, causal), proj));
                          },
                          q));
      e = std::max(e, finite_diff_check(
                          [&](const Tensor& x) {
                            return sum(mul(multi_head_attention_op(q, x, v, heads, causal), proj));
                          },
                          k));
      e = std::max(e, finite_diff_check(
                          [&](const Tensor& x) {
                            return sum(mul(multi_head_attention_op(q, k, x, heads, causal), proj));
                          },
                          v));
    }
    return e;
  }));
  out.push_back(run_points("attention.cross", points, seed_mix({seed, 32}),
                           [](std::mt19937_64& rng) {
    const int tq = 3, tk = 7, d = 8, heads = 4;
    Tensor q = Tensor::randn(Shape{tq, d}, rng);
    Tensor k = Tensor::randn(Shape{tk, d}, rng);
    Tensor v = Tensor::randn(Shape{tk, d}, rng);
    Tensor proj = Tensor::randn(Shape{tq, d}, rng);
    double e = finite_diff_check(
        [&](const Tensor& x) {
          return sum(mul(multi_head_attention_op(x, k, v, heads, false), proj));
        },
        q);
    e = std::max(e, finite_diff_check(
                        [&](const Tensor& x) {
                          return sum(mul(multi_head_attention_op(q, k, x, heads, false), proj));
                        },
                        v));
    return e;
  }));
  out.push_back(run_points("softmax", points, seed_mix({seed, 3}), [](std::mt19937_64& rng) {
    Tensor x = Tensor::randn(Shape{7}, rng);
    Tensor w = projector(Shape{7}, rng);
    return finite_diff_check([&](const Tensor& v) { return sum(mul(softmax(v), w)); }, x);
  }));
  out.push_back(run_points("log_softmax", points, seed_mix({seed, 4}), [](std::mt19937_64& rng) {
    Tensor x = Tensor::randn(Shape{3, 6}, rng);
    Tensor w = projector(Shape{3, 6}, rng);
    return finite_diff_check([&](const Tensor& v) { return sum(mul(log_softmax(v), w)); }, x);
  }));
  out.push_back(run_points("layer_norm", points, seed_mix({seed, 5}), [](std::mt19937_64& rng) {
    Tensor x = Tensor::randn(Shape{4, 8}, rng);
    Tensor g = Tensor::randn(Shape{8}, rng, 0.5);
    Tensor b = Tensor::randn(Shape{8}, rng, 0.5);
    Tensor w = projector(Shape{4, 8}, rng);
    return finite_diff_check(
        [&](const Tensor& v) { return sum(mul(layer_norm(v, g, b), w)); }, x);
  }));
  out.push_back(run_points("layer_norm.gain_bias", points, seed_mix({seed, 6}),
                           [](std::mt19937_64& rng) {
    Tensor x = Tensor::randn(Shape{3, 8}, rng);
    Tensor g = Tensor::randn(Shape{8}, rng, 0.5, true);
    Tensor b = Tensor::randn(Shape{8}, rng, 0.5, true);
    Tensor w = projector(Shape{3, 8}, rng);
    const double eg = param_finite_diff_check(
        [&] { return sum(mul(layer_norm(x, g, b), w)); }, g);
    const double eb = param_finite_diff_check(
        [&] { return sum(mul(layer_norm(x, g, b), w)); }, b);
    return std::max(eg, eb);
  }));
  out.push_back(run_points("gelu", points, seed_mix({seed, 7}), [](std::mt19937_64& rng) {
    Tensor x = Tensor::randn(Shape{20}, rng);
    Tensor w = projector(Shape{20}, rng);
    return finite_diff_check([&](const Tensor& v) { return sum(mul(gelu(v), w)); }, x);
  }));
  out.push_back(run_points("label_smoothing_ce", points, seed_mix({seed, 8}),
                           [](std::mt19937_64& rng) {
    Tensor x = Tensor::randn(Shape{7}, rng);
    std::uniform_int_distribution<int> t(0, 6);
    const int target = t(rng);
    return finite_diff_check(
        [&](const Tensor& v) { return label_smoothing_ce(v, target, 0.1); }, x);
  }));
  out.push_back(run_points("elementwise", points, seed_mix({seed, 9}), [](std::mt19937_64& rng) {
    Tensor a = Tensor::randn(Shape{3, 5}, rng);
    Tensor b = Tensor::randn(Shape{3, 5}, rng);
    Tensor w = projector(Shape{3, 5}, rng);
    double e = finite_diff_check(
        [&](const Tensor& v) { return sum(mul(mul(add(v, b), sub(v, b)), w)); }, a);
    e = std::max(e, finite_diff_check(
                        [&](const Tensor& v) { return sum(mul(scale(v, 1.7), w)); }, a));
    return e;
  }));
  out.push_back(run_points("add_rowvec", points, seed_mix({seed, 10}), [](std::mt19937_64& rng) {
    Tensor a = Tensor::randn(Shape{4, 6}, rng);
    Tensor bias = Tensor::randn(Shape{6}, rng);
    Tensor w = projector(Shape{4, 6}, rng);
    double e = finite_diff_check(
        [&](const Tensor& v) { return sum(mul(add_rowvec(v, bias), w)); }, a);
    e = std::max(e, finite_diff_check(
                        [&](const Tensor& v) { return sum(mul(add_rowvec(a, v), w)); },
                        bias));
    return e;
  }));
  out.push_back(run_points("shape_ops", points, seed_mix({seed, 11}), [](std::mt19937_64& rng) {
    Tensor a = Tensor::randn(Shape{6, 4}, rng);
    Tensor w = projector(Shape{4, 4}, rng);
    return finite_diff_check(
        [&](const Tensor& v) {
          Tensor t = transpose(v);                             // [4,6]
          Tensor s = slice_cols(slice_rows(t, 1, 3), 1, 4);    // [3,4]
          Tensor top = slice_cols(slice_rows(t, 0, 1), 0, 4);  // [1,4]
          Tensor c = concat_rows({s, top});                    // [4,4]
          Tensor cc = concat_cols({slice_cols(c, 0, 2), slice_cols(c, 2, 2)});
          return sum(mul(reshape(cc, Shape{4, 4}), w));
        },
        a);
  }));
  out.push_back(run_points("maxpool_time2", points, seed_mix({seed, 12}),
                           [](std::mt19937_64& rng) {
    Tensor a = Tensor::randn(Shape{7, 5}, rng);
    Tensor w = projector(Shape{4, 5}, rng);
    return finite_diff_check(
        [&](const Tensor& v) { return sum(mul(maxpool_time2(v), w)); }, a);
  }));
  out.push_back(run_points("embed_rows", points, seed_mix({seed, 13}), [](std::mt19937_64& rng) {
    Tensor table = Tensor::randn(Shape{9, 4}, rng, 1.0, true);
    std::uniform_int_distribution<int> pick(0, 8);
    std::vector<int> ids = {pick(rng), pick(rng), pick(rng), pick(rng)};
    Tensor w = projector(Shape{4, 4}, rng);
    return param_finite_diff_check(
        [&] { return sum(mul(embed_rows(table, ids), w)); }, table);
  }));
  out.push_back(run_points("dropout", points, seed_mix({seed, 14}), [](std::mt19937_64& rng) {
    Tensor a = Tensor::randn(Shape{6, 6}, rng);
    Tensor w = projector(Shape{6, 6}, rng);
    const std::uint64_t mask_seed = rng();
    return finite_diff_check(
        [&](const Tensor& v) {
          std::mt19937_64 mask_rng(mask_seed);  // same mask on every call
          return sum(mul(dropout(v, 0.3, mask_rng, true), w));
        },
        a);
  }));
  for (int which : {0, 1, 2, 3}) {
    const char* names[] = {"end_to_end.frames", "end_to_end.qf_queries",
                           "end_to_end.segment_emb", "end_to_end.seqpos_emb"};
    out.push_back(run_points(names[which], points, seed_mix({seed, 20, static_cast<std::uint64_t>(which)}),
                             [which](std::mt19937_64& rng) {
                               return end_to_end_point(rng, which);
                             }));
  }
  return out;
}

bool gradient_suite_passes(const std::vector<GradCheckReport>& reports) {
  for (const GradCheckReport& r : reports)
    if (!r.pass) return false;
  return !reports.empty();
}

}  // namespace icser
