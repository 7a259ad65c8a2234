#include "icser/model.hpp"

#include <cmath>
#include <stdexcept>

namespace icser {

Vocabulary ModelConfig::make_vocab() const {
  if (vocab_words.empty()) return Vocabulary::standard();
  return Vocabulary(vocab_words);
}

void ModelConfig::validate() const {
  if (model_dim % heads != 0)
    throw std::invalid_argument("model config: model_dim " + std::to_string(model_dim) +
                                " not divisible by heads " + std::to_string(heads));
  if (query_len < 1) throw std::invalid_argument("model config: query_len must be >= 1");
  if (max_sequences < 2)
    throw std::invalid_argument("model config: max_sequences must be >= 2");
  Vocabulary v = make_vocab();
  for (EmotionLabel e : all_emotions()) v.id(emotion_word(e));
  v.tokenize(instruction_text());
}

// ---------------------------------------------------------------------------
// SpeechEncoder
// ---------------------------------------------------------------------------

SpeechEncoder::SpeechEncoder(const ModelConfig& cfg, std::mt19937_64& rng,
                             ParamRegistry& reg, const std::string& prefix)
    : model_dim_(cfg.model_dim) {
  conv1_ = Linear(3 * cfg.feature_dim, cfg.model_dim, rng, reg, prefix + ".conv1");
  conv2_ = Linear(3 * cfg.model_dim, cfg.model_dim, rng, reg, prefix + ".conv2");
  for (int i = 0; i < cfg.enc_layers; ++i)
    blocks_.emplace_back(cfg.model_dim, cfg.ffn_dim, cfg.heads, rng, reg,
                         prefix + ".enc." + std::to_string(i));
  final_ln_ = LayerNorm(cfg.model_dim, reg, prefix + ".ln");
}

// Width-3 same-padded window: [T,D] -> [T,3D], rows (t-1, t, t+1).
Tensor SpeechEncoder::conv_window3(const Tensor& x) const {
  const int t = x.rows(), d = x.cols();
  Tensor zero_row = Tensor::zeros(Shape{1, d});
  Tensor padded = concat_rows({zero_row, x, zero_row});
  return concat_cols({slice_rows(padded, 0, t), slice_rows(padded, 1, t),
                      slice_rows(padded, 2, t)});
}

Tensor SpeechEncoder::forward(const Tensor& frames, const ForwardCtx& ctx) const {
  if (frames.ndim() != 2 || frames.rows() == 0)
    throw std::invalid_argument("speech encoder: empty input");
  Tensor x = maxpool_time2(gelu(conv1_.forward(conv_window3(frames))));
  x = maxpool_time2(gelu(conv2_.forward(conv_window3(x))));
  x = add(x, sinusoidal_positions(x.rows(), model_dim_));
  x = ctx.drop(x);
  for (const EncoderBlock& b : blocks_) x = b.forward(x, ctx);
  return final_ln_.forward(x);
}

// ---------------------------------------------------------------------------
// AttentivePooling / ClassifierModel
// ---------------------------------------------------------------------------

AttentivePooling::AttentivePooling(int dim, std::mt19937_64& rng, ParamRegistry& reg,
                                   const std::string& prefix) {
  score_w_ = reg.add(prefix + ".w",
                     Tensor::randn(Shape{dim, 1}, rng, 1.0 / std::sqrt(dim), true));
}

Tensor AttentivePooling::weights(const Tensor& h) const {
  if (h.ndim() != 2 || h.rows() == 0)
    throw std::invalid_argument("attentive pooling: empty input");
  Tensor scores = reshape(matmul(h, score_w_), Shape{h.rows()});
  return softmax(scores);
}

Tensor AttentivePooling::forward(const Tensor& h) const {
  Tensor a = weights(h);
  return reshape(matmul(reshape(a, Shape{1, h.rows()}), h), Shape{h.cols()});
}

ClassifierModel::ClassifierModel(const ModelConfig& cfg, std::uint64_t init_seed)
    : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(init_seed);
  speech_ = SpeechEncoder(cfg_, rng, params_, "speech");
  pool_ = AttentivePooling(cfg_.model_dim, rng, params_, "cls.pool");
  head_ = Linear(cfg_.model_dim, kNumEmotions, rng, params_, "cls.head");
}

Tensor ClassifierModel::logits(const Tensor& frames, const ForwardCtx& ctx) const {
  Tensor pooled = pool_.forward(speech_.forward(frames, ctx));
  return reshape(head_.forward(reshape(pooled, Shape{1, cfg_.model_dim})),
                 Shape{kNumEmotions});
}

Tensor ClassifierModel::classify(const Tensor& frames) const {
  NoGradGuard ng;
  return softmax(logits(frames, ForwardCtx{}));
}

int ClassifierModel::predict(const Tensor& frames) const {
  Tensor p = classify(frames);
  int best = 0;
  for (int i = 1; i < kNumEmotions; ++i)
    if (p.at(i) > p.at(best)) best = i;
  return best;
}

// ---------------------------------------------------------------------------
// QFormer
// ---------------------------------------------------------------------------

QFormer::QFormer(const ModelConfig& cfg, std::mt19937_64& rng, ParamRegistry& reg,
                 const std::string& prefix)
    : model_dim_(cfg.model_dim) {
  queries_ = reg.add(prefix + ".queries",
                     Tensor::randn(Shape{cfg.query_len, cfg.model_dim}, rng, 0.02, true));
  for (int i = 0; i < cfg.qformer_layers; ++i)
    blocks_.emplace_back(cfg.model_dim, cfg.ffn_dim, cfg.heads, /*causal_self=*/false,
                         rng, reg, prefix + ".blk." + std::to_string(i));
  final_ln_ = LayerNorm(cfg.model_dim, reg, prefix + ".ln");
}

Tensor QFormer::forward(const Tensor& h, const ForwardCtx& ctx) const {
  if (h.ndim() != 2 || h.rows() == 0)
    throw std::invalid_argument("qformer: empty speech representation");
  // Cross-attention keys carry positions over h so the fixed-length output
  // can reflect temporal structure; values stay raw.
  Tensor keys = add(h, sinusoidal_positions(h.rows(), model_dim_));
  Tensor x = queries_;
  for (const DecoderBlock& b : blocks_) x = b.forward(x, keys, h, ctx);
  return final_ln_.forward(x);
}

// ---------------------------------------------------------------------------
// PromptContext / SpeechLM
// ---------------------------------------------------------------------------

int PromptContext::total_rows() const {
  int n = 0;
  for (const PromptSegment& s : segments) n += s.n_rows;
  return n;
}

int PromptContext::enrollment_count() const {
  return (static_cast<int>(segments.size()) - 2) / 2;
}

SpeechLM::SpeechLM(const ModelConfig& cfg, std::uint64_t init_seed)
    : cfg_(cfg), vocab_(cfg.make_vocab()) {
  cfg_.validate();
  std::mt19937_64 rng(init_seed);
  speech_ = SpeechEncoder(cfg_, rng, params_, "speech");
  qformer_ = QFormer(cfg_, rng, params_, "qf");
  tok_emb_ = params_.add("lm.tok",
                         Tensor::randn(Shape{vocab_.size(), cfg_.model_dim}, rng, 0.02, true));
  seg_emb_ = params_.add("lm.seg", Tensor::randn(Shape{2, cfg_.model_dim}, rng, 0.02, true));
  seqpos_emb_ = params_.add(
      "lm.seqpos", Tensor::randn(Shape{cfg_.max_sequences, cfg_.model_dim}, rng, 0.02, true));
  for (int i = 0; i < cfg_.enc_layers; ++i)
    enc_blocks_.emplace_back(cfg_.model_dim, cfg_.ffn_dim, cfg_.heads, rng, params_,
                             "lm.enc." + std::to_string(i));
  enc_final_ln_ = LayerNorm(cfg_.model_dim, params_, "lm.enc.ln");
  for (int i = 0; i < cfg_.dec_layers; ++i)
    dec_blocks_.emplace_back(cfg_.model_dim, cfg_.ffn_dim, cfg_.heads, /*causal_self=*/true,
                             rng, params_, "lm.dec." + std::to_string(i));
  dec_final_ln_ = LayerNorm(cfg_.model_dim, params_, "lm.dec.ln");
  out_proj_ = Linear(cfg_.model_dim, vocab_.size(), rng, params_, "lm.out");
}

Tensor SpeechLM::encode_speech(const Tensor& frames, const ForwardCtx& ctx) const {
  return speech_.forward(frames, ctx);
}

Tensor SpeechLM::qformer_convert(const Tensor& h, const ForwardCtx& ctx) const {
  return qformer_.forward(h, ctx);
}

void SpeechLM::validate_tokens(const TokenSeq& tokens) const {
  for (int t : tokens) vocab_.word(t);
}

PromptContext SpeechLM::assemble_context(const TokenSeq& instruction,
                                         const std::vector<SpeechLabelPair>& enrollment,
                                         const Tensor& target_frames,
                                         const ForwardCtx& ctx) const {
  std::vector<SpeechLabelPair> encoded;
  encoded.reserve(enrollment.size());
  for (const SpeechLabelPair& p : enrollment)
    encoded.push_back({encode_speech(p.frames, ctx), p.label});
  return assemble_context_encoded(instruction, encoded,
                                  encode_speech(target_frames, ctx), ctx);
}

PromptContext SpeechLM::assemble_context_encoded(
    const TokenSeq& instruction, const std::vector<SpeechLabelPair>& enrollment_h,
    const Tensor& target_h, const ForwardCtx& ctx) const {
  const int k = static_cast<int>(enrollment_h.size());
  const int n_seqs = 2 * k + 2;
  if (n_seqs > cfg_.max_sequences)
    throw std::invalid_argument("prompt: " + std::to_string(k) +
                                " enrollment pairs need " + std::to_string(n_seqs) +
                                " sub-sequences, capacity is " +
                                std::to_string(cfg_.max_sequences));
  validate_tokens(instruction);

  PromptContext out;
  std::vector<Tensor> parts;
  int seq_index = 0;
  auto push_text = [&](const TokenSeq& tokens) {
    validate_tokens(tokens);
    Tensor r = embed_rows(tok_emb_, tokens);
    r = add_rowvec(r, reshape(embed_rows(seg_emb_, {0}), Shape{cfg_.model_dim}));
    r = add_rowvec(r, reshape(embed_rows(seqpos_emb_, {seq_index}), Shape{cfg_.model_dim}));
    parts.push_back(r);
    out.segments.push_back({false, seq_index, static_cast<int>(tokens.size()), tokens});
    ++seq_index;
  };
  auto push_speech = [&](const Tensor& h) {
    Tensor u = qformer_convert(h, ctx);
    u = add_rowvec(u, reshape(embed_rows(seg_emb_, {1}), Shape{cfg_.model_dim}));
    u = add_rowvec(u, reshape(embed_rows(seqpos_emb_, {seq_index}), Shape{cfg_.model_dim}));
    parts.push_back(u);
    out.segments.push_back({true, seq_index, cfg_.query_len, {}});
    ++seq_index;
  };

  push_text(instruction);
  for (const SpeechLabelPair& p : enrollment_h) {
    push_speech(p.frames);
    push_text(p.label);
  }
  push_speech(target_h);

  Tensor a = concat_rows(parts);
  out.embedded = add(a, sinusoidal_positions(a.rows(), cfg_.model_dim));
  return out;
}

Tensor SpeechLM::encode_context(const PromptContext& ctx_in, const ForwardCtx& ctx) const {
  Tensor x = ctx.drop(ctx_in.embedded);
  for (const EncoderBlock& b : enc_blocks_) x = b.forward(x, ctx);
  return enc_final_ln_.forward(x);
}

Tensor SpeechLM::decode_logits(const Tensor& context_enc, const TokenSeq& prefix,
                               const ForwardCtx& ctx) const {
  validate_tokens(prefix);
  TokenSeq input;
  input.reserve(prefix.size() + 1);
  input.push_back(vocab_.bos_id());
  input.insert(input.end(), prefix.begin(), prefix.end());
  Tensor x = embed_rows(tok_emb_, input);
  x = add(x, sinusoidal_positions(static_cast<int>(input.size()), cfg_.model_dim));
  x = ctx.drop(x);
  for (const DecoderBlock& b : dec_blocks_) x = b.forward(x, context_enc, ctx);
  return out_proj_.forward(dec_final_ln_.forward(x));
}

Tensor SpeechLM::decode_step(const Tensor& context_enc, const TokenSeq& prefix,
                             const ForwardCtx& ctx) const {
  Tensor all = decode_logits(context_enc, prefix, ctx);
  return reshape(slice_rows(all, all.rows() - 1, 1), Shape{vocab_.size()});
}

double SpeechLM::sequence_log_prob(const Tensor& context_enc, const TokenSeq& tokens) const {
  NoGradGuard ng;
  TokenSeq prefix(tokens.begin(), tokens.end() - (tokens.empty() ? 0 : 1));
  Tensor logits = decode_logits(context_enc, prefix, ForwardCtx{});
  Tensor logp = log_softmax(logits);
  double total = 0.0;
  for (size_t t = 0; t < tokens.size(); ++t)
    total += logp.at(static_cast<int>(t), tokens[t]);
  return total;
}

void SpeechLM::load_speech_encoder(const ParamRegistry& src) {
  int copied = 0;
  for (const auto& [name, tensor] : src.items) {
    if (name.rfind("speech.", 0) != 0) continue;
    Tensor* dst = params_.find(name);
    if (dst == nullptr)
      throw std::invalid_argument("speech-encoder load: unknown parameter " + name);
    if (dst->shape() != tensor.shape())
      throw std::invalid_argument("speech-encoder load: shape mismatch on " + name);
    dst->mutable_data() = tensor.data();
    ++copied;
  }
  if (copied == 0)
    throw std::invalid_argument("speech-encoder load: source has no speech.* parameters");
}

void SpeechLM::set_group_trainable(const std::string& prefix, bool trainable) {
  int hits = 0;
  for (auto& [name, tensor] : params_.items) {
    if (name.rfind(prefix, 0) != 0) continue;
    tensor.node()->requires_grad = trainable;
    ++hits;
  }
  if (hits == 0)
    throw std::invalid_argument("no parameters under prefix \"" + prefix + "\"");
}

}  // namespace icser
