#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "icser/nn.hpp"
#include "icser/tensor.hpp"
#include "icser/vocab.hpp"

namespace icser {

struct ModelConfig {
  int feature_dim = 16;
  int enc_layers = 2;
  int dec_layers = 2;
  int qformer_layers = 2;
  int model_dim = 64;
  int ffn_dim = 128;
  int heads = 4;
  int query_len = 8;
  std::vector<std::string> vocab_words;  // empty -> Vocabulary::standard()
  int max_sequences = 16;
  double dropout_rate = 0.1;

  Vocabulary make_vocab() const;
  void validate() const;
};

/// Conv front-end (two conv+max-pool stages, x4 time downsampling) followed
/// by transformer encoder blocks. Output is [ceil(M/4), model_dim].
class SpeechEncoder {
 public:
  SpeechEncoder() = default;
  SpeechEncoder(const ModelConfig& cfg, std::mt19937_64& rng, ParamRegistry& reg,
                const std::string& prefix);

  Tensor forward(const Tensor& frames, const ForwardCtx& ctx) const;
  static int output_len(int input_frames) { return (input_frames + 3) / 4; }

 private:
  Tensor conv_window3(const Tensor& x) const;
  Linear conv1_, conv2_;
  std::vector<EncoderBlock> blocks_;
  LayerNorm final_ln_;
  int model_dim_ = 0;
};

/// Attention weights from a learned scoring vector; pools [T,D] to [D].
class AttentivePooling {
 public:
  AttentivePooling() = default;
  AttentivePooling(int dim, std::mt19937_64& rng, ParamRegistry& reg,
                   const std::string& prefix);

  Tensor weights(const Tensor& h) const;  // [T], nonnegative, sums to 1
  Tensor forward(const Tensor& h) const;  // [D]

 private:
  Tensor score_w_;
};

/// Baseline emotion classifier: speech encoder, attentive pooling, linear
/// softmax head.
class ClassifierModel {
 public:
  explicit ClassifierModel(const ModelConfig& cfg, std::uint64_t init_seed);

  Tensor logits(const Tensor& frames, const ForwardCtx& ctx) const;
  Tensor classify(const Tensor& frames) const;  // probability vector, dropout off
  int predict(const Tensor& frames) const;

  const ModelConfig& config() const { return cfg_; }
  ParamRegistry& params() { return params_; }
  const ParamRegistry& params() const { return params_; }

 private:
  ModelConfig cfg_;
  ParamRegistry params_;
  SpeechEncoder speech_;
  AttentivePooling pool_;
  Linear head_;
};

/// Fixed-length query cross-attention adapter: variable-length speech
/// representations in, query_len rows out.
class QFormer {
 public:
  QFormer() = default;
  QFormer(const ModelConfig& cfg, std::mt19937_64& rng, ParamRegistry& reg,
          const std::string& prefix);

  Tensor forward(const Tensor& h, const ForwardCtx& ctx) const;

 private:
  Tensor queries_;
  std::vector<DecoderBlock> blocks_;
  LayerNorm final_ln_;
  int model_dim_ = 0;
};

/// One ordered sub-sequence of the cross-modal prompt.
struct PromptSegment {
  bool is_speech = false;
  int seq_index = 0;
  int n_rows = 0;
  TokenSeq tokens;  // empty for speech segments
};

/// The assembled cross-modal input: per-sub-sequence metadata plus the
/// embedded matrix the LM encoder consumes.
struct PromptContext {
  std::vector<PromptSegment> segments;
  Tensor embedded;  // [total rows, model_dim]

  int total_rows() const;
  int enrollment_count() const;
};

/// Enrollment entry as the model sees it: speech plus its label text.
struct SpeechLabelPair {
  Tensor frames;
  TokenSeq label;
};

/// The speech-language model: speech encoder + Q-Former feeding an
/// encoder-decoder LM over a closed vocabulary.
class SpeechLM {
 public:
  explicit SpeechLM(const ModelConfig& cfg, std::uint64_t init_seed);

  Tensor encode_speech(const Tensor& frames, const ForwardCtx& ctx) const;
  Tensor qformer_convert(const Tensor& h, const ForwardCtx& ctx) const;

  PromptContext assemble_context(const TokenSeq& instruction,
                                 const std::vector<SpeechLabelPair>& enrollment,
                                 const Tensor& target_frames,
                                 const ForwardCtx& ctx) const;
  /// Same assembly with precomputed speech-encoder outputs, for loops that
  /// exploit the frozen encoder.
  PromptContext assemble_context_encoded(const TokenSeq& instruction,
                                         const std::vector<SpeechLabelPair>& enrollment_h,
                                         const Tensor& target_h,
                                         const ForwardCtx& ctx) const;

  Tensor encode_context(const PromptContext& ctx_in, const ForwardCtx& ctx) const;

  /// Logits at every decoder position for input [BOS] + prefix: row t scores
  /// the token following prefix[0..t-1].
  Tensor decode_logits(const Tensor& context_enc, const TokenSeq& prefix,
                       const ForwardCtx& ctx) const;
  /// Next-token logits only.
  Tensor decode_step(const Tensor& context_enc, const TokenSeq& prefix,
                     const ForwardCtx& ctx) const;
  /// Sum of per-step log-softmax scores of `tokens`; forward-only.
  double sequence_log_prob(const Tensor& context_enc, const TokenSeq& tokens) const;

  const ModelConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }
  ParamRegistry& params() { return params_; }
  const ParamRegistry& params() const { return params_; }

  /// Copies speech-encoder parameters (by name) from another registry.
  void load_speech_encoder(const ParamRegistry& src);
  /// Marks a parameter group (name prefix) trainable or frozen.
  void set_group_trainable(const std::string& prefix, bool trainable);

 private:
  void validate_tokens(const TokenSeq& tokens) const;

  ModelConfig cfg_;
  Vocabulary vocab_;
  ParamRegistry params_;
  SpeechEncoder speech_;
  QFormer qformer_;
  Tensor tok_emb_, seg_emb_, seqpos_emb_;
  std::vector<EncoderBlock> enc_blocks_;
  std::vector<DecoderBlock> dec_blocks_;
  LayerNorm enc_final_ln_, dec_final_ln_;
  Linear out_proj_;
};

}  // namespace icser
