#pragma once

#include <functional>
#include <string>
#include <vector>

#include "icser/model.hpp"
#include "icser/selection.hpp"

namespace icser {

struct BeamHypothesis {
  TokenSeq tokens;        // finished hypotheses end in EOS
  double log_prob = 0.0;  // sum of per-step log-softmax scores
  bool finished = false;
};

struct BeamResult {
  BeamHypothesis best;
  bool truncated = false;  // nothing finished within max_len
};

/// Log-softmax scores over the vocabulary for the next token after `prefix`.
using StepScorer = std::function<std::vector<double>(const TokenSeq& prefix)>;

/// Beam search over an arbitrary scorer. Ties break toward the
/// lexicographically smaller token sequence.
BeamResult beam_search(const StepScorer& scorer, int vocab_size, int eos_id,
                       int beam_size, int max_len);

/// Beam search over the speech LM decoder given an encoded context.
BeamResult beam_search_lm(const SpeechLM& model, const Tensor& context_enc,
                          int beam_size, int max_len);

struct InferOptions {
  int beam_size = 4;
  int max_len = 4;
};

/// k-shot ICL inference: assemble the prompt from instruction, enrollment
/// pairs and the target utterance, encode, beam-decode, detokenize. Dropout
/// off; deterministic.
std::string infer_icl(const SpeechLM& model, const Utterance& target,
                      const EnrollmentSet& enrollment, const TokenSeq& instruction,
                      const InferOptions& opts = {});

/// Same path with precomputed speech-encoder outputs (frozen-encoder loops).
std::string infer_icl_encoded(const SpeechLM& model, const Tensor& target_h,
                              const std::vector<SpeechLabelPair>& enrollment_h,
                              const TokenSeq& instruction, const InferOptions& opts = {});

/// Exact string equality; trailing EOS markers are stripped before compare,
/// nothing else is normalized.
bool exact_match(const std::string& predicted, const std::string& reference);

/// Detokenizes, dropping a trailing <eos> if present.
std::string render_answer(const Vocabulary& vocab, const TokenSeq& tokens);

}  // namespace icser
