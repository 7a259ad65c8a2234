#include "icser/inference.hpp"

#include <algorithm>
#include <stdexcept>

namespace icser {

namespace {

bool better(const BeamHypothesis& a, const BeamHypothesis& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  return a.tokens < b.tokens;
}

}  // namespace

BeamResult beam_search(const StepScorer& scorer, int vocab_size, int eos_id,
                       int beam_size, int max_len) {
  if (beam_size < 1) throw std::invalid_argument("beam_search: beam_size must be >= 1");
  if (max_len < 1) throw std::invalid_argument("beam_search: max_len must be >= 1");

  std::vector<BeamHypothesis> live{{{}, 0.0, false}};
  std::vector<BeamHypothesis> finished;
  BeamHypothesis best_unfinished = live[0];

  for (int depth = 0; depth < max_len && !live.empty(); ++depth) {
    std::vector<BeamHypothesis> candidates;
    candidates.reserve(live.size() * static_cast<size_t>(vocab_size));
    for (const BeamHypothesis& h : live) {
      const std::vector<double> scores = scorer(h.tokens);
      if (static_cast<int>(scores.size()) != vocab_size)
        throw std::runtime_error("beam_search: scorer returned wrong width");
      for (int t = 0; t < vocab_size; ++t) {
        BeamHypothesis c;
        c.tokens = h.tokens;
        c.tokens.push_back(t);
        c.log_prob = h.log_prob + scores[static_cast<size_t>(t)];
        c.finished = (t == eos_id);
        candidates.push_back(std::move(c));
      }
    }
    // Only the top beam_size candidates survive; with beam_size=1 this is
    // exactly greedy decoding, EOS choices included.
    std::sort(candidates.begin(), candidates.end(), better);
    if (static_cast<int>(candidates.size()) > beam_size) candidates.resize(beam_size);
    live.clear();
    for (BeamHypothesis& c : candidates) {
      if (c.finished)
        finished.push_back(std::move(c));
      else
        live.push_back(std::move(c));
    }
    if (!live.empty() &&
        (best_unfinished.tokens.empty() || better(live[0], best_unfinished)))
      best_unfinished = live[0];

    // Every extension adds a log-probability <= 0, so nothing live can
    // overtake a strictly better finished hypothesis.
    if (!finished.empty() && !live.empty()) {
      const auto& bf = *std::min_element(
          finished.begin(), finished.end(),
          [](const BeamHypothesis& a, const BeamHypothesis& b) { return better(a, b); });
      bool live_can_win = false;
      for (const BeamHypothesis& h : live)
        live_can_win = live_can_win || h.log_prob >= bf.log_prob;
      if (!live_can_win) break;
    }
  }

  BeamResult out;
  if (finished.empty()) {
    out.best = best_unfinished;
    out.truncated = true;
    return out;
  }
  out.best = *std::min_element(
      finished.begin(), finished.end(),
      [](const BeamHypothesis& a, const BeamHypothesis& b) { return better(a, b); });
  return out;
}

BeamResult beam_search_lm(const SpeechLM& model, const Tensor& context_enc,
                          int beam_size, int max_len) {
  NoGradGuard ng;
  StepScorer scorer = [&](const TokenSeq& prefix) {
    Tensor logits = model.decode_step(context_enc, prefix, ForwardCtx{});
    return log_softmax(logits).data();
  };
  return beam_search(scorer, model.vocab().size(), model.vocab().eos_id(), beam_size,
                     max_len);
}

std::string render_answer(const Vocabulary& vocab, const TokenSeq& tokens) {
  TokenSeq t = tokens;
  while (!t.empty() && t.back() == vocab.eos_id()) t.pop_back();
  return vocab.detokenize(t);
}

std::string infer_icl_encoded(const SpeechLM& model, const Tensor& target_h,
                              const std::vector<SpeechLabelPair>& enrollment_h,
                              const TokenSeq& instruction, const InferOptions& opts) {
  NoGradGuard ng;
  ForwardCtx fwd;  // dropout disabled
  PromptContext prompt =
      model.assemble_context_encoded(instruction, enrollment_h, target_h, fwd);
  Tensor c = model.encode_context(prompt, fwd);
  BeamResult r = beam_search_lm(model, c, opts.beam_size, opts.max_len);
  return render_answer(model.vocab(), r.best.tokens);
}

std::string infer_icl(const SpeechLM& model, const Utterance& target,
                      const EnrollmentSet& enrollment, const TokenSeq& instruction,
                      const InferOptions& opts) {
  for (const Utterance* u : enrollment.items)
    if (u->speaker_id != target.speaker_id)
      throw std::invalid_argument(
          "infer: enrollment speaker " + std::to_string(u->speaker_id) +
          " does not match target speaker " + std::to_string(target.speaker_id));
  NoGradGuard ng;
  ForwardCtx fwd;
  std::vector<SpeechLabelPair> encoded;
  encoded.reserve(enrollment.items.size());
  for (const Utterance* u : enrollment.items)
    encoded.push_back({model.encode_speech(u->frames_tensor(), fwd), u->label_text});
  return infer_icl_encoded(model, model.encode_speech(target.frames_tensor(), fwd),
                           encoded, instruction, opts);
}

namespace {

std::string strip_trailing_eos(std::string s) {
  const std::string eos = "<eos>";
  for (;;) {
    while (!s.empty() && s.back() == ' ') s.pop_back();
    if (s.size() >= eos.size() && s.compare(s.size() - eos.size(), eos.size(), eos) == 0)
      s.erase(s.size() - eos.size());
    else
      break;
  }
  return s;
}

}  // namespace

bool exact_match(const std::string& predicted, const std::string& reference) {
  return strip_trailing_eos(predicted) == strip_trailing_eos(reference);
}

}  // namespace icser
