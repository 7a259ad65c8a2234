#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "icser/tensor.hpp"
#include "icser/vocab.hpp"

namespace icser {

enum class Split { kTrain, kValid, kTest };
const std::string& split_name(Split s);
Split split_from_name(const std::string& name);

/// One utterance: the atom every dataset is made of.
struct Utterance {
  int speaker_id = -1;
  EmotionLabel emotion = EmotionLabel::kNeutral;
  int n_frames = 0;
  int feature_dim = 0;
  std::vector<double> frames;  // row-major [n_frames, feature_dim]
  TokenSeq label_text;         // emotion word + <eos>
  Split split = Split::kTrain;

  Tensor frames_tensor() const;
  bool same_utterance(const Utterance& other) const;
};

/// Synthetic stand-in for speaker individuality: a per-speaker feature offset
/// plus an optional swap of the designated confusable emotion pair.
struct SpeakerProfile {
  int speaker_id = -1;
  std::vector<double> offset;
  bool confusion_flag = false;
  double noise_sigma = 0.0;

  EmotionLabel emitted_emotion(EmotionLabel e, EmotionLabel a, EmotionLabel b) const;
};

struct CorpusSpec {
  int train_speakers = 40;
  int valid_speakers = 10;
  int test_speakers = 10;
  int utterances_per_emotion = 8;
  int feature_dim = 16;
  std::uint64_t prototype_seed = 7;
  double prototype_scale = 1.5;
  double noise_sigma = 0.5;
  double speaker_offset_sigma = 0.3;
  EmotionLabel confusable_a = EmotionLabel::kJoy;
  EmotionLabel confusable_b = EmotionLabel::kSurprise;
  int min_frames = 12;
  int max_frames = 24;
  std::uint64_t seed = 1234;
};

struct Corpus {
  std::vector<Utterance> train, valid, test;
  std::vector<SpeakerProfile> profiles;

  const std::vector<Utterance>& split(Split s) const;
  const SpeakerProfile* profile(int speaker_id) const;
};

/// Near-orthogonal emotion prototype vectors, deterministic in the seed.
std::vector<std::vector<double>> emotion_prototypes(const CorpusSpec& spec);

/// Draws the full three-split corpus. Speaker ids are disjoint across splits;
/// every speaker carries utterances_per_emotion utterances per emotion.
Corpus generate_corpus(const CorpusSpec& spec);

struct BayesCeiling {
  double zero_shot = 0.0;  // permutation unobservable
  double informed = 0.0;   // permutation known
};

/// Monte-Carlo Bayes-optimal accuracies under the generative model. Ties in
/// the posterior argmax are credited fractionally.
BayesCeiling bayes_ceiling(const CorpusSpec& spec, int n_samples = 200000,
                           std::uint64_t seed = 99);

/// JSONL persistence. Records carry speaker_id, emotion, frames, split;
/// floats survive the round trip exactly.
void write_jsonl(const std::string& path, const std::vector<Utterance>& utts);
std::vector<Utterance> read_jsonl(const std::string& path);

void write_corpus_dir(const std::string& dir, const Corpus& corpus);
Corpus read_corpus_dir(const std::string& dir);

/// Pools keyed by speaker, the unit the selection procedures draw from.
std::map<int, std::vector<const Utterance*>> group_by_speaker(
    const std::vector<Utterance>& utts);

}  // namespace icser
