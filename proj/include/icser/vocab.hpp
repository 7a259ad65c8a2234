#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

namespace icser {

/// Emotion inventory with stable integer codes.
enum class EmotionLabel : int {
  kAnger = 0,
  kDisgust = 1,
  kFear = 2,
  kJoy = 3,
  kSadness = 4,
  kSurprise = 5,
  kNeutral = 6,
};

constexpr int kNumEmotions = 7;

const std::array<EmotionLabel, kNumEmotions>& all_emotions();

/// Canonical answer word, e.g. "Joy". Case is fixed; matching is exact.
const std::string& emotion_word(EmotionLabel e);
/// Lowercase identifier used in files and configs, e.g. "joy".
const std::string& emotion_key(EmotionLabel e);
EmotionLabel emotion_from_key(const std::string& key);

/// The fixed instruction sentence shared by every prompt.
const std::string& instruction_text();

using TokenSeq = std::vector<int>;

/// Closed whitespace-token vocabulary: specials, the seven answer words, and
/// the instruction words. Token ids are stable for a given word list.
class Vocabulary {
 public:
  static Vocabulary standard();
  explicit Vocabulary(std::vector<std::string> words);

  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

  int pad_id() const { return pad_; }
  int bos_id() const { return bos_; }
  int eos_id() const { return eos_; }

  int id(const std::string& word) const;    // throws on OOV, naming the word
  const std::string& word(int id) const;    // throws on out-of-range id

  /// Whitespace tokenization over the closed vocabulary.
  TokenSeq tokenize(const std::string& text) const;
  /// Joins words with single spaces; specials are rendered literally.
  std::string detokenize(const TokenSeq& tokens) const;

  /// Emotion word token id.
  int emotion_token(EmotionLabel e) const;
  /// Label text for an emotion: its answer word followed by EOS.
  TokenSeq label_text(EmotionLabel e) const;

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
  int pad_ = -1, bos_ = -1, eos_ = -1;
};

}  // namespace icser
