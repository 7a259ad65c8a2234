#include "icser/vocab.hpp"

#include <sstream>
#include <stdexcept>

namespace icser {

namespace {

const std::array<std::string, kNumEmotions> kWords = {
    "Anger", "Disgust", "Fear", "Joy", "Sadness", "Surprise", "Neutral"};
const std::array<std::string, kNumEmotions> kKeys = {
    "anger", "disgust", "fear", "joy", "sadness", "surprise", "neutral"};

const std::string kInstruction =
    "Please select the appropriate emotion for the input speech from the "
    "following: Neutral, Surprise, Sadness, Joy, Fear, Disgust, Anger.";

std::vector<std::string> split_ws(const std::string& text) {
  std::istringstream is(text);
  std::vector<std::string> out;
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

}  // namespace

const std::array<EmotionLabel, kNumEmotions>& all_emotions() {
  static const std::array<EmotionLabel, kNumEmotions> a = {
      EmotionLabel::kAnger,   EmotionLabel::kDisgust, EmotionLabel::kFear,
      EmotionLabel::kJoy,     EmotionLabel::kSadness, EmotionLabel::kSurprise,
      EmotionLabel::kNeutral};
  return a;
}

const std::string& emotion_word(EmotionLabel e) {
  return kWords[static_cast<size_t>(e)];
}

const std::string& emotion_key(EmotionLabel e) {
  return kKeys[static_cast<size_t>(e)];
}

EmotionLabel emotion_from_key(const std::string& key) {
  for (int i = 0; i < kNumEmotions; ++i)
    if (kKeys[static_cast<size_t>(i)] == key || kWords[static_cast<size_t>(i)] == key)
      return static_cast<EmotionLabel>(i);
  throw std::invalid_argument("unknown emotion \"" + key + "\"");
}

const std::string& instruction_text() { return kInstruction; }

Vocabulary Vocabulary::standard() {
  std::vector<std::string> words = {"<pad>", "<bos>", "<eos>"};
  for (EmotionLabel e : all_emotions()) words.push_back(emotion_word(e));
  for (const std::string& w : split_ws(kInstruction)) {
    bool present = false;
    for (const std::string& have : words) present = present || have == w;
    if (!present) words.push_back(w);
  }
  return Vocabulary(std::move(words));
}

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  for (int i = 0; i < static_cast<int>(words_.size()); ++i) {
    if (!index_.emplace(words_[static_cast<size_t>(i)], i).second)
      throw std::invalid_argument("vocabulary: duplicate word \"" +
                                  words_[static_cast<size_t>(i)] + "\"");
  }
  auto find = [&](const char* w) {
    auto it = index_.find(w);
    return it == index_.end() ? -1 : it->second;
  };
  pad_ = find("<pad>");
  bos_ = find("<bos>");
  eos_ = find("<eos>");
  if (pad_ < 0 || bos_ < 0 || eos_ < 0)
    throw std::invalid_argument("vocabulary: missing <pad>/<bos>/<eos>");
}

int Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end())
    throw std::invalid_argument("vocabulary: unknown word \"" + word + "\"");
  return it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || id >= size())
    throw std::invalid_argument("vocabulary: token id " + std::to_string(id) +
                                " out of range [0," + std::to_string(size()) + ")");
  return words_[static_cast<size_t>(id)];
}

TokenSeq Vocabulary::tokenize(const std::string& text) const {
  TokenSeq out;
  for (const std::string& w : split_ws(text)) out.push_back(id(w));
  return out;
}

std::string Vocabulary::detokenize(const TokenSeq& tokens) const {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += word(tokens[i]);
  }
  return out;
}

int Vocabulary::emotion_token(EmotionLabel e) const { return id(emotion_word(e)); }

TokenSeq Vocabulary::label_text(EmotionLabel e) const {
  return {emotion_token(e), eos_id()};
}

}  // namespace icser
