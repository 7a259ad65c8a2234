#pragma once

#include <random>
#include <string>
#include <vector>

#include "icser/corpus.hpp"

namespace icser {

/// Enrollment-selection setting: how enrollment labels relate to the target
/// emotion and to each other.
struct SelectionSetting {
  enum class Target { kTU, kTO, kTE };
  enum class Label { kLU, kLD, kLO };

  Target target = Target::kTU;
  Label label = Label::kLU;
  EmotionLabel lo_emotion = EmotionLabel::kNeutral;  // meaningful for LO only

  /// Parses "TU+LU", "TO+LD", "TU+LO:neutral", ...; round-trips with str().
  static SelectionSetting parse(const std::string& text);
  std::string str() const;
};

/// Ordered k-shot enrollment drawn from one speaker's pool; never contains
/// the target utterance itself.
struct EnrollmentSet {
  std::vector<const Utterance*> items;

  int k() const { return static_cast<int>(items.size()); }
};

struct ConstraintReport {
  bool ok = true;
  std::vector<std::string> violations;
};

/// Draws k pairs satisfying the setting: uniform over satisfying label
/// multisets, then uniform over concrete utterances per label, then a
/// uniform order shuffle. Throws if the combination is infeasible or the
/// pool cannot supply it.
EnrollmentSet select_procedure(const Utterance& target, int k,
                               const std::vector<const Utterance*>& pool,
                               const SelectionSetting& setting, std::mt19937_64& rng);

/// Independent re-verification of every setting predicate; the test oracle
/// for select_procedure.
ConstraintReport check_constraints(const EnrollmentSet& set, const Utterance& target,
                                   const SelectionSetting& setting);

/// Meta-training episode: k uniform on {0..7}, then TU+LU selection.
EnrollmentSet sample_meta_episode(const Utterance& target,
                                  const std::vector<const Utterance*>& pool,
                                  std::mt19937_64& rng);

/// All label multisets of size k over the emotion set that satisfy the
/// setting for the given target emotion (availability ignored). Exposed for
/// the brute-force coverage tests.
std::vector<std::array<int, kNumEmotions>> satisfying_label_multisets(
    int k, EmotionLabel target_emotion, const SelectionSetting& setting);

}  // namespace icser
