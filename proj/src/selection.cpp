#include "icser/selection.hpp"

#include <algorithm>
#include <array>
#include <stdexcept>

namespace icser {

SelectionSetting SelectionSetting::parse(const std::string& text) {
  const auto plus = text.find('+');
  if (plus == std::string::npos)
    throw std::invalid_argument("selection setting \"" + text +
                                "\": expected TARGET+LABEL, e.g. TU+LU");
  const std::string t = text.substr(0, plus);
  std::string l = text.substr(plus + 1);
  SelectionSetting s;
  if (t == "TU") s.target = Target::kTU;
  else if (t == "TO") s.target = Target::kTO;
  else if (t == "TE") s.target = Target::kTE;
  else throw std::invalid_argument("selection setting: unknown target relation \"" + t + "\"");

  if (l == "LU") { s.label = Label::kLU; return s; }
  if (l == "LD") { s.label = Label::kLD; return s; }
  if (l.rfind("LO", 0) == 0) {
    s.label = Label::kLO;
    if (l.size() < 4 || l[2] != ':')
      throw std::invalid_argument("selection setting: LO needs an emotion, e.g. LO:neutral");
    s.lo_emotion = emotion_from_key(l.substr(3));
    return s;
  }
  throw std::invalid_argument("selection setting: unknown label relation \"" + l + "\"");
}

std::string SelectionSetting::str() const {
  std::string out;
  switch (target) {
    case Target::kTU: out = "TU"; break;
    case Target::kTO: out = "TO"; break;
    case Target::kTE: out = "TE"; break;
  }
  out += '+';
  switch (label) {
    case Label::kLU: out += "LU"; break;
    case Label::kLD: out += "LD"; break;
    case Label::kLO: out += "LO:" + emotion_key(lo_emotion); break;
  }
  return out;
}

namespace {

using Counts = std::array<int, kNumEmotions>;

bool multiset_satisfies(const Counts& c, int k, EmotionLabel target_emotion,
                        const SelectionSetting& s) {
  const int te = static_cast<int>(target_emotion);
  switch (s.target) {
    case SelectionSetting::Target::kTO:
      if (c[static_cast<size_t>(te)] < 1) return false;
      break;
    case SelectionSetting::Target::kTE:
      if (c[static_cast<size_t>(te)] != 0) return false;
      break;
    case SelectionSetting::Target::kTU:
      break;
  }
  switch (s.label) {
    case SelectionSetting::Label::kLD:
      for (int v : c)
        if (v > 1) return false;
      break;
    case SelectionSetting::Label::kLO:
      if (c[static_cast<size_t>(s.lo_emotion)] != k) return false;
      break;
    case SelectionSetting::Label::kLU:
      break;
  }
  return true;
}

void enumerate_counts(int emotion, int remaining, Counts& cur, int k,
                      EmotionLabel target_emotion, const SelectionSetting& s,
                      std::vector<Counts>& out) {
  if (emotion == kNumEmotions - 1) {
    cur[static_cast<size_t>(emotion)] = remaining;
    if (multiset_satisfies(cur, k, target_emotion, s)) out.push_back(cur);
    return;
  }
  for (int take = 0; take <= remaining; ++take) {
    cur[static_cast<size_t>(emotion)] = take;
    enumerate_counts(emotion + 1, remaining - take, cur, k, target_emotion, s, out);
  }
  cur[static_cast<size_t>(emotion)] = 0;
}

}  // namespace

std::vector<Counts> satisfying_label_multisets(int k, EmotionLabel target_emotion,
                                               const SelectionSetting& setting) {
  std::vector<Counts> out;
  Counts cur{};
  enumerate_counts(0, k, cur, k, target_emotion, setting, out);
  return out;
}

EnrollmentSet select_procedure(const Utterance& target, int k,
                               const std::vector<const Utterance*>& pool,
                               const SelectionSetting& setting, std::mt19937_64& rng) {
  if (k < 0 || k > 7)
    throw std::invalid_argument("select: k=" + std::to_string(k) +
                                " outside the supported range [0,7]");
  for (const Utterance* u : pool)
    if (u->speaker_id != target.speaker_id)
      throw std::invalid_argument("select: pool speaker " +
                                  std::to_string(u->speaker_id) +
                                  " differs from target speaker " +
                                  std::to_string(target.speaker_id));

  const auto candidates = satisfying_label_multisets(k, target.emotion, setting);
  if (candidates.empty())
    throw std::invalid_argument("select: setting " + setting.str() + " with k=" +
                                std::to_string(k) + " and target emotion " +
                                emotion_key(target.emotion) +
                                " admits no satisfying label multiset");

  // Per-emotion availability after excluding the target utterance itself.
  std::array<std::vector<const Utterance*>, kNumEmotions> by_emotion;
  for (const Utterance* u : pool) {
    if (u->same_utterance(target)) continue;
    by_emotion[static_cast<size_t>(u->emotion)].push_back(u);
  }
  std::vector<Counts> feasible;
  for (const Counts& c : candidates) {
    bool ok = true;
    for (int e = 0; e < kNumEmotions; ++e)
      ok = ok && c[static_cast<size_t>(e)] <=
                     static_cast<int>(by_emotion[static_cast<size_t>(e)].size());
    if (ok) feasible.push_back(c);
  }
  if (feasible.empty())
    throw std::runtime_error("select: pool exhausted for setting " + setting.str() +
                             " with k=" + std::to_string(k) +
                             " (speaker " + std::to_string(target.speaker_id) + ")");

  std::uniform_int_distribution<size_t> pick(0, feasible.size() - 1);
  const Counts& chosen = feasible[pick(rng)];

  EnrollmentSet out;
  for (int e = 0; e < kNumEmotions; ++e) {
    const int need = chosen[static_cast<size_t>(e)];
    if (need == 0) continue;
    std::vector<const Utterance*> bucket = by_emotion[static_cast<size_t>(e)];
    for (int i = 0; i < need; ++i) {
      std::uniform_int_distribution<size_t> pu(i, bucket.size() - 1);
      std::swap(bucket[static_cast<size_t>(i)], bucket[pu(rng)]);
      out.items.push_back(bucket[static_cast<size_t>(i)]);
    }
  }
  // Draw order: uniform shuffle of the assembled pairs.
  for (size_t i = out.items.size(); i > 1; --i) {
    std::uniform_int_distribution<size_t> pu(0, i - 1);
    std::swap(out.items[i - 1], out.items[pu(rng)]);
  }
  return out;
}

ConstraintReport check_constraints(const EnrollmentSet& set, const Utterance& target,
                                   const SelectionSetting& setting) {
  ConstraintReport rep;
  auto violate = [&](const std::string& msg) {
    rep.ok = false;
    rep.violations.push_back(msg);
  };

  if (set.k() > 7) violate("more than 7 enrollment pairs");
  Counts counts{};
  bool has_target_emotion = false;
  for (const Utterance* u : set.items) {
    counts[static_cast<size_t>(u->emotion)] += 1;
    has_target_emotion = has_target_emotion || u->emotion == target.emotion;
    if (u->speaker_id != target.speaker_id)
      violate("enrollment speaker " + std::to_string(u->speaker_id) +
              " is not the target speaker");
    if (u->same_utterance(target)) violate("target utterance present in enrollment");
  }

  switch (setting.target) {
    case SelectionSetting::Target::kTO:
      if (!has_target_emotion) violate("TO: target emotion absent");
      break;
    case SelectionSetting::Target::kTE:
      if (has_target_emotion) violate("TE: target emotion present");
      break;
    case SelectionSetting::Target::kTU:
      break;
  }
  switch (setting.label) {
    case SelectionSetting::Label::kLD:
      for (int e = 0; e < kNumEmotions; ++e)
        if (counts[static_cast<size_t>(e)] > 1)
          violate("LD: emotion " + emotion_key(static_cast<EmotionLabel>(e)) +
                  " repeated");
      break;
    case SelectionSetting::Label::kLO:
      for (const Utterance* u : set.items)
        if (u->emotion != setting.lo_emotion)
          violate("LO: pair labeled " + emotion_key(u->emotion) + " instead of " +
                  emotion_key(setting.lo_emotion));
      break;
    case SelectionSetting::Label::kLU:
      break;
  }
  return rep;
}

EnrollmentSet sample_meta_episode(const Utterance& target,
                                  const std::vector<const Utterance*>& pool,
                                  std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick_k(0, 7);
  const int k = pick_k(rng);
  return select_procedure(target, k, pool, SelectionSetting{}, rng);
}

}  // namespace icser
