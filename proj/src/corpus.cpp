#include "icser/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace icser {

using nlohmann::json;

const std::string& split_name(Split s) {
  static const std::string names[3] = {"train", "valid", "test"};
  return names[static_cast<size_t>(s)];
}

Split split_from_name(const std::string& name) {
  for (Split s : {Split::kTrain, Split::kValid, Split::kTest})
    if (split_name(s) == name) return s;
  throw std::invalid_argument("unknown split \"" + name + "\"");
}

Tensor Utterance::frames_tensor() const {
  return Tensor(Shape{n_frames, feature_dim}, frames);
}

bool Utterance::same_utterance(const Utterance& other) const {
  return speaker_id == other.speaker_id && emotion == other.emotion &&
         n_frames == other.n_frames && frames == other.frames;
}

EmotionLabel SpeakerProfile::emitted_emotion(EmotionLabel e, EmotionLabel a,
                                             EmotionLabel b) const {
  if (!confusion_flag) return e;
  if (e == a) return b;
  if (e == b) return a;
  return e;
}

const std::vector<Utterance>& Corpus::split(Split s) const {
  switch (s) {
    case Split::kTrain: return train;
    case Split::kValid: return valid;
    default: return test;
  }
}

const SpeakerProfile* Corpus::profile(int speaker_id) const {
  for (const SpeakerProfile& p : profiles)
    if (p.speaker_id == speaker_id) return &p;
  return nullptr;
}

std::vector<std::vector<double>> emotion_prototypes(const CorpusSpec& spec) {
  if (spec.feature_dim < kNumEmotions)
    throw std::invalid_argument(
        "corpus: feature_dim must be >= " + std::to_string(kNumEmotions) +
        " to build near-orthogonal prototypes, got " +
        std::to_string(spec.feature_dim));
  std::mt19937_64 rng(spec.prototype_seed);
  std::vector<std::vector<double>> protos(kNumEmotions);
  for (auto& p : protos) {
    p.resize(static_cast<size_t>(spec.feature_dim));
    for (double& v : p) v = gaussian(rng);
  }
  // Gram-Schmidt, then scale to the configured radius.
  for (int i = 0; i < kNumEmotions; ++i) {
    for (int j = 0; j < i; ++j) {
      double dot = 0.0;
      for (int d = 0; d < spec.feature_dim; ++d) dot += protos[i][d] * protos[j][d];
      for (int d = 0; d < spec.feature_dim; ++d) protos[i][d] -= dot * protos[j][d];
    }
    double norm = 0.0;
    for (double v : protos[i]) norm += v * v;
    norm = std::sqrt(norm);
    if (norm < 1e-9) throw std::runtime_error("corpus: degenerate prototype draw");
    for (double& v : protos[i]) v *= spec.prototype_scale / norm;
  }
  return protos;
}

namespace {

SpeakerProfile draw_profile(int speaker_id, const CorpusSpec& spec,
                            std::mt19937_64& rng) {
  SpeakerProfile p;
  p.speaker_id = speaker_id;
  p.offset.resize(static_cast<size_t>(spec.feature_dim));
  for (double& v : p.offset) v = spec.speaker_offset_sigma * gaussian(rng);
  p.confusion_flag = (rng() & 1u) != 0;
  p.noise_sigma = spec.noise_sigma;
  return p;
}

}  // namespace

Corpus generate_corpus(const CorpusSpec& spec) {
  if (spec.min_frames < 1 || spec.max_frames < spec.min_frames)
    throw std::invalid_argument("corpus: bad frame-count range");
  const auto protos = emotion_prototypes(spec);
  const Vocabulary vocab = Vocabulary::standard();
  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<int> frame_count(spec.min_frames, spec.max_frames);

  Corpus corpus;
  int next_speaker = 0;
  auto fill_split = [&](Split s, int n_speakers, std::vector<Utterance>& out) {
    for (int k = 0; k < n_speakers; ++k) {
      SpeakerProfile prof = draw_profile(next_speaker++, spec, rng);
      for (EmotionLabel e : all_emotions()) {
        EmotionLabel emitted = prof.emitted_emotion(e, spec.confusable_a, spec.confusable_b);
        const auto& proto = protos[static_cast<size_t>(emitted)];
        for (int u = 0; u < spec.utterances_per_emotion; ++u) {
          Utterance utt;
          utt.speaker_id = prof.speaker_id;
          utt.emotion = e;
          utt.split = s;
          utt.n_frames = frame_count(rng);
          utt.feature_dim = spec.feature_dim;
          utt.frames.resize(static_cast<size_t>(utt.n_frames) * spec.feature_dim);
          for (int t = 0; t < utt.n_frames; ++t)
            for (int d = 0; d < spec.feature_dim; ++d)
              utt.frames[static_cast<size_t>(t) * spec.feature_dim + d] =
                  proto[static_cast<size_t>(d)] + prof.offset[static_cast<size_t>(d)] +
                  spec.noise_sigma * gaussian(rng);
          utt.label_text = vocab.label_text(e);
          out.push_back(std::move(utt));
        }
      }
      corpus.profiles.push_back(std::move(prof));
    }
  };
  fill_split(Split::kTrain, spec.train_speakers, corpus.train);
  fill_split(Split::kValid, spec.valid_speakers, corpus.valid);
  fill_split(Split::kTest, spec.test_speakers, corpus.test);
  return corpus;
}

BayesCeiling bayes_ceiling(const CorpusSpec& spec, int n_samples, std::uint64_t seed) {
  const auto protos = emotion_prototypes(spec);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick_emotion(0, kNumEmotions - 1);
  std::uniform_int_distribution<int> frame_count(spec.min_frames, spec.max_frames);
  const int ca = static_cast<int>(spec.confusable_a);
  const int cb = static_cast<int>(spec.confusable_b);

  auto sq_dist = [&](const std::vector<double>& m, int proto) {
    double d2 = 0.0;
    for (int d = 0; d < spec.feature_dim; ++d) {
      double diff = m[static_cast<size_t>(d)] - protos[static_cast<size_t>(proto)][static_cast<size_t>(d)];
      d2 += diff * diff;
    }
    return d2;
  };

  double zero_hits = 0.0, informed_hits = 0.0;
  std::vector<double> mbar(static_cast<size_t>(spec.feature_dim));
  for (int it = 0; it < n_samples; ++it) {
    const bool flag = (rng() & 1u) != 0;
    const int e = pick_emotion(rng);
    int emitted = e;
    if (flag && e == ca) emitted = cb;
    if (flag && e == cb) emitted = ca;
    const int tframes = frame_count(rng);
    // The sample mean of the frames is a sufficient statistic for the label:
    // mbar ~ N(p_emitted, (offset^2 + noise^2/T) I).
    const double s_eff = std::sqrt(spec.speaker_offset_sigma * spec.speaker_offset_sigma +
                                   spec.noise_sigma * spec.noise_sigma / tframes);
    for (int d = 0; d < spec.feature_dim; ++d)
      mbar[static_cast<size_t>(d)] =
          protos[static_cast<size_t>(emitted)][static_cast<size_t>(d)] + s_eff * gaussian(rng);
    const double inv2v = 1.0 / (2.0 * s_eff * s_eff);

    // Zero-shot rule: each label scores its flag-marginal mixture likelihood.
    std::vector<double> score(kNumEmotions);
    for (int c = 0; c < kNumEmotions; ++c) {
      if (c == ca || c == cb) {
        const double da = sq_dist(mbar, ca), db = sq_dist(mbar, cb);
        const double mx = std::min(da, db);
        score[static_cast<size_t>(c)] =
            -mx * inv2v + std::log(0.5 * std::exp(-(da - mx) * inv2v) +
                                   0.5 * std::exp(-(db - mx) * inv2v));
      } else {
        score[static_cast<size_t>(c)] = -sq_dist(mbar, c) * inv2v;
      }
    }
    double best = *std::max_element(score.begin(), score.end());
    int ties = 0;
    bool truth_in = false;
    for (int c = 0; c < kNumEmotions; ++c) {
      if (score[static_cast<size_t>(c)] >= best - 1e-12) {
        ++ties;
        truth_in = truth_in || (c == e);
      }
    }
    if (truth_in) zero_hits += 1.0 / ties;

    // Informed rule: the permutation is observable, undo it per label.
    int arg = 0;
    double bestd = 1e300;
    for (int c = 0; c < kNumEmotions; ++c) {
      int center = c;
      if (flag && c == ca) center = cb;
      if (flag && c == cb) center = ca;
      const double d2 = sq_dist(mbar, center);
      if (d2 < bestd) {
        bestd = d2;
        arg = c;
      }
    }
    if (arg == e) informed_hits += 1.0;
  }
  return {zero_hits / n_samples, informed_hits / n_samples};
}

namespace {

json utterance_to_json(const Utterance& u) {
  json rec;
  rec["speaker_id"] = u.speaker_id;
  rec["emotion"] = emotion_key(u.emotion);
  rec["split"] = split_name(u.split);
  json frames = json::array();
  for (int t = 0; t < u.n_frames; ++t) {
    json row = json::array();
    for (int d = 0; d < u.feature_dim; ++d)
      row.push_back(u.frames[static_cast<size_t>(t) * u.feature_dim + d]);
    frames.push_back(std::move(row));
  }
  rec["frames"] = std::move(frames);
  return rec;
}

Utterance utterance_from_json(const json& rec) {
  Utterance u;
  u.speaker_id = rec.at("speaker_id").get<int>();
  u.emotion = emotion_from_key(rec.at("emotion").get<std::string>());
  u.split = split_from_name(rec.at("split").get<std::string>());
  const json& frames = rec.at("frames");
  u.n_frames = static_cast<int>(frames.size());
  u.feature_dim = u.n_frames > 0 ? static_cast<int>(frames[0].size()) : 0;
  u.frames.reserve(static_cast<size_t>(u.n_frames) * u.feature_dim);
  for (const json& row : frames) {
    if (static_cast<int>(row.size()) != u.feature_dim)
      throw std::invalid_argument("ragged frame row");
    for (const json& v : row) u.frames.push_back(v.get<double>());
  }
  u.label_text = Vocabulary::standard().label_text(u.emotion);
  return u;
}

}  // namespace

void write_jsonl(const std::string& path, const std::vector<Utterance>& utts) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  for (const Utterance& u : utts) out << utterance_to_json(u).dump() << "\n";
}

std::vector<Utterance> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<Utterance> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(utterance_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": malformed record: " + e.what());
    }
  }
  return out;
}

void write_corpus_dir(const std::string& dir, const Corpus& corpus) {
  std::filesystem::create_directories(dir);
  for (Split s : {Split::kTrain, Split::kValid, Split::kTest})
    write_jsonl(dir + "/" + split_name(s) + ".jsonl", corpus.split(s));
}

Corpus read_corpus_dir(const std::string& dir) {
  Corpus c;
  c.train = read_jsonl(dir + "/train.jsonl");
  c.valid = read_jsonl(dir + "/valid.jsonl");
  c.test = read_jsonl(dir + "/test.jsonl");
  return c;
}

std::map<int, std::vector<const Utterance*>> group_by_speaker(
    const std::vector<Utterance>& utts) {
  std::map<int, std::vector<const Utterance*>> pools;
  for (const Utterance& u : utts) pools[u.speaker_id].push_back(&u);
  return pools;
}

}  // namespace icser
