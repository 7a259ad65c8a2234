#include "icser/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

namespace icser {

using nlohmann::json;

namespace {

void reject_unknown_keys(const json& j, const std::set<std::string>& known,
                         const std::string& what) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (known.find(it.key()) == known.end())
      throw std::invalid_argument(what + ": unknown key \"" + it.key() + "\"");
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void to_json(json& j, const CorpusSpec& s) {
  j = json{{"train_speakers", s.train_speakers},
           {"valid_speakers", s.valid_speakers},
           {"test_speakers", s.test_speakers},
           {"utterances_per_emotion", s.utterances_per_emotion},
           {"feature_dim", s.feature_dim},
           {"prototype_seed", s.prototype_seed},
           {"prototype_scale", s.prototype_scale},
           {"noise_sigma", s.noise_sigma},
           {"speaker_offset_sigma", s.speaker_offset_sigma},
           {"confusable_pair", {emotion_key(s.confusable_a), emotion_key(s.confusable_b)}},
           {"min_frames", s.min_frames},
           {"max_frames", s.max_frames},
           {"seed", s.seed}};
}

void from_json(const json& j, CorpusSpec& s) {
  reject_unknown_keys(j,
                      {"train_speakers", "valid_speakers", "test_speakers",
                       "utterances_per_emotion", "feature_dim", "prototype_seed",
                       "prototype_scale", "noise_sigma", "speaker_offset_sigma",
                       "confusable_pair", "min_frames", "max_frames", "seed"},
                      "corpus spec");
  get_if(j, "train_speakers", s.train_speakers);
  get_if(j, "valid_speakers", s.valid_speakers);
  get_if(j, "test_speakers", s.test_speakers);
  get_if(j, "utterances_per_emotion", s.utterances_per_emotion);
  get_if(j, "feature_dim", s.feature_dim);
  get_if(j, "prototype_seed", s.prototype_seed);
  get_if(j, "prototype_scale", s.prototype_scale);
  get_if(j, "noise_sigma", s.noise_sigma);
  get_if(j, "speaker_offset_sigma", s.speaker_offset_sigma);
  if (j.contains("confusable_pair")) {
    const auto pair = j.at("confusable_pair").get<std::vector<std::string>>();
    if (pair.size() != 2)
      throw std::invalid_argument("corpus spec: confusable_pair needs two emotions");
    s.confusable_a = emotion_from_key(pair[0]);
    s.confusable_b = emotion_from_key(pair[1]);
  }
  get_if(j, "min_frames", s.min_frames);
  get_if(j, "max_frames", s.max_frames);
  get_if(j, "seed", s.seed);
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"feature_dim", c.feature_dim},
           {"enc_layers", c.enc_layers},
           {"dec_layers", c.dec_layers},
           {"qformer_layers", c.qformer_layers},
           {"model_dim", c.model_dim},
           {"ffn_dim", c.ffn_dim},
           {"heads", c.heads},
           {"query_len", c.query_len},
           {"max_sequences", c.max_sequences},
           {"dropout_rate", c.dropout_rate}};
  if (!c.vocab_words.empty()) j["vocab"] = c.vocab_words;
}

void from_json(const json& j, ModelConfig& c) {
  reject_unknown_keys(j,
                      {"feature_dim", "enc_layers", "dec_layers", "qformer_layers",
                       "model_dim", "ffn_dim", "heads", "query_len", "max_sequences",
                       "dropout_rate", "vocab"},
                      "model config");
  get_if(j, "feature_dim", c.feature_dim);
  get_if(j, "enc_layers", c.enc_layers);
  get_if(j, "dec_layers", c.dec_layers);
  get_if(j, "qformer_layers", c.qformer_layers);
  get_if(j, "model_dim", c.model_dim);
  get_if(j, "ffn_dim", c.ffn_dim);
  get_if(j, "heads", c.heads);
  get_if(j, "query_len", c.query_len);
  get_if(j, "max_sequences", c.max_sequences);
  get_if(j, "dropout_rate", c.dropout_rate);
  get_if(j, "vocab", c.vocab_words);
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"batch_size", c.batch_size},
           {"learning_rate", c.learning_rate},
           {"warmup_steps", c.warmup_steps},
           {"max_steps", c.max_steps},
           {"label_smoothing", c.label_smoothing},
           {"dropout", c.dropout},
           {"seed", c.seed},
           {"freeze_speech_encoder", c.freeze_speech_encoder},
           {"stage", c.stage},
           {"val_every", c.val_every},
           {"val_max_per_speaker_emotion", c.val_max_per_speaker_emotion},
           {"val_beam", c.val_beam},
           {"val_k_list", c.val_k_list},
           {"threads", c.threads},
           {"meta_setting", c.meta_setting},
           {"meta_k_min", c.meta_k_min},
           {"meta_k_max", c.meta_k_max}};
}

void from_json(const json& j, TrainConfig& c) {
  reject_unknown_keys(
      j, {"batch_size", "learning_rate", "warmup_steps", "max_steps", "label_smoothing",
          "dropout", "seed", "freeze_speech_encoder", "stage", "val_every",
          "val_max_per_speaker_emotion", "val_beam", "val_k_list", "threads",
          "meta_setting", "meta_k_min", "meta_k_max"},
      "train config");
  get_if(j, "batch_size", c.batch_size);
  get_if(j, "learning_rate", c.learning_rate);
  get_if(j, "warmup_steps", c.warmup_steps);
  get_if(j, "max_steps", c.max_steps);
  get_if(j, "label_smoothing", c.label_smoothing);
  get_if(j, "dropout", c.dropout);
  get_if(j, "seed", c.seed);
  get_if(j, "freeze_speech_encoder", c.freeze_speech_encoder);
  get_if(j, "stage", c.stage);
  get_if(j, "val_every", c.val_every);
  get_if(j, "val_max_per_speaker_emotion", c.val_max_per_speaker_emotion);
  get_if(j, "val_beam", c.val_beam);
  get_if(j, "val_k_list", c.val_k_list);
  get_if(j, "threads", c.threads);
  get_if(j, "meta_setting", c.meta_setting);
  get_if(j, "meta_k_min", c.meta_k_min);
  get_if(j, "meta_k_max", c.meta_k_max);
}

void to_json(json& j, const ExperimentConfig& c) {
  json models = json::array();
  for (const ExperimentModel& m : c.models)
    models.push_back(json{{"tag", m.tag}, {"checkpoint", m.checkpoint_path}});
  json cells = json::array();
  for (const auto& [k, setting] : c.cells)
    cells.push_back(json{{"k", k}, {"setting", setting}});
  j = json{{"corpus_dir", c.corpus_dir}, {"split", c.split},
           {"models", std::move(models)}, {"cells", std::move(cells)},
           {"seed", c.seed},             {"beam_size", c.beam_size},
           {"max_len", c.max_len},       {"threads", c.threads},
           {"out_csv", c.out_csv}};
}

void from_json(const json& j, ExperimentConfig& c) {
  reject_unknown_keys(j,
                      {"corpus_dir", "split", "models", "cells", "seed", "beam_size",
                       "max_len", "threads", "out_csv"},
                      "eval config");
  get_if(j, "corpus_dir", c.corpus_dir);
  get_if(j, "split", c.split);
  if (j.contains("models")) {
    c.models.clear();
    for (const json& m : j.at("models"))
      c.models.push_back({m.at("tag").get<std::string>(),
                          m.at("checkpoint").get<std::string>()});
  }
  if (j.contains("cells")) {
    c.cells.clear();
    for (const json& cell : j.at("cells")) {
      const int k = cell.at("k").get<int>();
      const std::string setting = cell.at("setting").get<std::string>();
      SelectionSetting::parse(setting);  // validate early
      c.cells.emplace_back(k, setting);
    }
  }
  get_if(j, "seed", c.seed);
  get_if(j, "beam_size", c.beam_size);
  get_if(j, "max_len", c.max_len);
  get_if(j, "threads", c.threads);
  get_if(j, "out_csv", c.out_csv);
}

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  try {
    return json::parse(in);
  } catch (const std::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

}  // namespace icser
