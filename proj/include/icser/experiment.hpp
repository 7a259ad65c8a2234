#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "icser/inference.hpp"
#include "icser/metrics.hpp"
#include "icser/model.hpp"
#include "icser/selection.hpp"

namespace icser {

/// A split with its speech-encoder outputs precomputed once (the encoder is
/// frozen in every LM stage) and indexed by speaker.
struct EncodedSplit {
  const std::vector<Utterance>* utts = nullptr;
  std::vector<Tensor> enc;                  // aligned with *utts
  std::map<int, std::vector<int>> by_speaker;

  std::vector<const Utterance*> speaker_pool(int speaker_id) const;
};

EncodedSplit encode_split(const SpeechLM& model, const std::vector<Utterance>& utts,
                          int threads);

struct EvalCell {
  int k = 0;
  SelectionSetting setting;
};

struct CellOptions {
  std::uint64_t seed = 17;
  InferOptions infer;
  int threads = 1;
  /// 0 = every utterance; otherwise at most this many targets per
  /// (speaker, emotion), for cheap validation passes.
  int max_per_speaker_emotion = 0;
};

/// Runs k-shot inference over the split with per-target enrollment draws and
/// aggregates UA_spk. Enrollment seeds derive from (seed, speaker, utterance)
/// so cells are independent yet reproducible. Returns an infeasible-marked
/// row if any target admits no satisfying draw.
MetricsRow evaluate_cell(const SpeechLM& model, const EncodedSplit& split,
                         const EvalCell& cell, const CellOptions& opts);

struct PredictionRecord {
  int utterance = -1;  // index within the split file
  int speaker_id = -1;
  int k = 0;
  std::string setting;
  std::string predicted;
  std::string reference;
  bool match = false;
};

/// evaluate_cell plus the per-utterance records, for prediction JSONL output.
MetricsRow evaluate_cell_predictions(const SpeechLM& model, const EncodedSplit& split,
                                     const EvalCell& cell, const CellOptions& opts,
                                     std::vector<PredictionRecord>* records);

void write_predictions_jsonl(const std::string& path,
                             const std::vector<PredictionRecord>& records);

struct ExperimentModel {
  std::string tag;
  std::string checkpoint_path;
};

struct ExperimentConfig {
  std::string corpus_dir;
  std::string split = "test";
  std::vector<ExperimentModel> models;
  std::vector<std::pair<int, std::string>> cells;  // (k, setting string)
  std::uint64_t seed = 17;
  int beam_size = 4;
  int max_len = 4;
  int threads = 1;
  std::string out_csv;
};

/// One row per (model, cell); k=7 TU+LD is rendered as the forced TO+LD cell
/// it collapses to. Writes the CSV when out_csv is set and returns the rows.
std::vector<MetricsRow> run_experiment(const ExperimentConfig& cfg);

/// Diagnostic: UA_spk spread across enrollment orderings. Draws one
/// enrollment per target, evaluates n_perms random permutations of it, and
/// reports the per-permutation UA_spk values.
std::vector<double> permutation_sensitivity(const SpeechLM& model,
                                            const EncodedSplit& split, int k,
                                            const SelectionSetting& setting,
                                            std::uint64_t seed, int n_perms,
                                            const CellOptions& opts);

}  // namespace icser
