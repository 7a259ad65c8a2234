#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "icser/checkpoint.hpp"
#include "icser/corpus.hpp"
#include "icser/model.hpp"

namespace icser {

struct TrainConfig {
  int batch_size = 16;
  double learning_rate = 3e-4;
  int warmup_steps = 200;
  int max_steps = 3000;
  double label_smoothing = 0.1;
  double dropout = 0.1;
  std::uint64_t seed = 1;
  bool freeze_speech_encoder = false;  // forced on for the LM stages
  std::string stage = "classifier";    // classifier | stage1 | metaicl

  int val_every = 250;
  int val_max_per_speaker_emotion = 2;
  int val_beam = 1;
  std::vector<int> val_k_list = {0, 1, 2, 3, 4};
  int threads = 1;

  // Episode policy for the metaicl stage.
  std::string meta_setting = "TU+LU";
  int meta_k_min = 0;
  int meta_k_max = 7;
};

struct StageResult {
  Checkpoint checkpoint;  // best-validation parameters
  double best_metric = 0.0;
  std::int64_t best_step = 0;
  std::int64_t steps = 0;
  std::vector<std::string> log;  // step,split,loss,ua_spk,k
};

extern const char* kTrainLogHeader;

/// Emotion-classifier training (speech encoder + pooling + softmax head),
/// label-smoothed NLL, best-validation-UA checkpoint returned.
StageResult train_classifier(const Corpus& corpus, const ModelConfig& model_cfg,
                             TrainConfig cfg, const Checkpoint* resume_state = nullptr,
                             Checkpoint* state_out = nullptr);

/// Stage-1 fine-tuning: instruction + target speech -> emotion text, no
/// enrollment. The speech encoder is copied from the classifier checkpoint
/// and frozen.
StageResult train_stage1(const Corpus& corpus, const ModelConfig& model_cfg,
                         TrainConfig cfg, const Checkpoint& classifier_ckpt,
                         const Checkpoint* resume_state = nullptr,
                         Checkpoint* state_out = nullptr);

/// Stage-2 MetaICL: episodes carry sampled enrollment pairs in the context;
/// the loss covers only the target label tokens. Initialized from the
/// stage-1 checkpoint.
StageResult meta_train(const Corpus& corpus, const ModelConfig& model_cfg,
                       TrainConfig cfg, const Checkpoint& stage1_ckpt,
                       const Checkpoint* resume_state = nullptr,
                       Checkpoint* state_out = nullptr);

/// Decoder-side view of one LM training episode, exposed so tests can assert
/// the loss-masking contract directly.
struct EpisodeLossView {
  TokenSeq decoder_input;  // BOS + target label prefix
  TokenSeq loss_targets;   // exactly the target label tokens
};

EpisodeLossView episode_loss_view(const Vocabulary& vocab, const Utterance& target);

}  // namespace icser
