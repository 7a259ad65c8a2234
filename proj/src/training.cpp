#include "icser/training.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <stdexcept>

#include <map>

#include "icser/config.hpp"
#include "icser/experiment.hpp"
#include "icser/optim.hpp"
#include "icser/rng_util.hpp"
#include "icser/selection.hpp"

namespace icser {

const char* kTrainLogHeader = "step,split,loss,ua_spk,k";

namespace {

std::string log_line(std::int64_t step, const std::string& split, double loss,
                     double ua, int k, bool has_loss, bool has_ua) {
  std::ostringstream os;
  os << step << ',' << split << ',';
  if (has_loss) os << loss;
  os << ',';
  if (has_ua) os << ua;
  os << ',';
  if (has_ua && k >= 0) os << k;
  return os.str();
}

struct LoopSpec {
  int n_episodes = 0;
  // Builds the summed loss graph for a batch of episode indices.
  std::function<Tensor(const std::vector<int>&, std::mt19937_64&)> batch_loss;
  // Returns the validation metric (higher is better) and appends log lines.
  std::function<double(std::int64_t, std::vector<std::string>&)> validate;
  ParamRegistry* params = nullptr;
  std::string stage_name;
};

StageResult run_loop(const LoopSpec& spec, const TrainConfig& cfg,
                     const Checkpoint* resume_state, Checkpoint* state_out) {
  if (spec.n_episodes == 0) throw std::invalid_argument(spec.stage_name + ": empty training split");
  RAdamOptimizer opt(spec.params->items, cfg.learning_rate);
  std::mt19937_64 rng(cfg.seed);
  std::int64_t step = 0;

  std::vector<std::vector<double>> best_params;
  double best_metric = -1.0;
  std::int64_t best_step = 0;

  auto snapshot = [&]() {
    best_params.clear();
    for (const auto& [name, t] : spec.params->items) best_params.push_back(t.data());
  };

  if (resume_state != nullptr) {
    if (resume_state->stage != spec.stage_name)
      throw std::invalid_argument("resume: state stage \"" + resume_state->stage +
                                  "\" does not match \"" + spec.stage_name + "\"");
    step = resume_state->step;
    std::istringstream is(resume_state->rng_state);
    is >> rng;
    auto& states = opt.states();
    const bool has_best =
        resume_state->find("best." + spec.params->items[0].first) != nullptr;
    if (has_best) best_params.resize(spec.params->items.size());
    for (size_t i = 0; i < spec.params->items.size(); ++i) {
      const std::string& name = spec.params->items[i].first;
      Tensor& t = spec.params->items[i].second;
      const CheckpointEntry* pe = resume_state->find(name);
      if (pe == nullptr) throw std::runtime_error("resume: missing parameter " + name);
      t.mutable_data() = pe->data;
      const CheckpointEntry* me = resume_state->find("opt.m." + name);
      const CheckpointEntry* ve = resume_state->find("opt.v." + name);
      if (me != nullptr) states[i].m = me->data;
      if (ve != nullptr) states[i].v = ve->data;
      states[i].step = step;
      if (has_best) {
        const CheckpointEntry* be = resume_state->find("best." + name);
        if (be == nullptr) throw std::runtime_error("resume: missing best." + name);
        best_params[i] = be->data;
      }
    }
    best_metric = resume_state->config_echo.value("best_metric", -1.0);
    best_step = resume_state->config_echo.value("best_step", std::int64_t{0});
  }

  StageResult result;
  std::uniform_int_distribution<int> pick_episode(0, spec.n_episodes - 1);
  while (step < cfg.max_steps) {
    ++step;
    const double warm =
        cfg.warmup_steps > 0
            ? std::min(1.0, static_cast<double>(step) / cfg.warmup_steps)
            : 1.0;
    opt.set_learning_rate(cfg.learning_rate * warm);

    std::vector<int> batch(static_cast<size_t>(cfg.batch_size));
    for (int& b : batch) b = pick_episode(rng);
    Tensor loss = spec.batch_loss(batch, rng);
    if (!std::isfinite(loss.item()))
      throw std::runtime_error(spec.stage_name + ": training diverged at step " +
                               std::to_string(step));
    backward(loss);
    opt.step();
    opt.zero_grad();
    result.log.push_back(log_line(step, "train", loss.item(), 0.0, -1, true, false));

    if (step % cfg.val_every == 0 || step == cfg.max_steps) {
      const double metric = spec.validate(step, result.log);
      if (metric > best_metric) {
        best_metric = metric;
        best_step = step;
        snapshot();
      }
    }
  }

  if (state_out != nullptr) {
    Checkpoint st = Checkpoint::from_params(*spec.params);
    auto& states = opt.states();
    for (size_t i = 0; i < spec.params->items.size(); ++i) {
      const auto& [name, t] = spec.params->items[i];
      st.entries.push_back({"opt.m." + name, t.shape(),
                            states[i].m.empty() ? std::vector<double>(t.data().size(), 0.0)
                                                : states[i].m});
      st.entries.push_back({"opt.v." + name, t.shape(),
                            states[i].v.empty() ? std::vector<double>(t.data().size(), 0.0)
                                                : states[i].v});
    }
    if (!best_params.empty())
      for (size_t i = 0; i < spec.params->items.size(); ++i) {
        const auto& [name, t] = spec.params->items[i];
        st.entries.push_back({"best." + name, t.shape(), best_params[i]});
      }
    st.stage = spec.stage_name;
    st.step = step;
    std::ostringstream os;
    os << rng;
    st.rng_state = os.str();
    st.config_echo["best_metric"] = best_metric;
    st.config_echo["best_step"] = best_step;
    *state_out = std::move(st);
  }

  // Hand back the best-validation parameters.
  if (!best_params.empty())
    for (size_t i = 0; i < spec.params->items.size(); ++i)
      spec.params->items[i].second.mutable_data() = best_params[i];
  result.checkpoint = Checkpoint::from_params(*spec.params);
  result.checkpoint.stage = spec.stage_name;
  result.checkpoint.step = best_step;
  result.best_metric = best_metric;
  result.best_step = best_step;
  result.steps = step;
  return result;
}

double classifier_validation_ua(const ClassifierModel& model,
                                const std::vector<Utterance>& valid) {
  std::map<int, SpeakerResult> by_speaker;
  for (const Utterance& u : valid) {
    by_speaker[u.speaker_id].speaker_id = u.speaker_id;
    by_speaker[u.speaker_id].matches.push_back(model.predict(u.frames_tensor()) ==
                                               static_cast<int>(u.emotion));
  }
  std::vector<SpeakerResult> results;
  for (auto& [id, sr] : by_speaker) results.push_back(std::move(sr));
  return ua_spk(results).ua_spk;
}

}  // namespace

EpisodeLossView episode_loss_view(const Vocabulary& vocab, const Utterance& target) {
  EpisodeLossView v;
  v.loss_targets = target.label_text;
  v.decoder_input.push_back(vocab.bos_id());
  v.decoder_input.insert(v.decoder_input.end(), target.label_text.begin(),
                         target.label_text.end() - 1);
  return v;
}

StageResult train_classifier(const Corpus& corpus, const ModelConfig& model_cfg,
                             TrainConfig cfg, const Checkpoint* resume_state,
                             Checkpoint* state_out) {
  cfg.stage = "classifier";
  ClassifierModel model(model_cfg, seed_mix({cfg.seed, 0x1d}));
  const std::vector<Utterance>& train = corpus.train;

  LoopSpec spec;
  spec.stage_name = "classifier";
  spec.n_episodes = static_cast<int>(train.size());
  spec.params = &model.params();
  spec.batch_loss = [&](const std::vector<int>& batch, std::mt19937_64& rng) {
    ForwardCtx fwd{true, cfg.dropout, &rng};
    std::vector<Tensor> losses;
    losses.reserve(batch.size());
    for (int idx : batch) {
      const Utterance& u = train[static_cast<size_t>(idx)];
      Tensor logits = model.logits(u.frames_tensor(), fwd);
      losses.push_back(label_smoothing_ce(logits, static_cast<int>(u.emotion),
                                          cfg.label_smoothing));
    }
    Tensor total = losses[0];
    for (size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
    return scale(total, 1.0 / static_cast<double>(losses.size()));
  };
  spec.validate = [&](std::int64_t step, std::vector<std::string>& log) {
    const double ua = classifier_validation_ua(model, corpus.valid);
    log.push_back(log_line(step, "valid", 0.0, ua, -1, false, true));
    return ua;
  };

  StageResult r = run_loop(spec, cfg, resume_state, state_out);
  r.checkpoint.config_echo["model"] = model_cfg;
  return r;
}

namespace {

/// Shared driver for the two LM stages; they differ only in enrollment policy.
struct LmStage {
  const Corpus& corpus;
  const ModelConfig& model_cfg;
  TrainConfig cfg;
  SpeechLM model;
  EncodedSplit train_enc, valid_enc;
  TokenSeq instruction;
  // Enrollment policy: fills pairs for one episode, may consume rng.
  std::function<std::vector<SpeechLabelPair>(const Utterance&, std::mt19937_64&)> enroll;

  LmStage(const Corpus& c, const ModelConfig& mc, TrainConfig tc, std::uint64_t init_seed)
      : corpus(c), model_cfg(mc), cfg(std::move(tc)), model(mc, init_seed) {}

  void freeze_and_encode() {
    model.set_group_trainable("speech.", false);
    train_enc = encode_split(model, corpus.train, cfg.threads);
    valid_enc = encode_split(model, corpus.valid, cfg.threads);
    instruction = model.vocab().tokenize(instruction_text());
  }

  Tensor episode_loss(const Utterance& target, int target_idx, std::mt19937_64& rng,
                      const ForwardCtx& fwd) {
    std::vector<SpeechLabelPair> pairs = enroll(target, rng);
    PromptContext prompt = model.assemble_context_encoded(
        instruction, pairs, train_enc.enc[static_cast<size_t>(target_idx)], fwd);
    Tensor ctx_enc = model.encode_context(prompt, fwd);
    EpisodeLossView view = episode_loss_view(model.vocab(), target);
    TokenSeq prefix(view.decoder_input.begin() + 1, view.decoder_input.end());
    Tensor logits = model.decode_logits(ctx_enc, prefix, fwd);
    Tensor total = Tensor::scalar(0.0);
    for (size_t t = 0; t < view.loss_targets.size(); ++t) {
      Tensor row = reshape(slice_rows(logits, static_cast<int>(t), 1),
                           Shape{model.vocab().size()});
      total = add(total, label_smoothing_ce(row, view.loss_targets[t],
                                            cfg.label_smoothing));
    }
    return scale(total, 1.0 / static_cast<double>(view.loss_targets.size()));
  }

  SpeechLabelPair encoded_pair(const Utterance* u) {
    auto it = train_enc.by_speaker.find(u->speaker_id);
    int found = -1;
    for (int idx : it->second)
      if (&corpus.train[static_cast<size_t>(idx)] == u) found = idx;
    return {train_enc.enc[static_cast<size_t>(found)], u->label_text};
  }

  double validate(std::int64_t step, std::vector<std::string>& log,
                  const std::vector<int>& k_list) {
    CellOptions opts;
    opts.seed = seed_mix({cfg.seed, 0x7a1});
    opts.infer.beam_size = cfg.val_beam;
    opts.threads = cfg.threads;
    opts.max_per_speaker_emotion = cfg.val_max_per_speaker_emotion;
    double acc = 0.0;
    for (int k : k_list) {
      EvalCell cell;
      cell.k = k;
      cell.setting = SelectionSetting{};  // TU+LU
      MetricsRow row = evaluate_cell(model, valid_enc, cell, opts);
      log.push_back(log_line(step, "valid", 0.0, row.ua_spk, k, false, true));
      acc += row.ua_spk;
    }
    return acc / static_cast<double>(k_list.size());
  }

  StageResult run(const std::string& stage_name, const std::vector<int>& val_k_list,
                  const Checkpoint* resume_state, Checkpoint* state_out) {
    LoopSpec spec;
    spec.stage_name = stage_name;
    spec.n_episodes = static_cast<int>(corpus.train.size());
    spec.params = &model.params();
    spec.batch_loss = [&](const std::vector<int>& batch, std::mt19937_64& rng) {
      ForwardCtx fwd{true, cfg.dropout, &rng};
      Tensor total = Tensor::scalar(0.0);
      for (int idx : batch)
        total = add(total, episode_loss(corpus.train[static_cast<size_t>(idx)], idx, rng, fwd));
      return scale(total, 1.0 / static_cast<double>(batch.size()));
    };
    spec.validate = [&](std::int64_t step, std::vector<std::string>& log) {
      return validate(step, log, val_k_list);
    };
    StageResult r = run_loop(spec, cfg, resume_state, state_out);
    r.checkpoint.config_echo["model"] = model_cfg;
    return r;
  }
};

}  // namespace

StageResult train_stage1(const Corpus& corpus, const ModelConfig& model_cfg,
                         TrainConfig cfg, const Checkpoint& classifier_ckpt,
                         const Checkpoint* resume_state, Checkpoint* state_out) {
  cfg.stage = "stage1";
  cfg.freeze_speech_encoder = true;
  LmStage stage(corpus, model_cfg, cfg, seed_mix({cfg.seed, 0x51}));

  // Adopt the classifier's trained speech encoder, then freeze it.
  ParamRegistry tmp;
  for (const CheckpointEntry& e : classifier_ckpt.entries)
    if (e.name.rfind("speech.", 0) == 0)
      tmp.items.emplace_back(e.name, Tensor(e.shape, e.data));
  stage.model.load_speech_encoder(tmp);
  stage.freeze_and_encode();

  stage.enroll = [](const Utterance&, std::mt19937_64&) {
    return std::vector<SpeechLabelPair>{};
  };
  return stage.run("stage1", {0}, resume_state, state_out);
}

StageResult meta_train(const Corpus& corpus, const ModelConfig& model_cfg,
                       TrainConfig cfg, const Checkpoint& stage1_ckpt,
                       const Checkpoint* resume_state, Checkpoint* state_out) {
  cfg.stage = "metaicl";
  cfg.freeze_speech_encoder = true;
  LmStage stage(corpus, model_cfg, cfg, seed_mix({cfg.seed, 0x52}));
  stage1_ckpt.load_into(stage.model.params());
  stage.freeze_and_encode();

  const SelectionSetting setting = SelectionSetting::parse(cfg.meta_setting);
  if (cfg.meta_k_min < 0 || cfg.meta_k_max > 7 || cfg.meta_k_min > cfg.meta_k_max)
    throw std::invalid_argument("meta_train: bad k range [" +
                                std::to_string(cfg.meta_k_min) + "," +
                                std::to_string(cfg.meta_k_max) + "]");
  const int k_min = cfg.meta_k_min, k_max = cfg.meta_k_max;
  stage.enroll = [&stage, setting, k_min, k_max](const Utterance& target,
                                                 std::mt19937_64& rng) {
    std::uniform_int_distribution<int> pick_k(k_min, k_max);
    const int k = pick_k(rng);
    EnrollmentSet set = select_procedure(
        target, k, stage.train_enc.speaker_pool(target.speaker_id), setting, rng);
    std::vector<SpeechLabelPair> pairs;
    pairs.reserve(set.items.size());
    for (const Utterance* u : set.items) pairs.push_back(stage.encoded_pair(u));
    return pairs;
  };
  return stage.run("metaicl", cfg.val_k_list, resume_state, state_out);
}

}  // namespace icser
