#include "icser/experiment.hpp"

#include <atomic>
#include <fstream>
#include <map>
#include <stdexcept>
#include <thread>

#include "icser/checkpoint.hpp"
#include "icser/config.hpp"
#include "icser/rng_util.hpp"

#include "json.hpp"

namespace icser {

namespace {

void parallel_for(int n, int threads, const std::function<void(int)>& body) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  const int workers = std::min(threads, n);
  pool.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      int i;
      while ((i = next.fetch_add(1)) < n) body(i);
    });
  }
  for (std::thread& t : pool) t.join();
}

}  // namespace

std::vector<const Utterance*> EncodedSplit::speaker_pool(int speaker_id) const {
  std::vector<const Utterance*> pool;
  auto it = by_speaker.find(speaker_id);
  if (it == by_speaker.end()) return pool;
  pool.reserve(it->second.size());
  for (int idx : it->second) pool.push_back(&(*utts)[static_cast<size_t>(idx)]);
  return pool;
}

EncodedSplit encode_split(const SpeechLM& model, const std::vector<Utterance>& utts,
                          int threads) {
  EncodedSplit out;
  out.utts = &utts;
  out.enc.resize(utts.size());
  parallel_for(static_cast<int>(utts.size()), threads, [&](int i) {
    NoGradGuard ng;
    out.enc[static_cast<size_t>(i)] =
        model.encode_speech(utts[static_cast<size_t>(i)].frames_tensor(), ForwardCtx{});
  });
  for (int i = 0; i < static_cast<int>(utts.size()); ++i)
    out.by_speaker[utts[static_cast<size_t>(i)].speaker_id].push_back(i);
  return out;
}

namespace {

struct TargetPlan {
  int utt_index = -1;
  std::uint64_t seed = 0;
};

std::vector<TargetPlan> plan_targets(const EncodedSplit& split, const CellOptions& opts,
                                     int k, std::uint64_t setting_hash) {
  std::vector<TargetPlan> plan;
  for (const auto& [speaker, indices] : split.by_speaker) {
    std::map<int, int> taken_per_emotion;
    for (int idx : indices) {
      const Utterance& u = (*split.utts)[static_cast<size_t>(idx)];
      if (opts.max_per_speaker_emotion > 0) {
        int& taken = taken_per_emotion[static_cast<int>(u.emotion)];
        if (taken >= opts.max_per_speaker_emotion) continue;
        ++taken;
      }
      TargetPlan t;
      t.utt_index = idx;
      t.seed = seed_mix({opts.seed, setting_hash, static_cast<std::uint64_t>(k),
                         static_cast<std::uint64_t>(speaker),
                         static_cast<std::uint64_t>(idx)});
      plan.push_back(t);
    }
  }
  return plan;
}

std::uint64_t hash_string(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

MetricsRow evaluate_cell_predictions(const SpeechLM& model, const EncodedSplit& split,
                                     const EvalCell& cell, const CellOptions& opts,
                                     std::vector<PredictionRecord>* records) {
  const TokenSeq instruction = model.vocab().tokenize(instruction_text());
  const auto plan = plan_targets(split, opts, cell.k, hash_string(cell.setting.str()));

  std::vector<PredictionRecord> recs(plan.size());
  std::atomic<bool> infeasible{false};
  parallel_for(static_cast<int>(plan.size()), opts.threads, [&](int i) {
    if (infeasible.load()) return;
    const TargetPlan& t = plan[static_cast<size_t>(i)];
    const Utterance& target = (*split.utts)[static_cast<size_t>(t.utt_index)];
    std::mt19937_64 rng(t.seed);
    EnrollmentSet enrollment;
    try {
      enrollment = select_procedure(target, cell.k, split.speaker_pool(target.speaker_id),
                                    cell.setting, rng);
    } catch (const std::exception&) {
      infeasible.store(true);
      return;
    }
    std::vector<SpeechLabelPair> enc;
    enc.reserve(enrollment.items.size());
    for (const Utterance* u : enrollment.items) {
      // enrollment pairs reuse the precomputed speech encodings
      auto it = split.by_speaker.find(u->speaker_id);
      int found = -1;
      for (int idx : it->second)
        if (&(*split.utts)[static_cast<size_t>(idx)] == u) found = idx;
      enc.push_back({split.enc[static_cast<size_t>(found)], u->label_text});
    }
    PredictionRecord& r = recs[static_cast<size_t>(i)];
    r.utterance = t.utt_index;
    r.speaker_id = target.speaker_id;
    r.k = cell.k;
    r.setting = cell.setting.str();
    r.predicted = infer_icl_encoded(model, split.enc[static_cast<size_t>(t.utt_index)],
                                    enc, instruction, opts.infer);
    r.reference = render_answer(model.vocab(), target.label_text);
    r.match = exact_match(r.predicted, r.reference);
  });

  MetricsRow row;
  row.k = cell.k;
  row.setting = cell.setting.str();
  if (infeasible.load()) {
    row.infeasible = true;
    return row;
  }

  std::map<int, SpeakerResult> by_speaker;
  for (const PredictionRecord& r : recs) {
    SpeakerResult& sr = by_speaker[r.speaker_id];
    sr.speaker_id = r.speaker_id;
    sr.matches.push_back(r.match);
  }
  std::vector<SpeakerResult> results;
  results.reserve(by_speaker.size());
  for (auto& [id, sr] : by_speaker) results.push_back(std::move(sr));
  MetricsRow stats = ua_spk(results);
  row.ua_spk = stats.ua_spk;
  row.sigma = stats.sigma;
  row.median = stats.median;
  row.max = stats.max;
  row.min = stats.min;
  if (records != nullptr) *records = std::move(recs);
  return row;
}

MetricsRow evaluate_cell(const SpeechLM& model, const EncodedSplit& split,
                         const EvalCell& cell, const CellOptions& opts) {
  return evaluate_cell_predictions(model, split, cell, opts, nullptr);
}

void write_predictions_jsonl(const std::string& path,
                             const std::vector<PredictionRecord>& records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  for (const PredictionRecord& r : records) {
    nlohmann::json rec;
    rec["utterance"] = r.utterance;
    rec["speaker_id"] = r.speaker_id;
    rec["k"] = r.k;
    rec["setting"] = r.setting;
    rec["predicted"] = r.predicted;
    rec["reference"] = r.reference;
    rec["match"] = r.match;
    out << rec.dump() << "\n";
  }
}

std::vector<MetricsRow> run_experiment(const ExperimentConfig& cfg) {
  Corpus corpus = read_corpus_dir(cfg.corpus_dir);
  const std::vector<Utterance>& utts = corpus.split(split_from_name(cfg.split));

  std::vector<MetricsRow> rows;
  for (const ExperimentModel& m : cfg.models) {
    Checkpoint ckpt = load_checkpoint(m.checkpoint_path);
    ModelConfig mc;
    if (ckpt.config_echo.contains("model"))
      mc = ckpt.config_echo.at("model").get<ModelConfig>();
    SpeechLM model(mc, /*init_seed=*/0);
    ckpt.load_into(model.params());
    EncodedSplit encoded = encode_split(model, utts, cfg.threads);

    for (const auto& [k, setting_str] : cfg.cells) {
      EvalCell cell;
      cell.k = k;
      cell.setting = SelectionSetting::parse(setting_str);
      CellOptions opts;
      opts.seed = cfg.seed;
      opts.infer.beam_size = cfg.beam_size;
      opts.infer.max_len = cfg.max_len;
      opts.threads = cfg.threads;
      MetricsRow row = evaluate_cell(model, encoded, cell, opts);
      row.model = m.tag;
      // k=7 with distinct labels is combinatorially forced to cover all
      // seven emotions, so the cell is really TO+LD; label it that way.
      if (k == 7 && cell.setting.target == SelectionSetting::Target::kTU &&
          cell.setting.label == SelectionSetting::Label::kLD)
        row.setting = "TO+LD(forced)";
      rows.push_back(std::move(row));
    }
  }

  if (!cfg.out_csv.empty()) {
    std::ofstream out(cfg.out_csv);
    if (!out) throw std::runtime_error("cannot open " + cfg.out_csv + " for writing");
    out << kMetricsCsvHeader << "\n";
    for (const MetricsRow& r : rows) out << r.csv_line() << "\n";
  }
  return rows;
}

std::vector<double> permutation_sensitivity(const SpeechLM& model,
                                            const EncodedSplit& split, int k,
                                            const SelectionSetting& setting,
                                            std::uint64_t seed, int n_perms,
                                            const CellOptions& opts) {
  const TokenSeq instruction = model.vocab().tokenize(instruction_text());
  const auto plan = plan_targets(split, opts, k, hash_string(setting.str()));

  // One fixed enrollment per target; permutations are the variable.
  std::vector<EnrollmentSet> drawn(plan.size());
  for (size_t i = 0; i < plan.size(); ++i) {
    const Utterance& target = (*split.utts)[static_cast<size_t>(plan[i].utt_index)];
    std::mt19937_64 rng(plan[i].seed);
    drawn[i] = select_procedure(target, k, split.speaker_pool(target.speaker_id),
                                setting, rng);
  }

  std::vector<double> ua_per_perm;
  for (int p = 0; p < n_perms; ++p) {
    std::vector<PredictionRecord> recs(plan.size());
    parallel_for(static_cast<int>(plan.size()), opts.threads, [&](int i) {
      const TargetPlan& t = plan[static_cast<size_t>(i)];
      const Utterance& target = (*split.utts)[static_cast<size_t>(t.utt_index)];
      std::vector<const Utterance*> items = drawn[static_cast<size_t>(i)].items;
      std::mt19937_64 prng(seed_mix({seed, static_cast<std::uint64_t>(p), t.seed}));
      for (size_t j = items.size(); j > 1; --j) {
        std::uniform_int_distribution<size_t> pick(0, j - 1);
        std::swap(items[j - 1], items[pick(prng)]);
      }
      std::vector<SpeechLabelPair> enc;
      for (const Utterance* u : items) {
        auto it = split.by_speaker.find(u->speaker_id);
        int found = -1;
        for (int idx : it->second)
          if (&(*split.utts)[static_cast<size_t>(idx)] == u) found = idx;
        enc.push_back({split.enc[static_cast<size_t>(found)], u->label_text});
      }
      PredictionRecord& r = recs[static_cast<size_t>(i)];
      r.speaker_id = target.speaker_id;
      r.predicted = infer_icl_encoded(model, split.enc[static_cast<size_t>(t.utt_index)],
                                      enc, instruction, opts.infer);
      r.reference = render_answer(model.vocab(), target.label_text);
      r.match = exact_match(r.predicted, r.reference);
    });
    std::map<int, SpeakerResult> by_speaker;
    for (const PredictionRecord& r : recs) {
      by_speaker[r.speaker_id].speaker_id = r.speaker_id;
      by_speaker[r.speaker_id].matches.push_back(r.match);
    }
    std::vector<SpeakerResult> results;
    for (auto& [id, sr] : by_speaker) results.push_back(std::move(sr));
    ua_per_perm.push_back(ua_spk(results).ua_spk);
  }
  return ua_per_perm;
}

}  // namespace icser
