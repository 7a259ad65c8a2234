// Command-line surface for the synthetic SER / in-context-learning pipeline:
// data generation, the three training stages, batch inference, evaluation,
// and the gradient self-check.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"

#include "icser/checkpoint.hpp"
#include "icser/config.hpp"
#include "icser/corpus.hpp"
#include "icser/experiment.hpp"
#include "icser/gradcheck.hpp"
#include "icser/inference.hpp"
#include "icser/training.hpp"

namespace {

using namespace icser;

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
};

nlohmann::json load_config(const CommonArgs& args) {
  if (args.config_path.empty()) return nlohmann::json::object();
  return load_json_file(args.config_path);
}

void write_train_log(const std::string& path, const StageResult& r) {
  if (path.empty()) return;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << kTrainLogHeader << "\n";
  for (const std::string& line : r.log) out << line << "\n";
}

int cmd_gen_data(const CommonArgs& args, const std::string& out_dir, bool print_bayes) {
  nlohmann::json cfg = load_config(args);
  CorpusSpec spec = section_or_default<CorpusSpec>(cfg, "corpus");
  if (args.seed) spec.seed = *args.seed;
  Corpus corpus = generate_corpus(spec);
  write_corpus_dir(out_dir, corpus);
  std::cout << "wrote " << corpus.train.size() << "/" << corpus.valid.size() << "/"
            << corpus.test.size() << " utterances to " << out_dir << "\n";
  if (print_bayes) {
    BayesCeiling bc = bayes_ceiling(spec);
    std::cout << "bayes ceiling: zero_shot=" << bc.zero_shot
              << " informed=" << bc.informed << "\n";
  }
  return 0;
}

int cmd_train_classifier(const CommonArgs& args, const std::string& data_dir,
                         const std::string& out_path, const std::string& log_path) {
  nlohmann::json cfg = load_config(args);
  ModelConfig mc = section_or_default<ModelConfig>(cfg, "model");
  TrainConfig tc = section_or_default<TrainConfig>(cfg, "classifier");
  if (args.seed) tc.seed = *args.seed;
  Corpus corpus = read_corpus_dir(data_dir);
  StageResult r = train_classifier(corpus, mc, tc);
  save_checkpoint(out_path, r.checkpoint);
  write_train_log(log_path, r);
  std::cout << "classifier: best validation UA_spk=" << r.best_metric << " at step "
            << r.best_step << ", checkpoint " << out_path << "\n";
  return 0;
}

int cmd_train_stage1(const CommonArgs& args, const std::string& data_dir,
                     const std::string& classifier_path, const std::string& out_path,
                     const std::string& log_path) {
  nlohmann::json cfg = load_config(args);
  ModelConfig mc = section_or_default<ModelConfig>(cfg, "model");
  TrainConfig tc = section_or_default<TrainConfig>(cfg, "stage1");
  if (args.seed) tc.seed = *args.seed;
  Corpus corpus = read_corpus_dir(data_dir);
  Checkpoint cls = load_checkpoint(classifier_path);
  StageResult r = train_stage1(corpus, mc, tc, cls);
  save_checkpoint(out_path, r.checkpoint);
  write_train_log(log_path, r);
  std::cout << "stage1: best validation UA_spk=" << r.best_metric << " at step "
            << r.best_step << ", checkpoint " << out_path << "\n";
  return 0;
}

int cmd_meta_train(const CommonArgs& args, const std::string& data_dir,
                   const std::string& stage1_path, const std::string& out_path,
                   const std::string& log_path) {
  nlohmann::json cfg = load_config(args);
  ModelConfig mc = section_or_default<ModelConfig>(cfg, "model");
  TrainConfig tc = section_or_default<TrainConfig>(cfg, "metaicl");
  if (args.seed) tc.seed = *args.seed;
  Corpus corpus = read_corpus_dir(data_dir);
  Checkpoint s1 = load_checkpoint(stage1_path);
  StageResult r = meta_train(corpus, mc, tc, s1);
  save_checkpoint(out_path, r.checkpoint);
  write_train_log(log_path, r);
  std::cout << "metaicl: best validation UA_spk=" << r.best_metric << " at step "
            << r.best_step << ", checkpoint " << out_path << "\n";
  return 0;
}

int cmd_infer(const CommonArgs& args, const std::string& checkpoint_path,
              const std::string& data_path, int k, const std::string& setting_str,
              const std::string& out_path, int beam, int threads) {
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  ModelConfig mc;
  if (ckpt.config_echo.contains("model"))
    mc = ckpt.config_echo.at("model").get<ModelConfig>();
  SpeechLM model(mc, 0);
  ckpt.load_into(model.params());

  std::vector<Utterance> utts = read_jsonl(data_path);
  EncodedSplit encoded = encode_split(model, utts, threads);
  EvalCell cell;
  cell.k = k;
  cell.setting = SelectionSetting::parse(setting_str);
  CellOptions opts;
  opts.seed = args.seed.value_or(17);
  opts.infer.beam_size = beam;
  opts.threads = threads;
  std::vector<PredictionRecord> records;
  MetricsRow row = evaluate_cell_predictions(model, encoded, cell, opts, &records);
  if (row.infeasible) {
    std::cerr << "cell k=" << k << " setting=" << setting_str
              << " is infeasible on this data\n";
    return 1;
  }
  if (!out_path.empty()) write_predictions_jsonl(out_path, records);
  std::cout << "UA_spk=" << row.ua_spk << " sigma=" << row.sigma
            << " median=" << row.median << " max=" << row.max << " min=" << row.min
            << "\n";
  return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& out_csv, int perm_diagnostic) {
  nlohmann::json cfg = load_config(args);
  if (!cfg.contains("eval"))
    throw std::runtime_error("eval: config has no \"eval\" section");
  ExperimentConfig ec = cfg.at("eval").get<ExperimentConfig>();
  if (args.seed) ec.seed = *args.seed;
  if (!out_csv.empty()) ec.out_csv = out_csv;
  std::vector<MetricsRow> rows = run_experiment(ec);
  std::cout << kMetricsCsvHeader << "\n";
  for (const MetricsRow& r : rows) std::cout << r.csv_line() << "\n";

  if (perm_diagnostic > 0 && !ec.models.empty() && !ec.cells.empty()) {
    Checkpoint ckpt = load_checkpoint(ec.models[0].checkpoint_path);
    ModelConfig mc;
    if (ckpt.config_echo.contains("model"))
      mc = ckpt.config_echo.at("model").get<ModelConfig>();
    SpeechLM model(mc, 0);
    ckpt.load_into(model.params());
    Corpus corpus = read_corpus_dir(ec.corpus_dir);
    EncodedSplit encoded =
        encode_split(model, corpus.split(split_from_name(ec.split)), ec.threads);
    const auto& [k, setting] = ec.cells[0];
    if (k >= 2) {
      CellOptions opts;
      opts.seed = ec.seed;
      opts.infer.beam_size = ec.beam_size;
      opts.threads = ec.threads;
      std::vector<double> uas = permutation_sensitivity(
          model, encoded, k, SelectionSetting::parse(setting), ec.seed,
          perm_diagnostic, opts);
      double mn = uas[0], mx = uas[0], sum = 0.0;
      for (double u : uas) {
        mn = std::min(mn, u);
        mx = std::max(mx, u);
        sum += u;
      }
      std::cout << "enrollment-order sensitivity (" << ec.models[0].tag << ", k=" << k
                << ", " << setting << "): mean=" << sum / uas.size() << " min=" << mn
                << " max=" << mx << " over " << uas.size() << " permutations\n";
    }
  }
  return 0;
}

int cmd_gradcheck(int points, std::uint64_t seed) {
  const auto reports = run_gradient_suite(points, seed);
  bool ok = true;
  for (const GradCheckReport& r : reports) {
    std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.name
              << " max_rel_err=" << r.max_rel_err << "\n";
    ok = ok && r.pass;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic speech-emotion ICL pipeline"};
  app.require_subcommand(1);

  CommonArgs common;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "JSON config file");
    sub->add_option("--seed", common.seed, "override the stage RNG seed");
  };

  // gen-data
  std::string out_dir = "data";
  bool print_bayes = false;
  CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic corpus");
  add_common(gen);
  gen->add_option("--out", out_dir, "output directory for the JSONL splits");
  gen->add_flag("--bayes", print_bayes, "also print the Bayes ceiling");

  // train-classifier
  std::string data_dir = "data", ckpt_out = "classifier.ckpt", log_path;
  CLI::App* tc = app.add_subcommand("train-classifier", "train the baseline classifier");
  add_common(tc);
  tc->add_option("--data", data_dir, "corpus directory");
  tc->add_option("--out", ckpt_out, "checkpoint output path");
  tc->add_option("--log", log_path, "step-metrics CSV path");

  // train-stage1
  std::string classifier_path = "classifier.ckpt", stage1_out = "stage1.ckpt";
  std::string s1_data = "data", s1_log;
  CLI::App* s1 = app.add_subcommand("train-stage1", "fine-tune the speech LM, no enrollment");
  add_common(s1);
  s1->add_option("--data", s1_data, "corpus directory");
  s1->add_option("--classifier", classifier_path, "classifier checkpoint (speech encoder source)");
  s1->add_option("--out", stage1_out, "checkpoint output path");
  s1->add_option("--log", s1_log, "step-metrics CSV path");

  // meta-train
  std::string stage1_path = "stage1.ckpt", meta_out = "meta.ckpt";
  std::string mt_data = "data", mt_log;
  CLI::App* mt = app.add_subcommand("meta-train", "MetaICL fine-tuning with enrollment episodes");
  add_common(mt);
  mt->add_option("--data", mt_data, "corpus directory");
  mt->add_option("--stage1", stage1_path, "stage-1 checkpoint to initialize from");
  mt->add_option("--out", meta_out, "checkpoint output path");
  mt->add_option("--log", mt_log, "step-metrics CSV path");

  // infer
  std::string infer_ckpt, infer_data, infer_setting = "TU+LU", infer_out;
  int infer_k = 0, infer_beam = 4, infer_threads = 2;
  CLI::App* inf = app.add_subcommand("infer", "batch ICL inference over a JSONL file");
  add_common(inf);
  inf->add_option("--checkpoint", infer_ckpt, "speech-LM checkpoint")->required();
  inf->add_option("--data", infer_data, "utterance JSONL file")->required();
  inf->add_option("--k", infer_k, "enrollment shots");
  inf->add_option("--setting", infer_setting, "selection setting, e.g. TU+LD");
  inf->add_option("--out", infer_out, "prediction JSONL output");
  inf->add_option("--beam", infer_beam, "beam size");
  inf->add_option("--threads", infer_threads, "worker threads");

  // eval
  std::string eval_csv;
  int perm_diag = 0;
  CLI::App* ev = app.add_subcommand("eval", "run the experiment grid from the config");
  add_common(ev);
  ev->add_option("--out", eval_csv, "override the metrics CSV path");
  ev->add_option("--perm-diagnostic", perm_diag,
                 "report UA_spk across N enrollment permutations of the first cell");

  // gradcheck
  int gc_points = 50;
  std::uint64_t gc_seed = 2024;
  CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gc->add_option("--points", gc_points, "random points per op");
  gc->add_option("--seed", gc_seed, "suite seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    std::cerr << app.help() << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(common, out_dir, print_bayes);
    if (tc->parsed()) return cmd_train_classifier(common, data_dir, ckpt_out, log_path);
    if (s1->parsed())
      return cmd_train_stage1(common, s1_data, classifier_path, stage1_out, s1_log);
    if (mt->parsed()) return cmd_meta_train(common, mt_data, stage1_path, meta_out, mt_log);
    if (inf->parsed())
      return cmd_infer(common, infer_ckpt, infer_data, infer_k, infer_setting, infer_out,
                       infer_beam, infer_threads);
    if (ev->parsed()) return cmd_eval(common, eval_csv, perm_diag);
    if (gc->parsed()) return cmd_gradcheck(gc_points, gc_seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
