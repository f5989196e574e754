// curvalid: batch command-line front end.
//
// Exit codes: 0 success, 1 usage, 2 data or format error, 3 verification failure.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "curvalid/curvalid.hpp"

namespace fs = std::filesystem;
using namespace curvalid;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitVerify = 3;

#ifndef CURVALID_DEFAULT_STOPWORDS
#define CURVALID_DEFAULT_STOPWORDS "data/stopwords.txt"
#endif

struct Globals {
  std::uint64_t seed = 42;
  std::size_t k = kDefaultPromptLidK;
  std::string estimator = "mom-appendix";
  std::string detector = "mlp";
  std::size_t l_max = kDefaultLMax;
  unsigned threads = 0;

  unsigned worker_count() const { return threads ? threads : std::max(1u, std::thread::hardware_concurrency()); }
  PipelineConfig pipeline() const {
    PipelineConfig c;
    c.l_max = l_max;
    c.promptlid.k = k;
    c.promptlid.estimator = parse_estimator(estimator);
    c.detector = parse_detector_kind(detector);
    c.threads = worker_count();
    c.apply_seed(seed);
    return c;
  }
};

void print_header(const Globals& g, const char* command) {
  std::cout << "curvalid " << command << " seed=" << g.seed << '\n';
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

std::set<std::string> read_id_list(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open id list " + path.string());
  std::set<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) ids.insert(line);
  }
  return ids;
}

/// Reads EMB1 and, when given, joins the prompt JSONL manifest.
EmbeddingCorpus load_corpus(const fs::path& corpus_path, const std::string& prompts_path) {
  EmbeddingCorpus corpus = read_embedding_corpus(corpus_path);
  if (!prompts_path.empty()) attach_manifest(corpus, load_prompts(prompts_path));
  return corpus;
}

EmbeddingCorpus restrict_ids(const EmbeddingCorpus& corpus, const std::string& ids_path) {
  if (ids_path.empty()) return corpus;
  const auto ids = read_id_list(ids_path);
  for (const auto& id : ids) {
    bool found = false;
    for (const auto& s : corpus.sequences) found = found || s.prompt_id == id;
    if (!found) throw ValidationError("id '" + id + "' from " + ids_path + " is not in the corpus");
  }
  return subset(corpus, ids);
}

// ---------------------------------------------------------------------------

int run_synth(const Globals& g, const std::string& out_dir, const SynthConfig& cfg) {
  print_header(g, "synth");
  const auto sb = synth_benchmark(g.seed, cfg);
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  write_embedding_corpus(sb.corpus, dir / "corpus.emb1");
  write_prompts(sb.prompts, dir / "prompts.jsonl");
  auto tokens = open_out(dir / "tokens.jsonl");
  write_token_sidecar(tokens, sb.corpus, sb.tokens);
  std::cout << "prompts=" << sb.prompts.size() << " dim=" << sb.corpus.dim << " out=" << dir.string() << '\n';
  return kExitOk;
}

int run_train(const Globals& g, const std::string& corpus_path, const std::string& prompts_path,
              const std::string& out_dir, double test_split) {
  print_header(g, "train");
  EmbeddingCorpus corpus = load_corpus(corpus_path, prompts_path);
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  if (test_split > 0.0) {
    const auto split = stratified_split(corpus, test_split, g.seed);
    auto holdout = open_out(dir / "holdout.txt");
    for (const auto& id : split.test) holdout << id << '\n';
    corpus = subset(corpus, split.train);
  }
  const PipelineConfig cfg = g.pipeline();
  TrainReport rep;
  const CurvalidModels models = curvalid_train(corpus, cfg, &rep);
  save_models(models, dir);

  nlohmann::json report = {{"seed", g.seed},
                           {"detector", std::string(to_string(cfg.detector))},
                           {"k", cfg.promptlid.k},
                           {"estimator", std::string(to_string(cfg.promptlid.estimator))},
                           {"l_max", cfg.l_max},
                           {"train_prompts", corpus.sequences.size()},
                           {"benign_prompts", rep.benign_prompts},
                           {"adversarial_prompts", rep.adversarial_prompts},
                           {"extractor_validation_accuracy", rep.extractor_validation_accuracy},
                           {"extractor_epoch_loss", models.extractor.epoch_loss}};
  if (cfg.detector == DetectorKind::mlp) {
    report["mlp_epochs_run"] = models.detector.mlp_report.epochs_run;
    report["mlp_best_epoch"] = models.detector.mlp_report.best_epoch;
  } else {
    report["lof_duplicates_removed"] = models.detector.lof->duplicates_removed;
  }
  auto out = open_out(dir / "train_report.json");
  out << report.dump(1) << '\n';
  std::cout << "trained on " << corpus.sequences.size() << " prompts; extractor val acc "
            << rep.extractor_validation_accuracy << "; models in " << dir.string() << '\n';
  return kExitOk;
}

int run_features(const Globals& g, const std::string& models_dir, const std::string& corpus_path,
                 const std::string& prompts_path, const std::string& ids_path, const std::string& out_path) {
  print_header(g, "features");
  const auto models = load_models(models_dir);
  const auto corpus = restrict_ids(load_corpus(corpus_path, prompts_path), ids_path);
  const auto features = compute_features(models, corpus, g.worker_count());
  auto out = open_out(out_path);
  write_features_csv(out, features, corpus.manifest);
  std::cout << "features=" << features.size() << " out=" << out_path << '\n';
  return kExitOk;
}

int run_detect(const Globals& g, const std::string& models_dir, const std::string& corpus_path,
               const std::string& ids_path, const std::string& out_path) {
  print_header(g, "detect");
  const auto models = load_models(models_dir);
  const auto corpus = restrict_ids(read_embedding_corpus(corpus_path), ids_path);
  const auto verdicts = curvalid_detect(models, corpus, g.worker_count());
  auto out = open_out(out_path);
  write_verdicts_jsonl(out, verdicts);
  std::size_t adversarial = 0;
  for (const auto& v : verdicts) adversarial += v.verdict == Label::adversarial;
  std::cout << "verdicts=" << verdicts.size() << " adversarial=" << adversarial << " out=" << out_path << '\n';
  return kExitOk;
}

int run_eval(const Globals& g, const std::string& verdicts_path, const std::string& prompts_path,
             const std::string& out_path) {
  print_header(g, "eval");
  std::ifstream in(verdicts_path);
  if (!in) throw Error("cannot open verdicts " + verdicts_path);
  const auto verdicts = read_verdicts_jsonl(in);
  std::map<std::string, ManifestEntry> manifest;
  for (const auto& p : load_prompts(prompts_path)) manifest[p.id] = {p.dataset, p.label};
  const auto report = evaluate(verdicts, manifest);
  const auto j = to_json(report, g.seed);
  if (!out_path.empty()) {
    auto out = open_out(out_path);
    out << j.dump(1) << '\n';
  }
  std::cout << "accuracy=" << report.overall.accuracy() << " f1=" << report.f1() << " precision=" << report.precision()
            << " recall=" << report.recall() << '\n';
  for (const auto& [name, t] : report.per_dataset) {
    std::cout << "  " << name << ": " << t.accuracy() << " (" << t.correct << "/" << t.total << ")\n";
  }
  return kExitOk;
}

int run_token_lid(const Globals& g, const std::string& corpus_path, const std::string& prompts_path,
                  const std::string& tokens_path, const std::string& stopwords_path, std::size_t k,
                  const std::string& out_path) {
  print_header(g, "analyze token-lid");
  const auto corpus = load_corpus(corpus_path, prompts_path);
  const auto rows = lid_stopword_study(corpus, load_token_sidecar(tokens_path), load_stopwords(stopwords_path), k,
                                       parse_estimator(g.estimator), g.worker_count());
  auto out = open_out(out_path);
  out << "dataset,mean_lid,std_lid,prompts,excluded,mean_lid_filtered,std_lid_filtered,prompts_filtered,"
         "excluded_filtered\n";
  for (const auto& r : rows) {
    out << r.dataset << ',' << format_double(r.with_stopwords.mean) << ',' << format_double(r.with_stopwords.std)
        << ',' << r.with_stopwords.prompts << ',' << r.with_stopwords.excluded << ','
        << format_double(r.without_stopwords.mean) << ',' << format_double(r.without_stopwords.std) << ','
        << r.without_stopwords.prompts << ',' << r.without_stopwords.excluded << '\n';
    std::cout << "  " << r.dataset << ": " << r.with_stopwords.mean << " +/- " << r.with_stopwords.std
              << " -> filtered " << r.without_stopwords.mean << " +/- " << r.without_stopwords.std << '\n';
  }
  return kExitOk;
}

int run_nn_tokens(const Globals& g, const std::string& corpus_path, const std::string& prompts_path,
                  const std::string& tokens_path, const std::string& out_path) {
  print_header(g, "analyze nn-tokens");
  const auto corpus = load_corpus(corpus_path, prompts_path);
  const auto reports = nn_token_report(corpus, load_token_sidecar(tokens_path));
  nlohmann::json j = {{"seed", g.seed}, {"datasets", nlohmann::json::object()}};
  for (const auto& [name, r] : reports) {
    nlohmann::json top = nlohmann::json::array();
    for (const auto& [token, count] : r.top) top.push_back({{"token", token}, {"count", count}});
    j["datasets"][name] = {
        {"top", top}, {"tokens_tallied", r.tokens_tallied}, {"skipped_single_token", r.skipped_single_token}};
  }
  auto out = open_out(out_path);
  out << j.dump(1) << '\n';
  std::cout << "datasets=" << reports.size() << " out=" << out_path << '\n';
  return kExitOk;
}

int run_hist(const Globals& g, const std::string& features_path, const std::string& feature, std::size_t bins,
             const std::string& out_path) {
  print_header(g, "analyze hist");
  std::ifstream in(features_path);
  if (!in) throw Error("cannot open features " + features_path);
  const auto rows = read_features_csv(in);
  std::vector<double> values;
  std::vector<Label> labels;
  for (const auto& r : rows) {
    if (feature == "prompt_lid") values.push_back(r.features.prompt_lid);
    else if (feature == "textcurv1") values.push_back(r.features.textcurv1);
    else values.push_back(r.features.textcurv2);
    labels.push_back(r.label);
  }
  auto out = open_out(out_path);
  write_histogram_csv(out, histogram(values, labels, bins));
  std::cout << "feature=" << feature << " samples=" << values.size() << " bins=" << bins << '\n';
  return kExitOk;
}

int run_gid(const Globals& g, const std::string& corpus_path, const std::string& prompts_path,
            const std::string& tokens_path, const std::string& stopwords_path, bool filter, std::size_t k,
            const std::string& out_path) {
  print_header(g, "analyze gid");
  const auto corpus = load_corpus(corpus_path, prompts_path);
  TokenSidecar sidecar;
  StopwordSet stopwords;
  if (filter) {
    if (tokens_path.empty()) throw ValidationError("--filter-stopwords needs --tokens");
    sidecar = load_token_sidecar(tokens_path);
    stopwords = load_stopwords(stopwords_path);
  }
  const auto r = gid_length_correlation(corpus, k, filter ? &sidecar : nullptr, filter ? &stopwords : nullptr,
                                        g.worker_count());
  nlohmann::json j = {{"seed", g.seed}, {"k", k}, {"filtered", filter}, {"pearson", r.pearson},
                      {"spearman", r.spearman}, {"datasets", nlohmann::json::array()}};
  for (const auto& d : r.datasets) {
    j["datasets"].push_back({{"dataset", d.dataset}, {"mean_length", d.mean_length}, {"mean_gid", d.mean_gid},
                             {"prompts", d.prompts}, {"skipped", d.skipped}});
  }
  auto out = open_out(out_path);
  out << j.dump(1) << '\n';
  std::cout << "pearson=" << r.pearson << " spearman=" << r.spearman << '\n';
  return kExitOk;
}

int run_verify_theorem(const Globals& g, std::size_t pairs) {
  print_header(g, "verify theorem");
  const auto r = theorem_check(g.seed, pairs);
  const bool ok = r.max_deviation < 1e-9;
  std::cout << "pairs=" << r.pairs << " max_deviation=" << r.max_deviation << (ok ? " PASS" : " FAIL") << '\n';
  return ok ? kExitOk : kExitVerify;
}

int run_verify_gradcheck(const Globals& g) {
  print_header(g, "verify gradcheck");
  bool ok = true;
  for (const auto& c : nn::run_all_gradchecks(g.seed)) {
    const bool pass = c.result.max_rel_error < 1e-4;
    ok = ok && pass;
    std::cout << "  " << c.name << ": " << c.result.max_rel_error << (pass ? " PASS" : " FAIL") << '\n';
  }
  return ok ? kExitOk : kExitVerify;
}

int run_verify_lid_ball(const Globals& g) {
  print_header(g, "verify lid-ball");
  bool ok = true;
  for (const auto& r : lid_ball_check(g.seed)) {
    const bool pass = r.relative_error < 0.15;
    ok = ok && pass;
    std::cout << "  d=" << r.dim << " " << to_string(r.estimator) << ": mean=" << r.mean
              << " rel_err=" << r.relative_error << (pass ? " PASS" : " FAIL") << '\n';
  }
  return ok ? kExitOk : kExitVerify;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Geometric detection of adversarial prompts from token-embedding corpora"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "key=value file with global flag defaults");

  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random stage")->envname("CURVALID_SEED")->capture_default_str();
  app.add_option("--k", g.k, "PromptLID neighborhood size")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--estimator", g.estimator, "LID estimator")
      ->check(CLI::IsMember({"mom-appendix", "mom-def41", "mle"}))
      ->capture_default_str();
  app.add_option("--detector", g.detector, "Detector kind")->check(CLI::IsMember({"mlp", "lof"}))->capture_default_str();
  app.add_option("--l-max", g.l_max, "Padded sequence length")->check(CLI::Range(5, 1 << 20))->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads (0 = all cores)")->capture_default_str();

  int code = kExitOk;

  // synth
  std::string synth_out;
  SynthConfig synth_cfg;
  auto* synth = app.add_subcommand("synth", "Write the synthetic benchmark corpus");
  synth->add_option("--out-dir", synth_out, "Output directory")->required();
  synth->add_option("--prompts-per-dataset", synth_cfg.prompts_per_dataset)->capture_default_str();
  synth->add_option("--dim", synth_cfg.dim)->check(CLI::PositiveNumber)->capture_default_str();
  synth->callback([&] { code = run_synth(g, synth_out, synth_cfg); });

  // train
  std::string train_corpus, train_prompts, train_out;
  double test_split = 0.0;
  auto* train = app.add_subcommand("train", "Train extractor, reference store and detector");
  train->add_option("--corpus", train_corpus, "EMB1 corpus")->required();
  train->add_option("--prompts", train_prompts, "Prompt JSONL with labels")->required();
  train->add_option("--out-dir", train_out, "Model directory")->required();
  train->add_option("--test-split", test_split, "Hold out this stratified fraction (ids in holdout.txt)")
      ->check(CLI::Range(0.0, 0.95));
  train->callback([&] { code = run_train(g, train_corpus, train_prompts, train_out, test_split); });

  // features
  std::string feat_models, feat_corpus, feat_prompts, feat_ids, feat_out;
  auto* features = app.add_subcommand("features", "Write the feature CSV");
  features->add_option("--models", feat_models, "Model directory")->required();
  features->add_option("--corpus", feat_corpus, "EMB1 corpus")->required();
  features->add_option("--prompts", feat_prompts, "Prompt JSONL (fills dataset and label)");
  features->add_option("--ids", feat_ids, "Only these prompt ids (one per line)");
  features->add_option("--out", feat_out, "Output CSV")->required();
  features->callback([&] { code = run_features(g, feat_models, feat_corpus, feat_prompts, feat_ids, feat_out); });

  // detect
  std::string det_models, det_corpus, det_ids, det_out;
  auto* detect = app.add_subcommand("detect", "Write verdict JSONL");
  detect->add_option("--models", det_models, "Model directory")->required();
  detect->add_option("--corpus", det_corpus, "EMB1 corpus")->required();
  detect->add_option("--ids", det_ids, "Only these prompt ids (one per line)");
  detect->add_option("--out", det_out, "Output JSONL")->required();
  detect->callback([&] { code = run_detect(g, det_models, det_corpus, det_ids, det_out); });

  // eval
  std::string ev_verdicts, ev_prompts, ev_out;
  auto* eval = app.add_subcommand("eval", "Score verdicts against labels");
  eval->add_option("--verdicts", ev_verdicts, "Verdict JSONL")->required();
  eval->add_option("--prompts", ev_prompts, "Prompt JSONL with labels")->required();
  eval->add_option("--out", ev_out, "Report JSON");
  eval->callback([&] { code = run_eval(g, ev_verdicts, ev_prompts, ev_out); });

  // analyze
  auto* analyze = app.add_subcommand("analyze", "Diagnostic studies");
  analyze->require_subcommand(1);
  std::string an_corpus, an_prompts, an_tokens, an_stopwords = CURVALID_DEFAULT_STOPWORDS, an_out, an_features;
  std::string an_feature = "prompt_lid";
  std::size_t an_k = kDefaultTokenLidK, an_bins = 20;
  bool an_filter = false;

  auto* token_lid = analyze->add_subcommand("token-lid", "Token-level LID with and without stopwords");
  token_lid->add_option("--corpus", an_corpus)->required();
  token_lid->add_option("--prompts", an_prompts)->required();
  token_lid->add_option("--tokens", an_tokens, "Token sidecar JSONL")->required();
  token_lid->add_option("--stopwords", an_stopwords)->capture_default_str();
  token_lid->add_option("--token-k", an_k, "Per-token neighborhood size")->capture_default_str();
  token_lid->add_option("--out", an_out, "Output CSV")->required();
  token_lid->callback(
      [&] { code = run_token_lid(g, an_corpus, an_prompts, an_tokens, an_stopwords, an_k, an_out); });

  auto* nn_tokens = analyze->add_subcommand("nn-tokens", "Most common nearest-neighbor tokens per dataset");
  nn_tokens->add_option("--corpus", an_corpus)->required();
  nn_tokens->add_option("--prompts", an_prompts)->required();
  nn_tokens->add_option("--tokens", an_tokens, "Token sidecar JSONL")->required();
  nn_tokens->add_option("--out", an_out, "Output JSON")->required();
  nn_tokens->callback([&] { code = run_nn_tokens(g, an_corpus, an_prompts, an_tokens, an_out); });

  auto* hist = analyze->add_subcommand("hist", "Per-class histogram of one feature");
  hist->add_option("--features", an_features, "Feature CSV")->required();
  hist->add_option("--feature", an_feature)
      ->check(CLI::IsMember({"prompt_lid", "textcurv1", "textcurv2"}))
      ->capture_default_str();
  hist->add_option("--bins", an_bins)->check(CLI::PositiveNumber)->capture_default_str();
  hist->add_option("--out", an_out, "Output CSV")->required();
  hist->callback([&] { code = run_hist(g, an_features, an_feature, an_bins, an_out); });

  auto* gid = analyze->add_subcommand("gid", "Per-dataset GID against mean prompt length");
  gid->add_option("--corpus", an_corpus)->required();
  gid->add_option("--prompts", an_prompts)->required();
  gid->add_option("--tokens", an_tokens, "Token sidecar JSONL");
  gid->add_option("--stopwords", an_stopwords)->capture_default_str();
  gid->add_flag("--filter-stopwords", an_filter, "Drop stopwords and punctuation first");
  gid->add_option("--token-k", an_k, "Neighborhood size per prompt")->capture_default_str();
  gid->add_option("--out", an_out, "Output JSON")->required();
  gid->callback(
      [&] { code = run_gid(g, an_corpus, an_prompts, an_tokens, an_stopwords, an_filter, an_k, an_out); });

  // verify
  auto* verify = app.add_subcommand("verify", "Numerical self-checks");
  verify->require_subcommand(1);
  std::size_t theorem_pairs = 1000;
  auto* theorem = verify->add_subcommand("theorem", "Inter-vector angle vs tangential-angle difference");
  theorem->add_option("--pairs", theorem_pairs)->check(CLI::PositiveNumber)->capture_default_str();
  theorem->callback([&] { code = run_verify_theorem(g, theorem_pairs); });
  verify->add_subcommand("gradcheck", "Finite-difference gradient checks")->callback([&] {
    code = run_verify_gradcheck(g);
  });
  verify->add_subcommand("lid-ball", "LID estimators on uniform d-balls")->callback([&] {
    code = run_verify_lid_ball(g);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return code;
}
