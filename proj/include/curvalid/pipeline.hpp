#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "curvalid/corpus.hpp"
#include "curvalid/detector.hpp"
#include "curvalid/error.hpp"
#include "curvalid/geometry.hpp"
#include "curvalid/model_io.hpp"
#include "curvalid/nn/extractor.hpp"
#include "curvalid/parallel.hpp"
#include "curvalid/random.hpp"

namespace curvalid {

struct PipelineConfig {
  std::size_t l_max = kDefaultLMax;
  PromptLidConfig promptlid;
  DetectorKind detector = DetectorKind::mlp;
  std::uint64_t seed = 42;
  unsigned threads = 1;
  nn::ExtractorConfig extractor;
  nn::MlpConfig mlp;
  std::size_t lof_neighbors = kDefaultLofNeighbors;
  double lof_threshold = kDefaultLofThreshold;

  /// Propagates the run seed to every stage that draws random numbers.
  void apply_seed(std::uint64_t s) {
    seed = s;
    Rng rng(s);
    extractor.seed = rng.fork();
    mlp.seed = rng.fork();
  }
};

/// The three detector inputs for one prompt. Degenerate values are 0 with a flag.
struct FeatureVector {
  std::string prompt_id;
  double prompt_lid = 0.0;
  double textcurv1 = 0.0;
  double textcurv2 = 0.0;
  bool curv1_degenerate = false;
  bool curv2_degenerate = false;
  bool lid_degenerate = false;  // all z1 neighbors equidistant
};

struct CurvalidModels {
  nn::ExtractorModel extractor;
  DetectorModel detector;
  ReferenceStore reference;
};

// ---------------------------------------------------------------------------
// Features

inline FeatureVector compute_features(const nn::ExtractorModel& extractor, const ReferenceStore& reference,
                                      const Matrix<double>& padded, std::size_t effective_len, std::string prompt_id,
                                      const PromptLidConfig& promptlid) {
  FeatureVector f;
  f.prompt_id = std::move(prompt_id);
  nn::ExtractorOutputs out = nn::extract_representations(extractor, padded, effective_len);
  nn::round_to_float32(out.z1);  // the reference store holds float32 values
  try {
    f.prompt_lid = prompt_lid(out.z1, reference.z1, promptlid.k, promptlid.estimator).value;
  } catch (const DegenerateNeighborhood&) {
    f.prompt_lid = 0.0;
    f.lid_degenerate = true;
  }
  const auto c1 = mean_text_curv(out.z2, out.eff_z2);
  const auto c2 = mean_text_curv(out.z3, out.eff_z3);
  f.textcurv1 = c1.mean;
  f.curv1_degenerate = c1.degenerate;
  f.textcurv2 = c2.mean;
  f.curv2_degenerate = c2.degenerate;
  return f;
}

inline FeatureVector compute_features(const nn::ExtractorModel& extractor, const ReferenceStore& reference,
                                      const EmbeddingSequence& seq, const PromptLidConfig& promptlid) {
  std::size_t eff = 0;
  Matrix<double> padded = standardize_and_pad(seq, extractor.stats, &eff);
  return compute_features(extractor, reference, padded, eff, seq.prompt_id, promptlid);
}

/// Features for every sequence; each prompt only reads the frozen reference store.
inline std::vector<FeatureVector> compute_features(const CurvalidModels& models, const EmbeddingCorpus& corpus,
                                                   unsigned threads = 1) {
  if (!corpus.sequences.empty() && corpus.dim != models.extractor.dim()) {
    throw ShapeError("corpus dim " + std::to_string(corpus.dim) + " != extractor dim " +
                     std::to_string(models.extractor.dim()));
  }
  std::vector<FeatureVector> out(corpus.sequences.size());
  parallel_for(out.size(), threads, [&](std::size_t i) {
    out[i] = compute_features(models.extractor, models.reference, corpus.sequences[i], models.detector.promptlid);
  });
  return out;
}

inline Matrix<double> feature_matrix(const std::vector<FeatureVector>& features) {
  Matrix<double> m(features.size(), 3);
  for (std::size_t i = 0; i < features.size(); ++i) {
    m(i, 0) = features[i].prompt_lid;
    m(i, 1) = features[i].textcurv1;
    m(i, 2) = features[i].textcurv2;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Splitting

inline EmbeddingCorpus subset(const EmbeddingCorpus& corpus, const std::set<std::string>& ids) {
  EmbeddingCorpus out;
  out.dim = corpus.dim;
  for (const auto& s : corpus.sequences) {
    if (!ids.count(s.prompt_id)) continue;
    out.sequences.push_back(s);
    if (auto it = corpus.manifest.find(s.prompt_id); it != corpus.manifest.end()) out.manifest.insert(*it);
  }
  return out;
}

struct Split {
  std::set<std::string> train;
  std::set<std::string> test;
};

/// Seeded split stratified by (label, dataset). Each stratum contributes
/// round(n * test_fraction) prompts to the test side.
inline Split stratified_split(const EmbeddingCorpus& corpus, double test_fraction, std::uint64_t seed) {
  if (test_fraction < 0.0 || test_fraction >= 1.0) throw ValidationError("test fraction must be in [0, 1)");
  std::map<std::pair<int, std::string>, std::vector<std::string>> strata;
  for (const auto& s : corpus.sequences) {
    const auto& e = corpus.entry(s.prompt_id);
    strata[{static_cast<int>(e.label), e.dataset}].push_back(s.prompt_id);
  }
  Rng rng(seed);
  Split split;
  for (auto& [key, ids] : strata) {
    std::sort(ids.begin(), ids.end());
    rng.shuffle(ids);
    const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(ids.size()) * test_fraction));
    for (std::size_t i = 0; i < ids.size(); ++i) (i < n_test ? split.test : split.train).insert(ids[i]);
  }
  return split;
}

// ---------------------------------------------------------------------------
// Training

struct TrainReport {
  double extractor_validation_accuracy = 0.0;
  std::size_t benign_prompts = 0;
  std::size_t adversarial_prompts = 0;
  std::vector<FeatureVector> training_features;
};

namespace detail {
template <typename Fn>
auto run_stage(const char* name, Fn&& fn) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}
}  // namespace detail

/// Standardize -> pad -> train the benign-dataset extractor -> z1 reference
/// store over all training prompts -> features -> detector.
inline CurvalidModels curvalid_train(const EmbeddingCorpus& corpus, const PipelineConfig& cfg,
                                     TrainReport* report = nullptr) {
  detail::run_stage("validate", [&] {
    corpus.validate(true);
    return 0;
  });
  CurvalidModels models;
  TrainReport rep;

  const StandardizationStats stats =
      detail::run_stage("standardize", [&] { return fit_standardizer(corpus, cfg.l_max); });

  models.extractor = detail::run_stage("train_extractor", [&] {
    std::set<std::string> dataset_names;
    std::set<std::string> benign_ids;
    for (const auto& s : corpus.sequences) {
      const auto& e = corpus.entry(s.prompt_id);
      if (e.label == Label::benign) {
        dataset_names.insert(e.dataset);
        benign_ids.insert(s.prompt_id);
      }
    }
    if (dataset_names.size() < 2) {
      throw ValidationError("benign prompts must span at least 2 datasets, found " +
                            std::to_string(dataset_names.size()));
    }
    std::vector<std::string> class_names(dataset_names.begin(), dataset_names.end());
    EmbeddingCorpus benign = subset(corpus, benign_ids);
    PaddedBatch batch = apply_standardize_and_pad(benign, stats);
    std::vector<std::size_t> labels;
    for (const auto& id : batch.ids) {
      const auto& ds = benign.entry(id).dataset;
      labels.push_back(static_cast<std::size_t>(
          std::lower_bound(class_names.begin(), class_names.end(), ds) - class_names.begin()));
    }
    return nn::train_extractor(batch, labels, class_names, stats, cfg.extractor);
  });
  rep.extractor_validation_accuracy = models.extractor.validation_accuracy;

  models.reference = detail::run_stage("extract_representations", [&] {
    ReferenceStore store;
    store.z1 = Matrix<double>(corpus.sequences.size(), cfg.extractor.dense_units);
    parallel_for(corpus.sequences.size(), cfg.threads, [&](std::size_t i) {
      std::size_t eff = 0;
      Matrix<double> padded = standardize_and_pad(corpus.sequences[i], stats, &eff);
      auto out = nn::extract_representations(models.extractor, padded, eff);
      std::copy(out.z1.begin(), out.z1.end(), store.z1.row(i).begin());
    });
    nn::round_to_float32(store.z1.data());
    for (const auto& s : corpus.sequences) store.ids.push_back(s.prompt_id);
    return store;
  });

  models.detector.promptlid = cfg.promptlid;
  rep.training_features =
      detail::run_stage("compute_features", [&] { return compute_features(models, corpus, cfg.threads); });

  models.detector = detail::run_stage("train_detector", [&] {
    std::vector<Label> labels;
    for (const auto& s : corpus.sequences) labels.push_back(corpus.entry(s.prompt_id).label);
    const Matrix<double> x = feature_matrix(rep.training_features);
    if (cfg.detector == DetectorKind::mlp) {
      return train_detector_mlp(x, labels, cfg.mlp, cfg.promptlid);
    }
    Matrix<double> benign;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == Label::benign) benign.push_row(x.row(i));
    }
    return train_detector_lof(benign, cfg.lof_neighbors, cfg.lof_threshold, cfg.promptlid);
  });
  for (const auto& s : corpus.sequences) {
    const auto l = corpus.entry(s.prompt_id).label;
    rep.benign_prompts += l == Label::benign;
    rep.adversarial_prompts += l == Label::adversarial;
  }
  if (report) *report = std::move(rep);
  return models;
}

// ---------------------------------------------------------------------------
// Detection and evaluation

struct PromptVerdict {
  std::string id;
  Label verdict = Label::benign;
  double p_adversarial = 0.0;
};

/// Pure function of the frozen models and the input sequences.
inline std::vector<PromptVerdict> curvalid_detect(const CurvalidModels& models, const EmbeddingCorpus& corpus,
                                                  unsigned threads = 1) {
  const auto features = compute_features(models, corpus, threads);
  const auto verdicts = predict(models.detector, feature_matrix(features));
  std::vector<PromptVerdict> out;
  out.reserve(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) {
    out.push_back({features[i].prompt_id, verdicts[i].verdict, verdicts[i].p_adversarial});
  }
  return out;
}

struct Tally {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total); }
};

struct EvalReport {
  std::map<std::string, Tally> per_dataset;
  Tally benign;
  Tally adversarial;
  Tally overall;
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::size_t skipped_unlabeled = 0;

  double precision() const { return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp); }
  double recall() const { return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn); }
  double f1() const {
    const double p = precision();
    const double r = recall();
    return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
  }
};

/// Adversarial is the positive class. Unlabeled prompts are counted and skipped.
inline EvalReport evaluate(const std::vector<PromptVerdict>& verdicts,
                           const std::map<std::string, ManifestEntry>& manifest) {
  EvalReport r;
  for (const auto& v : verdicts) {
    auto it = manifest.find(v.id);
    if (it == manifest.end()) throw ValidationError("verdict for unknown prompt '" + v.id + "'");
    const auto& truth = it->second;
    if (truth.label == Label::unlabeled) {
      ++r.skipped_unlabeled;
      continue;
    }
    const bool ok = v.verdict == truth.label;
    auto bump = [ok](Tally& t) {
      ++t.total;
      t.correct += ok;
    };
    bump(r.per_dataset[truth.dataset]);
    bump(truth.label == Label::benign ? r.benign : r.adversarial);
    bump(r.overall);
    if (truth.label == Label::adversarial) (ok ? r.tp : r.fn)++;
    else (ok ? r.tn : r.fp)++;
  }
  return r;
}

inline nlohmann::json to_json(const EvalReport& r, std::uint64_t seed) {
  auto tally = [](const Tally& t) {
    return nlohmann::json{{"correct", t.correct}, {"total", t.total}, {"accuracy", t.accuracy()}};
  };
  nlohmann::json per_dataset = nlohmann::json::object();
  for (const auto& [name, t] : r.per_dataset) per_dataset[name] = tally(t);
  return {{"seed", seed},
          {"per_dataset", per_dataset},
          {"per_class", {{"benign", tally(r.benign)}, {"adversarial", tally(r.adversarial)}}},
          {"overall", tally(r.overall)},
          {"precision", r.precision()},
          {"recall", r.recall()},
          {"f1", r.f1()},
          {"positive_class", "adversarial"},
          {"confusion", {{"tp", r.tp}, {"fp", r.fp}, {"fn", r.fn}, {"tn", r.tn}}},
          {"skipped_unlabeled", r.skipped_unlabeled}};
}

// ---------------------------------------------------------------------------
// File formats

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string features_csv_header() {
  return "prompt_id,dataset,label,prompt_lid,textcurv1,textcurv2,curv1_degenerate,curv2_degenerate";
}

inline void write_features_csv(std::ostream& out, const std::vector<FeatureVector>& features,
                               const std::map<std::string, ManifestEntry>& manifest) {
  out << features_csv_header() << '\n';
  for (const auto& f : features) {
    ManifestEntry e;
    if (auto it = manifest.find(f.prompt_id); it != manifest.end()) e = it->second;
    out << f.prompt_id << ',' << e.dataset << ',' << to_string(e.label) << ',' << format_double(f.prompt_lid) << ','
        << format_double(f.textcurv1) << ',' << format_double(f.textcurv2) << ',' << (f.curv1_degenerate ? 1 : 0)
        << ',' << (f.curv2_degenerate ? 1 : 0) << '\n';
  }
}

struct FeatureRow {
  FeatureVector features;
  std::string dataset;
  Label label = Label::unlabeled;
};

inline std::vector<FeatureRow> read_features_csv(std::istream& in) {
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line) || line != features_csv_header()) throw ParseError(1, "unexpected features CSV header");
  std::vector<FeatureRow> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 8) throw ParseError(line_no, "expected 8 columns");
    auto num = [&](const std::string& s) {
      double v = 0.0;
      auto res = std::from_chars(s.data(), s.data() + s.size(), v);
      if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw ParseError(line_no, "bad number '" + s + "'");
      return v;
    };
    FeatureRow r;
    r.features.prompt_id = cells[0];
    r.dataset = cells[1];
    try {
      r.label = parse_label(cells[2]);
    } catch (const ValidationError& e) {
      throw ParseError(line_no, e.what());
    }
    r.features.prompt_lid = num(cells[3]);
    r.features.textcurv1 = num(cells[4]);
    r.features.textcurv2 = num(cells[5]);
    r.features.curv1_degenerate = cells[6] == "1";
    r.features.curv2_degenerate = cells[7] == "1";
    rows.push_back(std::move(r));
  }
  return rows;
}

inline void write_verdicts_jsonl(std::ostream& out, const std::vector<PromptVerdict>& verdicts) {
  for (const auto& v : verdicts) {
    nlohmann::json j = {{"id", v.id}, {"verdict", std::string(to_string(v.verdict))}, {"p_adversarial", v.p_adversarial}};
    out << j.dump() << '\n';
  }
}

inline std::vector<PromptVerdict> read_verdicts_jsonl(std::istream& in) {
  std::vector<PromptVerdict> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      PromptVerdict v;
      v.id = j.at("id").get<std::string>();
      v.verdict = parse_label(j.at("verdict").get<std::string>());
      v.p_adversarial = j.at("p_adversarial").get<double>();
      out.push_back(std::move(v));
    } catch (const std::exception& e) {
      throw ParseError(line_no, e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model directory: extractor.json, detector.json, reference.json

inline void save_models(const CurvalidModels& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  model_io::write_json(extractor_to_json(m.extractor), dir / "extractor.json");
  model_io::write_json(detector_to_json(m.detector), dir / "detector.json");
  model_io::write_json(reference_to_json(m.reference), dir / "reference.json");
}

inline CurvalidModels load_models(const std::filesystem::path& dir) {
  CurvalidModels m;
  m.extractor = extractor_from_json(model_io::read_json(dir / "extractor.json", "extractor"));
  m.detector = detector_from_json(model_io::read_json(dir / "detector.json"));
  m.reference = reference_from_json(model_io::read_json(dir / "reference.json", "z1_reference"));
  if (m.reference.z1.cols() != m.extractor.config.dense_units) {
    throw ShapeError("reference store width does not match the extractor");
  }
  return m;
}

}  // namespace curvalid
