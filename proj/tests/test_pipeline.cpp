#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "curvalid/pipeline.hpp"
#include "curvalid/synth.hpp"

using namespace curvalid;

namespace {

PromptVerdict pv(std::string id, Label v, double p = 0.5) { return {std::move(id), v, p}; }

/// Small but complete pipeline configuration for fast tests.
PipelineConfig small_config(DetectorKind kind = DetectorKind::mlp) {
  PipelineConfig cfg;
  cfg.l_max = 32;
  cfg.detector = kind;
  cfg.extractor.epochs = 4;
  cfg.extractor.conv1_filters = 8;
  cfg.extractor.conv2_filters = 8;
  cfg.extractor.dense_units = 16;
  cfg.mlp.hidden1 = 32;
  cfg.mlp.hidden2 = 16;
  cfg.mlp.max_epochs = 30;
  cfg.apply_seed(7);
  return cfg;
}

SynthBenchmark small_synth(std::uint64_t seed, std::size_t per_dataset = 40) {
  SynthConfig sc;
  sc.dim = 16;
  sc.prompts_per_dataset = per_dataset;
  return synth_benchmark(seed, sc);
}

EmbeddingCorpus benign_only(const EmbeddingCorpus& c) {
  std::set<std::string> ids;
  for (const auto& s : c.sequences)
    if (c.entry(s.prompt_id).label == Label::benign) ids.insert(s.prompt_id);
  return subset(c, ids);
}

std::string verdicts_text(const std::vector<PromptVerdict>& v) {
  std::ostringstream os;
  write_verdicts_jsonl(os, v);
  return os.str();
}

}  // namespace

// --- evaluate ---------------------------------------------------------------

TEST(Evaluate, HandConfusion) {
  std::map<std::string, ManifestEntry> m;
  std::vector<PromptVerdict> v;
  auto add = [&](const std::string& id, Label truth, Label pred) {
    m[id] = {truth == Label::benign ? "b" : "a", truth};
    v.push_back(pv(id, pred));
  };
  for (int i = 0; i < 2; ++i) add("tp" + std::to_string(i), Label::adversarial, Label::adversarial);
  add("fp", Label::benign, Label::adversarial);
  add("fn", Label::adversarial, Label::benign);
  for (int i = 0; i < 6; ++i) add("tn" + std::to_string(i), Label::benign, Label::benign);
  const auto r = evaluate(v, m);
  EXPECT_EQ(r.tp, 2u);
  EXPECT_EQ(r.fp, 1u);
  EXPECT_EQ(r.fn, 1u);
  EXPECT_EQ(r.tn, 6u);
  EXPECT_DOUBLE_EQ(r.precision(), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.recall(), 2.0 / 3.0);
  EXPECT_NEAR(r.f1(), 2.0 / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(r.overall.accuracy(), 0.8);
  const double reweighted = (r.benign.accuracy() * static_cast<double>(r.benign.total) +
                             r.adversarial.accuracy() * static_cast<double>(r.adversarial.total)) /
                            static_cast<double>(r.overall.total);
  EXPECT_NEAR(reweighted, r.overall.accuracy(), 1e-12);
}

TEST(Evaluate, AllCorrect) {
  std::map<std::string, ManifestEntry> m{{"a", {"x", Label::benign}}, {"b", {"y", Label::adversarial}}};
  const auto r = evaluate({pv("a", Label::benign), pv("b", Label::adversarial)}, m);
  EXPECT_EQ(r.overall.accuracy(), 1.0);
  EXPECT_EQ(r.benign.accuracy(), 1.0);
  EXPECT_EQ(r.adversarial.accuracy(), 1.0);
  EXPECT_EQ(r.f1(), 1.0);
  EXPECT_EQ(r.per_dataset.at("x").accuracy(), 1.0);
  EXPECT_EQ(r.per_dataset.at("y").accuracy(), 1.0);
}

TEST(Evaluate, UnknownIdAndUnlabeled) {
  std::map<std::string, ManifestEntry> m{{"a", {"x", Label::benign}}, {"u", {"z", Label::unlabeled}}};
  EXPECT_THROW(evaluate({pv("nope", Label::benign)}, m), ValidationError);
  const auto r = evaluate({pv("a", Label::benign), pv("u", Label::adversarial)}, m);
  EXPECT_EQ(r.skipped_unlabeled, 1u);
  EXPECT_EQ(r.overall.total, 1u);
}

TEST(Evaluate, JsonShape) {
  std::map<std::string, ManifestEntry> m{{"a", {"x", Label::benign}}};
  const auto j = to_json(evaluate({pv("a", Label::benign)}, m), 42);
  EXPECT_EQ(j["seed"], 42);
  EXPECT_EQ(j["positive_class"], "adversarial");
  EXPECT_EQ(j["overall"]["accuracy"], 1.0);
  EXPECT_EQ(j["confusion"]["tn"], 1);
  EXPECT_TRUE(j["per_dataset"].contains("x"));
}

// --- features ---------------------------------------------------------------

TEST(Features, FiveTokenPromptHasDegenerateSecondCurvature) {
  Rng rng(1);
  nn::ExtractorConfig ec;
  ec.conv1_filters = 4;
  ec.conv2_filters = 4;
  ec.dense_units = 6;
  auto ex = nn::init_extractor(3, 8, 2, ec, rng);
  for (auto& v : ex.conv1_b.values) v = 0.5;
  for (auto& v : ex.conv2_b.values) v = 0.5;
  ReferenceStore ref;
  ref.z1 = Matrix<double>(30, 6);
  for (auto& v : ref.z1.data()) v = rng.normal();
  EmbeddingSequence seq{"p", Matrix<float>(5, 3)};
  for (auto& v : seq.tokens.data()) v = static_cast<float>(rng.normal());
  const auto f = compute_features(ex, ref, seq, PromptLidConfig{5, LidEstimator::mom_appendix});
  EXPECT_EQ(f.textcurv2, 0.0);
  EXPECT_TRUE(f.curv2_degenerate);
  EXPECT_FALSE(f.curv1_degenerate);  // three positions at conv1
}

TEST(Features, ReferenceCopyOfPromptIsExcluded) {
  const auto sb = small_synth(3, 12);
  const auto cfg = small_config();
  const auto models = curvalid_train(sb.corpus, cfg);
  const auto& seq = sb.corpus.sequences[0];
  std::size_t eff = 0;
  const auto padded = standardize_and_pad(seq, models.extractor.stats, &eff);
  auto out = nn::extract_representations(models.extractor, padded, eff);
  nn::round_to_float32(out.z1);
  Matrix<double> without;
  for (std::size_t i = 1; i < models.reference.z1.rows(); ++i) without.push_row(models.reference.z1.row(i));
  ASSERT_TRUE(bitwise_equal(out.z1, models.reference.z1.row(0)));
  const double expected = prompt_lid(out.z1, without, cfg.promptlid.k).value;
  const auto f = compute_features(models.extractor, models.reference, seq, cfg.promptlid);
  EXPECT_EQ(f.prompt_lid, expected);
}

// --- split ------------------------------------------------------------------

TEST(Split, StratifiedByLabelAndDataset) {
  const auto sb = small_synth(4, 33);
  const auto s = stratified_split(sb.corpus, 0.2, 9);
  EXPECT_EQ(s.train.size() + s.test.size(), sb.corpus.sequences.size());
  for (const auto& id : s.test) EXPECT_EQ(s.train.count(id), 0u);
  std::map<std::string, std::size_t> per;
  for (const auto& id : s.test) ++per[sb.corpus.entry(id).dataset];
  ASSERT_EQ(per.size(), 6u);
  for (const auto& [ds, n] : per) EXPECT_EQ(n, 7u) << ds;  // round(33 * 0.2)
  const auto again = stratified_split(sb.corpus, 0.2, 9);
  EXPECT_EQ(again.test, s.test);
  EXPECT_NE(stratified_split(sb.corpus, 0.2, 10).test, s.test);
}

// --- synthetic benchmark ----------------------------------------------------

TEST(Synth, DefaultSizesAndInvariants) {
  const auto sb = synth_benchmark(42);
  EXPECT_EQ(sb.corpus.sequences.size(), 900u);
  EXPECT_NO_THROW(sb.corpus.validate(true));
  std::map<std::string, std::size_t> per;
  for (const auto& p : sb.prompts) ++per[p.dataset];
  EXPECT_EQ(per.size(), 6u);
  for (const auto& [ds, n] : per) EXPECT_EQ(n, 150u);
  EXPECT_NO_THROW(check_sidecar_alignment(sb.corpus, sb.tokens));
}

TEST(Synth, SeedDeterminesCorpus) {
  const auto a = small_synth(5, 10), b = small_synth(5, 10), c = small_synth(6, 10);
  EXPECT_EQ(emb1::encode(a.corpus), emb1::encode(b.corpus));
  EXPECT_NE(emb1::encode(a.corpus), emb1::encode(c.corpus));
}

TEST(Synth, AdversarialPoolHasHigherGlobalDimension) {
  const auto sb = synth_benchmark(42);
  Matrix<double> benign, adversarial;
  std::size_t nb = 0, na = 0;
  for (const auto& s : sb.corpus.sequences) {
    const bool adv = sb.corpus.entry(s.prompt_id).label == Label::adversarial;
    std::size_t& n = adv ? na : nb;
    if (n >= 20) continue;
    ++n;
    const auto x = s.tokens.cast<double>();
    for (std::size_t t = 0; t < x.rows(); ++t) (adv ? adversarial : benign).push_row(x.row(t));
  }
  EXPECT_GT(gid_mle(adversarial, 10).value, gid_mle(benign, 10).value);
}

// --- training and detection -------------------------------------------------

TEST(Pipeline, SameSeedSameArtifacts) {
  const auto sb = small_synth(8, 24);
  const auto split = stratified_split(sb.corpus, 0.25, 1);
  const auto train = subset(sb.corpus, split.train), test = subset(sb.corpus, split.test);
  const auto a = curvalid_train(train, small_config()), b = curvalid_train(train, small_config());
  const auto va = curvalid_detect(a, test), vb = curvalid_detect(b, test);
  EXPECT_EQ(verdicts_text(va), verdicts_text(vb));
  EXPECT_EQ(to_json(evaluate(va, test.manifest), 7).dump(), to_json(evaluate(vb, test.manifest), 7).dump());
  EXPECT_EQ(detector_to_json(a.detector).dump(), detector_to_json(b.detector).dump());
}

TEST(Pipeline, ThreadCountDoesNotChangeResults) {
  const auto sb = small_synth(9, 20);
  auto cfg = small_config();
  const auto one = curvalid_train(sb.corpus, cfg);
  cfg.threads = 4;
  const auto four = curvalid_train(sb.corpus, cfg);
  EXPECT_EQ(one.reference.z1, four.reference.z1);
  EXPECT_EQ(verdicts_text(curvalid_detect(one, sb.corpus, 1)), verdicts_text(curvalid_detect(four, sb.corpus, 3)));
}

TEST(Pipeline, LofTrainsWithoutAdversarialPrompts) {
  const auto sb = small_synth(10, 20);
  const auto benign = benign_only(sb.corpus);
  TrainReport rep;
  const auto models = curvalid_train(benign, small_config(DetectorKind::lof), &rep);
  EXPECT_EQ(rep.adversarial_prompts, 0u);
  EXPECT_EQ(models.detector.kind, DetectorKind::lof);
  EXPECT_EQ(curvalid_detect(models, sb.corpus).size(), sb.corpus.sequences.size());
}

TEST(Pipeline, MlpNeedsBothClasses) {
  const auto sb = small_synth(11, 15);
  try {
    curvalid_train(benign_only(sb.corpus), small_config());
    FAIL();
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "train_detector");
  }
}

TEST(Pipeline, SingleBenignDatasetFailsInExtractorStage) {
  SynthConfig sc;
  sc.dim = 16;
  sc.prompts_per_dataset = 10;
  auto sb = synth_benchmark(12, sc);
  std::set<std::string> keep;
  for (const auto& s : sb.corpus.sequences)
    if (sb.corpus.entry(s.prompt_id).dataset != "benign-2" && sb.corpus.entry(s.prompt_id).dataset != "benign-3" &&
        sb.corpus.entry(s.prompt_id).dataset != "benign-4")
      keep.insert(s.prompt_id);
  try {
    curvalid_train(subset(sb.corpus, keep), small_config());
    FAIL();
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "train_extractor");
    EXPECT_NE(std::string(e.what()).find("at least 2"), std::string::npos);
  }
}

TEST(Pipeline, DetectionIsPerPromptAndOrderFollowsInput) {
  const auto sb = small_synth(13, 20);
  const auto split = stratified_split(sb.corpus, 0.3, 2);
  const auto train = subset(sb.corpus, split.train), test = subset(sb.corpus, split.test);
  const auto models = curvalid_train(train, small_config());
  const auto base = curvalid_detect(models, test);
  ASSERT_EQ(base.size(), test.sequences.size());

  EmbeddingCorpus reversed = test;
  std::reverse(reversed.sequences.begin(), reversed.sequences.end());
  const auto rev = curvalid_detect(models, reversed);
  for (std::size_t i = 0; i < base.size(); ++i) {
    const auto& r = rev[base.size() - 1 - i];
    EXPECT_EQ(r.id, base[i].id);
    EXPECT_EQ(r.p_adversarial, base[i].p_adversarial);
  }
  EmbeddingCorpus one = subset(test, {base[3].id});
  const auto single = curvalid_detect(models, one);
  EXPECT_EQ(single[0].p_adversarial, base[3].p_adversarial);
  EXPECT_TRUE(curvalid_detect(models, EmbeddingCorpus{test.dim, {}, {}}).empty());
}

TEST(Pipeline, SavedModelsReproduceVerdicts) {
  const auto sb = small_synth(14, 16);
  for (auto kind : {DetectorKind::mlp, DetectorKind::lof}) {
    const auto models = curvalid_train(sb.corpus, small_config(kind));
    const auto dir = std::filesystem::temp_directory_path() / ("curvalid_models_" + std::string(to_string(kind)));
    std::filesystem::remove_all(dir);
    save_models(models, dir);
    const auto loaded = load_models(dir);
    EXPECT_EQ(verdicts_text(curvalid_detect(models, sb.corpus)), verdicts_text(curvalid_detect(loaded, sb.corpus)));
    std::filesystem::remove_all(dir);
  }
}

// --- file formats -----------------------------------------------------------

TEST(Formats, FeaturesCsvRoundTrip) {
  std::vector<FeatureVector> f(2);
  f[0] = {"p1", 3.25, 0.1, 1e-17, false, true, false};
  f[1] = {"p2", 0.0, 2.0 / 3.0, 0.5, true, false, true};
  std::map<std::string, ManifestEntry> m{{"p1", {"ds", Label::benign}}};
  std::stringstream ss;
  write_features_csv(ss, f, m);
  const auto rows = read_features_csv(ss);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].features.prompt_lid, 3.25);
  EXPECT_EQ(rows[0].features.textcurv2, 1e-17);
  EXPECT_EQ(rows[1].features.textcurv1, 2.0 / 3.0);
  EXPECT_TRUE(rows[0].features.curv2_degenerate);
  EXPECT_TRUE(rows[1].features.curv1_degenerate);
  EXPECT_EQ(rows[0].dataset, "ds");
  EXPECT_EQ(rows[1].label, Label::unlabeled);
}

TEST(Formats, FeaturesCsvErrors) {
  std::stringstream bad_header("id,x\n");
  EXPECT_THROW(read_features_csv(bad_header), ParseError);
  std::stringstream bad_number(features_csv_header() + "\np,d,benign,abc,0,0,0,0\n");
  try {
    read_features_csv(bad_number);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(Formats, VerdictsJsonlRoundTrip) {
  const std::vector<PromptVerdict> v{pv("a", Label::benign, 0.125), pv("b", Label::adversarial, 0.9)};
  std::stringstream ss;
  write_verdicts_jsonl(ss, v);
  const auto back = read_verdicts_jsonl(ss);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].id, "b");
  EXPECT_EQ(back[1].verdict, Label::adversarial);
  EXPECT_EQ(back[0].p_adversarial, 0.125);
  std::stringstream broken("{\"id\":\"a\",\"verdict\":\"benign\",\"p_adversarial\":0.1}\n{\"id\":1}\n");
  try {
    read_verdicts_jsonl(broken);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}
