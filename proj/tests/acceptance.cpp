// Acceptance gate: one PASS/FAIL (or SKIP) line per criterion, non-zero exit on any FAIL.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <sstream>
#include <string>
#include <thread>

#include "curvalid/curvalid.hpp"
#include "oracles.hpp"

#ifndef CURVALID_CLI_PATH
#error "CURVALID_CLI_PATH must point at the curvalid executable"
#endif

using namespace curvalid;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(const std::string& name, bool pass, const std::string& detail) {
  std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
  failures += !pass;
}

void skip(const std::string& name, const std::string& why) { std::cout << "SKIP " << name << ": " << why << std::endl; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

unsigned all_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

// ---------------------------------------------------------------------------

void theorem_criterion() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = theorem_check(42, 1000, {2, 3, 16, 128, 512});
  const double t = seconds_since(t0);
  report("theorem-verifier", r.pairs == 1000 && r.max_deviation < 1e-9 && t < 5.0,
         "pairs=" + std::to_string(r.pairs) + " max_dev=" + fmt(r.max_deviation) + " (< 1e-9) time=" + fmt(t) +
             "s (< 5s)");
}

void lid_ball_criterion() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto rows = lid_ball_check(42);
  const double t = seconds_since(t0);
  bool ok = t < 60.0 && rows.size() == 8;
  double worst = 0.0;
  for (const auto& r : rows) {
    ok = ok && r.relative_error < 0.15;
    worst = std::max(worst, r.relative_error);
  }
  report("lid-estimator-oracle", ok,
         "d in {1,2,5,8}, mom-appendix and mle, worst_rel_err=" + fmt(worst) + " (< 0.15) time=" + fmt(t) + "s (< 60s)");
}

void mom_rank_criterion() {
  Rng rng(42);
  std::vector<double> a, b;
  for (int i = 0; i < 100; ++i) {
    KnnProfile p;
    p.k = 20;
    p.distances.resize(20);
    for (auto& d : p.distances) d = rng.uniform(0.01, 10.0);
    std::sort(p.distances.begin(), p.distances.end());
    a.push_back(lid_mom(p, LidEstimator::mom_appendix).value);
    b.push_back(lid_mom(p, LidEstimator::mom_def41).value);
  }
  const double rho = spearman(a, b);
  report("mom-variant-rank-correlation", rho == 1.0, "spearman=" + fmt(rho) + " over 100 profiles (== 1.0)");
}

Matrix<double> random_orthogonal(std::size_t d, Rng& rng) {
  Matrix<double> q(d, d);
  for (std::size_t r = 0; r < d; ++r) {
    for (;;) {
      for (std::size_t c = 0; c < d; ++c) q(r, c) = rng.normal();
      for (std::size_t p = 0; p < r; ++p) {
        const double proj = dot<double>(q.row(r), q.row(p));
        for (std::size_t c = 0; c < d; ++c) q(r, c) -= proj * q(p, c);
      }
      const double n = norm2<double>(q.row(r));
      if (n > 1e-8) {
        for (std::size_t c = 0; c < d; ++c) q(r, c) /= n;
        break;
      }
    }
  }
  return q;
}

void textcurv_criterion() {
  const std::vector<double> e1{1, 0}, e2{0, 1};
  const double ortho = std::abs(text_curv_pair(e1, e2) - std::numbers::pi / 4);

  Rng rng(42);
  double scale_err = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t d = 2 + rng.uniform_int(64);
    std::vector<double> u(d), v(d);
    for (auto& x : u) x = rng.normal();
    for (auto& x : v) x = rng.normal();
    const double base = text_curv_pair(u, v);
    for (double s : {0.5, 2.0, 10.0}) {
      std::vector<double> su(u), sv(v);
      for (auto& x : su) x *= s;
      for (auto& x : sv) x *= s;
      scale_err = std::max(scale_err, std::abs(text_curv_pair(su, sv) - s * base));
    }
  }

  double rot_err = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t d = 2 + rng.uniform_int(15);
    const auto q = random_orthogonal(d, rng);
    std::vector<double> u(d), v(d), qu(d, 0.0), qv(d, 0.0);
    for (auto& x : u) x = rng.normal();
    for (auto& x : v) x = rng.normal();
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < d; ++c) {
        qu[r] += q(r, c) * u[c];
        qv[r] += q(r, c) * v[c];
      }
    rot_err = std::max(rot_err, std::abs(text_curv_pair(qu, qv) - text_curv_pair(u, v)));
  }
  report("textcurv-identities", ortho < 1e-12 && scale_err < 1e-9 && rot_err < 1e-9,
         "orthogonal_err=" + fmt(ortho) + " (< 1e-12) scaling_err=" + fmt(scale_err) +
             " (< 1e-9) rotation_err=" + fmt(rot_err) + " (< 1e-9, 100 transforms)");
}

void gradcheck_criterion() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string worst_name;
  std::size_t checks = 0;
  for (std::uint64_t seed : {42u, 43u, 44u}) {
    for (const auto& c : nn::run_all_gradchecks(seed)) {
      ++checks;
      if (c.result.max_rel_error >= worst) {
        worst = c.result.max_rel_error;
        worst_name = c.name;
      }
    }
  }
  const double t = seconds_since(t0);
  report("gradient-checks", worst < 1e-4 && t < 120.0,
         std::to_string(checks) + " checks over layers and both networks, worst=" + fmt(worst) + " (" + worst_name +
             ", < 1e-4) time=" + fmt(t) + "s (< 120s)");
}

void lof_criterion() {
  Rng rng(42);
  double worst = 0.0;
  int sets = 0;
  for (std::size_t n : {31u, 50u, 100u, 150u, 200u}) {
    for (int rep = 0; rep < 4; ++rep) {
      Matrix<double> pts(n, 3);
      for (auto& v : pts.data()) v = rng.normal();
      std::vector<oracle::Point> op;
      for (std::size_t i = 0; i < n; ++i) op.emplace_back(pts.row(i).begin(), pts.row(i).end());
      const auto model = lof_fit(pts, 30);
      const oracle::BruteLof brute(op, 30);
      const auto train = lof_training_scores(model);
      for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(train[i] - brute.training_score(i)));
      for (int q = 0; q < 25; ++q) {
        oracle::Point x(3);
        for (auto& v : x) v = 3.0 * rng.normal();
        worst = std::max(worst, std::abs(lof_score(model, x) - brute.score(x)));
      }
      ++sets;
    }
  }
  report("lof-brute-force", worst < 1e-9,
         std::to_string(sets) + " feature sets, n <= 200, max_abs_diff=" + fmt(worst) + " (< 1e-9)");
}

struct ClassMeans {
  double lid[2] = {0, 0}, c1[2] = {0, 0}, c2[2] = {0, 0};
  std::size_t n[2] = {0, 0};
};

ClassMeans class_means(const std::vector<FeatureVector>& f, const EmbeddingCorpus& corpus) {
  ClassMeans m;
  for (const auto& x : f) {
    const int c = corpus.entry(x.prompt_id).label == Label::adversarial ? 1 : 0;
    m.lid[c] += x.prompt_lid;
    m.c1[c] += x.textcurv1;
    m.c2[c] += x.textcurv2;
    ++m.n[c];
  }
  for (int c = 0; c < 2; ++c) {
    const double n = static_cast<double>(std::max<std::size_t>(1, m.n[c]));
    m.lid[c] /= n;
    m.c1[c] /= n;
    m.c2[c] /= n;
  }
  return m;
}

void synthetic_criterion() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto sb = synth_benchmark(42);
  const auto split = stratified_split(sb.corpus, 0.2, 42);
  const auto train = subset(sb.corpus, split.train);
  const auto test = subset(sb.corpus, split.test);

  PipelineConfig cfg;
  cfg.apply_seed(42);
  cfg.threads = all_threads();
  const auto mlp_models = curvalid_train(train, cfg);
  const auto mlp_report = evaluate(curvalid_detect(mlp_models, test, cfg.threads), test.manifest);

  cfg.detector = DetectorKind::lof;
  const auto lof_models = curvalid_train(train, cfg);
  const auto lof_report = evaluate(curvalid_detect(lof_models, test, cfg.threads), test.manifest);

  const auto m = class_means(compute_features(mlp_models, sb.corpus, cfg.threads), sb.corpus);
  const double t = seconds_since(t0);
  const bool means_ok = m.lid[1] > m.lid[0] && m.c1[1] > m.c1[0] && m.c2[1] > m.c2[0];
  const double mlp_acc = mlp_report.overall.accuracy(), lof_acc = lof_report.overall.accuracy();
  report("synthetic-end-to-end", mlp_acc >= 0.95 && lof_acc >= 0.85 && means_ok && t < 600.0,
         "mlp_acc=" + fmt(mlp_acc) + " (>= 0.95) lof_acc=" + fmt(lof_acc) + " (>= 0.85) means benign/adversarial: "
             "promptlid " + fmt(m.lid[0]) + "/" + fmt(m.lid[1]) + " textcurv1 " + fmt(m.c1[0]) + "/" + fmt(m.c1[1]) +
             " textcurv2 " + fmt(m.c2[0]) + "/" + fmt(m.c2[1]) + " time=" + fmt(t) + "s (< 600s)");
}

// ---------------------------------------------------------------------------
// CLI-driven criteria

int shell(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// synth (once), then train + detect + eval into `out`. Returns false on any non-zero exit.
bool cli_run(const fs::path& data, const fs::path& out, const std::string& extra = "") {
  const std::string cli = CURVALID_CLI_PATH;
  const std::string quiet = " > " + (out.string() + ".log") + " 2>&1";
  fs::create_directories(out);
  if (shell(cli + " --seed 42 --threads 0 " + extra + " train --corpus " + (data / "corpus.emb1").string() +
            " --prompts " + (data / "prompts.jsonl").string() + " --out-dir " + (out / "models").string() +
            " --test-split 0.2" + quiet) != 0)
    return false;
  if (shell(cli + " --seed 42 --threads 0 detect --models " + (out / "models").string() + " --corpus " +
            (data / "corpus.emb1").string() + " --ids " + (out / "models" / "holdout.txt").string() + " --out " +
            (out / "verdicts.jsonl").string() + quiet) != 0)
    return false;
  return shell(cli + " --seed 42 eval --verdicts " + (out / "verdicts.jsonl").string() + " --prompts " +
               (data / "prompts.jsonl").string() + " --out " + (out / "report.json").string() + quiet) == 0;
}

void determinism_criterion() {
  const fs::path root = fs::temp_directory_path() / "curvalid_acceptance_determinism";
  fs::remove_all(root);
  const bool synth_ok =
      shell(std::string(CURVALID_CLI_PATH) + " --seed 42 synth --out-dir " + (root / "data").string() + " > " +
            (root.string() + "_synth.log") + " 2>&1") == 0;
  const bool a = synth_ok && cli_run(root / "data", root / "a");
  const bool b = synth_ok && cli_run(root / "data", root / "b");
  std::size_t compared = 0, differing = 0;
  if (a && b) {
    for (const char* f : {"models/extractor.json", "models/detector.json", "models/reference.json",
                          "models/holdout.txt", "models/train_report.json", "verdicts.jsonl", "report.json"}) {
      ++compared;
      differing += slurp(root / "a" / f) != slurp(root / "b" / f);
    }
  }
  report("determinism", a && b && compared == 7 && differing == 0,
         "two train+detect+eval runs, " + std::to_string(compared) + " artifacts compared, " +
             std::to_string(differing) + " differ");
  fs::remove_all(root);
  fs::remove(root.string() + "_synth.log");
}

void real_data_criterion() {
  const char* corpus_env = std::getenv("CURVALID_REAL_CORPUS");
  const char* prompts_env = std::getenv("CURVALID_REAL_PROMPTS");
  if (!corpus_env || !prompts_env) {
    skip("real-data", "set CURVALID_REAL_CORPUS (EMB1) and CURVALID_REAL_PROMPTS (JSONL) to run");
    return;
  }
  auto corpus = read_embedding_corpus(corpus_env);
  attach_manifest(corpus, load_prompts(prompts_env));
  const auto split = stratified_split(corpus, 0.2, 42);
  const auto train = subset(corpus, split.train), test = subset(corpus, split.test);
  PipelineConfig cfg;
  cfg.apply_seed(42);
  cfg.threads = all_threads();
  const auto mlp = curvalid_train(train, cfg);
  const double mlp_acc = evaluate(curvalid_detect(mlp, test, cfg.threads), test.manifest).overall.accuracy();
  const auto m = class_means(compute_features(mlp, corpus, cfg.threads), corpus);
  const double lift1 = m.c1[1] / m.c1[0] - 1.0, lift2 = m.c2[1] / m.c2[0] - 1.0;
  cfg.detector = DetectorKind::lof;
  const auto lof = curvalid_train(train, cfg);
  const double lof_acc = evaluate(curvalid_detect(lof, test, cfg.threads), test.manifest).overall.accuracy();
  report("real-data", mlp_acc >= 0.97 && lift1 >= 0.25 && lift2 >= 0.25 && lof_acc >= 0.85 && lof_acc <= 0.95,
         "mlp_acc=" + fmt(mlp_acc) + " (>= 0.97) textcurv lift conv1=" + fmt(lift1) + " conv2=" + fmt(lift2) +
             " (>= 0.25) lof_acc=" + fmt(lof_acc) + " (in [0.85, 0.95])");
}

void guarded(const char* name, const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    report(name, false, std::string("exception: ") + e.what());
  }
}

}  // namespace

int main() {
  guarded("theorem-verifier", theorem_criterion);
  guarded("lid-estimator-oracle", lid_ball_criterion);
  guarded("mom-variant-rank-correlation", mom_rank_criterion);
  guarded("textcurv-identities", textcurv_criterion);
  guarded("gradient-checks", gradcheck_criterion);
  guarded("lof-brute-force", lof_criterion);
  guarded("synthetic-end-to-end", synthetic_criterion);
  guarded("determinism", determinism_criterion);
  guarded("real-data", real_data_criterion);
  std::cout << (failures == 0 ? "ACCEPTANCE PASS" : "ACCEPTANCE FAIL (" + std::to_string(failures) + ")") << std::endl;
  return failures == 0 ? 0 : 1;
}
