#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include "curvalid/analysis.hpp"
#include "curvalid/corpus.hpp"
#include "curvalid/matrix.hpp"
#include "curvalid/random.hpp"

namespace curvalid {

struct SynthConfig {
  std::size_t dim = 32;
  std::size_t benign_datasets = 4;
  std::size_t adversarial_datasets = 2;
  std::size_t prompts_per_dataset = 150;
  std::size_t min_len = 20;
  std::size_t max_len = 60;
  std::size_t benign_manifold_dim = 2;
  std::size_t adversarial_manifold_dim = 12;
  double noise = 0.05;
};

struct SynthBenchmark {
  EmbeddingCorpus corpus;  // manifest attached
  std::vector<PromptRecord> prompts;
  TokenSidecar tokens;
};

namespace detail {

/// Orthonormal columns (as rows of the result) via Gram-Schmidt on Gaussian draws.
inline Matrix<double> random_frame(std::size_t rank, std::size_t dim, Rng& rng) {
  Matrix<double> f(rank, dim);
  for (std::size_t r = 0; r < rank; ++r) {
    for (;;) {
      for (std::size_t c = 0; c < dim; ++c) f(r, c) = rng.normal();
      for (std::size_t p = 0; p < r; ++p) {
        const double proj = dot<double>(f.row(r), f.row(p));
        for (std::size_t c = 0; c < dim; ++c) f(r, c) -= proj * f(p, c);
      }
      const double n = norm2<double>(f.row(r));
      if (n > 1e-6) {
        for (std::size_t c = 0; c < dim; ++c) f(r, c) /= n;
        break;
      }
    }
  }
  return f;
}

inline std::string padded_index(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04zu", i);
  return buf;
}

}  // namespace detail

/// Benign prompts follow a smooth heading-drift walk on a 2-D affine plane
/// per dataset. Adversarial prompts draw every token independently from a
/// 12-D affine subspace, so consecutive tokens change direction abruptly.
inline SynthBenchmark synth_benchmark(std::uint64_t seed, const SynthConfig& cfg = {}) {
  if (cfg.benign_datasets < 2) throw ValidationError("synthetic benchmark needs at least 2 benign datasets");
  if (cfg.min_len < 1 || cfg.max_len < cfg.min_len) throw ValidationError("invalid synthetic length range");
  if (cfg.benign_manifold_dim > cfg.dim || cfg.adversarial_manifold_dim > cfg.dim) {
    throw ValidationError("manifold dimension exceeds embedding dimension");
  }
  Rng rng(seed);
  SynthBenchmark out;
  out.corpus.dim = cfg.dim;

  auto emit = [&](const std::string& dataset, Label label, std::size_t i, Matrix<float> tokens) {
    const std::string id = dataset + "-" + detail::padded_index(i);
    std::vector<std::string> words;
    std::string text;
    for (std::size_t t = 0; t < tokens.rows(); ++t) {
      words.push_back("w" + std::to_string(rng.uniform_int(500)));
      text += (t ? " " : "") + words.back();
    }
    out.prompts.push_back({id, text, dataset, label});
    out.tokens[id] = std::move(words);
    out.corpus.sequences.push_back({id, std::move(tokens)});
  };

  auto length = [&] { return cfg.min_len + static_cast<std::size_t>(rng.uniform_int(cfg.max_len - cfg.min_len + 1)); };

  for (std::size_t d = 0; d < cfg.benign_datasets; ++d) {
    const std::string name = "benign-" + std::to_string(d + 1);
    std::vector<double> center(cfg.dim);
    for (auto& c : center) c = rng.normal();
    const Matrix<double> frame = detail::random_frame(cfg.benign_manifold_dim, cfg.dim, rng);
    for (std::size_t i = 0; i < cfg.prompts_per_dataset; ++i) {
      const std::size_t len = length();
      Matrix<float> tokens(len, cfg.dim);
      std::vector<double> pos(cfg.benign_manifold_dim);
      for (auto& p : pos) p = 1.5 * rng.normal();
      double heading = rng.uniform(0.0, 2.0 * std::numbers::pi);
      for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t c = 0; c < cfg.dim; ++c) {
          double v = center[c] + cfg.noise * rng.normal();
          for (std::size_t r = 0; r < frame.rows(); ++r) v += pos[r] * frame(r, c);
          tokens(t, c) = static_cast<float>(v);
        }
        heading += 0.15 * rng.normal();
        pos[0] += 0.25 * std::cos(heading);
        if (pos.size() > 1) pos[1] += 0.25 * std::sin(heading);
      }
      emit(name, Label::benign, i, std::move(tokens));
    }
  }

  for (std::size_t d = 0; d < cfg.adversarial_datasets; ++d) {
    const std::string name = "adversarial-" + std::to_string(d + 1);
    std::vector<double> center(cfg.dim);
    for (auto& c : center) c = rng.normal();
    const Matrix<double> frame = detail::random_frame(cfg.adversarial_manifold_dim, cfg.dim, rng);
    for (std::size_t i = 0; i < cfg.prompts_per_dataset; ++i) {
      const std::size_t len = length();
      Matrix<float> tokens(len, cfg.dim);
      for (std::size_t t = 0; t < len; ++t) {
        std::vector<double> q(frame.rows());
        for (auto& v : q) v = rng.normal();
        for (std::size_t c = 0; c < cfg.dim; ++c) {
          double v = center[c] + cfg.noise * rng.normal();
          for (std::size_t r = 0; r < frame.rows(); ++r) v += q[r] * frame(r, c);
          tokens(t, c) = static_cast<float>(v);
        }
      }
      emit(name, Label::adversarial, i, std::move(tokens));
    }
  }

  attach_manifest(out.corpus, out.prompts);
  out.corpus.validate(true);
  return out;
}

}  // namespace curvalid
