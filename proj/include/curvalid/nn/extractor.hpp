#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "curvalid/corpus.hpp"
#include "curvalid/error.hpp"
#include "curvalid/matrix.hpp"
#include "curvalid/nn/layers.hpp"
#include "curvalid/random.hpp"

namespace curvalid::nn {

struct ExtractorConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double validation_split = 0.2;
  AdamConfig adam;
  std::uint64_t seed = 42;
  // Architecture: conv(3) -> ReLU -> conv(3) -> ReLU -> flatten -> dense -> ReLU -> dense(K).
  std::size_t conv1_filters = 32;
  std::size_t conv2_filters = 64;
  std::size_t dense_units = 128;
};

/// Benign-dataset classifier whose hidden activations feed the detector.
struct ExtractorModel {
  Tensor conv1_w, conv1_b;
  Tensor conv2_w, conv2_b;
  Tensor dense_w, dense_b;
  Tensor head_w, head_b;
  StandardizationStats stats;
  std::vector<std::string> class_names;
  ExtractorConfig config;
  double validation_accuracy = 0.0;
  std::vector<double> epoch_loss;

  std::size_t dim() const { return conv1_w.shape.at(2); }
  std::size_t l_max() const { return stats.l_max; }
  std::size_t classes() const { return head_w.shape.at(0); }

  std::array<Tensor*, 8> params() {
    return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &dense_w, &dense_b, &head_w, &head_b};
  }
  std::array<const Tensor*, 8> params() const {
    return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &dense_w, &dense_b, &head_w, &head_b};
  }
};

inline ExtractorModel init_extractor(std::size_t dim, std::size_t l_max, std::size_t classes,
                                     const ExtractorConfig& cfg, Rng& rng) {
  if (l_max < kMinLMax) throw ValidationError("l_max must be >= " + std::to_string(kMinLMax));
  if (classes < 2) throw ValidationError("extractor needs at least 2 classes");
  ExtractorModel m;
  m.config = cfg;
  const std::size_t flat = cfg.conv2_filters * (l_max - 4);
  m.conv1_w = Tensor({cfg.conv1_filters, kKernel, dim});
  m.conv1_b = Tensor({cfg.conv1_filters});
  m.conv2_w = Tensor({cfg.conv2_filters, kKernel, cfg.conv1_filters});
  m.conv2_b = Tensor({cfg.conv2_filters});
  m.dense_w = Tensor({cfg.dense_units, flat});
  m.dense_b = Tensor({cfg.dense_units});
  m.head_w = Tensor({classes, cfg.dense_units});
  m.head_b = Tensor({classes});
  he_uniform(m.conv1_w, kKernel * dim, rng);
  he_uniform(m.conv2_w, kKernel * cfg.conv1_filters, rng);
  he_uniform(m.dense_w, flat, rng);
  he_uniform(m.head_w, cfg.dense_units, rng);
  m.stats.l_max = l_max;
  m.stats.mean.assign(dim, 0.0);
  m.stats.std.assign(dim, 1.0);
  return m;
}

/// z1: dense activation; z2, z3: post-ReLU conv outputs.
struct ExtractorOutputs {
  std::vector<double> z1;
  Matrix<double> z2;
  Matrix<double> z3;
  std::size_t eff_input = 0;
  std::size_t eff_z2 = 0;
  std::size_t eff_z3 = 0;
};

namespace detail {

struct ExtractorTrace {
  ExtractorOutputs out;
  std::vector<double> logits;
};

inline ExtractorTrace extractor_forward(const ExtractorModel& m, const Matrix<double>& input) {
  if (input.rows() != m.l_max() || input.cols() != m.dim()) {
    throw ShapeError("extractor expects " + std::to_string(m.l_max()) + "x" + std::to_string(m.dim()) +
                     " input, got " + std::to_string(input.rows()) + "x" + std::to_string(input.cols()));
  }
  ExtractorTrace t;
  t.out.z2 = conv1d_forward(input, m.conv1_w, m.conv1_b.values);
  relu_inplace(t.out.z2.data());
  t.out.z3 = conv1d_forward(t.out.z2, m.conv2_w, m.conv2_b.values);
  relu_inplace(t.out.z3.data());
  t.out.z1 = dense_forward(t.out.z3.data(), m.dense_w, m.dense_b.values);
  relu_inplace(t.out.z1);
  t.logits = dense_forward(t.out.z1, m.head_w, m.head_b.values);
  return t;
}

}  // namespace detail

inline std::size_t shrink_by_conv(std::size_t eff) { return eff >= 2 ? eff - 2 : 0; }

/// Eval-mode forward of a single padded prompt. No state is shared between prompts.
inline ExtractorOutputs extract_representations(const ExtractorModel& model, const Matrix<double>& padded,
                                                std::size_t effective_len) {
  auto trace = detail::extractor_forward(model, padded);
  trace.out.eff_input = std::min(effective_len, model.l_max());
  trace.out.eff_z2 = shrink_by_conv(trace.out.eff_input);
  trace.out.eff_z3 = shrink_by_conv(trace.out.eff_z2);
  return std::move(trace.out);
}

inline std::vector<double> extractor_logits(const ExtractorModel& model, const Matrix<double>& padded) {
  return detail::extractor_forward(model, padded).logits;
}

/// Gradient buffers with the same shapes as the model parameters.
struct ExtractorGrads {
  std::array<Tensor, 8> g;

  explicit ExtractorGrads(const ExtractorModel& m) {
    auto p = m.params();
    for (std::size_t i = 0; i < p.size(); ++i) g[i] = Tensor(p[i]->shape);
  }
  void zero() {
    for (auto& t : g) t.zero();
  }
};

/// Cross-entropy of one prompt; accumulates parameter gradients scaled by `scale`.
inline double extractor_loss_and_grad(const ExtractorModel& m, const Matrix<double>& input, std::size_t label,
                                      ExtractorGrads* grads, double scale = 1.0) {
  auto t = detail::extractor_forward(m, input);
  auto ce = softmax_cross_entropy(t.logits, label);
  if (!grads) return ce.loss;
  for (auto& v : ce.grad) v *= scale;

  auto& g = grads->g;
  std::vector<double> g_z1;
  dense_backward(t.out.z1, m.head_w, ce.grad, g[6], g[7].values, &g_z1);
  relu_backward_inplace(t.out.z1, g_z1);
  std::vector<double> g_flat;
  dense_backward(t.out.z3.data(), m.dense_w, g_z1, g[4], g[5].values, &g_flat);
  Matrix<double> g_z3(t.out.z3.rows(), t.out.z3.cols(), std::move(g_flat));
  relu_backward_inplace(t.out.z3.data(), g_z3.data());
  Matrix<double> g_z2;
  conv1d_backward(t.out.z2, m.conv2_w, g_z3, g[2], g[3].values, &g_z2);
  relu_backward_inplace(t.out.z2.data(), g_z2.data());
  conv1d_backward(input, m.conv1_w, g_z2, g[0], g[1].values, nullptr);
  return ce.loss;
}

namespace detail {

inline void split_indices(std::size_t n, double validation_split, Rng& rng, std::vector<std::size_t>& train,
                          std::vector<std::size_t>& val) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx);
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * validation_split));
  train.assign(idx.begin(), idx.end() - static_cast<std::ptrdiff_t>(n_val));
  val.assign(idx.end() - static_cast<std::ptrdiff_t>(n_val), idx.end());
}

}  // namespace detail

/// Trains the benign-dataset classifier with Adam and cross-entropy.
///
/// A seeded 20% validation split is held out; each epoch reshuffles the
/// training indices (Fisher-Yates) and steps once per mini-batch. Weights are
/// rounded through float32 at the end so the stored model is exact.
inline ExtractorModel train_extractor(const PaddedBatch& batch, const std::vector<std::size_t>& labels,
                                      std::vector<std::string> class_names, const StandardizationStats& stats,
                                      const ExtractorConfig& cfg = {}) {
  if (labels.size() != batch.size()) throw ShapeError("one label per prompt required");
  if (class_names.size() < 2) throw ValidationError("extractor training needs at least 2 benign datasets");
  for (auto l : labels) {
    if (l >= class_names.size()) throw ValidationError("class label out of range");
  }
  Rng rng(cfg.seed);
  std::vector<std::size_t> train_idx, val_idx;
  detail::split_indices(batch.size(), cfg.validation_split, rng, train_idx, val_idx);
  {
    std::vector<bool> present(class_names.size(), false);
    for (auto i : train_idx) present[labels[i]] = true;
    if (std::count(present.begin(), present.end(), true) < 2) {
      throw ValidationError("extractor training split contains fewer than 2 classes");
    }
  }

  ExtractorModel m = init_extractor(batch.dim, batch.l_max, class_names.size(), cfg, rng);
  m.stats = stats;
  m.class_names = std::move(class_names);
  ExtractorGrads grads(m);
  AdamState adam;
  auto params = m.params();
  std::array<const Tensor*, 8> grad_ptrs;
  for (std::size_t i = 0; i < grads.g.size(); ++i) grad_ptrs[i] = &grads.g[i];

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(train_idx);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < train_idx.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(train_idx.size(), start + cfg.batch_size);
      const double scale = 1.0 / static_cast<double>(end - start);
      grads.zero();
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t i = train_idx[b];
        const double loss = extractor_loss_and_grad(m, batch.prompt_matrix(i), labels[i], &grads, scale);
        if (!std::isfinite(loss)) {
          throw NumericError("non-finite extractor loss at epoch " + std::to_string(epoch + 1) + ", prompt '" +
                             batch.ids[i] + "'");
        }
        epoch_loss += loss;
      }
      adam_step(params, grad_ptrs, adam, cfg.adam);
    }
    m.epoch_loss.push_back(epoch_loss / static_cast<double>(std::max<std::size_t>(1, train_idx.size())));
  }

  for (Tensor* p : params) {
    round_to_float32(p->values);
    require_finite(p->values, "extractor weights");
  }
  std::size_t correct = 0;
  for (auto i : val_idx) {
    auto logits = extractor_logits(m, batch.prompt_matrix(i));
    const auto pred = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    correct += pred == labels[i];
  }
  m.validation_accuracy = val_idx.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(val_idx.size());
  return m;
}

}  // namespace curvalid::nn
