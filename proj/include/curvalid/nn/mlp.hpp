#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "curvalid/error.hpp"
#include "curvalid/matrix.hpp"
#include "curvalid/nn/layers.hpp"
#include "curvalid/random.hpp"

namespace curvalid::nn {

struct MlpConfig {
  std::size_t hidden1 = 256;
  std::size_t hidden2 = 128;
  double dropout = 0.5;
  std::size_t max_epochs = 150;
  std::size_t batch_size = 32;
  std::size_t patience = 10;
  double validation_split = 0.2;
  AdamConfig adam;
  std::uint64_t seed = 42;
};

/// dense -> ReLU -> BN -> dropout, twice, then a 2-way softmax head.
struct MlpNetwork {
  Tensor w1, b1, gamma1, beta1;
  Tensor w2, b2, gamma2, beta2;
  Tensor w3, b3;
  BatchNormState bn1, bn2;
  double dropout = 0.5;

  std::size_t inputs() const { return w1.shape.at(1); }
  std::size_t outputs() const { return w3.shape.at(0); }

  std::array<Tensor*, 10> params() { return {&w1, &b1, &gamma1, &beta1, &w2, &b2, &gamma2, &beta2, &w3, &b3}; }
  std::array<const Tensor*, 10> params() const {
    return {&w1, &b1, &gamma1, &beta1, &w2, &b2, &gamma2, &beta2, &w3, &b3};
  }
};

inline MlpNetwork init_mlp(std::size_t inputs, std::size_t outputs, const MlpConfig& cfg, Rng& rng) {
  MlpNetwork n;
  n.dropout = cfg.dropout;
  n.w1 = Tensor({cfg.hidden1, inputs});
  n.b1 = Tensor({cfg.hidden1});
  n.gamma1 = Tensor({cfg.hidden1}, 1.0);
  n.beta1 = Tensor({cfg.hidden1});
  n.w2 = Tensor({cfg.hidden2, cfg.hidden1});
  n.b2 = Tensor({cfg.hidden2});
  n.gamma2 = Tensor({cfg.hidden2}, 1.0);
  n.beta2 = Tensor({cfg.hidden2});
  n.w3 = Tensor({outputs, cfg.hidden2});
  n.b3 = Tensor({outputs});
  he_uniform(n.w1, inputs, rng);
  he_uniform(n.w2, cfg.hidden1, rng);
  he_uniform(n.w3, cfg.hidden2, rng);
  n.bn1 = BatchNormState(cfg.hidden1);
  n.bn2 = BatchNormState(cfg.hidden2);
  return n;
}

/// Eval-mode logits: running BN statistics, dropout disabled.
inline Matrix<double> mlp_logits(const MlpNetwork& n, const Matrix<double>& x) {
  BatchNormState bn1 = n.bn1;
  BatchNormState bn2 = n.bn2;
  Matrix<double> h = dense_forward(x, n.w1, n.b1.values);
  relu_inplace(h.data());
  h = batchnorm(h, n.gamma1.values, n.beta1.values, Mode::eval, bn1);
  h = dense_forward(h, n.w2, n.b2.values);
  relu_inplace(h.data());
  h = batchnorm(h, n.gamma2.values, n.beta2.values, Mode::eval, bn2);
  return dense_forward(h, n.w3, n.b3.values);
}

struct MlpTrace {
  Matrix<double> x, a1, n1, d1, a2, n2, d2, logits;
  BatchNormCache bn1, bn2;
  Matrix<double> mask1, mask2;
};

/// Train-mode forward with explicit dropout masks (updates BN running stats).
inline MlpTrace mlp_forward_train(MlpNetwork& n, const Matrix<double>& x, const Matrix<double>& mask1,
                                  const Matrix<double>& mask2) {
  MlpTrace t;
  t.x = x;
  t.mask1 = mask1;
  t.mask2 = mask2;
  t.a1 = dense_forward(x, n.w1, n.b1.values);
  relu_inplace(t.a1.data());
  t.n1 = batchnorm(t.a1, n.gamma1.values, n.beta1.values, Mode::train, n.bn1, &t.bn1);
  t.d1 = t.n1;
  for (std::size_t i = 0; i < t.d1.data().size(); ++i) t.d1.data()[i] *= mask1.data()[i];
  t.a2 = dense_forward(t.d1, n.w2, n.b2.values);
  relu_inplace(t.a2.data());
  t.n2 = batchnorm(t.a2, n.gamma2.values, n.beta2.values, Mode::train, n.bn2, &t.bn2);
  t.d2 = t.n2;
  for (std::size_t i = 0; i < t.d2.data().size(); ++i) t.d2.data()[i] *= mask2.data()[i];
  t.logits = dense_forward(t.d2, n.w3, n.b3.values);
  return t;
}

using MlpGrads = std::array<Tensor, 10>;

inline MlpGrads make_mlp_grads(MlpNetwork& n) {
  MlpGrads g;
  auto p = n.params();
  for (std::size_t i = 0; i < p.size(); ++i) g[i] = Tensor(p[i]->shape);
  return g;
}

inline void mlp_backward(const MlpNetwork& n, const MlpTrace& t, const Matrix<double>& grad_logits, MlpGrads& g) {
  Matrix<double> gd2 = dense_backward(t.d2, n.w3, grad_logits, g[8], g[9].values);
  for (std::size_t i = 0; i < gd2.data().size(); ++i) gd2.data()[i] *= t.mask2.data()[i];
  Matrix<double> ga2 = batchnorm_backward(t.bn2, n.gamma2.values, gd2, g[6].values, g[7].values);
  relu_backward_inplace(t.a2.data(), ga2.data());
  Matrix<double> gd1 = dense_backward(t.d1, n.w2, ga2, g[4], g[5].values);
  for (std::size_t i = 0; i < gd1.data().size(); ++i) gd1.data()[i] *= t.mask1.data()[i];
  Matrix<double> ga1 = batchnorm_backward(t.bn1, n.gamma1.values, gd1, g[2].values, g[3].values);
  relu_backward_inplace(t.a1.data(), ga1.data());
  dense_backward(t.x, n.w1, ga1, g[0], g[1].values);
}

/// Mean cross-entropy over rows; fills the per-logit gradient of that mean.
inline double mean_cross_entropy(const Matrix<double>& logits, std::span<const std::size_t> labels,
                                 Matrix<double>* grad = nullptr) {
  if (grad) *grad = Matrix<double>(logits.rows(), logits.cols());
  double total = 0.0;
  const double inv = 1.0 / static_cast<double>(logits.rows());
  for (std::size_t b = 0; b < logits.rows(); ++b) {
    auto ce = softmax_cross_entropy(logits.row(b), labels[b]);
    total += ce.loss;
    if (grad) {
      for (std::size_t c = 0; c < ce.grad.size(); ++c) (*grad)(b, c) = ce.grad[c] * inv;
    }
  }
  return total * inv;
}

struct MlpTrainReport {
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<double> train_loss;
  std::vector<double> val_loss;
};

namespace detail {
inline Matrix<double> gather_rows(const Matrix<double>& x, std::span<const std::size_t> idx) {
  Matrix<double> out(idx.size(), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy(x.row(idx[i]).begin(), x.row(idx[i]).end(), out.row(i).begin());
  return out;
}
}  // namespace detail

/// Trains with Adam; early stopping on validation loss restores the best
/// weights, BN running statistics included. A trailing mini-batch of one
/// sample is skipped for that epoch (train-mode BN needs two rows).
inline MlpNetwork train_mlp(const Matrix<double>& x, const std::vector<std::size_t>& labels, std::size_t classes,
                            const MlpConfig& cfg, MlpTrainReport* report = nullptr) {
  if (x.rows() != labels.size()) throw ShapeError("one label per row required");
  Rng rng(cfg.seed);
  std::vector<std::size_t> idx(x.rows());
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx);
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(x.rows()) * cfg.validation_split));
  std::vector<std::size_t> train_idx(idx.begin(), idx.end() - static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> val_idx(idx.end() - static_cast<std::ptrdiff_t>(n_val), idx.end());
  if (train_idx.size() < 2) throw ValidationError("MLP training needs at least 2 training rows");

  MlpNetwork net = init_mlp(x.cols(), classes, cfg, rng);
  MlpGrads grads = make_mlp_grads(net);
  AdamState adam;
  auto params = net.params();
  std::array<const Tensor*, 10> grad_ptrs;
  for (std::size_t i = 0; i < grads.size(); ++i) grad_ptrs[i] = &grads[i];

  const Matrix<double> x_val = detail::gather_rows(x, val_idx);
  std::vector<std::size_t> y_val;
  for (auto i : val_idx) y_val.push_back(labels[i]);

  MlpTrainReport rep;
  MlpNetwork best = net;
  std::size_t since_best = 0;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    rng.shuffle(train_idx);
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < train_idx.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(train_idx.size(), start + cfg.batch_size);
      if (end - start < 2) break;
      std::span<const std::size_t> rows(train_idx.data() + start, end - start);
      Matrix<double> xb = detail::gather_rows(x, rows);
      std::vector<std::size_t> yb;
      for (auto i : rows) yb.push_back(labels[i]);
      Matrix<double> m1 = make_dropout_mask(xb.rows(), cfg.hidden1, cfg.dropout, rng);
      Matrix<double> m2 = make_dropout_mask(xb.rows(), cfg.hidden2, cfg.dropout, rng);
      MlpTrace t = mlp_forward_train(net, xb, m1, m2);
      Matrix<double> g_logits;
      const double loss = mean_cross_entropy(t.logits, yb, &g_logits);
      if (!std::isfinite(loss)) throw NumericError("non-finite MLP loss at epoch " + std::to_string(epoch + 1));
      for (auto& g : grads) g.zero();
      mlp_backward(net, t, g_logits, grads);
      adam_step(params, grad_ptrs, adam, cfg.adam);
      epoch_loss += loss * static_cast<double>(rows.size());
      seen += rows.size();
    }
    rep.train_loss.push_back(epoch_loss / static_cast<double>(std::max<std::size_t>(1, seen)));
    const double val_loss =
        val_idx.empty() ? rep.train_loss.back() : mean_cross_entropy(mlp_logits(net, x_val), y_val);
    rep.val_loss.push_back(val_loss);
    rep.epochs_run = epoch + 1;
    if (val_loss < rep.best_val_loss) {
      rep.best_val_loss = val_loss;
      rep.best_epoch = epoch + 1;
      best = net;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  for (Tensor* p : best.params()) round_to_float32(p->values);
  round_to_float32(best.bn1.running_mean);
  round_to_float32(best.bn1.running_var);
  round_to_float32(best.bn2.running_mean);
  round_to_float32(best.bn2.running_var);
  if (report) *report = std::move(rep);
  return best;
}

}  // namespace curvalid::nn
