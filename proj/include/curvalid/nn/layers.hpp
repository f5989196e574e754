#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "curvalid/error.hpp"
#include "curvalid/matrix.hpp"
#include "curvalid/random.hpp"

namespace curvalid::nn {

/// Shaped parameter tensor, 64-bit during training.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, double fill = 0.0) : shape(std::move(s)) {
    values.assign(numel(), fill);
  }

  std::size_t numel() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }
  std::size_t size() const noexcept { return values.size(); }
  std::span<double> span() noexcept { return values; }
  std::span<const double> span() const noexcept { return values; }

  void zero() { std::fill(values.begin(), values.end(), 0.0); }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape == b.shape && a.values == b.values; }
};

inline void require_finite(std::span<const double> v, const std::string& what) {
  if (!all_finite(v)) throw NumericError("non-finite values in " + what);
}

/// He-uniform init: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
inline void he_uniform(Tensor& t, std::size_t fan_in, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.values) v = rng.uniform(-limit, limit);
}

/// Rounds every value through float32 so that serialization is lossless.
inline void round_to_float32(std::span<double> v) {
  for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
}

// ---------------------------------------------------------------------------
// Conv1D, kernel 3, stride 1, valid padding. Weights are [C_out][3][C_in].

inline constexpr std::size_t kKernel = 3;

inline Matrix<double> conv1d_forward(const Matrix<double>& input, const Tensor& weights, std::span<const double> bias) {
  const std::size_t len = input.rows();
  const std::size_t c_in = input.cols();
  if (weights.shape.size() != 3 || weights.shape[1] != kKernel || weights.shape[2] != c_in) {
    throw ShapeError("conv1d weights do not match input channels " + std::to_string(c_in));
  }
  const std::size_t c_out = weights.shape[0];
  if (bias.size() != c_out) throw ShapeError("conv1d bias length mismatch");
  if (len < kKernel) throw ShapeError("conv1d needs at least 3 positions, got " + std::to_string(len));
  const std::size_t window = kKernel * c_in;
  Matrix<double> out(len - 2, c_out);
  for (std::size_t i = 0; i + 2 < len; ++i) {
    // Rows i..i+2 are contiguous in row-major storage.
    const double* x = input.data().data() + i * c_in;
    auto dst = out.row(i);
    for (std::size_t f = 0; f < c_out; ++f) {
      const double* w = weights.values.data() + f * window;
      double s = bias[f];
      for (std::size_t j = 0; j < window; ++j) s += x[j] * w[j];
      dst[f] = s;
    }
  }
  return out;
}

/// Accumulates weight/bias gradients; returns the input gradient if requested.
inline void conv1d_backward(const Matrix<double>& input, const Tensor& weights, const Matrix<double>& grad_out,
                            Tensor& grad_weights, std::span<double> grad_bias, Matrix<double>* grad_input) {
  const std::size_t c_in = input.cols();
  const std::size_t c_out = weights.shape[0];
  const std::size_t window = kKernel * c_in;
  if (grad_input) *grad_input = Matrix<double>(input.rows(), c_in, 0.0);
  for (std::size_t i = 0; i < grad_out.rows(); ++i) {
    const double* x = input.data().data() + i * c_in;
    double* gx = grad_input ? grad_input->data().data() + i * c_in : nullptr;
    auto g = grad_out.row(i);
    for (std::size_t f = 0; f < c_out; ++f) {
      const double go = g[f];
      if (go == 0.0) continue;
      grad_bias[f] += go;
      double* gw = grad_weights.values.data() + f * window;
      for (std::size_t j = 0; j < window; ++j) gw[j] += go * x[j];
      if (gx) {
        const double* w = weights.values.data() + f * window;
        for (std::size_t j = 0; j < window; ++j) gx[j] += go * w[j];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Dense. Weights are [out][in].

inline std::vector<double> dense_forward(std::span<const double> input, const Tensor& weights,
                                         std::span<const double> bias) {
  if (weights.shape.size() != 2 || weights.shape[1] != input.size() || weights.shape[0] != bias.size()) {
    throw ShapeError("dense shape mismatch: input " + std::to_string(input.size()));
  }
  const std::size_t m = weights.shape[0];
  const std::size_t n = weights.shape[1];
  std::vector<double> out(m);
  for (std::size_t r = 0; r < m; ++r) {
    const double* w = weights.values.data() + r * n;
    double s = bias[r];
    for (std::size_t c = 0; c < n; ++c) s += w[c] * input[c];
    out[r] = s;
  }
  return out;
}

inline void dense_backward(std::span<const double> input, const Tensor& weights, std::span<const double> grad_out,
                           Tensor& grad_weights, std::span<double> grad_bias, std::vector<double>* grad_input) {
  const std::size_t m = weights.shape[0];
  const std::size_t n = weights.shape[1];
  if (grad_input) grad_input->assign(n, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    const double go = grad_out[r];
    if (go == 0.0) continue;
    grad_bias[r] += go;
    double* gw = grad_weights.values.data() + r * n;
    for (std::size_t c = 0; c < n; ++c) gw[c] += go * input[c];
    if (grad_input) {
      const double* w = weights.values.data() + r * n;
      for (std::size_t c = 0; c < n; ++c) (*grad_input)[c] += go * w[c];
    }
  }
}

/// Row-wise dense on a batch: out[b] = W x[b] + bias.
inline Matrix<double> dense_forward(const Matrix<double>& input, const Tensor& weights, std::span<const double> bias) {
  Matrix<double> out(input.rows(), weights.shape.at(0));
  for (std::size_t b = 0; b < input.rows(); ++b) {
    auto y = dense_forward(input.row(b), weights, bias);
    std::copy(y.begin(), y.end(), out.row(b).begin());
  }
  return out;
}

inline Matrix<double> dense_backward(const Matrix<double>& input, const Tensor& weights,
                                     const Matrix<double>& grad_out, Tensor& grad_weights,
                                     std::span<double> grad_bias) {
  Matrix<double> gin(input.rows(), input.cols());
  std::vector<double> g;
  for (std::size_t b = 0; b < input.rows(); ++b) {
    dense_backward(input.row(b), weights, grad_out.row(b), grad_weights, grad_bias, &g);
    std::copy(g.begin(), g.end(), gin.row(b).begin());
  }
  return gin;
}

// ---------------------------------------------------------------------------
// ReLU. The subgradient at 0 is 0.

inline void relu_inplace(std::span<double> v) {
  for (auto& x : v) x = x > 0.0 ? x : 0.0;
}

inline void relu_backward_inplace(std::span<const double> activated, std::span<double> grad) {
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!(activated[i] > 0.0)) grad[i] = 0.0;
  }
}

// ---------------------------------------------------------------------------
// Softmax + cross-entropy

inline std::vector<double> softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (auto& x : p) x /= z;
  return p;
}

struct CrossEntropy {
  double loss = 0.0;
  std::vector<double> grad;  // softmax - onehot
};

inline CrossEntropy softmax_cross_entropy(std::span<const double> logits, std::size_t label) {
  if (logits.size() < 2) throw ShapeError("softmax cross-entropy needs at least 2 classes");
  if (label >= logits.size()) {
    throw ValidationError("label " + std::to_string(label) + " out of range for " + std::to_string(logits.size()) +
                          " classes");
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  const double log_z = mx + std::log(z);
  CrossEntropy ce;
  ce.loss = log_z - logits[label];
  ce.grad.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) ce.grad[i] = std::exp(logits[i] - log_z);
  ce.grad[label] -= 1.0;
  return ce;
}

// ---------------------------------------------------------------------------
// Batch normalization over the batch axis (rows).

enum class Mode { train, eval };

inline constexpr double kBatchNormEps = 1e-3;
inline constexpr double kBatchNormMomentum = 0.99;

struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;

  explicit BatchNormState(std::size_t features = 0) : running_mean(features, 0.0), running_var(features, 1.0) {}
};

struct BatchNormCache {
  Matrix<double> x_hat;
  std::vector<double> inv_std;
};

/// Train mode uses biased batch statistics and updates the running stats as
/// running = momentum * running + (1 - momentum) * batch.
inline Matrix<double> batchnorm(const Matrix<double>& x, std::span<const double> gamma, std::span<const double> beta,
                                Mode mode, BatchNormState& state, BatchNormCache* cache = nullptr,
                                double eps = kBatchNormEps, double momentum = kBatchNormMomentum) {
  const std::size_t n = x.rows();
  const std::size_t f = x.cols();
  if (gamma.size() != f || beta.size() != f || state.running_mean.size() != f) {
    throw ShapeError("batchnorm parameter length mismatch");
  }
  Matrix<double> y(n, f);
  if (mode == Mode::eval) {
    for (std::size_t j = 0; j < f; ++j) {
      const double inv = 1.0 / std::sqrt(state.running_var[j] + eps);
      for (std::size_t b = 0; b < n; ++b) y(b, j) = gamma[j] * (x(b, j) - state.running_mean[j]) * inv + beta[j];
    }
    return y;
  }
  if (n < 2) throw ShapeError("batchnorm in train mode needs a batch of at least 2");
  if (cache) {
    cache->x_hat = Matrix<double>(n, f);
    cache->inv_std.assign(f, 0.0);
  }
  for (std::size_t j = 0; j < f; ++j) {
    double mean = 0.0;
    for (std::size_t b = 0; b < n; ++b) mean += x(b, j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t b = 0; b < n; ++b) var += (x(b, j) - mean) * (x(b, j) - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t b = 0; b < n; ++b) {
      const double xh = (x(b, j) - mean) * inv;
      if (cache) cache->x_hat(b, j) = xh;
      y(b, j) = gamma[j] * xh + beta[j];
    }
    if (cache) cache->inv_std[j] = inv;
    state.running_mean[j] = momentum * state.running_mean[j] + (1.0 - momentum) * mean;
    state.running_var[j] = momentum * state.running_var[j] + (1.0 - momentum) * var;
  }
  return y;
}

/// Train-mode backward. Accumulates gamma/beta gradients and returns dL/dx.
inline Matrix<double> batchnorm_backward(const BatchNormCache& cache, std::span<const double> gamma,
                                         const Matrix<double>& grad_out, std::span<double> grad_gamma,
                                         std::span<double> grad_beta) {
  const std::size_t n = grad_out.rows();
  const std::size_t f = grad_out.cols();
  Matrix<double> gx(n, f);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t j = 0; j < f; ++j) {
    double sum_dy = 0.0;
    double sum_dy_xh = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      sum_dy += grad_out(b, j);
      sum_dy_xh += grad_out(b, j) * cache.x_hat(b, j);
    }
    grad_beta[j] += sum_dy;
    grad_gamma[j] += sum_dy_xh;
    const double scale = gamma[j] * cache.inv_std[j] * inv_n;
    for (std::size_t b = 0; b < n; ++b) {
      gx(b, j) = scale * (static_cast<double>(n) * grad_out(b, j) - sum_dy - cache.x_hat(b, j) * sum_dy_xh);
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Inverted dropout

/// Mask entries are 0 (dropped) or 1/(1-rate) (kept).
inline Matrix<double> make_dropout_mask(std::size_t rows, std::size_t cols, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ValidationError("dropout rate must be in [0, 1)");
  Matrix<double> mask(rows, cols, 1.0);
  if (rate == 0.0) return mask;
  const double keep_scale = 1.0 / (1.0 - rate);
  for (auto& m : mask.data()) m = rng.uniform() < rate ? 0.0 : keep_scale;
  return mask;
}

inline Matrix<double> dropout(const Matrix<double>& x, double rate, Mode mode, Rng& rng,
                              Matrix<double>* mask_out = nullptr) {
  if (mode == Mode::eval || rate == 0.0) {
    if (mask_out) *mask_out = Matrix<double>(x.rows(), x.cols(), 1.0);
    return x;
  }
  Matrix<double> mask = make_dropout_mask(x.rows(), x.cols(), rate, rng);
  Matrix<double> y = x;
  for (std::size_t i = 0; i < y.data().size(); ++i) y.data()[i] *= mask.data()[i];
  if (mask_out) *mask_out = std::move(mask);
  return y;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-7;
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t t = 0;
};

/// Bias-corrected Adam over a list of parameter tensors and matching gradients.
inline void adam_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, AdamState& state,
                      const AdamConfig& cfg = {}) {
  if (params.size() != grads.size()) throw ShapeError("adam: params/grads count mismatch");
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->size(), 0.0);
      state.v.emplace_back(p->size(), 0.0);
    }
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& values = params[p]->values;
    const auto& g = grads[p]->values;
    if (g.size() != values.size()) throw ShapeError("adam: gradient size mismatch");
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (std::size_t i = 0; i < values.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      values[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
};

/// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps gradients
/// that are numerically zero from dominating through roundoff.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares every entry of `analytic[t]` with central differences of `loss`
/// taken by perturbing `params[t]` in place.
inline GradCheckResult grad_check(std::span<std::span<double> const> params,
                                  std::span<std::span<const double> const> analytic,
                                  const std::function<double()>& loss, double eps = 1e-5) {
  if (params.size() != analytic.size()) throw ShapeError("grad_check: params/analytic count mismatch");
  GradCheckResult r;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto p = params[t];
    if (analytic[t].size() != p.size()) throw ShapeError("grad_check: gradient length mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double saved = p[i];
      p[i] = saved + eps;
      const double up = loss();
      p[i] = saved - eps;
      const double down = loss();
      p[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = relative_error(analytic[t][i], numeric);
      if (err > r.max_rel_error) {
        r.max_rel_error = err;
        r.worst_tensor = t;
        r.worst_index = i;
      }
      ++r.checked;
    }
  }
  return r;
}

}  // namespace curvalid::nn
