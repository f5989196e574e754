#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "curvalid/nn/extractor.hpp"
#include "curvalid/nn/layers.hpp"
#include "curvalid/nn/mlp.hpp"
#include "curvalid/random.hpp"

namespace curvalid::nn {

struct NamedGradCheck {
  std::string name;
  GradCheckResult result;
};

namespace detail {

inline void fill_normal(std::span<double> v, Rng& rng, double scale = 1.0) {
  for (auto& x : v) x = rng.normal() * scale;
}

/// Linear probe loss sum(r * y) so that dL/dy = r.
inline double probe(std::span<const double> y, std::span<const double> r) { return dot(y, r); }

}  // namespace detail

inline NamedGradCheck gradcheck_conv1d(Rng& rng) {
  Matrix<double> x(9, 4);
  Tensor w({5, kKernel, 4}), b({5});
  detail::fill_normal(x.data(), rng);
  detail::fill_normal(w.values, rng);
  detail::fill_normal(b.values, rng);
  std::vector<double> r(7 * 5);
  detail::fill_normal(r, rng);
  auto loss = [&] { return detail::probe(conv1d_forward(x, w, b.values).data(), r); };
  Tensor gw(w.shape), gb(b.shape);
  Matrix<double> gx;
  conv1d_backward(x, w, Matrix<double>(7, 5, r), gw, gb.values, &gx);
  std::vector<std::span<double>> params{w.values, b.values, x.data()};
  std::vector<std::span<const double>> analytic{gw.values, gb.values, gx.data()};
  return {"conv1d", grad_check(params, analytic, loss)};
}

inline NamedGradCheck gradcheck_dense(Rng& rng) {
  std::vector<double> x(6);
  Tensor w({4, 6}), b({4});
  detail::fill_normal(x, rng);
  detail::fill_normal(w.values, rng);
  detail::fill_normal(b.values, rng);
  std::vector<double> r(4);
  detail::fill_normal(r, rng);
  auto loss = [&] { return detail::probe(dense_forward(x, w, b.values), r); };
  Tensor gw(w.shape), gb(b.shape);
  std::vector<double> gx;
  dense_backward(x, w, r, gw, gb.values, &gx);
  std::vector<std::span<double>> params{w.values, b.values, x};
  std::vector<std::span<const double>> analytic{gw.values, gb.values, gx};
  return {"dense", grad_check(params, analytic, loss)};
}

inline NamedGradCheck gradcheck_softmax_ce(Rng& rng) {
  std::vector<double> logits(5);
  detail::fill_normal(logits, rng, 2.0);
  const std::size_t label = 3;
  auto loss = [&] { return softmax_cross_entropy(logits, label).loss; };
  auto ce = softmax_cross_entropy(logits, label);
  std::vector<std::span<double>> params{logits};
  std::vector<std::span<const double>> analytic{ce.grad};
  return {"softmax_cross_entropy", grad_check(params, analytic, loss)};
}

inline NamedGradCheck gradcheck_batchnorm(Rng& rng) {
  Matrix<double> x(6, 3);
  detail::fill_normal(x.data(), rng);
  Tensor gamma({3}), beta({3});
  detail::fill_normal(gamma.values, rng);
  detail::fill_normal(beta.values, rng);
  std::vector<double> r(6 * 3);
  detail::fill_normal(r, rng);
  BatchNormState state(3);
  auto loss = [&] {
    return detail::probe(batchnorm(x, gamma.values, beta.values, Mode::train, state).data(), r);
  };
  BatchNormCache cache;
  batchnorm(x, gamma.values, beta.values, Mode::train, state, &cache);
  Tensor gg({3}), gbeta({3});
  Matrix<double> gx = batchnorm_backward(cache, gamma.values, Matrix<double>(6, 3, r), gg.values, gbeta.values);
  std::vector<std::span<double>> params{gamma.values, beta.values, x.data()};
  std::vector<std::span<const double>> analytic{gg.values, gbeta.values, gx.data()};
  return {"batchnorm", grad_check(params, analytic, loss)};
}

inline NamedGradCheck gradcheck_dropout(Rng& rng) {
  Matrix<double> x(4, 5);
  detail::fill_normal(x.data(), rng);
  Matrix<double> mask = make_dropout_mask(4, 5, 0.5, rng);
  std::vector<double> r(20);
  detail::fill_normal(r, rng);
  auto loss = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) s += x.data()[i] * mask.data()[i] * r[i];
    return s;
  };
  std::vector<double> gx(20);
  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = mask.data()[i] * r[i];
  std::vector<std::span<double>> params{x.data()};
  std::vector<std::span<const double>> analytic{gx};
  return {"dropout", grad_check(params, analytic, loss)};
}

/// Full extractor at its default widths on a short (L=7, D=3, K=3) input.
inline NamedGradCheck gradcheck_extractor(Rng& rng) {
  ExtractorConfig cfg;
  ExtractorModel m = init_extractor(3, 7, 3, cfg, rng);
  for (Tensor* p : {&m.conv1_b, &m.conv2_b, &m.dense_b, &m.head_b}) detail::fill_normal(p->values, rng, 0.1);
  Matrix<double> x(7, 3);
  detail::fill_normal(x.data(), rng);
  const std::size_t label = 1;
  ExtractorGrads grads(m);
  extractor_loss_and_grad(m, x, label, &grads);
  auto loss = [&] { return extractor_loss_and_grad(m, x, label, nullptr); };
  std::vector<std::span<double>> params;
  std::vector<std::span<const double>> analytic;
  auto p = m.params();
  for (std::size_t i = 0; i < p.size(); ++i) {
    params.emplace_back(p[i]->values);
    analytic.emplace_back(grads.g[i].values);
  }
  return {"extractor", grad_check(params, analytic, loss)};
}

/// Full detector MLP in train mode (batch statistics, fixed dropout masks).
inline NamedGradCheck gradcheck_mlp(Rng& rng) {
  MlpConfig cfg;
  MlpNetwork net = init_mlp(3, 2, cfg, rng);
  for (Tensor* p : {&net.b1, &net.b2, &net.b3, &net.beta1, &net.beta2}) detail::fill_normal(p->values, rng, 0.1);
  Matrix<double> x(8, 3);
  detail::fill_normal(x.data(), rng);
  std::vector<std::size_t> y{0, 1, 1, 0, 1, 0, 0, 1};
  Matrix<double> m1 = make_dropout_mask(8, cfg.hidden1, cfg.dropout, rng);
  Matrix<double> m2 = make_dropout_mask(8, cfg.hidden2, cfg.dropout, rng);
  MlpTrace t = mlp_forward_train(net, x, m1, m2);
  Matrix<double> g_logits;
  mean_cross_entropy(t.logits, y, &g_logits);
  MlpGrads grads = make_mlp_grads(net);
  mlp_backward(net, t, g_logits, grads);
  auto loss = [&] { return mean_cross_entropy(mlp_forward_train(net, x, m1, m2).logits, y); };
  std::vector<std::span<double>> params;
  std::vector<std::span<const double>> analytic;
  auto p = net.params();
  for (std::size_t i = 0; i < p.size(); ++i) {
    params.emplace_back(p[i]->values);
    analytic.emplace_back(grads[i].values);
  }
  return {"detector_mlp", grad_check(params, analytic, loss)};
}

inline std::vector<NamedGradCheck> run_all_gradchecks(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<NamedGradCheck> out;
  out.push_back(gradcheck_conv1d(rng));
  out.push_back(gradcheck_dense(rng));
  out.push_back(gradcheck_softmax_ce(rng));
  out.push_back(gradcheck_batchnorm(rng));
  out.push_back(gradcheck_dropout(rng));
  out.push_back(gradcheck_extractor(rng));
  out.push_back(gradcheck_mlp(rng));
  return out;
}

}  // namespace curvalid::nn
