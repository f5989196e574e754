#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "curvalid/corpus.hpp"
#include "curvalid/error.hpp"
#include "curvalid/geometry.hpp"
#include "curvalid/lof.hpp"
#include "curvalid/matrix.hpp"
#include "curvalid/nn/layers.hpp"
#include "curvalid/nn/mlp.hpp"

namespace curvalid {

enum class DetectorKind { mlp, lof };

inline std::string_view to_string(DetectorKind k) { return k == DetectorKind::mlp ? "mlp" : "lof"; }

inline DetectorKind parse_detector_kind(std::string_view s) {
  if (s == "mlp") return DetectorKind::mlp;
  if (s == "lof") return DetectorKind::lof;
  throw ValidationError("unknown detector kind '" + std::string(s) + "'");
}

/// Per-feature z-scoring fitted on training features (population std, floored).
struct FeatureNorm {
  std::vector<double> mean;
  std::vector<double> std;

  static FeatureNorm fit(const Matrix<double>& x) {
    if (x.rows() == 0) throw ValidationError("cannot fit feature normalization on zero rows");
    FeatureNorm n;
    n.mean.assign(x.cols(), 0.0);
    n.std.assign(x.cols(), 0.0);
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t c = 0; c < x.cols(); ++c) n.mean[c] += x(r, c);
    for (auto& m : n.mean) m /= static_cast<double>(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t c = 0; c < x.cols(); ++c) n.std[c] += (x(r, c) - n.mean[c]) * (x(r, c) - n.mean[c]);
    for (auto& s : n.std) s = std::max(std::sqrt(s / static_cast<double>(x.rows())), kStdFloor);
    return n;
  }

  Matrix<double> apply(const Matrix<double>& x) const {
    if (x.cols() != mean.size()) throw ShapeError("feature width mismatch");
    Matrix<double> out = x;
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = (x(r, c) - mean[c]) / std[c];
    return out;
  }
};

/// Neighborhood settings used to compute the PromptLID feature the detector saw.
struct PromptLidConfig {
  std::size_t k = kDefaultPromptLidK;
  LidEstimator estimator = LidEstimator::mom_appendix;
};

struct DetectorModel {
  DetectorKind kind = DetectorKind::mlp;
  std::optional<nn::MlpNetwork> mlp;
  std::optional<LofModel> lof;
  FeatureNorm feature_norm;
  PromptLidConfig promptlid;
  nn::MlpConfig mlp_config;
  nn::MlpTrainReport mlp_report;

  void validate() const {
    if ((kind == DetectorKind::mlp) != mlp.has_value() || (kind == DetectorKind::lof) != lof.has_value()) {
      throw ValidationError("detector payload does not match its kind");
    }
  }
};

struct Verdict {
  Label verdict = Label::benign;
  double p_adversarial = 0.0;
};

inline std::size_t class_index(Label l) {
  if (l == Label::unlabeled) throw ValidationError("unlabeled prompt cannot be used for detector training");
  return l == Label::adversarial ? 1 : 0;
}

/// Binary MLP over z-scored features; benign = class 0, adversarial = class 1.
inline DetectorModel train_detector_mlp(const Matrix<double>& features, const std::vector<Label>& labels,
                                        const nn::MlpConfig& cfg = {}, PromptLidConfig promptlid = {}) {
  if (features.rows() != labels.size()) throw ShapeError("one label per feature row required");
  std::vector<std::size_t> y;
  bool has[2] = {false, false};
  for (auto l : labels) {
    y.push_back(class_index(l));
    has[y.back()] = true;
  }
  if (!has[0] || !has[1]) throw ValidationError("MLP detector needs both benign and adversarial examples");
  DetectorModel d;
  d.kind = DetectorKind::mlp;
  d.promptlid = promptlid;
  d.mlp_config = cfg;
  d.feature_norm = FeatureNorm::fit(features);
  d.mlp = nn::train_mlp(d.feature_norm.apply(features), y, 2, cfg, &d.mlp_report);
  return d;
}

/// One-class detector: z-scoring and LOF are fitted on benign rows only.
inline DetectorModel train_detector_lof(const Matrix<double>& benign_features,
                                        std::size_t n_neighbors = kDefaultLofNeighbors,
                                        double threshold = kDefaultLofThreshold, PromptLidConfig promptlid = {}) {
  DetectorModel d;
  d.kind = DetectorKind::lof;
  d.promptlid = promptlid;
  d.feature_norm = FeatureNorm::fit(benign_features);
  Matrix<double> z = d.feature_norm.apply(benign_features);
  nn::round_to_float32(z.data());  // points are stored as float32
  d.lof = lof_fit(z, n_neighbors, threshold);
  return d;
}

/// Eval-mode verdicts. For LOF, p_adversarial = s / (s + threshold), which
/// exceeds 0.5 exactly when the score s exceeds the threshold.
inline std::vector<Verdict> predict(const DetectorModel& d, const Matrix<double>& features) {
  d.validate();
  std::vector<Verdict> out(features.rows());
  if (features.rows() == 0) return out;
  Matrix<double> z = d.feature_norm.apply(features);
  if (d.kind == DetectorKind::mlp) {
    Matrix<double> logits = nn::mlp_logits(*d.mlp, z);
    for (std::size_t i = 0; i < z.rows(); ++i) {
      auto p = nn::softmax(logits.row(i));
      out[i].p_adversarial = p[1];
      out[i].verdict = p[1] > p[0] ? Label::adversarial : Label::benign;
    }
  } else {
    for (std::size_t i = 0; i < z.rows(); ++i) {
      const double s = lof_score(*d.lof, z.row(i));
      out[i].p_adversarial = s / (s + d.lof->threshold);
      out[i].verdict = s > d.lof->threshold ? Label::adversarial : Label::benign;
    }
  }
  return out;
}

}  // namespace curvalid
