#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "curvalid/detector.hpp"
#include "curvalid/error.hpp"
#include "curvalid/nn/extractor.hpp"
#include "curvalid/nn/layers.hpp"

namespace curvalid {

inline constexpr std::string_view kModelFormat = "curvalid-model";
inline constexpr int kModelVersion = 1;

namespace base64 {

inline constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline std::string encode(std::string_view bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (static_cast<unsigned char>(bytes[i]) << 16) |
                            (static_cast<unsigned char>(bytes[i + 1]) << 8) | static_cast<unsigned char>(bytes[i + 2]);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  if (const std::size_t rest = bytes.size() - i; rest > 0) {
    std::uint32_t v = static_cast<unsigned char>(bytes[i]) << 16;
    if (rest == 2) v |= static_cast<unsigned char>(bytes[i + 1]) << 8;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += rest == 2 ? kAlphabet[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

inline std::string decode(std::string_view text) {
  static const auto table = [] {
    std::array<int, 256> t{};
    t.fill(-1);
    for (int i = 0; i < 64; ++i) t[static_cast<unsigned char>(kAlphabet[i])] = i;
    return t;
  }();
  if (text.size() % 4 != 0) throw FormatError(text.size(), "base64 length is not a multiple of 4");
  std::string out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    std::uint32_t v = 0;
    int pad = 0;
    for (std::size_t j = 0; j < 4; ++j) {
      const char c = text[i + j];
      if (c == '=' && i + 4 == text.size() && j >= 2) {
        ++pad;
        v <<= 6;
        continue;
      }
      const int d = table[static_cast<unsigned char>(c)];
      if (d < 0 || pad > 0) throw FormatError(i + j, "invalid base64 character");
      v = (v << 6) | static_cast<std::uint32_t>(d);
    }
    out += static_cast<char>((v >> 16) & 0xFF);
    if (pad < 2) out += static_cast<char>((v >> 8) & 0xFF);
    if (pad < 1) out += static_cast<char>(v & 0xFF);
  }
  return out;
}

}  // namespace base64

namespace model_io {

inline nlohmann::json encode_values(const std::vector<std::size_t>& shape, std::span<const double> values) {
  std::string bytes;
  bytes.reserve(values.size() * 4);
  for (double v : values) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
  }
  return {{"shape", shape}, {"dtype", "float32-le"}, {"data", base64::encode(bytes)}};
}

inline nlohmann::json encode_tensor(const nn::Tensor& t) { return encode_values(t.shape, t.values); }

inline nn::Tensor decode_tensor(const nlohmann::json& j, const std::string& name) {
  nn::Tensor t;
  try {
    t.shape = j.at("shape").get<std::vector<std::size_t>>();
    if (j.at("dtype").get<std::string>() != "float32-le") throw Error("tensor '" + name + "' has unsupported dtype");
    const std::string bytes = base64::decode(j.at("data").get<std::string>());
    if (bytes.size() != t.numel() * 4) throw Error("tensor '" + name + "' data length does not match its shape");
    t.values.resize(t.numel());
    for (std::size_t i = 0; i < t.values.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
      t.values[i] = static_cast<double>(std::bit_cast<float>(bits));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error("tensor '" + name + "': " + e.what());
  }
  return t;
}

inline nlohmann::json envelope(std::string_view kind) {
  return {{"format", kModelFormat}, {"version", kModelVersion}, {"kind", kind}};
}

inline void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(1) << '\n';
}

inline nlohmann::json read_json(const std::filesystem::path& path, std::string_view expected_kind = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open model file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("model file " + path.string() + " is not valid JSON: " + e.what());
  }
  if (j.value("format", "") != kModelFormat) throw Error(path.string() + " is not a curvalid model file");
  if (j.value("version", 0) != kModelVersion) throw Error(path.string() + " has an unsupported version");
  if (!expected_kind.empty() && j.value("kind", "") != expected_kind) {
    throw Error(path.string() + " has kind '" + j.value("kind", "") + "', expected '" + std::string(expected_kind) + "'");
  }
  return j;
}

inline nlohmann::json promptlid_json(const PromptLidConfig& c) {
  return {{"k", c.k}, {"estimator", std::string(to_string(c.estimator))}};
}

inline PromptLidConfig promptlid_from(const nlohmann::json& j) {
  return {j.at("k").get<std::size_t>(), parse_estimator(j.at("estimator").get<std::string>())};
}

inline nlohmann::json adam_json(const nn::AdamConfig& a) {
  return {{"lr", a.lr}, {"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}};
}

inline nn::AdamConfig adam_from(const nlohmann::json& j) {
  return {j.at("lr").get<double>(), j.at("beta1").get<double>(), j.at("beta2").get<double>(),
          j.at("eps").get<double>()};
}

}  // namespace model_io

// ---------------------------------------------------------------------------

inline constexpr const char* kExtractorTensorNames[8] = {"conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias",
                                                         "dense.weight", "dense.bias", "head.weight",  "head.bias"};

inline nlohmann::json extractor_to_json(const nn::ExtractorModel& m) {
  using namespace model_io;
  auto j = envelope("extractor");
  const auto& c = m.config;
  j["config"] = {{"l_max", m.l_max()},
                 {"dim", m.dim()},
                 {"classes", m.classes()},
                 {"class_names", m.class_names},
                 {"standardization", {{"mean", m.stats.mean}, {"std", m.stats.std}}},
                 {"epochs", c.epochs},
                 {"batch_size", c.batch_size},
                 {"validation_split", c.validation_split},
                 {"adam", adam_json(c.adam)},
                 {"seed", c.seed},
                 {"conv1_filters", c.conv1_filters},
                 {"conv2_filters", c.conv2_filters},
                 {"dense_units", c.dense_units},
                 {"z1_activation", "post-relu"}};
  auto params = m.params();
  for (std::size_t i = 0; i < params.size(); ++i) j["tensors"][kExtractorTensorNames[i]] = encode_tensor(*params[i]);
  j["metadata"] = {{"validation_accuracy", m.validation_accuracy}, {"epoch_loss", m.epoch_loss}};
  return j;
}

inline nn::ExtractorModel extractor_from_json(const nlohmann::json& j) {
  using namespace model_io;
  nn::ExtractorModel m;
  try {
    const auto& c = j.at("config");
    m.config.epochs = c.at("epochs").get<std::size_t>();
    m.config.batch_size = c.at("batch_size").get<std::size_t>();
    m.config.validation_split = c.at("validation_split").get<double>();
    m.config.adam = adam_from(c.at("adam"));
    m.config.seed = c.at("seed").get<std::uint64_t>();
    m.config.conv1_filters = c.at("conv1_filters").get<std::size_t>();
    m.config.conv2_filters = c.at("conv2_filters").get<std::size_t>();
    m.config.dense_units = c.at("dense_units").get<std::size_t>();
    m.class_names = c.at("class_names").get<std::vector<std::string>>();
    m.stats.l_max = c.at("l_max").get<std::size_t>();
    m.stats.mean = c.at("standardization").at("mean").get<std::vector<double>>();
    m.stats.std = c.at("standardization").at("std").get<std::vector<double>>();
    auto params = m.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      *params[i] = decode_tensor(j.at("tensors").at(kExtractorTensorNames[i]), kExtractorTensorNames[i]);
    }
    m.validation_accuracy = j.at("metadata").at("validation_accuracy").get<double>();
    m.epoch_loss = j.at("metadata").at("epoch_loss").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed extractor model: ") + e.what());
  }
  const std::size_t d = m.stats.mean.size();
  const std::size_t l = m.stats.l_max;
  const auto& cfg = m.config;
  if (l < kMinLMax || m.conv1_w.shape != std::vector<std::size_t>{cfg.conv1_filters, nn::kKernel, d} ||
      m.conv2_w.shape != std::vector<std::size_t>{cfg.conv2_filters, nn::kKernel, cfg.conv1_filters} ||
      m.dense_w.shape != std::vector<std::size_t>{cfg.dense_units, cfg.conv2_filters * (l - 4)} ||
      m.head_w.shape.size() != 2 || m.head_w.shape[1] != cfg.dense_units || m.head_w.shape[0] < 2 ||
      m.class_names.size() != m.head_w.shape[0] || m.stats.std.size() != d) {
    throw ShapeError("extractor model tensors are inconsistent with its config");
  }
  return m;
}

inline constexpr const char* kMlpTensorNames[10] = {"dense1.weight", "dense1.bias", "bn1.gamma",   "bn1.beta",
                                                    "dense2.weight", "dense2.bias", "bn2.gamma",   "bn2.beta",
                                                    "out.weight",    "out.bias"};

inline nlohmann::json detector_to_json(const DetectorModel& d) {
  using namespace model_io;
  d.validate();
  auto j = envelope(to_string(d.kind));
  j["config"] = {{"promptlid", promptlid_json(d.promptlid)},
                 {"feature_norm", {{"mean", d.feature_norm.mean}, {"std", d.feature_norm.std}}},
                 {"features", {"prompt_lid", "textcurv1", "textcurv2"}}};
  if (d.kind == DetectorKind::mlp) {
    const auto& c = d.mlp_config;
    j["config"]["mlp"] = {{"hidden1", c.hidden1},
                          {"hidden2", c.hidden2},
                          {"dropout", c.dropout},
                          {"max_epochs", c.max_epochs},
                          {"batch_size", c.batch_size},
                          {"patience", c.patience},
                          {"validation_split", c.validation_split},
                          {"early_stopping", "val_loss, restore best"},
                          {"batchnorm_eps", nn::kBatchNormEps},
                          {"batchnorm_momentum", nn::kBatchNormMomentum},
                          {"adam", adam_json(c.adam)},
                          {"seed", c.seed}};
    const auto& net = *d.mlp;
    auto params = net.params();
    for (std::size_t i = 0; i < params.size(); ++i) j["tensors"][kMlpTensorNames[i]] = encode_tensor(*params[i]);
    j["tensors"]["bn1.running_mean"] = encode_values({net.bn1.running_mean.size()}, net.bn1.running_mean);
    j["tensors"]["bn1.running_var"] = encode_values({net.bn1.running_var.size()}, net.bn1.running_var);
    j["tensors"]["bn2.running_mean"] = encode_values({net.bn2.running_mean.size()}, net.bn2.running_mean);
    j["tensors"]["bn2.running_var"] = encode_values({net.bn2.running_var.size()}, net.bn2.running_var);
    j["metadata"] = {{"epochs_run", d.mlp_report.epochs_run},
                     {"best_epoch", d.mlp_report.best_epoch},
                     {"best_val_loss", d.mlp_report.best_val_loss}};
  } else {
    const auto& l = *d.lof;
    j["config"]["lof"] = {{"n_neighbors", l.n_neighbors}, {"threshold", l.threshold}, {"metric", "chebyshev"},
                          {"leaf_size", l.leaf_size},     {"p", l.p}};
    j["tensors"]["lof.points"] = encode_values({l.points.rows(), l.points.cols()}, l.points.data());
    j["metadata"] = {{"duplicates_removed", l.duplicates_removed}, {"training_points", l.points.rows()}};
  }
  return j;
}

inline DetectorModel detector_from_json(const nlohmann::json& j) {
  using namespace model_io;
  DetectorModel d;
  try {
    d.kind = parse_detector_kind(j.at("kind").get<std::string>());
    const auto& c = j.at("config");
    d.promptlid = promptlid_from(c.at("promptlid"));
    d.feature_norm.mean = c.at("feature_norm").at("mean").get<std::vector<double>>();
    d.feature_norm.std = c.at("feature_norm").at("std").get<std::vector<double>>();
    if (d.kind == DetectorKind::mlp) {
      const auto& mc = c.at("mlp");
      auto& cfg = d.mlp_config;
      cfg.hidden1 = mc.at("hidden1").get<std::size_t>();
      cfg.hidden2 = mc.at("hidden2").get<std::size_t>();
      cfg.dropout = mc.at("dropout").get<double>();
      cfg.max_epochs = mc.at("max_epochs").get<std::size_t>();
      cfg.batch_size = mc.at("batch_size").get<std::size_t>();
      cfg.patience = mc.at("patience").get<std::size_t>();
      cfg.validation_split = mc.at("validation_split").get<double>();
      cfg.adam = adam_from(mc.at("adam"));
      cfg.seed = mc.at("seed").get<std::uint64_t>();
      nn::MlpNetwork net;
      net.dropout = cfg.dropout;
      auto params = net.params();
      const auto& t = j.at("tensors");
      for (std::size_t i = 0; i < params.size(); ++i) *params[i] = decode_tensor(t.at(kMlpTensorNames[i]), kMlpTensorNames[i]);
      net.bn1.running_mean = decode_tensor(t.at("bn1.running_mean"), "bn1.running_mean").values;
      net.bn1.running_var = decode_tensor(t.at("bn1.running_var"), "bn1.running_var").values;
      net.bn2.running_mean = decode_tensor(t.at("bn2.running_mean"), "bn2.running_mean").values;
      net.bn2.running_var = decode_tensor(t.at("bn2.running_var"), "bn2.running_var").values;
      if (net.w1.shape.size() != 2 || net.w1.shape[1] != d.feature_norm.mean.size() ||
          net.w2.shape != std::vector<std::size_t>{cfg.hidden2, cfg.hidden1} || net.w3.shape.size() != 2 ||
          net.w3.shape[0] != 2 || net.bn1.running_mean.size() != cfg.hidden1 || net.bn2.running_mean.size() != cfg.hidden2) {
        throw ShapeError("MLP detector tensors are inconsistent with its config");
      }
      const auto& meta = j.at("metadata");
      d.mlp_report.epochs_run = meta.at("epochs_run").get<std::size_t>();
      d.mlp_report.best_epoch = meta.at("best_epoch").get<std::size_t>();
      d.mlp_report.best_val_loss = meta.at("best_val_loss").get<double>();
      d.mlp = std::move(net);
    } else {
      const auto& lc = c.at("lof");
      auto pts = decode_tensor(j.at("tensors").at("lof.points"), "lof.points");
      if (pts.shape.size() != 2) throw ShapeError("lof.points must be 2-D");
      Matrix<double> points(pts.shape[0], pts.shape[1], std::move(pts.values));
      LofModel m = lof_fit(points, lc.at("n_neighbors").get<std::size_t>(), lc.at("threshold").get<double>());
      m.leaf_size = lc.at("leaf_size").get<std::size_t>();
      m.p = lc.at("p").get<int>();
      m.duplicates_removed = j.at("metadata").at("duplicates_removed").get<std::size_t>();
      d.lof = std::move(m);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed detector model: ") + e.what());
  }
  return d;
}

/// Training-split z1 representations used as the PromptLID neighborhood.
struct ReferenceStore {
  std::vector<std::string> ids;
  Matrix<double> z1;
};

inline nlohmann::json reference_to_json(const ReferenceStore& r) {
  auto j = model_io::envelope("z1_reference");
  j["config"] = {{"ids", r.ids}, {"split", "training"}};
  j["tensors"]["z1"] = model_io::encode_values({r.z1.rows(), r.z1.cols()}, r.z1.data());
  return j;
}

inline ReferenceStore reference_from_json(const nlohmann::json& j) {
  ReferenceStore r;
  try {
    r.ids = j.at("config").at("ids").get<std::vector<std::string>>();
    auto t = model_io::decode_tensor(j.at("tensors").at("z1"), "z1");
    if (t.shape.size() != 2 || t.shape[0] != r.ids.size()) throw ShapeError("z1 reference shape does not match ids");
    r.z1 = Matrix<double>(t.shape[0], t.shape[1], std::move(t.values));
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed z1 reference: ") + e.what());
  }
  return r;
}

}  // namespace curvalid
