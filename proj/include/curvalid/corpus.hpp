#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "curvalid/error.hpp"
#include "curvalid/matrix.hpp"

namespace curvalid {

enum class Label { benign, adversarial, unlabeled };

inline std::string_view to_string(Label label) {
  switch (label) {
    case Label::benign: return "benign";
    case Label::adversarial: return "adversarial";
    case Label::unlabeled: return "unlabeled";
  }
  return "unlabeled";
}

inline Label parse_label(std::string_view s) {
  if (s == "benign") return Label::benign;
  if (s == "adversarial") return Label::adversarial;
  if (s == "unlabeled") return Label::unlabeled;
  throw ValidationError("unknown label '" + std::string(s) + "'");
}

struct PromptRecord {
  std::string id;
  std::string text;
  std::string dataset;
  Label label = Label::unlabeled;
};

/// Parses prompt JSONL. Blank lines are skipped but still counted for line numbers.
inline std::vector<PromptRecord> parse_prompts(std::istream& in) {
  std::vector<PromptRecord> out;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line_no, std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw ParseError(line_no, "expected a JSON object");
    auto field = [&](const char* key) -> std::string {
      auto it = j.find(key);
      if (it == j.end()) throw ParseError(line_no, std::string("missing \"") + key + "\"");
      if (!it->is_string()) throw ParseError(line_no, std::string("\"") + key + "\" is not a string");
      return it->get<std::string>();
    };
    PromptRecord rec;
    rec.id = field("id");
    rec.text = field("text");
    rec.dataset = field("dataset");
    try {
      rec.label = parse_label(field("label"));
    } catch (const ValidationError& e) {
      throw ParseError(line_no, e.what());
    }
    if (rec.id.empty()) throw ParseError(line_no, "empty id");
    if (rec.text.empty()) throw ParseError(line_no, "empty text");
    if (!seen.insert(rec.id).second) {
      throw ValidationError("duplicate prompt id '" + rec.id + "' at line " + std::to_string(line_no));
    }
    out.push_back(std::move(rec));
  }
  return out;
}

inline std::vector<PromptRecord> load_prompts(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open prompt file " + path.string());
  return parse_prompts(in);
}

inline void write_prompts(const std::vector<PromptRecord>& prompts, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& p : prompts) {
    nlohmann::json j = {{"id", p.id}, {"text", p.text}, {"dataset", p.dataset},
                        {"label", std::string(to_string(p.label))}};
    out << j.dump() << '\n';
  }
}

struct EmbeddingSequence {
  std::string prompt_id;
  Matrix<float> tokens;  // T x D
};

struct ManifestEntry {
  std::string dataset;
  Label label = Label::unlabeled;
};

struct EmbeddingCorpus {
  std::size_t dim = 0;
  std::vector<EmbeddingSequence> sequences;
  std::map<std::string, ManifestEntry> manifest;

  /// Throws ValidationError when an invariant is broken. The manifest check
  /// is optional because EMB1 files carry no manifest until joined.
  void validate(bool require_manifest = false) const {
    std::set<std::string> ids;
    for (const auto& s : sequences) {
      if (s.prompt_id.empty()) throw ValidationError("empty prompt id in corpus");
      if (!ids.insert(s.prompt_id).second) throw ValidationError("duplicate sequence id '" + s.prompt_id + "'");
      if (s.tokens.rows() < 1) throw ValidationError("sequence '" + s.prompt_id + "' has no tokens");
      if (s.tokens.cols() != dim) {
        throw ValidationError("sequence '" + s.prompt_id + "' has width " + std::to_string(s.tokens.cols()) +
                              ", corpus dim is " + std::to_string(dim));
      }
      if (!all_finite<float>(s.tokens.data())) throw ValidationError("sequence '" + s.prompt_id + "' has non-finite values");
    }
    if (require_manifest) {
      if (manifest.size() != ids.size()) throw ValidationError("manifest does not match sequence ids");
      for (const auto& [id, _] : manifest) {
        if (!ids.count(id)) throw ValidationError("manifest id '" + id + "' has no sequence");
      }
    }
  }

  const ManifestEntry& entry(const std::string& id) const {
    auto it = manifest.find(id);
    if (it == manifest.end()) throw ValidationError("no manifest entry for '" + id + "'");
    return it->second;
  }
};

/// Joins prompt metadata onto a corpus by id. Prompts without a sequence are ignored.
inline void attach_manifest(EmbeddingCorpus& corpus, const std::vector<PromptRecord>& prompts) {
  std::map<std::string, const PromptRecord*> by_id;
  for (const auto& p : prompts) by_id.emplace(p.id, &p);
  corpus.manifest.clear();
  for (const auto& s : corpus.sequences) {
    auto it = by_id.find(s.prompt_id);
    if (it == by_id.end()) throw ValidationError("sequence '" + s.prompt_id + "' has no prompt record");
    corpus.manifest[s.prompt_id] = {it->second->dataset, it->second->label};
  }
}

// ---------------------------------------------------------------------------
// EMB1 container, little-endian:
//   "EMB1" | u32 version=1 | u32 D | u64 N | N x (u16 id_len | id | u32 T | T*D f32)

namespace emb1 {

inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 4 + 4 + 4 + 8;

inline std::size_t record_bytes(std::size_t id_len, std::size_t rows, std::size_t dim) {
  return 2 + id_len + 4 + rows * dim * 4;
}

namespace detail {

template <typename U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return value;
  }

  std::string get_string(std::size_t len, const char* what) {
    need(len, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), len);
    pos_ += len;
    return s;
  }

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(pos_, std::string("truncated ") + what + ": need " + std::to_string(n) + " bytes, " +
                                  std::to_string(bytes_.size() - pos_) + " left");
    }
  }

  std::size_t pos() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode(const EmbeddingCorpus& corpus) {
  corpus.validate(false);
  std::string out;
  std::size_t total = kHeaderBytes;
  for (const auto& s : corpus.sequences) total += record_bytes(s.prompt_id.size(), s.tokens.rows(), corpus.dim);
  out.reserve(total);
  out.append("EMB1", 4);
  detail::put_le<std::uint32_t>(out, kVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(corpus.dim));
  detail::put_le<std::uint64_t>(out, corpus.sequences.size());
  for (const auto& s : corpus.sequences) {
    if (s.prompt_id.size() > 0xFFFF) throw ValidationError("prompt id longer than 65535 bytes");
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(s.prompt_id.size()));
    out.append(s.prompt_id);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.tokens.rows()));
    for (float v : s.tokens.data()) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline EmbeddingCorpus decode(std::span<const unsigned char> bytes) {
  detail::Reader r(bytes);
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), "EMB1", 4) != 0) throw FormatError(0, "bad magic, expected \"EMB1\"");
  r.get_string(4, "magic");
  const std::size_t version_at = r.pos();
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) throw FormatError(version_at, "unsupported version " + std::to_string(version));
  const std::size_t dim_at = r.pos();
  EmbeddingCorpus corpus;
  corpus.dim = r.get<std::uint32_t>("dimension");
  if (corpus.dim == 0) throw FormatError(dim_at, "dimension must be positive");
  const auto n = r.get<std::uint64_t>("record count");
  std::set<std::string> ids;
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::size_t record_at = r.pos();
    const auto id_len = r.get<std::uint16_t>("id length");
    EmbeddingSequence seq;
    seq.prompt_id = r.get_string(id_len, "id");
    if (seq.prompt_id.empty()) throw FormatError(record_at, "empty prompt id");
    if (!ids.insert(seq.prompt_id).second) throw FormatError(record_at, "duplicate prompt id '" + seq.prompt_id + "'");
    const std::size_t rows_at = r.pos();
    const auto rows = r.get<std::uint32_t>("token count");
    if (rows == 0) throw FormatError(rows_at, "record '" + seq.prompt_id + "' has zero tokens");
    const std::size_t count = static_cast<std::size_t>(rows) * corpus.dim;
    if (count / corpus.dim != rows || r.remaining() / 4 < count) {
      r.need(count * 4, "token matrix");  // throws with the offset
    }
    std::vector<float> values(count);
    for (std::size_t v = 0; v < count; ++v) {
      const std::size_t at = r.pos();
      values[v] = std::bit_cast<float>(r.get<std::uint32_t>("float"));
      if (!std::isfinite(values[v])) throw FormatError(at, "non-finite value in record '" + seq.prompt_id + "'");
    }
    seq.tokens = Matrix<float>(rows, corpus.dim, std::move(values));
    corpus.sequences.push_back(std::move(seq));
  }
  if (r.remaining() != 0) {
    throw FormatError(r.pos(), std::to_string(r.remaining()) + " trailing bytes after " + std::to_string(n) +
                                   " records (record width mismatch?)");
  }
  return corpus;
}

}  // namespace emb1

inline void write_embedding_corpus(const EmbeddingCorpus& corpus, const std::filesystem::path& path) {
  const std::string bytes = emb1::encode(corpus);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

inline EmbeddingCorpus read_embedding_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open corpus " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return emb1::decode(bytes);
}

// ---------------------------------------------------------------------------
// Preprocessing: standardize real tokens, then zero-pad / truncate to l_max.

inline constexpr double kStdFloor = 1e-8;
inline constexpr std::size_t kMinLMax = 5;
inline constexpr std::size_t kDefaultLMax = 128;

struct StandardizationStats {
  std::vector<double> mean;
  std::vector<double> std;
  std::size_t l_max = kDefaultLMax;

  std::size_t dim() const noexcept { return mean.size(); }
};

/// Per-dimension mean and population std over every real token row.
///
/// Sequences are visited in prompt-id order, so the result does not depend
/// on the order of the corpus.
inline StandardizationStats fit_standardizer(const EmbeddingCorpus& corpus, std::size_t l_max = kDefaultLMax) {
  if (corpus.sequences.empty()) throw ValidationError("cannot fit standardizer on an empty corpus");
  if (l_max < kMinLMax) throw ValidationError("l_max must be >= " + std::to_string(kMinLMax));
  std::vector<std::size_t> order(corpus.sequences.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return corpus.sequences[a].prompt_id < corpus.sequences[b].prompt_id;
  });

  const std::size_t d = corpus.dim;
  StandardizationStats stats;
  stats.l_max = l_max;
  stats.mean.assign(d, 0.0);
  stats.std.assign(d, 0.0);
  std::size_t count = 0;
  for (std::size_t idx : order) {
    const auto& tokens = corpus.sequences[idx].tokens;
    for (std::size_t t = 0; t < tokens.rows(); ++t) {
      auto row = tokens.row(t);
      for (std::size_t j = 0; j < d; ++j) stats.mean[j] += row[j];
    }
    count += tokens.rows();
  }
  for (auto& m : stats.mean) m /= static_cast<double>(count);
  for (std::size_t idx : order) {
    const auto& tokens = corpus.sequences[idx].tokens;
    for (std::size_t t = 0; t < tokens.rows(); ++t) {
      auto row = tokens.row(t);
      for (std::size_t j = 0; j < d; ++j) {
        const double c = row[j] - stats.mean[j];
        stats.std[j] += c * c;
      }
    }
  }
  for (auto& s : stats.std) s = std::max(std::sqrt(s / static_cast<double>(count)), kStdFloor);
  return stats;
}

/// N x l_max x D tensor of standardized, zero-padded prompts.
struct PaddedBatch {
  std::size_t l_max = 0;
  std::size_t dim = 0;
  std::vector<std::string> ids;
  std::vector<double> data;
  std::vector<std::size_t> effective_len;

  std::size_t size() const noexcept { return ids.size(); }

  std::span<const double> prompt(std::size_t i) const { return {data.data() + i * l_max * dim, l_max * dim}; }

  Matrix<double> prompt_matrix(std::size_t i) const {
    auto p = prompt(i);
    return Matrix<double>(l_max, dim, std::vector<double>(p.begin(), p.end()));
  }
};

/// Standardizes one sequence and pads/truncates it to stats.l_max rows.
inline Matrix<double> standardize_and_pad(const EmbeddingSequence& seq, const StandardizationStats& stats,
                                          std::size_t* effective_len = nullptr) {
  const std::size_t d = stats.dim();
  if (seq.tokens.cols() != d) {
    throw ShapeError("sequence '" + seq.prompt_id + "' has width " + std::to_string(seq.tokens.cols()) +
                     ", stats expect " + std::to_string(d));
  }
  const std::size_t eff = std::min(seq.tokens.rows(), stats.l_max);
  Matrix<double> out(stats.l_max, d, 0.0);
  for (std::size_t t = 0; t < eff; ++t) {
    auto src = seq.tokens.row(t);
    auto dst = out.row(t);
    for (std::size_t j = 0; j < d; ++j) dst[j] = (src[j] - stats.mean[j]) / stats.std[j];
  }
  if (effective_len) *effective_len = eff;
  return out;
}

inline PaddedBatch apply_standardize_and_pad(const EmbeddingCorpus& corpus, const StandardizationStats& stats) {
  if (corpus.dim != stats.dim()) {
    throw ShapeError("corpus dim " + std::to_string(corpus.dim) + " != stats dim " + std::to_string(stats.dim()));
  }
  PaddedBatch batch;
  batch.l_max = stats.l_max;
  batch.dim = corpus.dim;
  batch.data.reserve(corpus.sequences.size() * stats.l_max * corpus.dim);
  for (const auto& seq : corpus.sequences) {
    std::size_t eff = 0;
    auto m = standardize_and_pad(seq, stats, &eff);
    batch.ids.push_back(seq.prompt_id);
    batch.effective_len.push_back(eff);
    batch.data.insert(batch.data.end(), m.data().begin(), m.data().end());
  }
  return batch;
}

}  // namespace curvalid
