#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "curvalid/corpus.hpp"
#include "curvalid/error.hpp"
#include "curvalid/geometry.hpp"
#include "curvalid/matrix.hpp"
#include "curvalid/parallel.hpp"

namespace curvalid {

// ---------------------------------------------------------------------------
// Token sidecar: JSONL {"id", "tokens": [...]}, one line per EMB1 record.

using TokenSidecar = std::map<std::string, std::vector<std::string>>;

inline TokenSidecar parse_token_sidecar(std::istream& in) {
  TokenSidecar out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line_no, e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string() || !j.contains("tokens") ||
        !j["tokens"].is_array()) {
      throw ParseError(line_no, "expected {\"id\": string, \"tokens\": [string, ...]}");
    }
    std::vector<std::string> tokens;
    for (const auto& t : j["tokens"]) {
      if (!t.is_string()) throw ParseError(line_no, "token entries must be strings");
      tokens.push_back(t.get<std::string>());
    }
    if (!out.emplace(j["id"].get<std::string>(), std::move(tokens)).second) {
      throw ValidationError("duplicate sidecar id '" + j["id"].get<std::string>() + "' at line " +
                            std::to_string(line_no));
    }
  }
  return out;
}

inline TokenSidecar load_token_sidecar(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open token sidecar " + path.string());
  return parse_token_sidecar(in);
}

/// Writes in corpus order so the file lines up with the EMB1 records.
inline void write_token_sidecar(std::ostream& out, const EmbeddingCorpus& corpus, const TokenSidecar& sidecar) {
  for (const auto& s : corpus.sequences) {
    nlohmann::json j = {{"id", s.prompt_id}, {"tokens", sidecar.at(s.prompt_id)}};
    out << j.dump() << '\n';
  }
}

inline void check_sidecar_alignment(const EmbeddingCorpus& corpus, const TokenSidecar& sidecar) {
  for (const auto& s : corpus.sequences) {
    auto it = sidecar.find(s.prompt_id);
    if (it == sidecar.end()) throw ValidationError("token sidecar has no entry for '" + s.prompt_id + "'");
    if (it->second.size() != s.tokens.rows()) {
      throw ValidationError("token sidecar for '" + s.prompt_id + "' has " + std::to_string(it->second.size()) +
                            " tokens, corpus has " + std::to_string(s.tokens.rows()));
    }
  }
}

// ---------------------------------------------------------------------------
// Stopwords and punctuation

/// Strips sub-word markers ("Ġ", "▁") and surrounding whitespace, then lowercases ASCII.
inline std::string normalize_token(std::string_view raw) {
  static constexpr std::string_view kMarkers[] = {"\xC4\xA0", "\xE2\x96\x81"};
  std::string_view s = raw;
  bool changed = true;
  while (changed) {
    changed = false;
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) {
      s.remove_prefix(1);
      changed = true;
    }
    for (auto m : kMarkers) {
      if (s.starts_with(m)) {
        s.remove_prefix(m.size());
        changed = true;
      }
    }
  }
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

/// Empty after normalization, or made only of ASCII punctuation characters.
inline bool is_punctuation(std::string_view normalized) {
  return std::all_of(normalized.begin(), normalized.end(),
                     [](char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; });
}

using StopwordSet = std::set<std::string>;

inline StopwordSet parse_stopwords(std::istream& in) {
  StopwordSet out;
  std::string line;
  while (std::getline(in, line)) {
    auto w = normalize_token(line);
    if (!w.empty()) out.insert(std::move(w));
  }
  return out;
}

inline StopwordSet load_stopwords(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open stopword file " + path.string());
  return parse_stopwords(in);
}

inline bool is_filtered(std::string_view raw, const StopwordSet& stopwords) {
  const auto n = normalize_token(raw);
  return is_punctuation(n) || stopwords.count(n) > 0;
}

struct FilteredSequence {
  Matrix<double> tokens;
  std::vector<std::string> strings;
};

/// Drops stopword and punctuation rows. Applying it twice changes nothing.
inline FilteredSequence filter_tokens(const Matrix<double>& tokens, const std::vector<std::string>& strings,
                                      const StopwordSet& stopwords) {
  if (tokens.rows() != strings.size()) throw ShapeError("token strings do not match token rows");
  FilteredSequence out;
  out.tokens = Matrix<double>(0, tokens.cols());
  for (std::size_t t = 0; t < tokens.rows(); ++t) {
    if (is_filtered(strings[t], stopwords)) continue;
    out.tokens.push_row(tokens.row(t));
    out.strings.push_back(strings[t]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nearest-neighbor token tally

struct NnTokenReport {
  std::vector<std::pair<std::string, std::size_t>> top;  // count desc, then token asc
  std::size_t tokens_tallied = 0;
  std::size_t skipped_single_token = 0;
};

/// For every token, the nearest other token of the same prompt (ties by
/// position) is tallied under its normalized string, per dataset.
inline std::map<std::string, NnTokenReport> nn_token_report(const EmbeddingCorpus& corpus,
                                                            const TokenSidecar& sidecar, std::size_t top_n = 10) {
  check_sidecar_alignment(corpus, sidecar);
  std::map<std::string, std::map<std::string, std::size_t>> tallies;
  std::map<std::string, NnTokenReport> reports;
  for (const auto& s : corpus.sequences) {
    const auto& dataset = corpus.entry(s.prompt_id).dataset;
    auto& rep = reports[dataset];
    auto& tally = tallies[dataset];
    const Matrix<double> x = s.tokens.cast<double>();
    if (x.rows() < 2) {
      ++rep.skipped_single_token;
      continue;
    }
    const auto& strings = sidecar.at(s.prompt_id);
    for (std::size_t t = 0; t < x.rows(); ++t) {
      std::size_t best = t;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t o = 0; o < x.rows(); ++o) {
        if (o == t) continue;
        const double d = distance(x.row(t), x.row(o), Metric::euclidean);
        if (d < best_d) {
          best_d = d;
          best = o;
        }
      }
      auto name = normalize_token(strings[best]);
      if (name.empty()) name = strings[best];
      ++tally[name];
      ++rep.tokens_tallied;
    }
  }
  for (auto& [dataset, rep] : reports) {
    std::vector<std::pair<std::string, std::size_t>> all(tallies[dataset].begin(), tallies[dataset].end());
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    if (all.size() > top_n) all.resize(top_n);
    rep.top = std::move(all);
  }
  return reports;
}

// ---------------------------------------------------------------------------
// Token-level LID with and without stopwords

struct LidSummary {
  double mean = 0.0;
  double std = 0.0;           // population std of the pooled per-token estimates
  std::size_t prompts = 0;    // prompts contributing estimates
  std::size_t tokens = 0;     // pooled per-token estimates
  std::size_t excluded = 0;   // prompts with fewer than k+1 tokens, or no valid estimate
};

struct StopwordStudyRow {
  std::string dataset;
  LidSummary with_stopwords;
  LidSummary without_stopwords;
};

namespace detail {

inline void summarize(LidSummary& s, const std::vector<double>& values) {
  s.tokens = values.size();
  if (values.empty()) return;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(values.size()));
}

/// Per-token estimates of one prompt, or nothing when the prompt is excluded.
inline std::optional<std::vector<double>> token_lids_or_skip(const Matrix<double>& tokens, std::size_t k,
                                                              LidEstimator estimator) {
  if (tokens.rows() < k + 1) return std::nullopt;
  try {
    std::vector<double> values;
    for (const auto& e : token_level_lid(tokens, k, estimator).per_token) values.push_back(e.value);
    return values;
  } catch (const DegenerateNeighborhood&) {
    return std::nullopt;
  }
}

}  // namespace detail

inline std::vector<StopwordStudyRow> lid_stopword_study(const EmbeddingCorpus& corpus, const TokenSidecar& sidecar,
                                                        const StopwordSet& stopwords,
                                                        std::size_t k = kDefaultTokenLidK,
                                                        LidEstimator estimator = LidEstimator::mom_appendix,
                                                        unsigned threads = 1) {
  check_sidecar_alignment(corpus, sidecar);
  const std::size_t n = corpus.sequences.size();
  std::vector<std::optional<std::vector<double>>> full(n), filtered(n);
  parallel_for(n, threads, [&](std::size_t i) {
    const auto& s = corpus.sequences[i];
    const Matrix<double> x = s.tokens.cast<double>();
    full[i] = detail::token_lids_or_skip(x, k, estimator);
    filtered[i] = detail::token_lids_or_skip(filter_tokens(x, sidecar.at(s.prompt_id), stopwords).tokens, k,
                                             estimator);
  });

  std::map<std::string, StopwordStudyRow> rows;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> pooled;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& dataset = corpus.entry(corpus.sequences[i].prompt_id).dataset;
    auto& row = rows[dataset];
    row.dataset = dataset;
    auto& pool = pooled[dataset];
    auto add = [](LidSummary& s, std::vector<double>& into, const std::optional<std::vector<double>>& v) {
      if (!v) {
        ++s.excluded;
        return;
      }
      ++s.prompts;
      into.insert(into.end(), v->begin(), v->end());
    };
    add(row.with_stopwords, pool.first, full[i]);
    add(row.without_stopwords, pool.second, filtered[i]);
  }
  std::vector<StopwordStudyRow> out;
  for (auto& [dataset, row] : rows) {
    detail::summarize(row.with_stopwords, pooled[dataset].first);
    detail::summarize(row.without_stopwords, pooled[dataset].second);
    out.push_back(row);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Histograms

struct HistogramRow {
  double bin_lo = 0.0;
  double bin_hi = 0.0;
  std::size_t count_benign = 0;
  std::size_t count_adversarial = 0;
};

/// Fixed-width bins spanning [min, max] of the labeled values; the last bin
/// is closed. Unlabeled values are ignored. A constant sample gets unit-width bins.
inline std::vector<HistogramRow> histogram(const std::vector<double>& values, const std::vector<Label>& labels,
                                           std::size_t bins) {
  if (values.size() != labels.size()) throw ShapeError("one label per value required");
  if (bins == 0) throw ValidationError("bins must be positive");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (labels[i] == Label::unlabeled) continue;
    if (!std::isfinite(values[i])) throw NumericError("non-finite value in histogram input");
    lo = std::min(lo, values[i]);
    hi = std::max(hi, values[i]);
  }
  if (!std::isfinite(lo)) return {};
  if (hi == lo) hi = lo + static_cast<double>(bins);
  const double width = (hi - lo) / static_cast<double>(bins);
  std::vector<HistogramRow> rows(bins);
  for (std::size_t b = 0; b < bins; ++b) {
    rows[b].bin_lo = lo + width * static_cast<double>(b);
    rows[b].bin_hi = b + 1 == bins ? hi : lo + width * static_cast<double>(b + 1);
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (labels[i] == Label::unlabeled) continue;
    auto b = static_cast<std::size_t>((values[i] - lo) / width);
    b = std::min(b, bins - 1);
    (labels[i] == Label::benign ? rows[b].count_benign : rows[b].count_adversarial)++;
  }
  return rows;
}

inline void write_histogram_csv(std::ostream& out, const std::vector<HistogramRow>& rows) {
  out << "bin_lo,bin_hi,count_benign,count_adversarial\n";
  for (const auto& r : rows) {
    char lo[64], hi[64];
    auto a = std::to_chars(lo, lo + sizeof(lo), r.bin_lo);
    auto b = std::to_chars(hi, hi + sizeof(hi), r.bin_hi);
    out << std::string_view(lo, static_cast<std::size_t>(a.ptr - lo)) << ','
        << std::string_view(hi, static_cast<std::size_t>(b.ptr - hi)) << ',' << r.count_benign << ','
        << r.count_adversarial << '\n';
  }
}

// ---------------------------------------------------------------------------
// Correlation

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ValidationError("correlation needs two equal-length series of >= 2");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw NumericError("correlation undefined for a constant series");
  return sxy / std::sqrt(sxx * syy);
}

/// 1-based ranks; tied values share their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t m = i; m <= j; ++m) ranks[order[m]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson(average_ranks(x), average_ranks(y));
}

struct DatasetGid {
  std::string dataset;
  double mean_length = 0.0;  // tokens per prompt, all prompts of the dataset
  double mean_gid = 0.0;     // over prompts with a valid estimate
  std::size_t prompts = 0;
  std::size_t skipped = 0;   // fewer than k+1 distinct tokens, or degenerate
};

struct GidCorrelation {
  std::vector<DatasetGid> datasets;
  double pearson = 0.0;
  double spearman = 0.0;
};

/// GID of each prompt's token cloud, averaged per dataset, then correlated
/// with the dataset's mean prompt length. Optional stopword filtering first.
inline GidCorrelation gid_length_correlation(const EmbeddingCorpus& corpus, std::size_t k,
                                             const TokenSidecar* sidecar = nullptr,
                                             const StopwordSet* stopwords = nullptr, unsigned threads = 1) {
  if (stopwords && !sidecar) throw ValidationError("stopword filtering needs the token sidecar");
  if (sidecar) check_sidecar_alignment(corpus, *sidecar);
  const std::size_t n = corpus.sequences.size();
  std::vector<std::optional<double>> gid(n);
  std::vector<std::size_t> length(n);
  parallel_for(n, threads, [&](std::size_t i) {
    const auto& s = corpus.sequences[i];
    Matrix<double> x = s.tokens.cast<double>();
    if (stopwords) x = filter_tokens(x, sidecar->at(s.prompt_id), *stopwords).tokens;
    length[i] = x.rows();
    try {
      gid[i] = gid_mle(x, k).value;
    } catch (const Error&) {
      gid[i] = std::nullopt;
    }
  });
  std::map<std::string, DatasetGid> by;
  std::map<std::string, std::size_t> total_len;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& dataset = corpus.entry(corpus.sequences[i].prompt_id).dataset;
    auto& d = by[dataset];
    d.dataset = dataset;
    total_len[dataset] += length[i];
    if (gid[i]) {
      d.mean_gid += *gid[i];
      ++d.prompts;
    } else {
      ++d.skipped;
    }
  }
  GidCorrelation out;
  std::vector<double> lens, gids;
  for (auto& [name, d] : by) {
    const auto all = d.prompts + d.skipped;
    d.mean_length = static_cast<double>(total_len[name]) / static_cast<double>(all);
    if (d.prompts == 0) {
      out.datasets.push_back(d);
      continue;
    }
    d.mean_gid /= static_cast<double>(d.prompts);
    out.datasets.push_back(d);
    lens.push_back(d.mean_length);
    gids.push_back(d.mean_gid);
  }
  out.pearson = pearson(lens, gids);
  out.spearman = spearman(lens, gids);
  return out;
}

}  // namespace curvalid
