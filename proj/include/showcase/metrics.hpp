#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "showcase/distill.hpp"
#include "showcase/embedding_store.hpp"
#include "showcase/error.hpp"

namespace showcase::metrics {

using Tokens = std::vector<std::string>;

namespace detail {

inline std::map<std::vector<std::string>, std::size_t> ngram_counts(const Tokens& s, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> c;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++c[Tokens(s.begin() + static_cast<std::ptrdiff_t>(i),
                                                            s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return c;
}

inline void check_aligned(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references,
                          std::size_t n) {
  if (n == 0) throw UsageError("n-gram order must be at least 1");
  if (candidates.size() != references.size()) throw DataError("candidate/reference count mismatch");
  std::size_t total = 0;
  for (const auto& c : candidates) total += c.size();
  if (total == 0) throw DataError("empty candidate corpus");
}

}  // namespace detail

/// Unique n-grams over total n-grams, pooled across the corpus.
inline double distinct_n(const std::vector<Tokens>& corpus, std::size_t n) {
  if (n == 0) throw UsageError("n-gram order must be at least 1");
  if (corpus.empty()) throw DataError("empty corpus");
  std::set<Tokens> unique;
  std::size_t total = 0;
  for (const auto& s : corpus)
    for (const auto& [g, c] : detail::ngram_counts(s, n)) {
      unique.insert(g);
      total += c;
    }
  if (total == 0) throw DataError("every sequence is shorter than n");
  return static_cast<double>(unique.size()) / static_cast<double>(total);
}

/// Corpus BLEU with uniform weights up to order n and a single reference per candidate.
inline double bleu_n(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references, std::size_t n) {
  detail::check_aligned(candidates, references, n);
  double log_sum = 0.0;
  for (std::size_t k = 1; k <= n; ++k) {
    std::size_t matched = 0, total = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      const auto cand = detail::ngram_counts(candidates[i], k);
      const auto ref = detail::ngram_counts(references[i], k);
      for (const auto& [g, c] : cand) {
        total += c;
        auto it = ref.find(g);
        if (it != ref.end()) matched += std::min(c, it->second);
      }
    }
    if (matched == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matched) / static_cast<double>(total));
  }
  double c = 0.0, r = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    c += static_cast<double>(candidates[i].size());
    r += static_cast<double>(references[i].size());
  }
  return std::exp(std::min(0.0, 1.0 - r / c)) * std::exp(log_sum / static_cast<double>(n));
}

/// NIST brevity factor for total candidate/reference lengths.
inline double nist_length_penalty(double ref_len, double hyp_len) {
  const double ratio = hyp_len / ref_len;
  if (ratio > 0.0 && ratio < 1.0) {
    const double beta = std::log(0.5) / std::pow(std::log(1.5), 2);
    return std::exp(beta * std::pow(std::log(ratio), 2));
  }
  return std::max(std::min(ratio, 1.0), 0.0);
}

/// Corpus NIST: information-weighted n-gram precisions summed over orders
/// 1..n, times the brevity factor. Info(w1..wk) = log2(#(w1..wk-1) / #(w1..wk))
/// over the reference corpus, with #() = total reference words for unigrams.
/// Orders with no candidate n-grams are skipped.
inline double nist_n(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references,
                     std::size_t n = 4) {
  detail::check_aligned(candidates, references, n);
  std::map<Tokens, std::size_t> freq;
  std::size_t ref_words = 0;
  for (const auto& r : references) {
    for (std::size_t k = 1; k <= n; ++k)
      for (const auto& [g, c] : detail::ngram_counts(r, k)) freq[g] += c;
    ref_words += r.size();
  }
  auto info = [&](const Tokens& g) {
    const Tokens prefix(g.begin(), g.end() - 1);
    auto it = prefix.empty() ? freq.end() : freq.find(prefix);
    const double num = it == freq.end() ? static_cast<double>(ref_words) : static_cast<double>(it->second);
    return std::log2(num / static_cast<double>(freq.at(g)));
  };
  double precision = 0.0;
  for (std::size_t k = 1; k <= n; ++k) {
    double num = 0.0;
    std::size_t den = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      const auto cand = detail::ngram_counts(candidates[i], k);
      const auto ref = detail::ngram_counts(references[i], k);
      for (const auto& [g, c] : cand) {
        den += c;
        auto it = ref.find(g);
        if (it != ref.end()) num += info(g) * static_cast<double>(std::min(c, it->second));
      }
    }
    if (den > 0) precision += num / static_cast<double>(den);
  }
  double c = 0.0, r = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    c += static_cast<double>(candidates[i].size());
    r += static_cast<double>(references[i].size());
  }
  return precision * nist_length_penalty(r, c);
}

/// Mean over columns (images) of the max over rows (sentences) of scores[sentence][image].
inline double mean_of_max(const std::vector<std::vector<double>>& scores) {
  if (scores.empty() || scores.front().empty()) throw DataError("empty image or sentence set");
  const std::size_t n = scores.front().size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& row : scores) {
      if (row.size() != n) throw DataError("ragged score matrix");
      best = std::max(best, row[i]);
    }
    total += best;
  }
  return total / static_cast<double>(n);
}

template <typename T>
using Rows = std::vector<std::span<const T>>;

/// Mean over images of the best alignment-classifier confidence among sentences.
template <typename T>
double clip_align(const Rows<T>& images, const Rows<T>& sentences, const distill::AlignmentClassifier& clf) {
  if (images.empty() || sentences.empty()) throw DataError("empty image or sentence set");
  std::vector<std::vector<double>> s(sentences.size(), std::vector<double>(images.size()));
  for (std::size_t j = 0; j < sentences.size(); ++j)
    for (std::size_t i = 0; i < images.size(); ++i) s[j][i] = clf.score(sentences[j], images[i]);
  return mean_of_max(s);
}

/// Mean over images of the best image-sentence cosine similarity.
template <typename T>
double clip_score(const Rows<T>& images, const Rows<T>& sentences) {
  if (images.empty() || sentences.empty()) throw DataError("empty image or sentence set");
  std::vector<std::vector<double>> s(sentences.size(), std::vector<double>(images.size()));
  for (std::size_t j = 0; j < sentences.size(); ++j)
    for (std::size_t i = 0; i < images.size(); ++i) s[j][i] = cosine_sim(sentences[j], images[i]);
  return mean_of_max(s);
}

struct DiversityItem {
  std::string business;
  std::string user;
  std::vector<double> image;
};

/// Average pairwise dissimilarity at three levels; nullopt where a level has no pair.
struct CorpusDiversity {
  std::optional<double> intra_business;
  std::optional<double> inter_user;
  std::optional<double> intra_user;
};

inline CorpusDiversity corpus_diversity(const std::vector<DiversityItem>& items) {
  if (items.empty()) throw DataError("empty dataset");
  std::map<std::string, std::vector<std::size_t>> by_business;
  for (std::size_t i = 0; i < items.size(); ++i) by_business[items[i].business].push_back(i);
  double s1 = 0, s2 = 0, s3 = 0;
  std::size_t z1 = 0, z2 = 0, z3 = 0;
  for (const auto& [b, idx] : by_business)
    for (std::size_t p = 0; p < idx.size(); ++p)
      for (std::size_t q = p + 1; q < idx.size(); ++q) {
        const auto& x = items[idx[p]];
        const auto& y = items[idx[q]];
        const double d = dissimilarity(x.image, y.image);
        s1 += d;
        ++z1;
        if (x.user == y.user) {
          s3 += d;
          ++z3;
        } else {
          s2 += d;
          ++z2;
        }
      }
  auto avg = [](double s, std::size_t z) { return z == 0 ? std::nullopt : std::optional<double>(s / static_cast<double>(z)); };
  return {avg(s1, z1), avg(s2, z2), avg(s3, z3)};
}

/// One record for keyword coverage: generated tokens plus the reference's
/// keyword annotations (class -> tokens).
struct KeywordRecord {
  Tokens generated;
  std::map<std::string, std::vector<std::string>> keywords;
};

/// Per class, the fraction of (unique per record) reference keywords found in
/// the generated text, pooled over records; nullopt for classes with no keywords.
inline std::map<std::string, std::optional<double>> keyword_coverage(const std::vector<KeywordRecord>& records,
                                                                     const std::vector<std::string>& classes) {
  std::map<std::string, std::pair<std::size_t, std::size_t>> counts;
  for (const auto& c : classes) counts[c] = {0, 0};
  for (const auto& r : records) {
    const std::set<std::string> gen(r.generated.begin(), r.generated.end());
    for (const auto& [cls, words] : r.keywords) {
      auto it = counts.find(cls);
      if (it == counts.end()) continue;
      for (const auto& w : std::set<std::string>(words.begin(), words.end())) {
        ++it->second.second;
        if (gen.contains(w)) ++it->second.first;
      }
    }
  }
  std::map<std::string, std::optional<double>> out;
  for (const auto& [cls, hc] : counts)
    out[cls] = hc.second == 0 ? std::nullopt
                              : std::optional<double>(static_cast<double>(hc.first) / static_cast<double>(hc.second));
  return out;
}

/// Counts in [0,10), [10,20), ..., [40,50), [50,60]; longer sequences land in the last bin.
inline std::array<std::size_t, 6> length_histogram(const std::vector<std::size_t>& lengths) {
  if (lengths.empty()) throw DataError("empty corpus");
  std::array<std::size_t, 6> bins{};
  for (std::size_t l : lengths) ++bins[std::min<std::size_t>(l / 10, 5)];
  return bins;
}

inline double percent(double x) { return std::round(x * 10000.0) / 100.0; }
inline double round2(double x) { return std::round(x * 100.0) / 100.0; }

/// Aggregate evaluation results (fractions in [0, 1]; NIST unbounded).
struct MetricReport {
  std::size_t records = 0;
  double bleu1 = 0, bleu4 = 0, nist4 = 0, distinct1 = 0, distinct2 = 0;
  std::optional<double> clip_align, clip_score;
  std::map<std::string, std::optional<double>> keyword_coverage;
  std::array<std::size_t, 6> length_histogram{};
};

/// Percentages to 2 decimals; NIST rounded to 2 decimals; undefined values as null.
inline nlohmann::json to_json(const MetricReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(percent(*v)) : nlohmann::json(nullptr); };
  nlohmann::json kw = nlohmann::json::object();
  for (const auto& [c, v] : r.keyword_coverage) kw[c] = opt(v);
  return {{"records", r.records},
          {"bleu1", percent(r.bleu1)},
          {"bleu4", percent(r.bleu4)},
          {"nist4", round2(r.nist4)},
          {"distinct1", percent(r.distinct1)},
          {"distinct2", percent(r.distinct2)},
          {"clip_align", opt(r.clip_align)},
          {"clip_score", opt(r.clip_score)},
          {"keyword_coverage", kw},
          {"length_histogram", r.length_histogram}};
}

}  // namespace showcase::metrics
