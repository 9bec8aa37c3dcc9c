#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "showcase/embedding_store.hpp"
#include "showcase/error.hpp"
#include "showcase/pc2l.hpp"
#include "showcase/tokenizer.hpp"

namespace showcase::pc2l {

inline void to_json(nlohmann::json& j, const EntitySpan& s) {
  j = {{"begin", s.begin}, {"end", s.end}, {"entity", s.entity}};
}
inline void from_json(const nlohmann::json& j, EntitySpan& s) {
  s.begin = j.at("begin").get<std::size_t>();
  s.end = j.at("end").get<std::size_t>();
  s.entity = j.at("entity").get<std::string>();
}

}  // namespace showcase::pc2l

namespace showcase::data {

using nlohmann::json;

struct SentenceRow {
  std::string id;
  std::string text;
  std::vector<pc2l::EntitySpan> entities;  // token offsets within `text`
};

/// One user-business review, pre-segmented into sentences.
struct ReviewRow {
  std::string review_id;
  std::string user_id;
  std::string business_id;
  std::vector<SentenceRow> sentences;
  std::vector<std::string> image_ids;
};

struct PairRow {
  std::string sentence_id;
  std::string image_id;
  int label = 0;
};

struct InteractionRow {
  std::string user_id;
  std::string business_id;
  std::string split;  // "train" or "test"
  std::vector<std::string> profile_images;
  std::vector<std::string> profile_reviews;
  std::vector<std::string> candidates;
  std::vector<std::string> ground_truth;
};

struct ShowcaseRow {
  std::string user_id;
  std::string business_id;
  std::vector<std::string> selected;
};

struct ExplanationRow {
  std::string review_id;
  std::string sentence_id;
  std::string image_id;
  double score = 0.0;
};

struct GenerationRow {
  std::string user_id;
  std::string business_id;
  std::vector<std::string> images;
  std::string text;
  std::vector<std::string> tokens;
};

inline void to_json(json& j, const SentenceRow& s) { j = {{"id", s.id}, {"text", s.text}, {"entities", s.entities}}; }
inline void from_json(const json& j, SentenceRow& s) {
  s.id = j.at("id").get<std::string>();
  s.text = j.at("text").get<std::string>();
  s.entities = j.value("entities", std::vector<pc2l::EntitySpan>{});
}

inline void to_json(json& j, const ReviewRow& r) {
  j = {{"review_id", r.review_id}, {"user_id", r.user_id},   {"business_id", r.business_id},
       {"sentences", r.sentences}, {"image_ids", r.image_ids}};
}
inline void from_json(const json& j, ReviewRow& r) {
  r.review_id = j.at("review_id").get<std::string>();
  r.user_id = j.at("user_id").get<std::string>();
  r.business_id = j.at("business_id").get<std::string>();
  r.sentences = j.at("sentences").get<std::vector<SentenceRow>>();
  r.image_ids = j.at("image_ids").get<std::vector<std::string>>();
}

inline void to_json(json& j, const PairRow& p) {
  j = {{"sentence_id", p.sentence_id}, {"image_id", p.image_id}, {"label", p.label}};
}
inline void from_json(const json& j, PairRow& p) {
  p.sentence_id = j.at("sentence_id").get<std::string>();
  p.image_id = j.at("image_id").get<std::string>();
  p.label = j.at("label").get<int>();
}

inline void to_json(json& j, const InteractionRow& x) {
  j = {{"user_id", x.user_id},
       {"business_id", x.business_id},
       {"split", x.split},
       {"profile_images", x.profile_images},
       {"profile_reviews", x.profile_reviews},
       {"candidates", x.candidates},
       {"ground_truth", x.ground_truth}};
}
inline void from_json(const json& j, InteractionRow& x) {
  x.user_id = j.at("user_id").get<std::string>();
  x.business_id = j.at("business_id").get<std::string>();
  x.split = j.value("split", std::string("train"));
  x.profile_images = j.value("profile_images", std::vector<std::string>{});
  x.profile_reviews = j.value("profile_reviews", std::vector<std::string>{});
  x.candidates = j.at("candidates").get<std::vector<std::string>>();
  x.ground_truth = j.value("ground_truth", std::vector<std::string>{});
}

inline void to_json(json& j, const ShowcaseRow& s) {
  j = {{"user_id", s.user_id}, {"business_id", s.business_id}, {"selected", s.selected}};
}
inline void from_json(const json& j, ShowcaseRow& s) {
  s.user_id = j.at("user_id").get<std::string>();
  s.business_id = j.at("business_id").get<std::string>();
  s.selected = j.at("selected").get<std::vector<std::string>>();
}

inline void to_json(json& j, const ExplanationRow& e) {
  j = {{"review_id", e.review_id}, {"sentence_id", e.sentence_id}, {"image_id", e.image_id}, {"score", e.score}};
}
inline void from_json(const json& j, ExplanationRow& e) {
  e.review_id = j.at("review_id").get<std::string>();
  e.sentence_id = j.at("sentence_id").get<std::string>();
  e.image_id = j.at("image_id").get<std::string>();
  e.score = j.at("score").get<double>();
}

inline void to_json(json& j, const GenerationRow& g) {
  j = {{"user_id", g.user_id}, {"business_id", g.business_id}, {"images", g.images}, {"text", g.text},
       {"tokens", g.tokens}};
}
inline void from_json(const json& j, GenerationRow& g) {
  g.user_id = j.at("user_id").get<std::string>();
  g.business_id = j.at("business_id").get<std::string>();
  g.images = j.at("images").get<std::vector<std::string>>();
  g.text = j.at("text").get<std::string>();
  g.tokens = j.contains("tokens") ? j.at("tokens").get<std::vector<std::string>>() : tokenize(g.text);
}

template <typename T>
std::vector<T> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<T> rows;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      rows.push_back(json::parse(line).get<T>());
    } catch (const json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return rows;
}

template <typename T>
void write_jsonl(const std::filesystem::path& path, const std::vector<T>& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& r : rows) out << json(r).dump() << '\n';
  if (!out) throw DataError("write failed: " + path.string());
}

/// Keyword classes (e.g. noun/adj/adv) mapped to their member tokens.
using KeywordLexicon = std::map<std::string, std::set<std::string>>;

inline KeywordLexicon load_keywords(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in).get<KeywordLexicon>();
  } catch (const json::exception& e) {
    throw DataError("malformed keyword lexicon " + path.string() + ": " + e.what());
  }
}

/// Per class, the tokens of `tokens` belonging to it, in order of appearance.
inline std::map<std::string, std::vector<std::string>> keywords_of(const std::vector<std::string>& tokens,
                                                                   const KeywordLexicon& lexicon) {
  std::map<std::string, std::vector<std::string>> out;
  for (const auto& [cls, words] : lexicon) {
    auto& v = out[cls];
    for (const auto& t : tokens)
      if (words.contains(t)) v.push_back(t);
  }
  return out;
}

/// Splits a token sequence into sentences at terminal punctuation; empty
/// sentences are dropped.
inline std::vector<std::vector<std::string>> split_sentences(const std::vector<std::string>& tokens) {
  std::vector<std::vector<std::string>> out(1);
  for (const auto& t : tokens) {
    out.back().push_back(t);
    if (t == "." || t == "!" || t == "?") out.emplace_back();
  }
  std::erase_if(out, [](const auto& s) {
    return std::all_of(s.begin(), s.end(), [](const std::string& t) { return t == "." || t == "!" || t == "?"; });
  });
  return out;
}

/// Bag-of-words sentence encoder over a word-vector store: the mean of the
/// vectors of the tokens it knows.
class TextEncoder {
 public:
  explicit TextEncoder(const EmbeddingStore& words) : words_(&words) {}

  std::size_t dim() const { return words_->dim(); }

  std::optional<std::vector<float>> embed(const std::vector<std::string>& tokens) const {
    std::vector<double> acc(dim(), 0.0);
    std::size_t known = 0;
    for (const auto& t : tokens) {
      auto idx = words_->find(t);
      if (!idx) continue;
      auto row = words_->row(*idx);
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += row[k];
      ++known;
    }
    if (known == 0) return std::nullopt;
    std::vector<float> out(acc.size());
    for (std::size_t k = 0; k < acc.size(); ++k) out[k] = static_cast<float>(acc[k] / static_cast<double>(known));
    if (std::all_of(out.begin(), out.end(), [](float v) { return v == 0.0f; })) return std::nullopt;
    return out;
  }

 private:
  const EmbeddingStore* words_;
};

}  // namespace showcase::data
