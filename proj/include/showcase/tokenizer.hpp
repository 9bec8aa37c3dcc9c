#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "showcase/error.hpp"

namespace showcase {

using TokenId = std::int32_t;

inline constexpr TokenId kBos = 0;
inline constexpr TokenId kEos = 1;
inline constexpr TokenId kPad = 2;
inline constexpr TokenId kUnk = 3;

/// Lowercased words (runs of letters, digits and inner apostrophes) and
/// single punctuation characters. Non-ASCII bytes are kept inside words.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isalnum(c) || c >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (c == '\'' && !cur.empty() && i + 1 < text.size() &&
               std::isalnum(static_cast<unsigned char>(text[i + 1]))) {
      cur.push_back('\'');
    } else if (std::isspace(c)) {
      flush();
    } else {
      flush();
      out.emplace_back(1, static_cast<char>(c));
    }
  }
  flush();
  return out;
}

/// Token <-> id table. Ids 0..3 are <bos>, <eos>, <pad>, <unk>.
class Vocab {
 public:
  Vocab() : Vocab(std::vector<std::string>{}) {}

  /// Reserved tokens followed by `words` in order (duplicates and reserved names skipped).
  explicit Vocab(const std::vector<std::string>& words) {
    for (const char* r : {"<bos>", "<eos>", "<pad>", "<unk>"}) push(r);
    for (const auto& w : words)
      if (!index_.contains(w)) push(w);
  }

  /// Corpus vocabulary: tokens with count >= min_count, by descending count then lexicographically.
  static Vocab build(const std::vector<std::vector<std::string>>& corpus, std::size_t min_count = 1) {
    std::map<std::string, std::size_t> counts;
    for (const auto& sent : corpus)
      for (const auto& t : sent) ++counts[t];
    std::vector<std::pair<std::string, std::size_t>> items(counts.begin(), counts.end());
    std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> words;
    for (const auto& [w, c] : items)
      if (c >= min_count) words.push_back(w);
    return Vocab(words);
  }

  static Vocab load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocabulary " + path.string());
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      lines.push_back(line);
    }
    if (lines.size() < 4 || lines[0] != "<bos>" || lines[1] != "<eos>" || lines[2] != "<pad>" || lines[3] != "<unk>")
      throw DataError("vocabulary must start with <bos>, <eos>, <pad>, <unk>");
    Vocab v;
    for (std::size_t i = 4; i < lines.size(); ++i) {
      if (lines[i].empty() || v.index_.contains(lines[i]))
        throw DataError("empty or duplicate vocabulary entry at line " + std::to_string(i + 1));
      v.push(lines[i]);
    }
    return v;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write vocabulary " + path.string());
    for (const auto& t : tokens_) out << t << '\n';
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw DataError("unknown token id");
    return tokens_[static_cast<std::size_t>(id)];
  }
  TokenId id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& token) const { return index_.contains(token); }

  std::vector<TokenId> encode_tokens(const std::vector<std::string>& tokens) const {
    std::vector<TokenId> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(id(t));
    return ids;
  }
  std::vector<TokenId> encode(std::string_view text) const { return encode_tokens(tokenize(text)); }

  /// Tokens of `ids`, with reserved ids other than <unk> dropped.
  std::vector<std::string> tokens_of(const std::vector<TokenId>& ids) const {
    std::vector<std::string> out;
    for (TokenId i : ids)
      if (i == kUnk || i > kUnk) out.push_back(token(i));
    return out;
  }
  std::string decode(const std::vector<TokenId>& ids) const {
    std::string s;
    for (const auto& t : tokens_of(ids)) {
      if (!s.empty()) s += ' ';
      s += t;
    }
    return s;
  }

  bool operator==(const Vocab& o) const { return tokens_ == o.tokens_; }

 private:
  void push(const std::string& t) {
    index_.emplace(t, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(t);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace showcase
