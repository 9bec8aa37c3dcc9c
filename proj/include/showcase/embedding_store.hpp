#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "showcase/binary_io.hpp"
#include "showcase/error.hpp"

namespace showcase {

enum class EmbeddingKind { kImage, kReviewText, kSentence, kUserProfile };

inline std::string_view to_string(EmbeddingKind kind) {
  switch (kind) {
    case EmbeddingKind::kImage: return "image";
    case EmbeddingKind::kReviewText: return "review-text";
    case EmbeddingKind::kSentence: return "sentence";
    case EmbeddingKind::kUserProfile: return "user-profile";
  }
  return "image";
}

inline EmbeddingKind parse_embedding_kind(std::string_view s) {
  if (s == "image") return EmbeddingKind::kImage;
  if (s == "review-text") return EmbeddingKind::kReviewText;
  if (s == "sentence") return EmbeddingKind::kSentence;
  if (s == "user-profile") return EmbeddingKind::kUserProfile;
  throw DataError("unknown embedding kind: " + std::string(s));
}

struct EmbeddingRef {
  std::string id;
  EmbeddingKind kind = EmbeddingKind::kImage;
};

/// Immutable id-indexed matrix of feature vectors.
///
/// Rows are stored exactly as loaded (binary32, unnormalized). On disk a store
/// is a JSON manifest `{"dim", "count", "kind", "ids"}` plus a sibling `.bin`
/// file of dim*count little-endian floats in row order.
class EmbeddingStore {
 public:
  EmbeddingStore() = default;

  EmbeddingStore(EmbeddingKind kind, std::size_t dim, std::vector<std::string> ids, std::vector<float> data)
      : kind_(kind), dim_(dim), ids_(std::move(ids)), data_(std::move(data)) {
    if (dim_ == 0) throw DataError("embedding dim must be positive");
    if (data_.size() != dim_ * ids_.size()) throw DataError("row count mismatch");
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      if (!index_.emplace(ids_[i], i).second) throw DataError("duplicate id: " + ids_[i]);
    }
    for (float v : data_) {
      if (!std::isfinite(v)) throw DataError("non-finite value in embedding data");
    }
  }

  static EmbeddingStore load(const std::filesystem::path& manifest_path) {
    nlohmann::json manifest;
    try {
      manifest = nlohmann::json::parse(io::read_text(manifest_path));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("malformed manifest " + manifest_path.string() + ": " + e.what());
    }
    if (!manifest.contains("dim") || !manifest.contains("count") || !manifest.contains("ids"))
      throw DataError("manifest missing dim/count/ids: " + manifest_path.string());
    const auto dim = manifest.at("dim").get<long long>();
    const auto count = manifest.at("count").get<long long>();
    auto ids = manifest.at("ids").get<std::vector<std::string>>();
    if (dim <= 0) throw DataError("embedding dim must be positive");
    if (count < 0 || static_cast<std::size_t>(count) != ids.size()) throw DataError("row count mismatch");
    const auto kind = parse_embedding_kind(manifest.value("kind", std::string("image")));
    auto data = io::read_f32le(io::blob_path(manifest_path));
    if (data.size() != static_cast<std::size_t>(dim) * static_cast<std::size_t>(count))
      throw DataError("row count mismatch");
    return EmbeddingStore(kind, static_cast<std::size_t>(dim), std::move(ids), std::move(data));
  }

  void save(const std::filesystem::path& manifest_path) const {
    nlohmann::json manifest = {
        {"dim", dim_}, {"count", ids_.size()}, {"kind", std::string(to_string(kind_))}, {"ids", ids_}};
    io::write_text(manifest_path, manifest.dump() + "\n");
    io::write_f32le(io::blob_path(manifest_path), data_);
  }

  EmbeddingKind kind() const { return kind_; }
  std::size_t dim() const { return dim_; }
  std::size_t count() const { return ids_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }
  std::span<const float> data() const { return data_; }

  std::span<const float> row(std::size_t i) const {
    if (i >= ids_.size()) throw DataError("row index out of range");
    return std::span<const float>(data_).subspan(i * dim_, dim_);
  }
  std::span<const float> row(std::string_view id) const { return row(index_of(id)); }

  std::optional<std::size_t> find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  bool contains(std::string_view id) const { return find(id).has_value(); }

  std::size_t index_of(std::string_view id) const {
    auto idx = find(id);
    if (!idx) throw DataError("unresolvable embedding id: " + std::string(id));
    return *idx;
  }

  std::span<const float> resolve(const EmbeddingRef& ref) const {
    if (ref.kind != kind_)
      throw DataError("embedding ref kind " + std::string(to_string(ref.kind)) + " does not match store kind " +
                      std::string(to_string(kind_)));
    return row(ref.id);
  }

  // FNV-1a over the raw float bits; used to verify that reads never mutate.
  std::uint64_t content_hash() const {
    std::uint64_t h = 1469598103934665603ull;
    for (float v : data_) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      for (int b = 0; b < 4; ++b) {
        h ^= (bits >> (8 * b)) & 0xFFu;
        h *= 1099511628211ull;
      }
    }
    return h;
  }

 private:
  EmbeddingKind kind_ = EmbeddingKind::kImage;
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::vector<float> data_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Cosine similarity in double precision.
template <typename A, typename B>
double cosine_sim(std::span<const A> a, std::span<const B> b) {
  if (a.size() != b.size()) throw DataError("dimension mismatch in cosine similarity");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = static_cast<double>(a[i]);
    const double y = static_cast<double>(b[i]);
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na == 0.0 || nb == 0.0) throw NumericalError("zero-norm vector in cosine similarity");
  const double s = dot / (std::sqrt(na) * std::sqrt(nb));
  return std::clamp(s, -1.0, 1.0);
}

inline double cosine_sim(const std::vector<double>& a, const std::vector<double>& b) {
  return cosine_sim(std::span<const double>(a), std::span<const double>(b));
}

template <typename A, typename B>
double dissimilarity(std::span<const A> a, std::span<const B> b) {
  return 1.0 - cosine_sim(a, b);
}

inline double dissimilarity(const std::vector<double>& a, const std::vector<double>& b) {
  return 1.0 - cosine_sim(a, b);
}

}  // namespace showcase
