#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "showcase/binary_io.hpp"
#include "showcase/diff/tensor.hpp"

namespace showcase {

/// Parameter checkpoint: a JSON manifest naming each tensor and its shape,
/// plus a sibling `.bin` blob in the embedding-store binary format (binary32
/// little-endian, tensors concatenated in manifest order, row-major).
struct Checkpoint {
  diff::ParameterSet params;
  nlohmann::json meta = nlohmann::json::object();
};

inline void save_checkpoint(const std::filesystem::path& manifest_path, const diff::ParameterSet& params,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  nlohmann::json entries = nlohmann::json::array();
  std::vector<float> blob;
  blob.reserve(params.scalar_count());
  for (const auto& [name, p] : params) {
    entries.push_back({{"name", name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
    for (double v : p.value.values()) blob.push_back(static_cast<float>(v));
  }
  nlohmann::json manifest = {
      {"kind", "parameters"}, {"count", blob.size()}, {"params", entries}, {"meta", meta}};
  io::write_text(manifest_path, manifest.dump(2) + "\n");
  io::write_f32le(io::blob_path(manifest_path), blob);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& manifest_path) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(io::read_text(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint manifest " + manifest_path.string() + ": " + e.what());
  }
  if (manifest.value("kind", std::string()) != "parameters")
    throw DataError("not a parameter checkpoint: " + manifest_path.string());
  const auto blob = io::read_f32le(io::blob_path(manifest_path));
  if (blob.size() != manifest.at("count").get<std::size_t>()) throw DataError("checkpoint value count mismatch");
  Checkpoint ck;
  std::size_t offset = 0;
  for (const auto& e : manifest.at("params")) {
    const auto rows = e.at("rows").get<std::size_t>();
    const auto cols = e.at("cols").get<std::size_t>();
    if (offset + rows * cols > blob.size()) throw DataError("checkpoint blob too short");
    std::vector<double> values(blob.begin() + static_cast<std::ptrdiff_t>(offset),
                               blob.begin() + static_cast<std::ptrdiff_t>(offset + rows * cols));
    for (double v : values)
      if (!std::isfinite(v)) throw DataError("non-finite value in checkpoint");
    ck.params.add(e.at("name").get<std::string>(), diff::Tensor(rows, cols, std::move(values)));
    offset += rows * cols;
  }
  if (offset != blob.size()) throw DataError("checkpoint blob has trailing values");
  ck.meta = manifest.value("meta", nlohmann::json::object());
  return ck;
}

/// Rounds every parameter to binary32, so in-memory state equals what a
/// save/load round trip would produce.
inline void round_to_f32(diff::ParameterSet& params) {
  for (auto& [name, p] : params)
    for (double& v : p.value.values()) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace showcase
