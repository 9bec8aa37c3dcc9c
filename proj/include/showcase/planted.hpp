#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "showcase/dpp.hpp"

namespace showcase::fixture {

struct PlantedSelectionOptions {
  std::size_t interactions = 500;
  std::size_t pool = 12;
  std::size_t K = 3;
  std::size_t profile_dim = 8;
  std::size_t image_dim = 8;
  std::uint64_t seed = 0;
};

struct PlantedSelection {
  std::vector<dpp::Interaction> interactions;
  diff::Tensor relevance_map;  // profile_dim x image_dim
};

/// Selection benchmark with a known bilinear relevance p^T W v: each
/// interaction's ground truth is the top-K pool images under that score.
inline PlantedSelection planted_selection(const PlantedSelectionOptions& o) {
  std::mt19937_64 rng(o.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  PlantedSelection out;
  out.relevance_map = diff::Tensor(o.profile_dim, o.image_dim);
  for (auto& w : out.relevance_map.values()) w = normal(rng);
  for (std::size_t t = 0; t < o.interactions; ++t) {
    dpp::Interaction x{diff::Tensor(1, o.profile_dim), diff::Tensor(o.pool, o.image_dim), {}};
    for (auto& v : x.profile.values()) v = normal(rng);
    for (auto& v : x.candidates.values()) v = normal(rng);
    std::vector<double> q(o.pool, 0.0);
    for (std::size_t i = 0; i < o.pool; ++i)
      for (std::size_t a = 0; a < o.profile_dim; ++a)
        for (std::size_t b = 0; b < o.image_dim; ++b)
          q[i] += x.profile[a] * out.relevance_map(a, b) * x.candidates(i, b);
    std::vector<std::size_t> idx(o.pool);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return q[a] > q[b]; });
    x.ground_truth.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(std::min(o.K, o.pool)));
    out.interactions.push_back(std::move(x));
  }
  return out;
}

}  // namespace showcase::fixture
