#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "showcase/diff/diff.hpp"
#include "showcase/embedding_store.hpp"
#include "showcase/error.hpp"
#include "showcase/linalg.hpp"

namespace showcase::dpp {

using diff::Graph;
using diff::ParameterSet;
using diff::Tensor;
using diff::Var;

/// Layer widths of the two relevance towers; first entry is the input width.
/// Hidden layers use ReLU, the last layer is linear.
struct MlpConfig {
  std::vector<std::size_t> user_layers;
  std::vector<std::size_t> image_layers;

  /// Full-size towers (CLIP ViT-B/32 features: 1024-d profile, 512-d image).
  static MlpConfig full() { return {{1024, 512, 512, 256, 128}, {512, 512, 512, 256, 128}}; }
  /// Desk-scale towers with the same pyramid shape.
  static MlpConfig desk(std::size_t profile_dim, std::size_t image_dim) {
    return {{profile_dim, 32, 16}, {image_dim, 32, 16}};
  }
};

/// User profile feature: per-modality mean of history images and history
/// review embeddings, concatenated. An absent modality contributes zeros.
inline Tensor user_profile(const std::vector<std::span<const float>>& images,
                           const std::vector<std::span<const float>>& reviews, std::size_t image_dim,
                           std::size_t review_dim) {
  Tensor p(1, image_dim + review_dim);
  for (const auto& v : images) {
    if (v.size() != image_dim) throw DataError("image embedding dim mismatch in user profile");
    for (std::size_t k = 0; k < image_dim; ++k) p[k] += v[k] / static_cast<double>(images.size());
  }
  for (const auto& v : reviews) {
    if (v.size() != review_dim) throw DataError("review embedding dim mismatch in user profile");
    for (std::size_t k = 0; k < review_dim; ++k) p[image_dim + k] += v[k] / static_cast<double>(reviews.size());
  }
  return p;
}

/// Two MLP towers whose outputs' dot product scores user-image relevance.
class RelevanceModel {
 public:
  RelevanceModel() = default;
  RelevanceModel(MlpConfig config, std::uint64_t seed) : config_(std::move(config)) {
    if (config_.user_layers.size() < 2 || config_.image_layers.size() < 2)
      throw UsageError("relevance towers need at least an input and an output width");
    if (config_.user_layers.back() != config_.image_layers.back())
      throw UsageError("relevance towers must end in the same width");
    std::mt19937_64 rng(seed);
    init_tower("user", config_.user_layers, rng);
    init_tower("image", config_.image_layers, rng);
  }

  /// Towers whose parameters are taken from `params` (e.g. a checkpoint).
  RelevanceModel(MlpConfig config, ParameterSet params) : config_(config) {
    RelevanceModel shape(std::move(config), 0);
    if (shape.params_.size() != params.size()) throw DataError("checkpoint does not match the relevance config");
    for (const auto& [name, p] : shape.params_)
      if (!params.contains(name) || !params.at(name).value.same_shape(p.value))
        throw DataError("checkpoint does not match the relevance config: " + name);
    params_ = std::move(params);
  }

  const MlpConfig& config() const { return config_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  std::size_t profile_dim() const { return config_.user_layers.front(); }
  std::size_t image_dim() const { return config_.image_layers.front(); }

  Var user_tower(Graph& g, const Tensor& profile) { return tower(g, "user", config_.user_layers, profile); }
  Var image_tower(Graph& g, const Tensor& candidates) { return tower(g, "image", config_.image_layers, candidates); }

  /// r_i = exp(<user(profile), image(v_i)>), as an n x 1 column.
  Var relevance(Graph& g, const Tensor& profile, const Tensor& candidates) {
    if (profile.rows() != 1 || profile.cols() != profile_dim()) throw DataError("profile dim mismatch");
    if (candidates.rows() == 0) throw DataError("empty candidate set");
    if (candidates.cols() != image_dim()) throw DataError("candidate image dim mismatch");
    Var u = user_tower(g, profile);
    Var v = image_tower(g, candidates);
    return diff::exp(diff::matmul(v, diff::transpose(u)));
  }

 private:
  void init_tower(const std::string& name, const std::vector<std::size_t>& layers, std::mt19937_64& rng) {
    for (std::size_t l = 0; l + 1 < layers.size(); ++l) {
      const bool last = l + 2 == layers.size();
      const double std = last ? 0.5 / std::sqrt(static_cast<double>(layers[l]))
                              : std::sqrt(2.0 / static_cast<double>(layers[l]));
      std::normal_distribution<double> init(0.0, std);
      Tensor w(layers[l], layers[l + 1]);
      for (auto& x : w.values()) x = init(rng);
      params_.add(name + ".w" + std::to_string(l), std::move(w));
      params_.add(name + ".b" + std::to_string(l), Tensor(1, layers[l + 1]));
    }
  }

  Var tower(Graph& g, const std::string& name, const std::vector<std::size_t>& layers, const Tensor& x) {
    Var h = g.constant(x);
    for (std::size_t l = 0; l + 1 < layers.size(); ++l) {
      h = diff::add(diff::matmul(h, g.parameter(params_, name + ".w" + std::to_string(l))),
                    g.parameter(params_, name + ".b" + std::to_string(l)));
      if (l + 2 < layers.size()) h = diff::relu(h);
    }
    return h;
  }

  MlpConfig config_;
  ParameterSet params_;
};

/// Pairwise cosine similarities of the rows of `candidates`.
inline Tensor cosine_similarity_matrix(const Tensor& candidates) {
  const std::size_t n = candidates.rows();
  Tensor s(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    s(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double c = cosine_sim(candidates.row(i), candidates.row(j));
      s(i, j) = c;
      s(j, i) = c;
    }
  }
  return s;
}

/// L = Diag(r) S Diag(r), i.e. L_ij = r_i S_ij r_j.
struct DppKernel {
  Tensor L;
  std::vector<double> relevance;
  Tensor similarity;

  std::size_t size() const { return relevance.size(); }
};

inline DppKernel kernel_from(std::vector<double> relevance, Tensor similarity) {
  const std::size_t n = relevance.size();
  if (similarity.rows() != n || similarity.cols() != n) throw DataError("similarity/relevance size mismatch");
  Tensor L(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      L(i, j) = relevance[i] * similarity(i, j) * relevance[j];
      L(j, i) = L(i, j);
    }
  return {std::move(L), std::move(relevance), std::move(similarity)};
}

/// Differentiable kernel: (r r^T) .* S for an n x 1 relevance column.
inline Var kernel_var(Graph& g, Var r, const Tensor& similarity) {
  return diff::mul(diff::matmul(r, diff::transpose(r)), g.constant(similarity));
}

inline DppKernel build_kernel(const Tensor& profile, const Tensor& candidates, RelevanceModel& model) {
  Graph g = Graph::inference();
  const Tensor& r = g.value(model.relevance(g, profile, candidates));
  return kernel_from(std::vector<double>(r.values().begin(), r.values().end()), cosine_similarity_matrix(candidates));
}

// Relative floor below which an extension is not positive definite.
inline constexpr double kMinRelativeGain = 1e-10;

enum class GreedyMethod {
  kAuto,         // direct determinants below kDirectBelow items, incremental above
  kIncremental,  // rank-1 Cholesky updates
  kDirect,       // fresh Cholesky of every candidate extension
};
inline constexpr std::size_t kDirectBelow = 32;

struct GreedyResult {
  std::vector<std::size_t> selected;  // in selection order
  std::vector<double> gains;          // log det(L_{S+i}) - log det(L_S) at each step
};

namespace detail {

inline std::vector<double> principal(const Tensor& L, const std::vector<std::size_t>& idx) {
  const std::size_t m = idx.size();
  std::vector<double> a(m * m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) a[i * m + j] = L(idx[i], idx[j]);
  return a;
}

// log det of a principal submatrix, or nullopt if it is not (numerically) positive definite.
inline std::optional<double> principal_logdet(const Tensor& L, const std::vector<std::size_t>& idx) {
  const std::size_t m = idx.size();
  if (m == 0) return 0.0;
  const auto a = principal(L, idx);
  auto l = linalg::cholesky(a, m);
  if (!l) return std::nullopt;
  double s = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double piv = (*l)[i * m + i] * (*l)[i * m + i];
    if (!(piv > kMinRelativeGain * std::max(a[i * m + i], std::numeric_limits<double>::min()))) return std::nullopt;
    s += std::log(piv);
  }
  return s;
}

inline GreedyResult greedy_incremental(const Tensor& L, std::size_t K) {
  const std::size_t n = L.rows();
  GreedyResult res;
  std::vector<double> d2(n);
  std::vector<std::vector<double>> c(n);
  std::vector<bool> taken(n, false);
  for (std::size_t i = 0; i < n; ++i) d2[i] = L(i, i);
  while (res.selected.size() < std::min(K, n)) {
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      if (!(d2[i] > kMinRelativeGain * std::max(L(i, i), std::numeric_limits<double>::min()))) continue;
      if (best == n || d2[i] > d2[best]) best = i;
    }
    if (best == n) break;
    taken[best] = true;
    res.selected.push_back(best);
    res.gains.push_back(std::log(d2[best]));
    const double dj = std::sqrt(d2[best]);
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      double dot = 0.0;
      for (std::size_t k = 0; k < c[best].size(); ++k) dot += c[best][k] * c[i][k];
      const double e = (L(best, i) - dot) / dj;
      c[i].push_back(e);
      d2[i] -= e * e;
    }
  }
  return res;
}

inline GreedyResult greedy_direct(const Tensor& L, std::size_t K) {
  const std::size_t n = L.rows();
  GreedyResult res;
  std::vector<bool> taken(n, false);
  double current = 0.0;
  while (res.selected.size() < std::min(K, n)) {
    std::size_t best = n;
    double best_ld = -std::numeric_limits<double>::infinity();
    auto trial = res.selected;
    trial.push_back(0);
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      trial.back() = i;
      auto ld = principal_logdet(L, trial);
      if (!ld) continue;
      if (best == n || *ld > best_ld) {
        best = i;
        best_ld = *ld;
      }
    }
    if (best == n) break;
    taken[best] = true;
    res.selected.push_back(best);
    res.gains.push_back(best_ld - current);
    current = best_ld;
  }
  return res;
}

}  // namespace detail

/// Greedy MAP inference: repeatedly add the item with the largest log-det
/// gain, lowest index on ties, stopping at K items or when no remaining item
/// keeps the selection positive definite.
inline GreedyResult greedy_map(const Tensor& L, std::size_t K, GreedyMethod method = GreedyMethod::kAuto) {
  if (L.rows() != L.cols()) throw DataError("kernel must be square");
  if (K == 0) throw UsageError("K must be at least 1");
  if (method == GreedyMethod::kAuto)
    method = L.rows() < kDirectBelow ? GreedyMethod::kDirect : GreedyMethod::kIncremental;
  return method == GreedyMethod::kDirect ? detail::greedy_direct(L, K) : detail::greedy_incremental(L, K);
}

inline GreedyResult greedy_map(const DppKernel& kernel, std::size_t K, GreedyMethod method = GreedyMethod::kAuto) {
  return greedy_map(kernel.L, K, method);
}

/// Determinant ratio det(L_{S+i}) / det(L_S) for every item given selection S
/// (0 for items already in S), from the incremental Cholesky recurrences.
inline std::vector<double> marginal_gains(const Tensor& L, const std::vector<std::size_t>& selected) {
  const std::size_t n = L.rows();
  std::vector<double> d2(n);
  std::vector<std::vector<double>> c(n);
  std::vector<bool> taken(n, false);
  for (std::size_t i = 0; i < n; ++i) d2[i] = L(i, i);
  for (std::size_t j : selected) {
    if (j >= n || taken[j]) throw DataError("invalid selection");
    taken[j] = true;
    if (!(d2[j] > 0.0)) throw NumericalError("selection is not positive definite");
    const double dj = std::sqrt(d2[j]);
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      double dot = 0.0;
      for (std::size_t k = 0; k < c[j].size(); ++k) dot += c[j][k] * c[i][k];
      const double e = (L(j, i) - dot) / dj;
      c[i].push_back(e);
      d2[i] -= e * e;
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    if (taken[i]) d2[i] = 0.0;
  return d2;
}

/// Visual explanation for one (user, business) pair.
struct Showcase {
  std::string user_id;
  std::string business_id;
  std::vector<std::string> selected;
  std::size_t K = 3;
};

struct RankMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Precision/recall/F1 of the first K selected ids against the ground truth.
inline RankMetrics rank_metrics(const std::vector<std::string>& selected, const std::vector<std::string>& ground_truth,
                                std::size_t K) {
  if (K == 0) throw UsageError("K must be at least 1");
  if (ground_truth.empty()) throw DataError("empty ground truth");
  const std::set<std::string> gt(ground_truth.begin(), ground_truth.end());
  std::set<std::string> sel;
  for (std::size_t i = 0; i < selected.size() && sel.size() < K; ++i) sel.insert(selected[i]);
  std::size_t hits = 0;
  for (const auto& s : sel) hits += gt.count(s);
  RankMetrics m;
  if (!sel.empty()) m.precision = static_cast<double>(hits) / static_cast<double>(sel.size());
  m.recall = static_cast<double>(hits) / static_cast<double>(gt.size());
  if (m.precision + m.recall > 0.0) m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  return m;
}

inline RankMetrics rank_metrics(const Showcase& showcase, const std::vector<std::string>& ground_truth) {
  return rank_metrics(showcase.selected, ground_truth, showcase.K);
}

/// Mean pairwise dissimilarity of a selected image set.
template <typename T>
double div_at_k(const std::vector<std::span<const T>>& images) {
  const std::size_t k = images.size();
  if (k < 2) throw DataError("diversity undefined for fewer than 2 images");
  double total = 0.0;
  for (std::size_t m = 0; m < k; ++m)
    for (std::size_t n = m + 1; n < k; ++n) total += dissimilarity(images[m], images[n]);
  return total / (static_cast<double>(k) * static_cast<double>(k - 1) / 2.0);
}

/// Training example for the relevance towers.
struct Interaction {
  Tensor profile;                         // 1 x profile_dim
  Tensor candidates;                      // n x image_dim
  std::vector<std::size_t> ground_truth;  // indices into candidates
};

// Jitter applied to a kernel block whose smallest eigenvalue is below kJitterBelow.
inline constexpr double kJitter = 1e-6;
inline constexpr double kJitterBelow = 1e-10;

/// Negative DPP log-likelihood of the ground-truth subset:
/// log det(L + I) - log det(L_GT).
inline Var dpp_nll(Graph& g, Var L, const std::vector<std::size_t>& ground_truth) {
  const Tensor Lv = g.value(L);
  const std::size_t n = Lv.rows();
  if (ground_truth.empty()) throw DataError("empty ground-truth subset");
  std::set<std::size_t> uniq;
  for (std::size_t i : ground_truth) {
    if (i >= n) throw DataError("ground-truth id not in pool");
    if (!uniq.insert(i).second) throw DataError("duplicate ground-truth id");
  }
  Var sub = diff::transpose(diff::gather_rows(diff::transpose(diff::gather_rows(L, ground_truth)), ground_truth));
  const std::size_t m = ground_truth.size();
  if (linalg::min_eigenvalue(detail::principal(Lv, ground_truth), m) < kJitterBelow) {
    Tensor j = Tensor::identity(m);
    for (auto& v : j.values()) v *= kJitter;
    sub = diff::add(sub, g.constant(j));
  }
  Var normalizer = diff::logdet(diff::add(L, g.constant(Tensor::identity(n))));
  return diff::sub(normalizer, diff::logdet(sub));
}

inline Var interaction_nll(Graph& g, RelevanceModel& model, const Interaction& x) {
  Var r = model.relevance(g, x.profile, x.candidates);
  return dpp_nll(g, kernel_var(g, r, cosine_similarity_matrix(x.candidates)), x.ground_truth);
}

struct TrainRelevanceOptions {
  int epochs = 100;
  double lr = 1e-3;
  std::size_t batch = 512;
  std::uint64_t seed = 0;
};

/// Adam on the mean negative log-likelihood over shuffled mini-batches.
/// Returns the mean training loss of each epoch.
inline std::vector<double> train_relevance(RelevanceModel& model, std::span<const Interaction> data,
                                           const TrainRelevanceOptions& options) {
  for (const auto& x : data)
    for (std::size_t i : x.ground_truth)
      if (i >= x.candidates.rows()) throw DataError("ground-truth id not in pool");
  std::vector<double> epoch_losses;
  if (data.empty() || options.epochs <= 0) return epoch_losses;
  if (options.batch == 0) throw UsageError("batch size must be positive");
  // Similarity matrices are fixed inputs; compute them once.
  std::vector<Tensor> sims;
  sims.reserve(data.size());
  for (const auto& x : data) sims.push_back(cosine_similarity_matrix(x.candidates));

  diff::AdamW opt({.lr = options.lr, .weight_decay = 0.0});
  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += options.batch) {
      const std::size_t end = std::min(order.size(), start + options.batch);
      model.params().zero_grad();
      Graph g;
      std::vector<Var> losses;
      for (std::size_t b = start; b < end; ++b) {
        const auto& x = data[order[b]];
        Var r = model.relevance(g, x.profile, x.candidates);
        losses.push_back(dpp_nll(g, kernel_var(g, r, sims[order[b]]), x.ground_truth));
      }
      Var loss = diff::scale(diff::sum(diff::concat(losses, 0)), 1.0 / static_cast<double>(end - start));
      const double value = g.value(loss).item();
      if (!std::isfinite(value))
        throw NumericalError("non-finite relevance loss at epoch " + std::to_string(epoch) + ", batch starting at " +
                             std::to_string(start));
      g.backward(loss);
      total += value * static_cast<double>(end - start);
      opt.step(model.params());
    }
    epoch_losses.push_back(total / static_cast<double>(data.size()));
  }
  return epoch_losses;
}

/// Uniformly random K-subset of the pool, in random order.
inline std::vector<std::size_t> random_selection(std::size_t pool, std::size_t K, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(pool);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(K, pool));
  return idx;
}

}  // namespace showcase::dpp
