#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "showcase/diff/diff.hpp"
#include "showcase/embedding_store.hpp"
#include "showcase/error.hpp"
#include "showcase/model.hpp"
#include "showcase/tokenizer.hpp"

namespace showcase::pc2l {

using diff::Graph;
using diff::Tensor;
using diff::Var;
using model::ShowcaseModel;

/// Half-open token range [begin, end) of the target naming an entity.
struct EntitySpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::string entity;

  bool operator==(const EntitySpan&) const = default;
};

/// Entity strings with their token ids.
class EntityVocab {
 public:
  EntityVocab() = default;
  EntityVocab(std::vector<std::string> names, const Vocab& vocab) : names_(std::move(names)) {
    for (const auto& n : names_) {
      auto ids = vocab.encode(n);
      if (ids.empty()) throw DataError("entity with no tokens: '" + n + "'");
      tokens_.push_back(std::move(ids));
    }
  }

  static EntityVocab load(const std::filesystem::path& path, const Vocab& vocab) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open entity vocabulary " + path.string());
    std::vector<std::string> names;
    for (std::string line; std::getline(in, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) names.push_back(line);
    }
    return EntityVocab(std::move(names), vocab);
  }
  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write entity vocabulary " + path.string());
    for (const auto& n : names_) out << n << '\n';
  }

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<TokenId>& tokens(std::size_t i) const { return tokens_.at(i); }

 private:
  std::vector<std::string> names_;
  std::vector<std::vector<TokenId>> tokens_;
};

/// Replace every entity span with the tokens of a uniformly drawn different
/// entity. Returns nothing when the target has no spans.
inline std::optional<std::vector<TokenId>> make_entity_negative(const std::vector<TokenId>& target,
                                                                std::vector<EntitySpan> spans,
                                                                const EntityVocab& entities, std::mt19937_64& rng,
                                                                std::size_t max_len = model::kMaxLen) {
  if (entities.size() < 2) throw DataError("entity vocabulary needs at least 2 entities");
  if (spans.empty()) return std::nullopt;
  std::sort(spans.begin(), spans.end(), [](const auto& a, const auto& b) { return a.begin < b.begin; });
  std::vector<TokenId> out;
  std::size_t cursor = 0;
  for (const auto& s : spans) {
    if (s.begin >= s.end || s.end > target.size()) throw DataError("entity span out of range");
    if (s.begin < cursor) throw DataError("overlapping entity spans");
    out.insert(out.end(), target.begin() + static_cast<std::ptrdiff_t>(cursor),
               target.begin() + static_cast<std::ptrdiff_t>(s.begin));
    std::vector<std::size_t> choices;
    for (std::size_t e = 0; e < entities.size(); ++e)
      if (entities.names()[e] != s.entity) choices.push_back(e);
    std::uniform_int_distribution<std::size_t> pick(0, choices.size() - 1);
    const auto& repl = entities.tokens(choices[pick(rng)]);
    out.insert(out.end(), repl.begin(), repl.end());
    cursor = s.end;
  }
  out.insert(out.end(), target.begin() + static_cast<std::ptrdiff_t>(cursor), target.end());
  if (out.size() > max_len) out.resize(max_len);
  return out;
}

// Lower bound on row norms inside the cosine similarity.
inline constexpr double kNormEps = 1e-8;

/// Extra per-sample negatives for info_nce; rows with present[i] == false are ignored.
struct ExtraNegatives {
  Var rows;
  std::vector<bool> present;
};

/// Sum over the batch of
///   -log( e^{s_ii} / (e^{s_ii} + sum_{j != i} w_ij e^{s_ij} + e^{s_i,extra}) ),
/// with s = cosine / tau.
inline Var info_nce(Var anchors, Var targets, double tau, const std::optional<Tensor>& weights = std::nullopt,
                    const std::optional<ExtraNegatives>& extra = std::nullopt) {
  Graph& g = *anchors.graph;
  if (!(tau > 0.0)) throw UsageError("temperature must be positive");
  const std::size_t B = g.value(anchors).rows();
  if (B == 0 || !g.value(anchors).same_shape(g.value(targets))) throw DataError("anchors/targets shape mismatch");
  Var a = diff::l2_normalize_rows(anchors, kNormEps);
  Var t = diff::l2_normalize_rows(targets, kNormEps);
  Var s = diff::scale(diff::matmul(a, diff::transpose(t)), 1.0 / tau);
  if (weights) {
    if (weights->rows() != B || weights->cols() != B) throw DataError("weight matrix shape mismatch");
    Tensor logw(B, B);
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < B; ++j) {
        if (i == j) continue;
        if (!((*weights)(i, j) > 0.0)) throw DataError("contrastive weights must be positive");
        logw(i, j) = std::log((*weights)(i, j));
      }
    s = diff::add(s, g.constant(std::move(logw)));
  }
  if (extra && std::any_of(extra->present.begin(), extra->present.end(), [](bool b) { return b; })) {
    if (extra->present.size() != B || !g.value(extra->rows).same_shape(g.value(anchors)))
      throw DataError("extra negatives shape mismatch");
    Var e = diff::l2_normalize_rows(extra->rows, kNormEps);
    const std::size_t p = g.value(anchors).cols();
    Var se = diff::scale(diff::matmul(diff::mul(a, e), g.constant(Tensor(p, 1, 1.0))), 1.0 / tau);
    Tensor mask(B, 1);
    for (std::size_t i = 0; i < B; ++i)
      if (!extra->present[i]) mask(i, 0) = diff::kMaskedLogit;
    s = diff::concat({s, diff::add(se, g.constant(std::move(mask)))}, 1);
  }
  std::vector<std::size_t> diag(B);
  std::iota(diag.begin(), diag.end(), 0);
  return diff::scale(diff::sum(diff::pick(diff::log_softmax(s, 1), diag)), -1.0);
}

/// f(i, j) = alpha^(1 - sim(R_i, R_j)), with the similarity clamped to [0, 1].
inline double pcl_weight(double similarity, double alpha) {
  if (!(alpha >= 1.0)) throw UsageError("alpha must be at least 1");
  return std::pow(alpha, 1.0 - std::clamp(similarity, 0.0, 1.0));
}

inline Tensor pcl_weights(const std::vector<std::vector<double>>& history_means, double alpha) {
  if (!(alpha >= 1.0)) throw UsageError("alpha must be at least 1");
  const std::size_t B = history_means.size();
  Tensor w(B, B, 1.0);
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = i + 1; j < B; ++j) {
      const double f = pcl_weight(cosine_sim(history_means[i], history_means[j]), alpha);
      w(i, j) = f;
      w(j, i) = f;
    }
  return w;
}

/// Projected, pooled representations of a batch (rows index-aligned).
struct ProjectedBatch {
  Var h_v;
  Var h_r;
  Var h_y;
  std::optional<ExtraNegatives> h_ent;
  std::vector<std::vector<double>> history_means;
};

inline Var cl_loss(Var anchors, Var targets, double tau) { return info_nce(anchors, targets, tau); }

inline Var ccl_loss(const ProjectedBatch& p, double tau) { return info_nce(p.h_v, p.h_y, tau, std::nullopt, p.h_ent); }

inline Var pcl_loss(const ProjectedBatch& p, double tau, double alpha) {
  return info_nce(p.h_r, p.h_y, tau, pcl_weights(p.history_means, alpha));
}

/// ccl holds the image-side contrastive term and pcl the history-side term,
/// whichever variant the loss mode selects.
struct LossBreakdown {
  double ce = 0.0;
  double ccl = 0.0;
  double pcl = 0.0;
  double total = 0.0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;

  bool operator==(const LossBreakdown&) const = default;
};

inline LossBreakdown total_loss(double ce, double ccl, double pcl, double lambda1, double lambda2) {
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw UsageError("loss weights must be non-negative");
  return {ce, ccl, pcl, ce + (lambda1 * ccl + lambda2 * pcl), lambda1, lambda2};
}

enum class LossMode { kCe, kCeCl, kCeCcl, kCePcl, kCeCclPcl };

inline std::string to_string(LossMode m) {
  switch (m) {
    case LossMode::kCe: return "ce";
    case LossMode::kCeCl: return "ce+cl";
    case LossMode::kCeCcl: return "ce+ccl";
    case LossMode::kCePcl: return "ce+pcl";
    case LossMode::kCeCclPcl: return "ce+ccl+pcl";
  }
  return "?";
}

inline LossMode parse_loss_mode(const std::string& s) {
  for (auto m : {LossMode::kCe, LossMode::kCeCl, LossMode::kCeCcl, LossMode::kCePcl, LossMode::kCeCclPcl})
    if (to_string(m) == s) return m;
  throw UsageError("unknown loss mode '" + s + "' (expected ce, ce+cl, ce+ccl, ce+pcl or ce+ccl+pcl)");
}

inline bool uses_entity_negatives(LossMode m) { return m == LossMode::kCeCcl || m == LossMode::kCeCclPcl; }
inline bool uses_history_weights(LossMode m) { return m == LossMode::kCePcl || m == LossMode::kCeCclPcl; }

/// One resolved training example.
struct TrainSample {
  model::EncoderInput input;
  std::vector<TokenId> target;
  std::vector<EntitySpan> spans;
  std::vector<double> history_mean;
};

struct BatchLoss {
  Var total;
  LossBreakdown breakdown;
};

/// Forward pass of one batch under a loss mode; `entity_rng` is only drawn
/// from in modes with entity negatives.
inline BatchLoss batch_loss(Graph& g, ShowcaseModel& m, std::span<const TrainSample* const> batch, LossMode mode,
                            const EntityVocab* entities, std::mt19937_64& entity_rng) {
  if (batch.empty()) throw DataError("empty batch");
  const auto& cfg = m.config();
  std::vector<Var> nll, hv, hr, hy, he;
  std::vector<bool> ent_present;
  ProjectedBatch proj;
  const bool contrastive = mode != LossMode::kCe;
  if (uses_entity_negatives(mode) && entities == nullptr) throw UsageError("loss mode needs an entity vocabulary");
  for (const TrainSample* s : batch) {
    auto enc = m.encode(g, s->input);
    const auto tf = model::teacher_forcing(s->target, cfg.max_len);
    auto dec = m.decode(g, enc, tf.input);
    nll.push_back(m.sequence_nll(g, dec.logits, tf.target));
    if (!contrastive) continue;
    std::vector<std::size_t> all_y(tf.input.size());
    std::iota(all_y.begin(), all_y.end(), 0);
    hy.push_back(m.project(g, "y", dec.hidden, all_y));
    hv.push_back(m.project(g, "v", enc.h_v(), enc.present_images()));
    hr.push_back(m.project(g, "r", enc.h_r(), enc.present_reviews()));
    proj.history_means.push_back(s->history_mean);
    if (uses_entity_negatives(mode)) {
      auto neg = make_entity_negative(s->target, s->spans, *entities, entity_rng, cfg.max_len);
      if (neg) {
        const auto tfe = model::teacher_forcing(*neg, cfg.max_len);
        auto dec_e = m.decode(g, enc, tfe.input);
        std::vector<std::size_t> all_e(tfe.input.size());
        std::iota(all_e.begin(), all_e.end(), 0);
        he.push_back(m.project(g, "y", dec_e.hidden, all_e));
      } else {
        he.push_back(hy.back());
      }
      ent_present.push_back(neg.has_value());
    }
  }
  auto stack = [](const std::vector<Var>& v) { return v.size() == 1 ? v[0] : diff::concat(v, 0); };
  Var ce = model::mean_of(nll);
  BatchLoss out;
  if (!contrastive) {
    out.total = ce;
    out.breakdown = total_loss(g.value(ce).item(), 0.0, 0.0, cfg.lambda1, cfg.lambda2);
    return out;
  }
  proj.h_v = stack(hv);
  proj.h_r = stack(hr);
  proj.h_y = stack(hy);
  if (uses_entity_negatives(mode)) proj.h_ent = ExtraNegatives{stack(he), ent_present};
  Var image_term = uses_entity_negatives(mode) ? ccl_loss(proj, cfg.tau) : cl_loss(proj.h_v, proj.h_y, cfg.tau);
  Var history_term = uses_history_weights(mode) ? pcl_loss(proj, cfg.tau, cfg.alpha) : cl_loss(proj.h_r, proj.h_y, cfg.tau);
  out.total = diff::add(ce, diff::add(diff::scale(image_term, cfg.lambda1), diff::scale(history_term, cfg.lambda2)));
  out.breakdown = total_loss(g.value(ce).item(), g.value(image_term).item(), g.value(history_term).item(),
                             cfg.lambda1, cfg.lambda2);
  out.breakdown.total = g.value(out.total).item();
  return out;
}

struct TrainOptions {
  LossMode mode = LossMode::kCe;
  double lr = 1e-4;
  double weight_decay = 0.0;
  std::size_t batch = 32;
  int epochs = 1;
  std::size_t max_steps = 0;  // 0: no limit
  std::uint64_t seed = 0;
};

struct StepLog {
  std::size_t step = 0;
  int epoch = 0;
  LossBreakdown loss;
};

/// AdamW over shuffled mini-batches. `on_step` (optional) sees every step's losses.
inline std::vector<StepLog> train(ShowcaseModel& m, std::span<const TrainSample> data, const TrainOptions& o,
                                  const EntityVocab* entities = nullptr,
                                  const std::function<void(const StepLog&)>& on_step = {}) {
  if (data.empty()) throw DataError("empty training set");
  if (o.batch == 0) throw UsageError("batch size must be positive");
  std::mt19937_64 order_rng(o.seed);
  std::seed_seq ent_seed{static_cast<std::uint32_t>(o.seed), static_cast<std::uint32_t>(o.seed >> 32), 0x656e74u};
  std::mt19937_64 entity_rng(ent_seed);
  diff::AdamW opt({.lr = o.lr, .weight_decay = o.weight_decay});
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<StepLog> log;
  for (int epoch = 0; epoch < o.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    for (std::size_t start = 0; start < order.size(); start += o.batch) {
      if (o.max_steps > 0 && log.size() >= o.max_steps) return log;
      std::vector<const TrainSample*> batch;
      for (std::size_t b = start; b < std::min(order.size(), start + o.batch); ++b) batch.push_back(&data[order[b]]);
      m.params().zero_grad();
      Graph g;
      auto loss = batch_loss(g, m, batch, o.mode, entities, entity_rng);
      const auto& b = loss.breakdown;
      if (!std::isfinite(b.total))
        throw NumericalError("non-finite loss at step " + std::to_string(log.size()) + " (ce=" + std::to_string(b.ce) +
                             ", ccl=" + std::to_string(b.ccl) + ", pcl=" + std::to_string(b.pcl) + ")");
      g.backward(loss.total);
      opt.step(m.params());
      log.push_back({log.size(), epoch, loss.breakdown});
      if (on_step) on_step(log.back());
    }
  }
  return log;
}

}  // namespace showcase::pc2l
