#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "showcase/diff/diff.hpp"
#include "showcase/embedding_store.hpp"
#include "showcase/error.hpp"

namespace showcase::distill {

/// Annotated sentence/image pair by reference into embedding stores.
struct AlignedPair {
  EmbeddingRef sentence;
  EmbeddingRef image;
  int label = 0;  // 1: the sentence describes the image
};

/// A pair with its embeddings already resolved.
struct LabeledPair {
  std::vector<double> sentence;
  std::vector<double> image;
  int label = 0;
};

inline std::vector<LabeledPair> resolve_pairs(std::span<const AlignedPair> pairs, const EmbeddingStore& sentences,
                                              const EmbeddingStore& images) {
  std::vector<LabeledPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    if (p.label != 0 && p.label != 1) throw DataError("pair label must be 0 or 1");
    auto s = sentences.resolve(p.sentence);
    auto i = images.resolve(p.image);
    out.push_back({std::vector<double>(s.begin(), s.end()), std::vector<double>(i.begin(), i.end()), p.label});
  }
  return out;
}

inline double logistic(double z) {
  const double s = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  // Keep the output strictly inside (0, 1) even where the double rounds to an endpoint.
  return std::clamp(s, std::numeric_limits<double>::denorm_min(), std::nextafter(1.0, 0.0));
}

/// Logistic regression over the concatenation [sentence; image].
class AlignmentClassifier {
 public:
  AlignmentClassifier() = default;
  AlignmentClassifier(std::vector<double> weights, double bias) : weights_(std::move(weights)), bias_(bias) {
    if (weights_.empty() || weights_.size() % 2 != 0) throw DataError("classifier weights must have length 2*dim");
  }

  std::size_t dim() const { return weights_.size() / 2; }
  const std::vector<double>& weights() const { return weights_; }
  double bias() const { return bias_; }

  template <typename S, typename I>
  double logit(std::span<const S> sentence, std::span<const I> image) const {
    if (sentence.size() != dim() || image.size() != dim())
      throw DataError("embedding dim does not match classifier (expected " + std::to_string(dim()) + ")");
    double z = bias_;
    for (std::size_t k = 0; k < dim(); ++k) z += weights_[k] * static_cast<double>(sentence[k]);
    for (std::size_t k = 0; k < dim(); ++k) z += weights_[dim() + k] * static_cast<double>(image[k]);
    return z;
  }

  template <typename S, typename I>
  double score(std::span<const S> sentence, std::span<const I> image) const {
    return logistic(logit(sentence, image));
  }
  double score(const std::vector<double>& sentence, const std::vector<double>& image) const {
    return score(std::span<const double>(sentence), std::span<const double>(image));
  }

  diff::ParameterSet to_parameters() const {
    diff::ParameterSet ps;
    ps.add("classifier.weights", diff::Tensor(1, weights_.size(), weights_));
    ps.add("classifier.bias", diff::Tensor::scalar(bias_));
    return ps;
  }
  static AlignmentClassifier from_parameters(const diff::ParameterSet& ps) {
    const auto& w = ps.at("classifier.weights").value;
    return AlignmentClassifier(std::vector<double>(w.values().begin(), w.values().end()),
                               ps.at("classifier.bias").value.item());
  }

  friend bool operator==(const AlignmentClassifier&, const AlignmentClassifier&) = default;

 private:
  std::vector<double> weights_;
  double bias_ = 0.0;
};

struct TrainOptions {
  int epochs = 200;
  double lr = 1.0;
  std::uint64_t seed = 0;
};

namespace detail {

struct Design {
  diff::Tensor features;  // N x 2d
  diff::Tensor labels;    // N x 1
  diff::Tensor weights;   // N x 1, inverse class frequency
};

inline Design make_design(std::span<const LabeledPair> pairs) {
  const std::size_t n = pairs.size();
  const std::size_t d = pairs.front().sentence.size();
  Design des{diff::Tensor(n, 2 * d), diff::Tensor(n, 1), diff::Tensor(n, 1)};
  std::size_t positives = 0;
  for (const auto& p : pairs) positives += p.label == 1;
  const std::size_t negatives = n - positives;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = pairs[i];
    if (p.sentence.size() != d || p.image.size() != d) throw DataError("inconsistent embedding dims in pairs");
    for (std::size_t k = 0; k < d; ++k) {
      des.features(i, k) = p.sentence[k];
      des.features(i, d + k) = p.image[k];
    }
    des.labels(i, 0) = p.label;
    des.weights(i, 0) = p.label == 1 ? static_cast<double>(n) / (2.0 * static_cast<double>(positives))
                                     : static_cast<double>(n) / (2.0 * static_cast<double>(negatives));
  }
  return des;
}

}  // namespace detail

/// Class-weighted mean binary cross-entropy of a logistic model, as a graph node.
inline diff::Var weighted_bce(diff::Graph& g, diff::Var w, diff::Var b, const diff::Tensor& features,
                              const diff::Tensor& labels, const diff::Tensor& weights) {
  using namespace diff;
  Var z = add(matmul(g.constant(features), w), b);
  Tensor pos_w(labels.rows(), 1), neg_w(labels.rows(), 1);
  for (std::size_t i = 0; i < labels.rows(); ++i) {
    pos_w[i] = weights[i] * labels[i];
    neg_w[i] = weights[i] * (1.0 - labels[i]);
  }
  Var loss = add(mul(g.constant(pos_w), softplus(scale(z, -1.0))), mul(g.constant(neg_w), softplus(z)));
  return scale(sum(loss), 1.0 / static_cast<double>(labels.rows()));
}

/// Fits the classifier by full-batch gradient descent with backtracking, so
/// the training loss never increases between epochs.
inline AlignmentClassifier train_classifier(std::span<const LabeledPair> pairs, const TrainOptions& options,
                                            std::vector<double>* loss_history = nullptr) {
  if (pairs.empty()) throw DataError("no training pairs");
  const bool has_pos = std::any_of(pairs.begin(), pairs.end(), [](const auto& p) { return p.label == 1; });
  const bool has_neg = std::any_of(pairs.begin(), pairs.end(), [](const auto& p) { return p.label == 0; });
  if (!has_pos || !has_neg) throw DataError("degenerate labels");
  const auto des = detail::make_design(pairs);
  const std::size_t width = des.features.cols();

  diff::ParameterSet ps;
  {
    std::mt19937_64 rng(options.seed);
    std::normal_distribution<double> init(0.0, 0.01);
    diff::Tensor w(width, 1);
    for (auto& v : w.values()) v = init(rng);
    ps.add("w", std::move(w));
    ps.add("b", diff::Tensor::scalar(0.0));
  }
  auto loss_value = [&](diff::ParameterSet& p) {
    diff::Graph g = diff::Graph::inference();
    return g.value(weighted_bce(g, g.parameter(p, "w"), g.parameter(p, "b"), des.features, des.labels, des.weights))
        .item();
  };

  double current = loss_value(ps);
  if (loss_history) loss_history->push_back(current);
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    ps.zero_grad();
    {
      diff::Graph g;
      g.backward(weighted_bce(g, g.parameter(ps, "w"), g.parameter(ps, "b"), des.features, des.labels, des.weights));
    }
    double step = options.lr;
    bool improved = false;
    for (int tries = 0; tries < 40 && !improved; ++tries, step *= 0.5) {
      diff::ParameterSet trial;
      for (const auto& [name, p] : ps) {
        diff::Tensor v = p.value;
        for (std::size_t k = 0; k < v.size(); ++k) v[k] -= step * p.grad[k];
        trial.add(name, std::move(v));
      }
      const double l = loss_value(trial);
      if (l <= current) {
        for (auto& [name, p] : ps) p.value = trial.at(name).value;
        current = l;
        improved = true;
      }
    }
    if (loss_history) loss_history->push_back(current);
    if (!improved) break;
  }
  const auto& w = ps.at("w").value;
  return AlignmentClassifier(std::vector<double>(w.values().begin(), w.values().end()), ps.at("b").value.item());
}

/// Area under the ROC curve via the rank statistic (ties count one half).
inline double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DataError("score/label count mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) {
        pos_rank_sum += avg_rank;
        ++pos;
      }
    i = j;
  }
  const std::size_t neg = scores.size() - pos;
  if (pos == 0 || neg == 0) throw DataError("AUC needs both labels");
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

inline double f1_at(std::span<const double> scores, std::span<const int> labels, double threshold) {
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= threshold;
    if (predicted && labels[i] == 1) ++tp;
    else if (predicted) ++fp;
    else if (labels[i] == 1) ++fn;
  }
  if (tp == 0) return 0.0;
  const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  const double recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  return 2.0 * precision * recall / (precision + recall);
}

struct ClassifierEval {
  double auc = 0.0;
  double f1 = 0.0;
};

inline ClassifierEval eval_classifier(const AlignmentClassifier& clf, std::span<const LabeledPair> held_out) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& p : held_out) {
    scores.push_back(clf.score(p.sentence, p.image));
    labels.push_back(p.label);
  }
  const bool has_pos = std::find(labels.begin(), labels.end(), 1) != labels.end();
  const bool has_neg = std::find(labels.begin(), labels.end(), 0) != labels.end();
  if (!has_pos || !has_neg) throw DataError("held-out set needs both labels");
  return {auc(scores, labels), f1_at(scores, labels, 0.5)};
}

/// A review pre-segmented into sentences, with the images attached to it.
struct RawReview {
  std::string review_id;
  std::string user_id;
  std::string business_id;
  std::vector<std::string> sentence_ids;
  std::vector<std::string> image_ids;
};

struct ExplanationPair {
  std::string review_id;
  std::size_t sentence_idx = 0;
  std::string image_id;
  double score = 0.0;
};

/// Every (sentence, image) pair of the review scoring at least `threshold`,
/// in sentence-major order.
inline std::vector<ExplanationPair> distill_review(const RawReview& review, double threshold,
                                                   const AlignmentClassifier& clf, const EmbeddingStore& sentences,
                                                   const EmbeddingStore& images) {
  std::vector<ExplanationPair> kept;
  for (std::size_t s = 0; s < review.sentence_ids.size(); ++s) {
    auto sv = sentences.resolve({review.sentence_ids[s], EmbeddingKind::kSentence});
    for (const auto& image_id : review.image_ids) {
      auto iv = images.resolve({image_id, EmbeddingKind::kImage});
      const double sc = clf.score(sv, iv);
      if (sc >= threshold) kept.push_back({review.review_id, s, image_id, sc});
    }
  }
  return kept;
}

}  // namespace showcase::distill
