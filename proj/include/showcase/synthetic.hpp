#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "showcase/binary_io.hpp"
#include "showcase/dataset.hpp"
#include "showcase/embedding_store.hpp"
#include "showcase/tokenizer.hpp"

namespace showcase::fixture {

struct FixtureOptions {
  std::size_t users = 24;
  std::size_t reviews_per_user = 6;
  std::size_t dim = 16;
  std::size_t pool = 12;
  std::size_t annotate_every = 3;  // every n-th review contributes annotated pairs
  std::uint64_t seed = 0;
};

struct Dish {
  std::string name;
  std::size_t cuisine;
  std::vector<std::string> adjectives;
};

inline const std::vector<Dish>& dishes() {
  static const std::vector<Dish> d = {
      {"sushi", 0, {"fresh", "delicate", "buttery"}},      {"ramen", 0, {"rich", "savory", "hearty"}},
      {"tempura", 0, {"crispy", "light", "golden"}},       {"burger", 1, {"juicy", "smoky", "cheesy"}},
      {"fried chicken", 1, {"crispy", "juicy", "golden"}}, {"milkshake", 1, {"creamy", "sweet", "thick"}},
      {"tacos", 2, {"spicy", "tangy", "fresh"}},           {"burrito", 2, {"hearty", "cheesy", "huge"}},
      {"nachos", 2, {"cheesy", "crunchy", "loaded"}},      {"pizza", 3, {"cheesy", "crispy", "smoky"}},
      {"lasagna", 3, {"rich", "cheesy", "hearty"}},        {"tiramisu", 3, {"creamy", "sweet", "light"}},
      {"pad thai", 4, {"tangy", "savory", "nutty"}},       {"green curry", 4, {"spicy", "creamy", "fragrant"}},
      {"spring rolls", 4, {"crunchy", "fresh", "light"}},
  };
  return d;
}

inline constexpr std::size_t kCuisines = 5;
inline constexpr std::size_t kBusinessesPerCuisine = 2;

inline const std::vector<std::string>& sides() {
  static const std::vector<std::string> v = {"rice", "sauce", "salad", "broth", "bread", "salsa"};
  return v;
}
inline const std::vector<std::string>& adverbs() {
  static const std::vector<std::string> v = {"really", "perfectly", "incredibly", "super", "very"};
  return v;
}
inline const std::vector<std::string>& generic_sentences() {
  static const std::vector<std::string> v = {
      "the staff was friendly .",          "we waited a long time for a table .",
      "parking was easy .",                "i will come back soon .",
      "the place was busy on a friday night .", "prices are fair .",
      "service was slow but polite .",     "the music was loud .",
      "our server was attentive .",        "it is a good spot for groups .",
  };
  return v;
}
inline const std::set<std::string>& function_words() {
  static const std::set<std::string> v = {"the", "was", "a", "and", "i", "with", "is", "their", ".", "it",
                                          "for", "of", "we", "on", "but", "are", "to", "our", "loved"};
  return v;
}

namespace detail {

inline std::vector<double> gaussian(std::size_t d, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, scale / std::sqrt(static_cast<double>(d)));
  std::vector<double> v(d);
  for (auto& x : v) x = n(rng);
  return v;
}

inline std::vector<double> unit(std::size_t d, std::mt19937_64& rng) {
  auto v = gaussian(d, 1.0, rng);
  double n = 0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (auto& x : v) x /= n;
  return v;
}

inline void axpy(std::vector<double>& y, double a, const std::vector<double>& x) {
  for (std::size_t k = 0; k < y.size(); ++k) y[k] += a * x[k];
}

template <typename T>
const T& pick(const std::vector<T>& v, std::mt19937_64& rng) {
  return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

inline std::vector<pc2l::EntitySpan> find_entity(const std::vector<std::string>& tokens, const std::string& entity) {
  const auto et = tokenize(entity);
  for (std::size_t i = 0; i + et.size() <= tokens.size(); ++i)
    if (std::equal(et.begin(), et.end(), tokens.begin() + static_cast<std::ptrdiff_t>(i)))
      return {{i, i + et.size(), entity}};
  return {};
}

inline std::string descriptive_sentence(const Dish& dish, std::mt19937_64& rng) {
  const auto& a1 = pick(dish.adjectives, rng);
  std::string a2 = pick(dish.adjectives, rng);
  if (a2 == a1) a2 = dish.adjectives[(std::find(dish.adjectives.begin(), dish.adjectives.end(), a1) -
                                      dish.adjectives.begin() + 1) % dish.adjectives.size()];
  const auto& adv = pick(adverbs(), rng);
  const auto& side = pick(sides(), rng);
  switch (std::uniform_int_distribution<int>(0, 3)(rng)) {
    case 0: return "the " + dish.name + " was " + adv + " " + a1 + " .";
    case 1: return adv + " " + a1 + " " + dish.name + " with " + side + " .";
    case 2: return "i loved the " + a1 + " " + dish.name + " and the " + side + " .";
    default: return "their " + dish.name + " is " + a1 + " and " + a2 + " .";
  }
}

}  // namespace detail

/// Keyword classes annotated for the fixture vocabulary.
inline data::KeywordLexicon fixture_keywords() {
  data::KeywordLexicon lex;
  for (const auto& d : dishes())
    for (const auto& t : tokenize(d.name)) lex["noun"].insert(t);
  for (const auto& s : sides()) lex["noun"].insert(s);
  for (const auto& d : dishes())
    for (const auto& a : d.adjectives) lex["adj"].insert(a);
  for (const auto& a : adverbs()) lex["adv"].insert(a);
  return lex;
}

/// Text of the pipeline config written next to a generated fixture.
inline std::string fixture_config(std::uint64_t seed) {
  return "[paths]\n"
         "images = images.json\n"
         "sentences = sentences.json\n"
         "review_texts = review_texts.json\n"
         "word_vectors = word_vectors.json\n"
         "reviews = reviews.jsonl\n"
         "annotated_pairs = annotated_pairs.jsonl\n"
         "interactions = interactions.jsonl\n"
         "keywords = keywords.json\n"
         "\n[run]\n"
         "seed = " + std::to_string(seed) + "\n"
         "\n[distill]\n"
         "threshold = 0.5\n"
         "\n[select]\n"
         "k = 3\n"
         "hidden = 32,16\n"
         "epochs = 200\n"
         "lr = 0.001\n"
         "batch = 512\n"
         "\n[model]\n"
         "hidden = 64\n"
         "heads = 4\n"
         "enc_layers = 2\n"
         "dec_layers = 2\n"
         "proj_dim = 32\n"
         "\n[train]\n"
         "loss_mode = ce+ccl+pcl\n"
         "lr = 0.001\n"
         "batch = 32\n"
         "epochs = 40\n"
         "\n[generate]\n"
         "beam = 2\n"
         "max_len = 64\n";
}

/// Writes a seeded synthetic dataset (embedding stores, reviews, annotated
/// pairs, interactions, keyword lexicon) plus a pipeline config into `dir`.
///
/// Images are dish centres plus a shared "visual" direction, a per-user style
/// vector and noise; the style is what makes selection learnable from a user
/// profile. Word vectors put dish words and adjectives along the visual
/// direction and generic review words against it, so descriptive and generic
/// sentences are linearly separable under the bag-of-words encoder.
inline void write_fixture(const std::filesystem::path& dir, const FixtureOptions& o) {
  if (o.users == 0 || o.reviews_per_user < 2) throw UsageError("fixture needs users and at least 2 reviews per user");
  if (o.reviews_per_user > kCuisines * kBusinessesPerCuisine)
    throw UsageError("fixture has only " + std::to_string(kCuisines * kBusinessesPerCuisine) + " businesses");
  std::filesystem::create_directories(dir);
  std::mt19937_64 rng(o.seed);
  const std::size_t D = o.dim;
  const auto visual = detail::unit(D, rng);
  std::vector<std::vector<double>> centre;
  for (std::size_t i = 0; i < dishes().size(); ++i) centre.push_back(detail::unit(D, rng));

  // Word vectors.
  std::map<std::string, std::vector<double>> words;
  auto add_word = [&](const std::string& w, std::vector<double> v) { words.try_emplace(w, std::move(v)); };
  for (std::size_t i = 0; i < dishes().size(); ++i)
    for (const auto& t : tokenize(dishes()[i].name)) {
      auto v = detail::gaussian(D, 0.2, rng);
      detail::axpy(v, 1.0, centre[i]);
      detail::axpy(v, 1.0, visual);
      add_word(t, v);
    }
  std::map<std::string, std::vector<std::size_t>> adj_dishes;
  for (std::size_t i = 0; i < dishes().size(); ++i)
    for (const auto& a : dishes()[i].adjectives) adj_dishes[a].push_back(i);
  for (const auto& [a, ds] : adj_dishes) {
    auto v = detail::gaussian(D, 0.2, rng);
    detail::axpy(v, 1.0, visual);
    for (std::size_t i : ds) detail::axpy(v, 0.5 / static_cast<double>(ds.size()), centre[i]);
    add_word(a, v);
  }
  for (const auto* list : {&sides(), &adverbs()})
    for (const auto& w : *list) {
      auto v = detail::gaussian(D, 0.3, rng);
      detail::axpy(v, 0.5, visual);
      add_word(w, v);
    }
  for (const auto& w : function_words()) add_word(w, detail::gaussian(D, 0.3, rng));
  for (const auto& s : generic_sentences())
    for (const auto& t : tokenize(s)) {
      if (words.contains(t)) continue;
      auto v = detail::gaussian(D, 0.3, rng);
      detail::axpy(v, -1.0, visual);
      add_word(t, v);
    }
  auto embed = [&](const std::vector<std::string>& tokens) {
    std::vector<double> acc(D, 0.0);
    for (const auto& t : tokens) detail::axpy(acc, 1.0 / static_cast<double>(tokens.size()), words.at(t));
    return acc;
  };

  // Businesses and users.
  const std::size_t n_business = kCuisines * kBusinessesPerCuisine;
  std::vector<std::vector<double>> style;
  std::vector<std::vector<std::size_t>> favourite;  // per user, per cuisine
  for (std::size_t u = 0; u < o.users; ++u) {
    style.push_back(detail::unit(D, rng));
    std::vector<std::size_t> fav;
    for (std::size_t c = 0; c < kCuisines; ++c) fav.push_back(c * 3 + std::uniform_int_distribution<std::size_t>(0, 2)(rng));
    favourite.push_back(fav);
  }
  auto pad = [](std::size_t i, int w) {
    std::string s = std::to_string(i);
    return std::string(static_cast<std::size_t>(std::max(0, w - static_cast<int>(s.size()))), '0') + s;
  };

  std::vector<data::ReviewRow> reviews;
  std::vector<std::string> image_ids, sentence_ids;
  std::vector<float> image_data, sentence_data, review_data;
  std::vector<std::size_t> image_dish;
  std::vector<std::string> review_ids;
  std::vector<data::PairRow> pairs;
  std::vector<std::vector<std::size_t>> user_reviews(o.users);
  std::normal_distribution<double> unit_normal(0.0, 1.0);
  for (std::size_t u = 0; u < o.users; ++u) {
    std::vector<std::size_t> biz(n_business);
    std::iota(biz.begin(), biz.end(), 0);
    std::shuffle(biz.begin(), biz.end(), rng);
    biz.resize(o.reviews_per_user);
    for (std::size_t b : biz) {
      const std::size_t cuisine = b / kBusinessesPerCuisine;
      data::ReviewRow r;
      r.review_id = "r" + pad(reviews.size(), 4);
      r.user_id = "u" + pad(u, 3);
      r.business_id = "b" + pad(b, 2);
      const std::size_t n_img = std::uniform_int_distribution<std::size_t>(2, 4)(rng);
      std::vector<std::size_t> shown;
      for (std::size_t k = 0; k < n_img; ++k) {
        const std::size_t dish = std::bernoulli_distribution(0.6)(rng)
                                     ? favourite[u][cuisine]
                                     : cuisine * 3 + std::uniform_int_distribution<std::size_t>(0, 2)(rng);
        auto v = detail::gaussian(D, 0.3, rng);
        detail::axpy(v, 1.0, centre[dish]);
        detail::axpy(v, 1.0, visual);
        detail::axpy(v, 0.8, style[u]);
        const std::string id = r.review_id + ".i" + std::to_string(k);
        image_ids.push_back(id);
        image_dish.push_back(dish);
        for (double x : v) image_data.push_back(static_cast<float>(x));
        r.image_ids.push_back(id);
        shown.push_back(dish);
      }
      std::vector<std::size_t> unique_dishes;
      for (std::size_t d : shown)
        if (std::find(unique_dishes.begin(), unique_dishes.end(), d) == unique_dishes.end()) unique_dishes.push_back(d);
      struct Draft {
        std::string text;
        std::optional<std::size_t> dish;
      };
      std::vector<Draft> drafts;
      for (std::size_t d : unique_dishes) drafts.push_back({detail::descriptive_sentence(dishes()[d], rng), d});
      const std::size_t n_generic = std::uniform_int_distribution<std::size_t>(1, 2)(rng);
      for (std::size_t k = 0; k < n_generic; ++k) drafts.push_back({detail::pick(generic_sentences(), rng), std::nullopt});
      std::shuffle(drafts.begin(), drafts.end(), rng);
      std::vector<std::string> all_tokens;
      const bool annotated = o.annotate_every > 0 && reviews.size() % o.annotate_every == 0;
      for (std::size_t s = 0; s < drafts.size(); ++s) {
        data::SentenceRow row;
        row.id = r.review_id + ".s" + std::to_string(s);
        row.text = drafts[s].text;
        const auto tokens = tokenize(row.text);
        if (drafts[s].dish) row.entities = detail::find_entity(tokens, dishes()[*drafts[s].dish].name);
        all_tokens.insert(all_tokens.end(), tokens.begin(), tokens.end());
        for (double x : embed(tokens)) sentence_data.push_back(static_cast<float>(x));
        sentence_ids.push_back(row.id);
        if (annotated)
          for (std::size_t k = 0; k < r.image_ids.size(); ++k) {
            if (!drafts[s].dish) pairs.push_back({row.id, r.image_ids[k], 0});
            else if (shown[k] == *drafts[s].dish) pairs.push_back({row.id, r.image_ids[k], 1});
          }
        r.sentences.push_back(std::move(row));
      }
      for (double x : embed(all_tokens)) review_data.push_back(static_cast<float>(x));
      review_ids.push_back(r.review_id);
      user_reviews[u].push_back(reviews.size());
      reviews.push_back(std::move(r));
    }
  }

  // Selection interactions: pool = the review's own images plus other
  // images of the same business.
  std::map<std::string, std::vector<std::string>> business_images;
  for (const auto& r : reviews)
    for (const auto& id : r.image_ids) business_images[r.business_id].push_back(id);
  std::vector<data::InteractionRow> interactions;
  for (std::size_t u = 0; u < o.users; ++u)
    for (std::size_t k = 0; k < user_reviews[u].size(); ++k) {
      const auto& r = reviews[user_reviews[u][k]];
      data::InteractionRow x;
      x.user_id = r.user_id;
      x.business_id = r.business_id;
      x.split = k + 1 == user_reviews[u].size() ? "test" : "train";
      for (std::size_t other : user_reviews[u]) {
        if (other == user_reviews[u][k]) continue;
        x.profile_reviews.push_back(reviews[other].review_id);
        for (const auto& id : reviews[other].image_ids) x.profile_images.push_back(id);
      }
      x.ground_truth = r.image_ids;
      std::vector<std::string> others;
      for (const auto& id : business_images[r.business_id])
        if (std::find(r.image_ids.begin(), r.image_ids.end(), id) == r.image_ids.end()) others.push_back(id);
      std::shuffle(others.begin(), others.end(), rng);
      x.candidates = r.image_ids;
      for (const auto& id : others)
        if (x.candidates.size() < std::max(o.pool, r.image_ids.size())) x.candidates.push_back(id);
      std::shuffle(x.candidates.begin(), x.candidates.end(), rng);
      interactions.push_back(std::move(x));
    }

  std::vector<std::string> word_ids;
  std::vector<float> word_data;
  for (const auto& [w, v] : words) {
    word_ids.push_back(w);
    for (double x : v) word_data.push_back(static_cast<float>(x));
  }
  EmbeddingStore(EmbeddingKind::kImage, D, image_ids, image_data).save(dir / "images.json");
  EmbeddingStore(EmbeddingKind::kSentence, D, sentence_ids, sentence_data).save(dir / "sentences.json");
  EmbeddingStore(EmbeddingKind::kReviewText, D, review_ids, review_data).save(dir / "review_texts.json");
  EmbeddingStore(EmbeddingKind::kSentence, D, word_ids, word_data).save(dir / "word_vectors.json");
  data::write_jsonl(dir / "reviews.jsonl", reviews);
  data::write_jsonl(dir / "annotated_pairs.jsonl", pairs);
  data::write_jsonl(dir / "interactions.jsonl", interactions);
  io::write_text(dir / "keywords.json", nlohmann::json(fixture_keywords()).dump(2) + "\n");
  io::write_text(dir / "config.ini", fixture_config(o.seed));
}

}  // namespace showcase::fixture
