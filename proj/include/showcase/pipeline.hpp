#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include "showcase/checkpoint.hpp"
#include "showcase/dataset.hpp"
#include "showcase/distill.hpp"
#include "showcase/dpp.hpp"
#include "showcase/embedding_store.hpp"
#include "showcase/error.hpp"
#include "showcase/metrics.hpp"
#include "showcase/model.hpp"
#include "showcase/pc2l.hpp"
#include "showcase/synthetic.hpp"
#include "showcase/tokenizer.hpp"

namespace showcase::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

struct PipelineConfig {
  fs::path base;  // directory relative paths are resolved against

  std::map<std::string, std::string> paths;  // images, sentences, review_texts, ...
  std::uint64_t seed = 0;

  double distill_threshold = 0.5;
  int distill_epochs = 200;
  double distill_lr = 1.0;

  std::size_t k = 3;
  std::vector<std::size_t> select_hidden{32, 16};
  int select_epochs = 100;
  double select_lr = 1e-3;
  std::size_t select_batch = 512;
  std::size_t random_trials = 1000;
  std::string select_split = "test";

  model::ModelConfig model;

  pc2l::LossMode loss_mode = pc2l::LossMode::kCeCclPcl;
  double train_lr = 1e-4;
  std::size_t train_batch = 32;
  int train_epochs = 1;
  std::size_t max_steps = 0;
  double weight_decay = 0.0;
  std::size_t min_count = 1;

  std::size_t beam = 2;
  std::size_t max_len = model::kMaxLen;

  bool has_path(const std::string& key) const { return paths.contains(key) && !paths.at(key).empty(); }

  fs::path path(const std::string& key) const {
    auto it = paths.find(key);
    if (it == paths.end() || it->second.empty()) throw UsageError("config is missing paths." + key);
    const fs::path p(it->second);
    return p.is_absolute() ? p : base / p;
  }

  json snapshot() const {
    json p = json::object();
    for (const auto& [k2, v] : paths) p[k2] = v;
    json m = model;
    m.erase("vocab");
    m.erase("image_dim");
    m.erase("review_dim");
    return {{"paths", p},
            {"run", {{"seed", seed}}},
            {"distill", {{"threshold", distill_threshold}, {"epochs", distill_epochs}, {"lr", distill_lr}}},
            {"select",
             {{"k", k},
              {"hidden", select_hidden},
              {"epochs", select_epochs},
              {"lr", select_lr},
              {"batch", select_batch},
              {"random_trials", random_trials},
              {"split", select_split}}},
            {"model", m},
            {"train",
             {{"loss_mode", pc2l::to_string(loss_mode)},
              {"lr", train_lr},
              {"batch", train_batch},
              {"epochs", train_epochs},
              {"max_steps", max_steps},
              {"weight_decay", weight_decay},
              {"min_count", min_count}}},
            {"generate", {{"beam", beam}, {"max_len", max_len}}}};
  }
};

namespace detail {

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  std::istringstream in(text);
  T v{};
  if constexpr (std::is_unsigned_v<T>) {
    if (text.find('-') != std::string::npos) throw UsageError("bad value for " + key + ": '" + text + "'");
  }
  in >> v;
  if (!in || !(in >> std::ws).eof()) throw UsageError("bad value for " + key + ": '" + text + "'");
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(v)) throw UsageError("bad value for " + key + ": '" + text + "'");
  }
  return v;
}

inline std::vector<std::size_t> parse_widths(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  for (std::string part; std::getline(ss, part, ',');) {
    const auto b = part.find_first_not_of(" \t");
    const auto e = part.find_last_not_of(" \t");
    if (b == std::string::npos) throw UsageError("bad value for " + key + ": '" + text + "'");
    const auto w = parse_number<std::size_t>(key, part.substr(b, e - b + 1));
    if (w == 0) throw UsageError("bad value for " + key + ": widths must be positive");
    out.push_back(w);
  }
  if (out.empty()) throw UsageError("bad value for " + key + ": need at least one width");
  return out;
}

}  // namespace detail

inline const std::vector<std::string>& path_keys() {
  static const std::vector<std::string> k = {"images",       "sentences",    "review_texts", "word_vectors",
                                             "reviews",      "annotated_pairs", "interactions", "keywords",
                                             "vocab",        "entities"};
  return k;
}

/// Applies one `section.key = value` setting.
inline void apply_setting(PipelineConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_number;
  const auto dot = key.find('.');
  const std::string section = key.substr(0, dot);
  const std::string name = dot == std::string::npos ? "" : key.substr(dot + 1);
  if (section == "paths" && std::find(path_keys().begin(), path_keys().end(), name) != path_keys().end()) {
    c.paths[name] = value;
    return;
  }
  static const std::map<std::string, std::function<void(PipelineConfig&, const std::string&, const std::string&)>>
      table = {
          {"run.seed", [](auto& c2, auto& k2, auto& v) { c2.seed = parse_number<std::uint64_t>(k2, v); }},
          {"distill.threshold", [](auto& c2, auto& k2, auto& v) { c2.distill_threshold = parse_number<double>(k2, v); }},
          {"distill.epochs", [](auto& c2, auto& k2, auto& v) { c2.distill_epochs = parse_number<int>(k2, v); }},
          {"distill.lr", [](auto& c2, auto& k2, auto& v) { c2.distill_lr = parse_number<double>(k2, v); }},
          {"select.k", [](auto& c2, auto& k2, auto& v) { c2.k = parse_number<std::size_t>(k2, v); }},
          {"select.hidden", [](auto& c2, auto& k2, auto& v) { c2.select_hidden = detail::parse_widths(k2, v); }},
          {"select.epochs", [](auto& c2, auto& k2, auto& v) { c2.select_epochs = parse_number<int>(k2, v); }},
          {"select.lr", [](auto& c2, auto& k2, auto& v) { c2.select_lr = parse_number<double>(k2, v); }},
          {"select.batch", [](auto& c2, auto& k2, auto& v) { c2.select_batch = parse_number<std::size_t>(k2, v); }},
          {"select.random_trials",
           [](auto& c2, auto& k2, auto& v) { c2.random_trials = parse_number<std::size_t>(k2, v); }},
          {"select.split",
           [](auto& c2, auto& k2, auto& v) {
             if (v != "train" && v != "test" && v != "all") throw UsageError("bad value for " + k2 + ": '" + v + "'");
             c2.select_split = v;
           }},
          {"model.hidden", [](auto& c2, auto& k2, auto& v) { c2.model.hidden = parse_number<std::size_t>(k2, v); }},
          {"model.heads", [](auto& c2, auto& k2, auto& v) { c2.model.heads = parse_number<std::size_t>(k2, v); }},
          {"model.enc_layers",
           [](auto& c2, auto& k2, auto& v) { c2.model.enc_layers = parse_number<std::size_t>(k2, v); }},
          {"model.dec_layers",
           [](auto& c2, auto& k2, auto& v) { c2.model.dec_layers = parse_number<std::size_t>(k2, v); }},
          {"model.ffn", [](auto& c2, auto& k2, auto& v) { c2.model.ffn = parse_number<std::size_t>(k2, v); }},
          {"model.proj_dim", [](auto& c2, auto& k2, auto& v) { c2.model.proj_dim = parse_number<std::size_t>(k2, v); }},
          {"model.max_len", [](auto& c2, auto& k2, auto& v) { c2.model.max_len = parse_number<std::size_t>(k2, v); }},
          {"model.tau", [](auto& c2, auto& k2, auto& v) { c2.model.tau = parse_number<double>(k2, v); }},
          {"model.lambda1", [](auto& c2, auto& k2, auto& v) { c2.model.lambda1 = parse_number<double>(k2, v); }},
          {"model.lambda2", [](auto& c2, auto& k2, auto& v) { c2.model.lambda2 = parse_number<double>(k2, v); }},
          {"model.alpha", [](auto& c2, auto& k2, auto& v) { c2.model.alpha = parse_number<double>(k2, v); }},
          {"model.init_std", [](auto& c2, auto& k2, auto& v) { c2.model.init_std = parse_number<double>(k2, v); }},
          {"train.loss_mode", [](auto& c2, auto&, auto& v) { c2.loss_mode = pc2l::parse_loss_mode(v); }},
          {"train.lr", [](auto& c2, auto& k2, auto& v) { c2.train_lr = parse_number<double>(k2, v); }},
          {"train.batch", [](auto& c2, auto& k2, auto& v) { c2.train_batch = parse_number<std::size_t>(k2, v); }},
          {"train.epochs", [](auto& c2, auto& k2, auto& v) { c2.train_epochs = parse_number<int>(k2, v); }},
          {"train.max_steps", [](auto& c2, auto& k2, auto& v) { c2.max_steps = parse_number<std::size_t>(k2, v); }},
          {"train.weight_decay", [](auto& c2, auto& k2, auto& v) { c2.weight_decay = parse_number<double>(k2, v); }},
          {"train.min_count", [](auto& c2, auto& k2, auto& v) { c2.min_count = parse_number<std::size_t>(k2, v); }},
          {"generate.beam", [](auto& c2, auto& k2, auto& v) { c2.beam = parse_number<std::size_t>(k2, v); }},
          {"generate.max_len", [](auto& c2, auto& k2, auto& v) { c2.max_len = parse_number<std::size_t>(k2, v); }},
      };
  auto it = table.find(key);
  if (it == table.end()) throw UsageError("unknown config key: " + key);
  it->second(c, key, value);
}

inline void validate(const PipelineConfig& c) {
  if (!(c.distill_threshold >= 0.0 && c.distill_threshold <= 1.0)) throw UsageError("distill.threshold must be in [0, 1]");
  if (c.k == 0) throw UsageError("select.k must be positive");
  if (c.select_batch == 0 || c.train_batch == 0) throw UsageError("batch sizes must be positive");
  if (c.beam == 0) throw UsageError("generate.beam must be positive");
  if (c.max_len == 0 || c.max_len > model::kMaxLen) throw UsageError("generate.max_len must be in [1, 64]");
  if (!(c.train_lr > 0.0) || !(c.select_lr > 0.0) || !(c.distill_lr > 0.0)) throw UsageError("learning rates must be positive");
}

/// Reads an INI-style config (`[section]` headers, `key = value` lines).
/// Relative paths are taken relative to the config file's directory.
inline PipelineConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw UsageError("config file not found: " + path.string());
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw UsageError("malformed config " + path.string() + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  PipelineConfig c;
  c.base = path.parent_path();
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw UsageError("config key outside a section: " + section);
    for (const auto& [key, value] : body) apply_setting(c, section + "." + key, value.get_value<std::string>());
  }
  validate(c);
  return c;
}

// ---------------------------------------------------------------------------
// Run manifests.

inline std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error(ExitCode::kData, "sha256 init failed");
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

inline std::string utc_timestamp(std::chrono::system_clock::time_point t) {
  const std::time_t tt = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Records the inputs and outputs of one command and writes
/// `<out>/manifests/<command>.json` on finish.
class RunManifest {
 public:
  RunManifest(std::string command, json config, fs::path out)
      : command_(std::move(command)), config_(std::move(config)), out_(std::move(out)),
        start_(std::chrono::system_clock::now()), steady_(std::chrono::steady_clock::now()) {}

  void input(const fs::path& p) { inputs_.push_back(p); }
  /// An embedding store or checkpoint: the JSON manifest plus its blob.
  void input_blob(const fs::path& p) {
    input(p);
    input(io::blob_path(p));
  }
  void output(const fs::path& p) { outputs_.push_back(p); }
  void output_blob(const fs::path& p) {
    output(p);
    output(io::blob_path(p));
  }
  void note(const std::string& key, json value) { notes_[key] = std::move(value); }

  fs::path finish() {
    auto list = [&](const std::vector<fs::path>& ps) {
      json a = json::array();
      for (const auto& p : ps) a.push_back({{"path", display(p)}, {"sha256", sha256_file(p)}});
      return a;
    };
    const auto end = std::chrono::system_clock::now();
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - steady_).count();
    json m = {{"command", command_},   {"config", config_},          {"inputs", list(inputs_)},
              {"outputs", list(outputs_)}, {"notes", notes_},          {"started_at", utc_timestamp(start_)},
              {"finished_at", utc_timestamp(end)}, {"wall_seconds", wall}};
    fs::create_directories(out_ / "manifests");
    const fs::path path = out_ / "manifests" / (command_ + ".json");
    io::write_text(path, m.dump(2) + "\n");
    return path;
  }

 private:
  std::string display(const fs::path& p) const {
    const auto rel = fs::weakly_canonical(p).lexically_relative(fs::weakly_canonical(out_));
    if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
    return p.filename().generic_string();
  }

  std::string command_;
  json config_;
  fs::path out_;
  std::chrono::system_clock::time_point start_;
  std::chrono::steady_clock::time_point steady_;
  std::vector<fs::path> inputs_, outputs_;
  json notes_ = json::object();
};

// ---------------------------------------------------------------------------
// Shared data plumbing.

inline void require_inputs(const std::vector<fs::path>& paths) {
  for (const auto& p : paths)
    if (!fs::exists(p)) throw DataError("missing input: " + p.string());
}

inline void log(const std::string& command, const std::string& message) {
  std::clog << "[" << command << "] " << message << '\n';
}

inline void write_json(const fs::path& path, const json& j) { io::write_text(path, j.dump(2) + "\n"); }

inline std::vector<std::span<const float>> rows_of(const EmbeddingStore& store, const std::vector<std::string>& ids) {
  std::vector<std::span<const float>> out;
  for (const auto& id : ids) out.push_back(store.row(store.index_of(id)));
  return out;
}

inline diff::Tensor tensor_of(const std::vector<std::span<const float>>& rows, std::size_t dim) {
  diff::Tensor t(rows.size(), dim);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != dim) throw DataError("embedding dim mismatch");
    for (std::size_t k = 0; k < dim; ++k) t(i, k) = rows[i][k];
  }
  return t;
}

using UserBusiness = std::pair<std::string, std::string>;

/// Reviews indexed by (user, business); duplicates are rejected.
inline std::map<UserBusiness, std::size_t> index_reviews(const std::vector<data::ReviewRow>& reviews) {
  std::map<UserBusiness, std::size_t> idx;
  for (std::size_t i = 0; i < reviews.size(); ++i)
    if (!idx.emplace(UserBusiness{reviews[i].user_id, reviews[i].business_id}, i).second)
      throw DataError("duplicate review for user " + reviews[i].user_id + " at business " + reviews[i].business_id);
  return idx;
}

/// Up to 10 of the user's other reviews, in corpus order.
inline std::vector<std::string> history_of(const std::vector<data::ReviewRow>& reviews, const std::string& user,
                                           const std::string& exclude_business) {
  std::vector<std::string> out;
  for (const auto& r : reviews)
    if (r.user_id == user && r.business_id != exclude_business && out.size() < model::kMaxReviews)
      out.push_back(r.review_id);
  return out;
}

/// Distilled explanation of one review: its kept sentences concatenated, the
/// entity spans shifted accordingly, and the images they were kept with.
struct ExplanationRecord {
  std::string review_id;
  std::string user_id;
  std::string business_id;
  std::vector<std::string> tokens;
  std::vector<pc2l::EntitySpan> spans;
  std::vector<std::string> images;
};

inline std::vector<ExplanationRecord> explanation_records(const std::vector<data::ReviewRow>& reviews,
                                                          const std::vector<data::ExplanationRow>& kept) {
  std::map<std::string, std::pair<std::set<std::string>, std::set<std::string>>> by_review;
  for (const auto& e : kept) {
    by_review[e.review_id].first.insert(e.sentence_id);
    by_review[e.review_id].second.insert(e.image_id);
  }
  std::vector<ExplanationRecord> out;
  for (const auto& r : reviews) {
    auto it = by_review.find(r.review_id);
    if (it == by_review.end()) continue;
    ExplanationRecord rec{r.review_id, r.user_id, r.business_id, {}, {}, {}};
    for (const auto& s : r.sentences) {
      if (!it->second.first.contains(s.id)) continue;
      const auto toks = tokenize(s.text);
      for (const auto& sp : s.entities) {
        if (sp.end > toks.size() || sp.begin >= sp.end) throw DataError("entity span out of range in sentence " + s.id);
        rec.spans.push_back({sp.begin + rec.tokens.size(), sp.end + rec.tokens.size(), sp.entity});
      }
      rec.tokens.insert(rec.tokens.end(), toks.begin(), toks.end());
    }
    for (const auto& img : r.image_ids)
      if (it->second.second.contains(img) && rec.images.size() < model::kMaxImages) rec.images.push_back(img);
    out.push_back(std::move(rec));
  }
  return out;
}

inline std::set<UserBusiness> test_pairs(const std::vector<data::InteractionRow>& interactions) {
  std::set<UserBusiness> out;
  for (const auto& x : interactions)
    if (x.split == "test") out.insert({x.user_id, x.business_id});
  return out;
}

inline std::string join(const std::vector<std::string>& tokens) {
  std::string s;
  for (const auto& t : tokens) {
    if (!s.empty()) s += ' ';
    s += t;
  }
  return s;
}

inline json optional_json(const std::optional<double>& v) { return v ? json(metrics::percent(*v)) : json(nullptr); }

// ---------------------------------------------------------------------------
// Commands.

struct CommandOptions {
  fs::path out = "out";
  std::optional<pc2l::LossMode> loss_mode;  // overrides train.loss_mode
  bool random = false;                      // select: random baseline selections
  std::optional<fs::path> checkpoint;       // generate: model checkpoint
  std::optional<fs::path> showcases;        // generate: showcase list
  std::optional<fs::path> generations;      // evaluate: generations file
};

inline void cmd_fixture(const fs::path& out, std::uint64_t seed) {
  RunManifest run("fixture", {{"seed", seed}}, out);
  fixture::FixtureOptions o;
  o.seed = seed;
  fixture::write_fixture(out, o);
  for (const char* f : {"images.json", "sentences.json", "review_texts.json", "word_vectors.json"})
    run.output_blob(out / f);
  for (const char* f : {"reviews.jsonl", "annotated_pairs.jsonl", "interactions.jsonl", "keywords.json", "config.ini"})
    run.output(out / f);
  run.finish();
  log("fixture", "wrote synthetic dataset to " + out.string());
}

inline void cmd_distill(const PipelineConfig& cfg, const CommandOptions& opt) {
  const fs::path out = opt.out;
  const auto reviews_path = cfg.path("reviews"), pairs_path = cfg.path("annotated_pairs");
  const auto sent_path = cfg.path("sentences"), img_path = cfg.path("images");
  require_inputs({reviews_path, pairs_path, sent_path, img_path});
  fs::create_directories(out);
  RunManifest run("distill", cfg.snapshot(), out);
  run.input(reviews_path);
  run.input(pairs_path);
  run.input_blob(sent_path);
  run.input_blob(img_path);

  const auto reviews = data::read_jsonl<data::ReviewRow>(reviews_path);
  if (reviews.empty()) throw DataError("empty review corpus");
  const auto sentences = EmbeddingStore::load(sent_path);
  const auto images = EmbeddingStore::load(img_path);
  std::vector<distill::AlignedPair> refs;
  for (const auto& p : data::read_jsonl<data::PairRow>(pairs_path))
    refs.push_back({{p.sentence_id, EmbeddingKind::kSentence}, {p.image_id, EmbeddingKind::kImage}, p.label});
  auto pairs = distill::resolve_pairs(refs, sentences, images);
  if (pairs.empty()) throw DataError("no annotated pairs");

  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg.seed);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_train = pairs.size() * 8 / 10, n_val = pairs.size() / 10;
  std::vector<distill::LabeledPair> train, val, test;
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < n_train ? train : i < n_train + n_val ? val : test).push_back(pairs[order[i]]);
  const auto clf = distill::train_classifier(train, {cfg.distill_epochs, cfg.distill_lr, cfg.seed});
  auto evaluate = [&](const std::vector<distill::LabeledPair>& split) -> json {
    try {
      const auto e = distill::eval_classifier(clf, split);
      return {{"auc", e.auc}, {"f1", e.f1}};
    } catch (const DataError&) {
      return nullptr;
    }
  };

  std::vector<data::ExplanationRow> kept;
  std::size_t with_explanation = 0;
  for (const auto& r : reviews) {
    distill::RawReview raw{r.review_id, r.user_id, r.business_id, {}, r.image_ids};
    for (const auto& s : r.sentences) raw.sentence_ids.push_back(s.id);
    const auto pairs_kept = distill::distill_review(raw, cfg.distill_threshold, clf, sentences, images);
    with_explanation += !pairs_kept.empty();
    for (const auto& p : pairs_kept) kept.push_back({p.review_id, raw.sentence_ids[p.sentence_idx], p.image_id, p.score});
  }

  std::vector<metrics::DiversityItem> items;
  for (const auto& r : reviews)
    for (const auto& id : r.image_ids) {
      auto row = images.row(images.index_of(id));
      items.push_back({r.business_id, r.user_id, std::vector<double>(row.begin(), row.end())});
    }
  const auto div = metrics::corpus_diversity(items);

  const json report = {
      {"threshold", cfg.distill_threshold},
      {"pairs", {{"train", train.size()}, {"val", val.size()}, {"test", test.size()}}},
      {"val", evaluate(val)},
      {"test", evaluate(test)},
      {"reviews", reviews.size()},
      {"reviews_with_explanations", with_explanation},
      {"explanation_pairs", kept.size()},
      {"dataset_diversity",
       {{"intra_business", optional_json(div.intra_business)},
        {"inter_user", optional_json(div.inter_user)},
        {"intra_user", optional_json(div.intra_user)}}}};
  save_checkpoint(out / "classifier.json", clf.to_parameters(), {{"threshold", cfg.distill_threshold}});
  data::write_jsonl(out / "explanations.jsonl", kept);
  write_json(out / "distill_report.json", report);
  run.output_blob(out / "classifier.json");
  run.output(out / "explanations.jsonl");
  run.output(out / "distill_report.json");
  run.finish();
  log("distill", std::to_string(kept.size()) + " explanation pairs from " + std::to_string(with_explanation) + "/" +
                     std::to_string(reviews.size()) + " reviews; test " + report["test"].dump());
}

struct SelectionData {
  std::vector<data::InteractionRow> rows;
  std::vector<dpp::Interaction> resolved;  // parallel to rows
  std::size_t skipped_empty_pool = 0;
};

inline SelectionData load_interactions(const PipelineConfig& cfg, const EmbeddingStore& images,
                                       const EmbeddingStore& review_texts, const std::string& split) {
  SelectionData d;
  for (auto& x : data::read_jsonl<data::InteractionRow>(cfg.path("interactions"))) {
    if (split != "all" && x.split != split) continue;
    if (x.candidates.empty()) {
      ++d.skipped_empty_pool;
      continue;
    }
    dpp::Interaction it;
    it.profile = dpp::user_profile(rows_of(images, x.profile_images), rows_of(review_texts, x.profile_reviews),
                                   images.dim(), review_texts.dim());
    it.candidates = tensor_of(rows_of(images, x.candidates), images.dim());
    for (const auto& g : x.ground_truth) {
      auto pos = std::find(x.candidates.begin(), x.candidates.end(), g);
      if (pos == x.candidates.end())
        throw DataError("ground-truth image " + g + " not in the pool of user " + x.user_id);
      it.ground_truth.push_back(static_cast<std::size_t>(pos - x.candidates.begin()));
    }
    d.rows.push_back(std::move(x));
    d.resolved.push_back(std::move(it));
  }
  return d;
}

inline dpp::MlpConfig relevance_config(const PipelineConfig& cfg, std::size_t profile_dim, std::size_t image_dim) {
  dpp::MlpConfig m{{profile_dim}, {image_dim}};
  for (std::size_t w : cfg.select_hidden) {
    m.user_layers.push_back(w);
    m.image_layers.push_back(w);
  }
  return m;
}

inline void cmd_select_train(const PipelineConfig& cfg, const CommandOptions& opt) {
  const fs::path out = opt.out;
  const auto img_path = cfg.path("images"), rev_path = cfg.path("review_texts"), x_path = cfg.path("interactions");
  require_inputs({img_path, rev_path, x_path});
  fs::create_directories(out);
  RunManifest run("select-train", cfg.snapshot(), out);
  run.input_blob(img_path);
  run.input_blob(rev_path);
  run.input(x_path);
  const auto images = EmbeddingStore::load(img_path);
  const auto reviews = EmbeddingStore::load(rev_path);
  auto d = load_interactions(cfg, images, reviews, "train");
  std::vector<dpp::Interaction> usable;
  std::size_t without_gt = 0;
  for (auto& x : d.resolved) {
    if (x.ground_truth.empty()) {
      ++without_gt;
      continue;
    }
    usable.push_back(std::move(x));
  }
  if (usable.empty()) throw DataError("no training interactions with ground truth");
  dpp::RelevanceModel model(relevance_config(cfg, images.dim() + reviews.dim(), images.dim()), cfg.seed);
  const auto losses =
      dpp::train_relevance(model, usable, {cfg.select_epochs, cfg.select_lr, cfg.select_batch, cfg.seed});
  save_checkpoint(out / "relevance.json", model.params(),
                  {{"user_layers", model.config().user_layers}, {"image_layers", model.config().image_layers}});
  write_json(out / "select_train_report.json", {{"interactions", usable.size()},
                                                 {"skipped_empty_pool", d.skipped_empty_pool},
                                                 {"skipped_without_ground_truth", without_gt},
                                                 {"epoch_losses", losses}});
  run.output_blob(out / "relevance.json");
  run.output(out / "select_train_report.json");
  run.note("skipped_empty_pool", d.skipped_empty_pool);
  run.finish();
  if (d.skipped_empty_pool > 0)
    log("select-train", "warning: skipped " + std::to_string(d.skipped_empty_pool) + " interactions with empty pools");
  log("select-train", "trained on " + std::to_string(usable.size()) + " interactions; final loss " +
                          (losses.empty() ? std::string("n/a") : std::to_string(losses.back())));
}

struct RankSummary {
  double precision = 0, recall = 0, f1 = 0, div = 0;
  std::size_t ranked = 0, diversified = 0;

  json to_json() const {
    auto avg = [](double s, std::size_t n) { return n == 0 ? json(nullptr) : json(metrics::percent(s / static_cast<double>(n))); };
    return {{"precision", avg(precision, ranked)}, {"recall", avg(recall, ranked)}, {"f1", avg(f1, ranked)},
            {"div", avg(div, diversified)},        {"ranked", ranked},              {"diversified", diversified}};
  }
};

inline void accumulate(RankSummary& s, const std::vector<std::string>& selected, const std::vector<std::string>& gt,
                       std::size_t K, const EmbeddingStore& images, double weight = 1.0) {
  if (!gt.empty()) {
    const auto m = dpp::rank_metrics(selected, gt, K);
    s.precision += weight * m.precision;
    s.recall += weight * m.recall;
    s.f1 += weight * m.f1;
  }
  if (selected.size() >= 2) s.div += weight * dpp::div_at_k(rows_of(images, selected));
}

inline void cmd_select(const PipelineConfig& cfg, const CommandOptions& opt) {
  const fs::path out = opt.out;
  const auto img_path = cfg.path("images"), rev_path = cfg.path("review_texts"), x_path = cfg.path("interactions");
  const auto ck_path = out / "relevance.json";
  require_inputs({img_path, rev_path, x_path});
  if (!opt.random) require_inputs({ck_path});
  fs::create_directories(out);
  RunManifest run("select", cfg.snapshot(), out);
  run.input_blob(img_path);
  run.input_blob(rev_path);
  run.input(x_path);
  const auto images = EmbeddingStore::load(img_path);
  const auto reviews = EmbeddingStore::load(rev_path);
  const auto d = load_interactions(cfg, images, reviews, cfg.select_split);

  std::optional<dpp::RelevanceModel> model;
  if (!opt.random) {
    run.input_blob(ck_path);
    auto ck = load_checkpoint(ck_path);
    dpp::MlpConfig mc{ck.meta.at("user_layers").get<std::vector<std::size_t>>(),
                      ck.meta.at("image_layers").get<std::vector<std::size_t>>()};
    if (mc.user_layers.front() != images.dim() + reviews.dim() || mc.image_layers.front() != images.dim())
      throw DataError("relevance checkpoint does not match the embedding stores");
    model.emplace(mc, std::move(ck.params));
  }

  std::vector<data::ShowcaseRow> showcases;
  RankSummary chosen, baseline;
  std::mt19937_64 rng(cfg.seed);
  const double trial_weight = 1.0 / static_cast<double>(std::max<std::size_t>(cfg.random_trials, 1));
  for (std::size_t i = 0; i < d.rows.size(); ++i) {
    const auto& row = d.rows[i];
    const auto& x = d.resolved[i];
    std::vector<std::size_t> picked;
    if (model) {
      picked = dpp::greedy_map(dpp::build_kernel(x.profile, x.candidates, *model), cfg.k).selected;
    } else {
      picked = dpp::random_selection(row.candidates.size(), cfg.k, rng);
    }
    data::ShowcaseRow s{row.user_id, row.business_id, {}};
    for (std::size_t p : picked) s.selected.push_back(row.candidates[p]);
    accumulate(chosen, s.selected, row.ground_truth, cfg.k, images);
    chosen.ranked += !row.ground_truth.empty();
    chosen.diversified += s.selected.size() >= 2;
    for (std::size_t t = 0; t < cfg.random_trials; ++t) {
      std::vector<std::string> r;
      for (std::size_t p : dpp::random_selection(row.candidates.size(), cfg.k, rng)) r.push_back(row.candidates[p]);
      accumulate(baseline, r, row.ground_truth, cfg.k, images, trial_weight);
    }
    baseline.ranked += !row.ground_truth.empty() && cfg.random_trials > 0;
    baseline.diversified += row.candidates.size() >= 2 && cfg.k >= 2 && cfg.random_trials > 0;
    showcases.push_back(std::move(s));
  }
  data::write_jsonl(out / "showcases.jsonl", showcases);
  const json report = {{"method", opt.random ? "random" : "dpp"},
                       {"K", cfg.k},
                       {"split", cfg.select_split},
                       {"showcases", showcases.size()},
                       {"skipped_empty_pool", d.skipped_empty_pool},
                       {"selection", chosen.to_json()},
                       {"random", baseline.to_json()},
                       {"random_trials", cfg.random_trials}};
  write_json(out / "select_report.json", report);
  run.output(out / "showcases.jsonl");
  run.output(out / "select_report.json");
  run.note("skipped_empty_pool", d.skipped_empty_pool);
  run.finish();
  if (d.skipped_empty_pool > 0)
    log("select", "warning: skipped " + std::to_string(d.skipped_empty_pool) + " users with empty candidate pools");
  log("select", std::to_string(showcases.size()) + " showcases; F1@" + std::to_string(cfg.k) + " " +
                    report["selection"]["f1"].dump() + " vs random " + report["random"]["f1"].dump());
}

/// Encoder input for a set of images and a user's history reviews.
inline model::EncoderInput encoder_input(const EmbeddingStore& images, const EmbeddingStore& review_texts,
                                         std::vector<std::string> image_ids, const std::vector<std::string>& history) {
  if (image_ids.size() > model::kMaxImages) image_ids.resize(model::kMaxImages);
  model::EncoderInput in;
  in.images = tensor_of(rows_of(images, image_ids), images.dim());
  in.reviews = tensor_of(rows_of(review_texts, history), review_texts.dim());
  return in;
}

inline std::vector<double> mean_row(const diff::Tensor& t) {
  std::vector<double> m(t.cols(), 0.0);
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t k = 0; k < t.cols(); ++k) m[k] += t(i, k) / static_cast<double>(t.rows());
  return m;
}

inline fs::path vocab_path(const PipelineConfig& cfg, const fs::path& out) {
  return cfg.has_path("vocab") ? cfg.path("vocab") : out / "vocab.txt";
}

inline void cmd_train(const PipelineConfig& cfg, const CommandOptions& opt) {
  const fs::path out = opt.out;
  const auto mode = opt.loss_mode.value_or(cfg.loss_mode);
  const auto img_path = cfg.path("images"), rev_path = cfg.path("review_texts"), reviews_path = cfg.path("reviews");
  const auto x_path = cfg.path("interactions"), expl_path = out / "explanations.jsonl";
  require_inputs({img_path, rev_path, reviews_path, x_path, expl_path});
  fs::create_directories(out);
  RunManifest run("train", cfg.snapshot(), out);
  run.note("loss_mode", pc2l::to_string(mode));
  run.input_blob(img_path);
  run.input_blob(rev_path);
  run.input(reviews_path);
  run.input(x_path);
  run.input(expl_path);

  const auto images = EmbeddingStore::load(img_path);
  const auto review_texts = EmbeddingStore::load(rev_path);
  const auto reviews = data::read_jsonl<data::ReviewRow>(reviews_path);
  index_reviews(reviews);
  const auto held_out = test_pairs(data::read_jsonl<data::InteractionRow>(x_path));
  const auto records = explanation_records(reviews, data::read_jsonl<data::ExplanationRow>(expl_path));
  std::vector<const ExplanationRecord*> train_records;
  for (const auto& r : records)
    if (!held_out.contains({r.user_id, r.business_id})) train_records.push_back(&r);
  if (train_records.empty()) throw DataError("distilled corpus has no training records");

  Vocab vocab;
  const fs::path vpath = vocab_path(cfg, out);
  if (cfg.has_path("vocab")) {
    require_inputs({vpath});
    vocab = Vocab::load(vpath);
    run.input(vpath);
  } else {
    std::vector<std::vector<std::string>> corpus;
    for (const auto* r : train_records) corpus.push_back(r->tokens);
    vocab = Vocab::build(corpus, cfg.min_count);
    vocab.save(vpath);
    run.output(vpath);
  }
  pc2l::EntityVocab entities;
  if (cfg.has_path("entities")) {
    require_inputs({cfg.path("entities")});
    entities = pc2l::EntityVocab::load(cfg.path("entities"), vocab);
    run.input(cfg.path("entities"));
  } else {
    std::set<std::string> names;
    for (const auto* r : train_records)
      for (const auto& s : r->spans) names.insert(s.entity);
    entities = pc2l::EntityVocab({names.begin(), names.end()}, vocab);
    entities.save(out / "entities.txt");
    run.output(out / "entities.txt");
  }

  const bool contrastive = mode != pc2l::LossMode::kCe;
  std::vector<pc2l::TrainSample> samples;
  std::size_t skipped_no_history = 0;
  for (const auto* r : train_records) {
    const auto history = history_of(reviews, r->user_id, r->business_id);
    if (contrastive && history.empty()) {
      ++skipped_no_history;
      continue;
    }
    pc2l::TrainSample s;
    s.input = encoder_input(images, review_texts, r->images, history);
    s.target = vocab.encode_tokens(r->tokens);
    s.spans = r->spans;
    s.history_mean = history.empty() ? std::vector<double>(review_texts.dim(), 0.0) : mean_row(s.input.reviews);
    samples.push_back(std::move(s));
  }
  if (samples.empty()) throw DataError("no usable training samples");

  auto mc = cfg.model;
  mc.vocab = vocab.size();
  mc.image_dim = images.dim();
  mc.review_dim = review_texts.dim();
  mc.validate();
  model::ShowcaseModel m(mc, cfg.seed);
  std::ofstream log_out(out / "train_log.jsonl", std::ios::binary | std::ios::trunc);
  if (!log_out) throw DataError("cannot write " + (out / "train_log.jsonl").string());
  pc2l::TrainOptions to{mode, cfg.train_lr, cfg.weight_decay, cfg.train_batch, cfg.train_epochs, cfg.max_steps, cfg.seed};
  const auto steps = pc2l::train(m, samples, to, &entities, [&](const pc2l::StepLog& s) {
    log_out << json{{"step", s.step},       {"epoch", s.epoch},     {"ce", s.loss.ce},
                    {"ccl", s.loss.ccl},     {"pcl", s.loss.pcl},    {"total", s.loss.total},
                    {"lambda1", s.loss.lambda1}, {"lambda2", s.loss.lambda2}}
                   .dump()
            << '\n';
  });
  log_out.close();
  save_checkpoint(out / "model.json", m.params(),
                  {{"config", mc}, {"loss_mode", pc2l::to_string(mode)}, {"vocab_sha256", sha256_file(vpath)}});
  write_json(out / "train_report.json", {{"loss_mode", pc2l::to_string(mode)},
                                         {"samples", samples.size()},
                                         {"held_out_records", records.size() - train_records.size()},
                                         {"skipped_without_history", skipped_no_history},
                                         {"vocab", vocab.size()},
                                         {"entities", entities.size()},
                                         {"steps", steps.size()},
                                         {"final_ce", steps.empty() ? json(nullptr) : json(steps.back().loss.ce)},
                                         {"final_total", steps.empty() ? json(nullptr) : json(steps.back().loss.total)}});
  run.output(out / "train_log.jsonl");
  run.output_blob(out / "model.json");
  run.output(out / "train_report.json");
  run.finish();
  log("train", std::to_string(steps.size()) + " steps on " + std::to_string(samples.size()) + " samples (" +
                   pc2l::to_string(mode) + "); final CE " +
                   (steps.empty() ? std::string("n/a") : std::to_string(steps.back().loss.ce)));
}

inline void cmd_generate(const PipelineConfig& cfg, const CommandOptions& opt) {
  const fs::path out = opt.out;
  const auto ck_path = opt.checkpoint.value_or(out / "model.json");
  const auto sc_path = opt.showcases.value_or(out / "showcases.jsonl");
  const auto img_path = cfg.path("images"), rev_path = cfg.path("review_texts"), reviews_path = cfg.path("reviews");
  const auto vpath = vocab_path(cfg, out);
  require_inputs({ck_path, sc_path, img_path, rev_path, reviews_path, vpath});
  fs::create_directories(out);
  RunManifest run("generate", cfg.snapshot(), out);
  run.input_blob(ck_path);
  run.input(sc_path);
  run.input_blob(img_path);
  run.input_blob(rev_path);
  run.input(reviews_path);
  run.input(vpath);

  auto ck = load_checkpoint(ck_path);
  if (!ck.meta.contains("config")) throw DataError("checkpoint has no model config");
  const auto mc = ck.meta.at("config").get<model::ModelConfig>();
  const auto vocab = Vocab::load(vpath);
  if (vocab.size() != mc.vocab || ck.meta.value("vocab_sha256", std::string()) != sha256_file(vpath))
    throw DataError("vocabulary does not match the checkpoint");
  const auto& want = cfg.model;
  if (mc.hidden != want.hidden || mc.heads != want.heads || mc.enc_layers != want.enc_layers ||
      mc.dec_layers != want.dec_layers || mc.ffn != want.ffn || mc.proj_dim != want.proj_dim)
    throw DataError("checkpoint is incompatible with the model section of the config");
  const auto images = EmbeddingStore::load(img_path);
  const auto review_texts = EmbeddingStore::load(rev_path);
  if (mc.image_dim != images.dim() || mc.review_dim != review_texts.dim())
    throw DataError("checkpoint is incompatible with the embedding stores");
  model::ShowcaseModel m(mc, std::move(ck.params));
  const auto reviews = data::read_jsonl<data::ReviewRow>(reviews_path);

  std::vector<data::GenerationRow> gens;
  for (const auto& s : data::read_jsonl<data::ShowcaseRow>(sc_path)) {
    if (s.selected.empty()) throw DataError("showcase without images for user " + s.user_id);
    const auto history = history_of(reviews, s.user_id, s.business_id);
    auto in = encoder_input(images, review_texts, s.selected, history);
    const auto ids = m.generate(in, cfg.beam, cfg.max_len);
    data::GenerationRow g{s.user_id, s.business_id, s.selected, vocab.decode(ids), vocab.tokens_of(ids)};
    if (g.images.size() > model::kMaxImages) g.images.resize(model::kMaxImages);
    gens.push_back(std::move(g));
  }
  data::write_jsonl(out / "generations.jsonl", gens);
  run.output(out / "generations.jsonl");
  run.finish();
  log("generate", std::to_string(gens.size()) + " generations (beam " + std::to_string(cfg.beam) + ")");
}

/// Everything `evaluate` needs, resolved from files.
struct EvaluationInputs {
  std::vector<data::GenerationRow> generations;
  std::vector<metrics::Tokens> references;  // parallel to generations
  std::vector<std::map<std::string, std::vector<std::string>>> reference_keywords;
  std::vector<std::string> keyword_classes;
};

inline metrics::MetricReport evaluate_corpus(const EvaluationInputs& in, const EmbeddingStore& images,
                                             const data::TextEncoder& encoder,
                                             const distill::AlignmentClassifier& clf, std::size_t* clip_records) {
  if (in.generations.empty()) throw DataError("no generations to evaluate");
  metrics::MetricReport r;
  r.records = in.generations.size();
  std::vector<metrics::Tokens> cands;
  std::vector<std::size_t> lengths;
  for (const auto& g : in.generations) {
    cands.push_back(g.tokens);
    lengths.push_back(g.tokens.size());
  }
  r.bleu1 = metrics::bleu_n(cands, in.references, 1);
  r.bleu4 = metrics::bleu_n(cands, in.references, 4);
  r.nist4 = metrics::nist_n(cands, in.references, 4);
  r.distinct1 = metrics::distinct_n(cands, 1);
  r.distinct2 = metrics::distinct_n(cands, 2);
  double align = 0, score = 0;
  std::size_t n_clip = 0;
  for (const auto& g : in.generations) {
    std::vector<std::vector<float>> sent;
    for (const auto& s : data::split_sentences(g.tokens))
      if (auto e = encoder.embed(s)) sent.push_back(std::move(*e));
    if (sent.empty() || g.images.empty()) continue;
    metrics::Rows<float> img_rows = rows_of(images, g.images), sent_rows;
    for (const auto& s : sent) sent_rows.emplace_back(s);
    align += metrics::clip_align(img_rows, sent_rows, clf);
    score += metrics::clip_score(img_rows, sent_rows);
    ++n_clip;
  }
  if (n_clip > 0) {
    r.clip_align = align / static_cast<double>(n_clip);
    r.clip_score = score / static_cast<double>(n_clip);
  }
  if (clip_records) *clip_records = n_clip;
  std::vector<metrics::KeywordRecord> kw;
  for (std::size_t i = 0; i < in.generations.size(); ++i) kw.push_back({cands[i], in.reference_keywords[i]});
  r.keyword_coverage = metrics::keyword_coverage(kw, in.keyword_classes);
  r.length_histogram = metrics::length_histogram(lengths);
  return r;
}

inline void cmd_evaluate(const PipelineConfig& cfg, const CommandOptions& opt) {
  const fs::path out = opt.out;
  const auto gen_path = opt.generations.value_or(out / "generations.jsonl");
  const auto clf_path = out / "classifier.json", expl_path = out / "explanations.jsonl";
  const auto img_path = cfg.path("images"), wv_path = cfg.path("word_vectors"), reviews_path = cfg.path("reviews");
  const auto kw_path = cfg.path("keywords");
  require_inputs({gen_path, clf_path, expl_path, img_path, wv_path, reviews_path, kw_path});
  fs::create_directories(out);
  RunManifest run("evaluate", cfg.snapshot(), out);
  run.input(gen_path);
  run.input_blob(clf_path);
  run.input(expl_path);
  run.input_blob(img_path);
  run.input_blob(wv_path);
  run.input(reviews_path);
  run.input(kw_path);

  const auto reviews = data::read_jsonl<data::ReviewRow>(reviews_path);
  index_reviews(reviews);
  std::map<UserBusiness, ExplanationRecord> refs;
  for (auto& r : explanation_records(reviews, data::read_jsonl<data::ExplanationRow>(expl_path)))
    refs.emplace(UserBusiness{r.user_id, r.business_id}, std::move(r));
  const auto lexicon = data::load_keywords(kw_path);
  EvaluationInputs in;
  for (const auto& [cls, words] : lexicon) in.keyword_classes.push_back(cls);
  in.generations = data::read_jsonl<data::GenerationRow>(gen_path);
  for (const auto& g : in.generations) {
    auto it = refs.find({g.user_id, g.business_id});
    if (it == refs.end())
      throw DataError("missing reference for user " + g.user_id + " at business " + g.business_id);
    in.references.push_back(it->second.tokens);
    in.reference_keywords.push_back(data::keywords_of(it->second.tokens, lexicon));
  }
  const auto images = EmbeddingStore::load(img_path);
  const auto words = EmbeddingStore::load(wv_path);
  if (words.dim() != images.dim()) throw DataError("word vectors and images differ in dimension");
  const data::TextEncoder encoder(words);
  const auto clf = distill::AlignmentClassifier::from_parameters(load_checkpoint(clf_path).params);
  std::size_t clip_records = 0;
  const auto report = evaluate_corpus(in, images, encoder, clf, &clip_records);
  json j = metrics::to_json(report);
  j["clip_records"] = clip_records;
  write_json(out / "report.json", j);
  run.output(out / "report.json");
  run.finish();
  log("evaluate", j.dump());
}

/// Runs one subcommand; returns the process exit code and prints errors to stderr.
inline int run_command(const std::function<void()>& body) {
  try {
    body();
    return static_cast<int>(ExitCode::kSuccess);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kData);
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed input: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kData);
  }
}

}  // namespace showcase::pipeline
