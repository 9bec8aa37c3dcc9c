#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "showcase/diff/diff.hpp"
#include "showcase/error.hpp"
#include "showcase/tokenizer.hpp"

namespace showcase::model {

using diff::Graph;
using diff::ParameterSet;
using diff::Tensor;
using diff::Var;

inline constexpr std::size_t kMaxImages = 5;
inline constexpr std::size_t kMaxReviews = 10;
inline constexpr std::size_t kMaxLen = 64;

struct ModelConfig {
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 2;
  std::size_t ffn = 0;  // 0 means 4 * hidden
  std::size_t vocab = 0;
  std::size_t image_dim = 0;
  std::size_t review_dim = 0;
  std::size_t proj_dim = 32;
  std::size_t max_len = kMaxLen;
  double tau = 0.1;
  double lambda1 = 0.2;
  double lambda2 = 0.2;
  double alpha = std::numbers::e;
  double init_std = 0.02;

  static ModelConfig desk(std::size_t vocab, std::size_t image_dim, std::size_t review_dim) {
    ModelConfig c;
    c.vocab = vocab;
    c.image_dim = image_dim;
    c.review_dim = review_dim;
    return c;
  }
  static ModelConfig full(std::size_t vocab, std::size_t image_dim, std::size_t review_dim) {
    ModelConfig c = desk(vocab, image_dim, review_dim);
    c.hidden = 768;
    c.heads = 12;
    c.enc_layers = 3;
    c.dec_layers = 12;
    c.proj_dim = 256;
    return c;
  }

  std::size_t ffn_width() const { return ffn == 0 ? 4 * hidden : ffn; }

  void validate() const {
    if (hidden == 0 || heads == 0 || hidden % heads != 0) throw UsageError("hidden must be a positive multiple of heads");
    if (vocab <= static_cast<std::size_t>(kUnk)) throw UsageError("vocabulary must contain the reserved tokens");
    if (image_dim == 0 || review_dim == 0 || proj_dim == 0) throw UsageError("embedding and projection dims must be positive");
    if (max_len == 0 || max_len > kMaxLen) throw UsageError("max_len must be in [1, 64]");
    if (!(tau > 0.0)) throw UsageError("temperature must be positive");
    if (!(alpha >= 1.0)) throw UsageError("alpha must be at least 1");
    if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw UsageError("loss weights must be non-negative");
    if (!(init_std > 0.0)) throw UsageError("init_std must be positive");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"hidden", c.hidden},       {"heads", c.heads},     {"enc_layers", c.enc_layers},
       {"dec_layers", c.dec_layers}, {"ffn", c.ffn},         {"vocab", c.vocab},
       {"image_dim", c.image_dim}, {"review_dim", c.review_dim}, {"proj_dim", c.proj_dim},
       {"max_len", c.max_len},     {"tau", c.tau},         {"lambda1", c.lambda1},
       {"lambda2", c.lambda2},     {"alpha", c.alpha},     {"init_std", c.init_std}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("hidden").get_to(c.hidden);
  j.at("heads").get_to(c.heads);
  j.at("enc_layers").get_to(c.enc_layers);
  j.at("dec_layers").get_to(c.dec_layers);
  j.at("ffn").get_to(c.ffn);
  j.at("vocab").get_to(c.vocab);
  j.at("image_dim").get_to(c.image_dim);
  j.at("review_dim").get_to(c.review_dim);
  j.at("proj_dim").get_to(c.proj_dim);
  j.at("max_len").get_to(c.max_len);
  j.at("tau").get_to(c.tau);
  j.at("lambda1").get_to(c.lambda1);
  j.at("lambda2").get_to(c.lambda2);
  j.at("alpha").get_to(c.alpha);
  j.at("init_std").get_to(c.init_std);
}

/// Image and review slots for one sample. Empty presence vectors mean every
/// row is present; absent rows are masked out of all attention.
struct EncoderInput {
  Tensor images;   // n_v x image_dim
  Tensor reviews;  // n_r x review_dim (n_r may be 0)
  std::vector<bool> image_present;
  std::vector<bool> review_present;
};

struct EncoderOutput {
  Var memory;  // (n_v + n_r) x hidden, image slots first
  std::size_t n_v = 0;
  std::size_t n_r = 0;
  std::vector<bool> present;  // per memory row

  Var h_v() const { return diff::slice_rows(memory, 0, n_v); }
  Var h_r() const { return diff::slice_rows(memory, n_v, n_v + n_r); }
  std::vector<std::size_t> present_images() const { return present_in(0, n_v); }
  std::vector<std::size_t> present_reviews() const { return present_in(n_v, n_v + n_r); }

 private:
  std::vector<std::size_t> present_in(std::size_t b, std::size_t e) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = b; i < e; ++i)
      if (present[i]) idx.push_back(i - b);
    return idx;
  }
};

struct DecoderOutput {
  Var logits;                        // len x vocab
  Var hidden;                        // len x hidden, after the final layer norm (H_Y)
  std::vector<Var> cross_attention;  // per layer and head, len x memory rows (when traced)
};

/// Teacher-forcing pair for target Y: input [BOS] + Y, target Y + [EOS],
/// both truncated to max_len.
struct TeacherForcing {
  std::vector<TokenId> input;
  std::vector<TokenId> target;
};

inline TeacherForcing teacher_forcing(const std::vector<TokenId>& y, std::size_t max_len = kMaxLen) {
  if (y.empty()) throw DataError("empty target sequence");
  TeacherForcing tf;
  tf.input.push_back(kBos);
  tf.input.insert(tf.input.end(), y.begin(), y.end());
  tf.target = y;
  tf.target.push_back(kEos);
  if (tf.input.size() > max_len) tf.input.resize(max_len);
  if (tf.target.size() > max_len) tf.target.resize(max_len);
  return tf;
}

class ShowcaseModel {
 public:
  ShowcaseModel() = default;
  ShowcaseModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t h = config_.hidden;
    add_normal("enc.proj_v", config_.image_dim, h, rng);
    add_normal("enc.proj_r", config_.review_dim, h, rng);
    for (std::size_t l = 0; l < config_.enc_layers; ++l) {
      const std::string p = "enc.layer" + std::to_string(l);
      add_attention(p + ".attn", rng);
      add_layer_norm(p + ".ln1");
      add_layer_norm(p + ".ln2");
      add_ffn(p + ".ffn", rng);
    }
    add_layer_norm("enc.ln_f");
    add_normal("dec.tok_emb", config_.vocab, h, rng);
    add_normal("dec.pos_emb", config_.max_len, h, rng);
    for (std::size_t l = 0; l < config_.dec_layers; ++l) {
      const std::string p = "dec.layer" + std::to_string(l);
      add_attention(p + ".self", rng);
      add_attention(p + ".cross", rng);
      add_layer_norm(p + ".ln1");
      add_layer_norm(p + ".ln2");
      add_layer_norm(p + ".ln3");
      add_ffn(p + ".ffn", rng);
    }
    add_layer_norm("dec.ln_f");
    add_normal("dec.head.w", h, config_.vocab, rng);
    params_.add("dec.head.b", Tensor(1, config_.vocab));
    for (const char* m : {"v", "r", "y"}) {
      const std::string p = std::string("pc2l.phi_") + m;
      add_normal(p + ".w1", h, h, rng);
      params_.add(p + ".b1", Tensor(1, h));
      add_normal(p + ".w2", h, config_.proj_dim, rng);
      params_.add(p + ".b2", Tensor(1, config_.proj_dim));
    }
  }

  /// Model whose parameters are taken from `params` (e.g. a checkpoint).
  ShowcaseModel(ModelConfig config, ParameterSet params) : config_(std::move(config)) {
    config_.validate();
    ShowcaseModel shape(config_, 0);
    if (shape.params_.size() != params.size()) throw DataError("checkpoint does not match the model config");
    for (const auto& [name, p] : shape.params_) {
      if (!params.contains(name) || !params.at(name).value.same_shape(p.value))
        throw DataError("checkpoint does not match the model config: " + name);
    }
    params_ = std::move(params);
  }

  const ModelConfig& config() const { return config_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  /// Zero the output projection so every position predicts the uniform distribution.
  void zero_output_head() {
    params_.at("dec.head.w").value.fill(0.0);
    params_.at("dec.head.b").value.fill(0.0);
  }

  EncoderOutput encode(Graph& g, const EncoderInput& in) {
    const std::size_t n_v = in.images.rows();
    const std::size_t n_r = in.reviews.rows();
    if (n_v > 0 && in.images.cols() != config_.image_dim) throw DataError("image embedding dim mismatch");
    if (n_r > 0 && in.reviews.cols() != config_.review_dim) throw DataError("review embedding dim mismatch");
    if (n_v > kMaxImages) throw DataError("more than 5 images");
    if (n_r > kMaxReviews) throw DataError("more than 10 history reviews");
    EncoderOutput out;
    out.n_v = n_v;
    out.n_r = n_r;
    out.present = presence(in.image_present, n_v);
    const auto rp = presence(in.review_present, n_r);
    out.present.insert(out.present.end(), rp.begin(), rp.end());
    if (std::none_of(out.present.begin(), out.present.end(), [](bool b) { return b; }))
      throw DataError("encoder input has no images and no reviews");

    std::vector<Var> parts;
    if (n_v > 0) parts.push_back(diff::matmul(g.constant(in.images), p(g, "enc.proj_v")));
    if (n_r > 0) parts.push_back(diff::matmul(g.constant(in.reviews), p(g, "enc.proj_r")));
    Var x = parts.size() == 1 ? parts[0] : diff::concat(parts, 0);

    const std::size_t n = n_v + n_r;
    Tensor mask(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (!out.present[j]) mask(i, j) = diff::kMaskedLogit;
    for (std::size_t l = 0; l < config_.enc_layers; ++l) {
      const std::string pre = "enc.layer" + std::to_string(l);
      Var a = ln(g, x, pre + ".ln1");
      x = diff::add(x, attention(g, pre + ".attn", a, a, mask, nullptr));
      x = diff::add(x, ffn(g, pre + ".ffn", ln(g, x, pre + ".ln2")));
    }
    out.memory = ln(g, x, "enc.ln_f");
    return out;
  }

  /// Re-bind an encoder output computed in another graph as a constant.
  static EncoderOutput rebind(Graph& g, const Tensor& memory, const EncoderOutput& meta) {
    EncoderOutput out = meta;
    out.memory = g.constant(memory);
    return out;
  }

  /// Logits for every prefix position. With `last_only`, logits cover the final position only.
  DecoderOutput decode(Graph& g, const EncoderOutput& enc, const std::vector<TokenId>& prefix, bool trace = false,
                       bool last_only = false) {
    check_prefix(prefix);
    const std::size_t len = prefix.size();
    std::vector<std::size_t> ids(prefix.begin(), prefix.end());
    std::vector<std::size_t> pos(len);
    for (std::size_t i = 0; i < len; ++i) pos[i] = i;
    Var x = diff::add(diff::gather_rows(p(g, "dec.tok_emb"), ids), diff::gather_rows(p(g, "dec.pos_emb"), pos));

    Tensor causal(len, len);
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = i + 1; j < len; ++j) causal(i, j) = diff::kMaskedLogit;
    const std::size_t m = enc.present.size();
    Tensor cross_mask(len, m);
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j < m; ++j)
        if (!enc.present[j]) cross_mask(i, j) = diff::kMaskedLogit;

    DecoderOutput out;
    for (std::size_t l = 0; l < config_.dec_layers; ++l) {
      const std::string pre = "dec.layer" + std::to_string(l);
      Var a = ln(g, x, pre + ".ln1");
      x = diff::add(x, attention(g, pre + ".self", a, a, causal, nullptr));
      x = diff::add(x, attention(g, pre + ".cross", ln(g, x, pre + ".ln2"), enc.memory, cross_mask,
                                 trace ? &out.cross_attention : nullptr));
      x = diff::add(x, ffn(g, pre + ".ffn", ln(g, x, pre + ".ln3")));
    }
    out.hidden = ln(g, x, "dec.ln_f");
    Var h = last_only ? diff::slice_rows(out.hidden, len - 1, len) : out.hidden;
    out.logits = diff::add(diff::matmul(h, p(g, "dec.head.w")), p(g, "dec.head.b"));
    return out;
  }

  /// Summed token negative log-likelihood; positions whose target is PAD are skipped.
  Var sequence_nll(Graph& g, Var logits, const std::vector<TokenId>& target) const {
    const Tensor& lv = g.value(logits);
    if (target.size() != lv.rows()) throw DataError("target length does not match logits");
    std::vector<std::size_t> cols(target.size());
    std::vector<std::size_t> keep;
    for (std::size_t t = 0; t < target.size(); ++t) {
      if (target[t] < 0 || static_cast<std::size_t>(target[t]) >= config_.vocab) throw DataError("unknown token id");
      cols[t] = static_cast<std::size_t>(target[t]);
      if (target[t] != kPad) keep.push_back(t);
    }
    if (keep.empty()) throw DataError("target is all padding");
    Var picked = diff::pick(diff::log_softmax(logits, 1), cols);
    if (keep.size() != target.size()) picked = diff::gather_rows(picked, keep);
    return diff::scale(diff::sum(picked), -1.0);
  }

  /// Teacher-forced summed NLL of target Y for one sample.
  Var sample_nll(Graph& g, const EncoderOutput& enc, const std::vector<TokenId>& y) {
    const auto tf = teacher_forcing(y, config_.max_len);
    return sequence_nll(g, decode(g, enc, tf.input).logits, tf.target);
  }

  /// phi_m(mean of the given rows): FC -> ReLU -> FC; m is one of "v", "r", "y".
  Var project(Graph& g, const std::string& m, Var rows, const std::vector<std::size_t>& keep) {
    if (keep.empty()) throw DataError("empty pooling axis");
    Var pooled = diff::mean_pool(keep.size() == g.value(rows).rows() ? rows : diff::gather_rows(rows, keep), 0);
    const std::string pre = "pc2l.phi_" + m;
    Var h = diff::relu(diff::add(diff::matmul(pooled, p(g, pre + ".w1")), p(g, pre + ".b1")));
    return diff::add(diff::matmul(h, p(g, pre + ".w2")), p(g, pre + ".b2"));
  }

  /// Length-normalised beam search. Returns generated ids without BOS/EOS.
  std::vector<TokenId> generate(const EncoderInput& in, std::size_t beam_size = 2,
                                std::size_t max_len = kMaxLen) {
    if (beam_size == 0) throw UsageError("beam size must be at least 1");
    max_len = std::min(max_len, config_.max_len);
    Graph eg = Graph::inference();
    const EncoderOutput enc0 = encode(eg, in);
    const Tensor memory = eg.value(enc0.memory);

    struct Hyp {
      std::vector<TokenId> tokens;
      double logp = 0.0;
      bool done = false;
      double score() const { return tokens.empty() ? 0.0 : logp / static_cast<double>(tokens.size()); }
    };
    std::vector<Hyp> beams{Hyp{}};
    for (std::size_t step = 0; step < max_len; ++step) {
      if (std::all_of(beams.begin(), beams.end(), [](const Hyp& h) { return h.done; })) break;
      // (score, beam, token, logp); token -1 carries a finished hypothesis forward.
      std::vector<std::tuple<double, std::size_t, TokenId, double>> cands;
      for (std::size_t b = 0; b < beams.size(); ++b) {
        const Hyp& hyp = beams[b];
        if (hyp.done) {
          cands.emplace_back(hyp.score(), b, -1, hyp.logp);
          continue;
        }
        const auto lp = next_log_probs(memory, enc0, hyp.tokens);
        const double denom = static_cast<double>(hyp.tokens.size() + 1);
        for (std::size_t t = 0; t < lp.size(); ++t)
          cands.emplace_back((hyp.logp + lp[t]) / denom, b, static_cast<TokenId>(t), hyp.logp + lp[t]);
      }
      const std::size_t keep = std::min(beam_size, cands.size());
      std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                        [](const auto& a, const auto& b) {
                          if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
                          if (std::get<1>(a) != std::get<1>(b)) return std::get<1>(a) < std::get<1>(b);
                          return std::get<2>(a) < std::get<2>(b);
                        });
      std::vector<Hyp> next;
      for (std::size_t c = 0; c < keep; ++c) {
        const auto& [score, b, t, logp] = cands[c];
        Hyp h = beams[b];
        if (t >= 0) {
          h.logp = logp;
          h.tokens.push_back(t);
          h.done = t == kEos;
        }
        next.push_back(std::move(h));
      }
      beams = std::move(next);
    }
    std::vector<TokenId> out = beams.front().tokens;
    if (!out.empty() && out.back() == kEos) out.pop_back();
    return out;
  }

  /// log softmax of the next-token distribution after [BOS] + generated.
  std::vector<double> next_log_probs(const Tensor& memory, const EncoderOutput& meta,
                                     const std::vector<TokenId>& generated) {
    Graph g = Graph::inference();
    std::vector<TokenId> prefix{kBos};
    prefix.insert(prefix.end(), generated.begin(), generated.end());
    const EncoderOutput enc = rebind(g, memory, meta);
    Var lp = diff::log_softmax(decode(g, enc, prefix, false, true).logits, 1);
    const auto& v = g.value(lp).values();
    return {v.begin(), v.end()};
  }

 private:
  Var p(Graph& g, const std::string& name) { return g.parameter(params_, name); }

  static std::vector<bool> presence(const std::vector<bool>& given, std::size_t n) {
    if (given.empty()) return std::vector<bool>(n, true);
    if (given.size() != n) throw DataError("presence mask size mismatch");
    return given;
  }

  void check_prefix(const std::vector<TokenId>& prefix) const {
    if (prefix.empty() || prefix.front() != kBos) throw DataError("decoder prefix must start with BOS");
    if (prefix.size() > config_.max_len) throw DataError("decoder prefix longer than max_len");
    for (TokenId t : prefix)
      if (t < 0 || static_cast<std::size_t>(t) >= config_.vocab) throw DataError("unknown token id");
  }

  void add_normal(const std::string& name, std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    std::normal_distribution<double> init(0.0, config_.init_std);
    Tensor t(rows, cols);
    for (auto& v : t.values()) v = init(rng);
    params_.add(name, std::move(t));
  }
  void add_layer_norm(const std::string& name) {
    params_.add(name + ".gain", Tensor(1, config_.hidden, 1.0));
    params_.add(name + ".bias", Tensor(1, config_.hidden));
  }
  void add_attention(const std::string& name, std::mt19937_64& rng) {
    for (const char* w : {"q", "k", "v", "o"}) {
      add_normal(name + ".w" + w, config_.hidden, config_.hidden, rng);
      params_.add(name + ".b" + w, Tensor(1, config_.hidden));
    }
  }
  void add_ffn(const std::string& name, std::mt19937_64& rng) {
    add_normal(name + ".w1", config_.hidden, config_.ffn_width(), rng);
    params_.add(name + ".b1", Tensor(1, config_.ffn_width()));
    add_normal(name + ".w2", config_.ffn_width(), config_.hidden, rng);
    params_.add(name + ".b2", Tensor(1, config_.hidden));
  }

  Var ln(Graph& g, Var x, const std::string& name) {
    return diff::layer_norm(x, p(g, name + ".gain"), p(g, name + ".bias"));
  }
  Var linear(Graph& g, Var x, const std::string& w, const std::string& b) {
    return diff::add(diff::matmul(x, p(g, w)), p(g, b));
  }
  Var ffn(Graph& g, const std::string& name, Var x) {
    return linear(g, diff::gelu(linear(g, x, name + ".w1", name + ".b1")), name + ".w2", name + ".b2");
  }
  Var attention(Graph& g, const std::string& name, Var query, Var memory, const Tensor& mask,
                std::vector<Var>* trace) {
    Var q = linear(g, query, name + ".wq", name + ".bq");
    Var k = linear(g, memory, name + ".wk", name + ".bk");
    Var v = linear(g, memory, name + ".wv", name + ".bv");
    const std::size_t dh = config_.hidden / config_.heads;
    std::vector<Var> heads;
    for (std::size_t h = 0; h < config_.heads; ++h) {
      const std::size_t b = h * dh;
      auto r = diff::scaled_dot_attention(diff::slice_cols(q, b, b + dh), diff::slice_cols(k, b, b + dh),
                                          diff::slice_cols(v, b, b + dh), mask);
      if (trace) trace->push_back(r.weights);
      heads.push_back(r.output);
    }
    Var cat = heads.size() == 1 ? heads[0] : diff::concat(heads, 1);
    return linear(g, cat, name + ".wo", name + ".bo");
  }

  ModelConfig config_;
  ParameterSet params_;
};

/// Mean of per-sample scalar losses.
inline Var mean_of(const std::vector<Var>& per_sample) {
  if (per_sample.empty()) throw DataError("empty batch");
  Var s = per_sample.size() == 1 ? per_sample[0] : diff::concat(per_sample, 0);
  return diff::scale(diff::sum(s), 1.0 / static_cast<double>(per_sample.size()));
}

}  // namespace showcase::model
