// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "showcase/distill.hpp"
#include "showcase/dpp.hpp"
#include "showcase/metrics.hpp"
#include "showcase/model.hpp"
#include "showcase/pc2l.hpp"
#include "showcase/pipeline.hpp"
#include "showcase/planted.hpp"
#include "support/dpp_oracles.hpp"
#include "support/gradcheck.hpp"
#include "support/greedy_decoder.hpp"
#include "support/metric_oracles.hpp"

namespace fs = std::filesystem;
using namespace showcase;
using diff::Graph;
using diff::Tensor;
using diff::Var;
using showcase::testing::random_normal;
using showcase::testing::random_tensor;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(double x) {
  std::ostringstream s;
  s.precision(3);
  s << x;
  return s.str();
}

// ---------------------------------------------------------------- criterion 1

constexpr int kGradInstances = 50;
constexpr double kGradTol = 1e-3;

Var probe(Graph& g, Var out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Tensor& v = g.value(out);
  return diff::sum(diff::mul(out, g.constant(random_tensor(rng, v.rows(), v.cols()))));
}

Tensor positive_tensor(std::mt19937_64& rng, std::size_t r, std::size_t c) {
  std::uniform_real_distribution<double> u(0.2, 2.0);
  Tensor t(r, c);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

class GradSuite {
 public:
  void record(const std::string& name, double err) {
    auto& e = entries_[name];
    e.first = std::max(e.first, err);
    ++e.second;
  }

  Outcome outcome() const {
    Outcome o;
    std::string worst_name;
    double worst = 0.0;
    for (const auto& [name, e] : entries_) {
      const bool ok = e.first < kGradTol && e.second >= kGradInstances;
      if (!ok) {
        o.pass = false;
        o.detail += name + " max " + fmt(e.first) + " over " + std::to_string(e.second) + "; ";
      }
      if (e.first >= worst) {
        worst = e.first;
        worst_name = name;
      }
    }
    o.detail += std::to_string(entries_.size()) + " ops/losses x >= " + std::to_string(kGradInstances) +
                " instances, worst " + worst_name + " " + fmt(worst);
    return o;
  }

 private:
  std::map<std::string, std::pair<double, int>> entries_;
};

model::ModelConfig tiny_model(std::size_t vocab, double init_std) {
  auto c = model::ModelConfig::desk(vocab, 4, 5);
  c.hidden = 8;
  c.heads = 2;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.ffn = 8;
  c.proj_dim = 4;
  c.init_std = init_std;
  return c;
}

std::vector<std::vector<double>> rows_of(const Tensor& t) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < t.rows(); ++i) out.emplace_back(t.row(i).begin(), t.row(i).end());
  return out;
}

Outcome gradient_integrity() {
  using namespace diff;
  using showcase::testing::gradcheck;
  GradSuite suite;
  std::mt19937_64 rng(2024);
  auto dim = [&] { return std::uniform_int_distribution<std::size_t>(1, 8)(rng); };
  using Fn = std::function<Var(Graph&, Var)>;
  const std::vector<std::pair<std::string, Fn>> unary = {
      {"relu", [](Graph&, Var x) { return relu(x); }},
      {"exp", [](Graph&, Var x) { return exp(x); }},
      {"gelu", [](Graph&, Var x) { return gelu(x); }},
      {"softplus", [](Graph&, Var x) { return softplus(x); }},
      {"scale", [](Graph&, Var x) { return scale(x, -1.7); }},
      {"transpose", [](Graph&, Var x) { return transpose(x); }},
      {"softmax", [](Graph&, Var x) { return add(softmax(x, 0), softmax(x, 1)); }},
      {"log_softmax", [](Graph&, Var x) { return add(log_softmax(x, 0), log_softmax(x, 1)); }},
      {"mean_pool", [](Graph&, Var x) { return transpose(mean_pool(x, 0)); }},
      {"l2_normalize_rows", [](Graph&, Var x) { return l2_normalize_rows(x); }},
  };

  for (int t = 0; t < kGradInstances; ++t) {
    const auto seed = static_cast<std::uint64_t>(t);
    const std::size_t m = dim(), k = dim(), n = dim();
    suite.record("matmul", gradcheck({random_tensor(rng, m, k), random_tensor(rng, k, n)},
                                     [&](Graph& g, const std::vector<Var>& v) { return probe(g, matmul(v[0], v[1]), seed); }));
    suite.record("add/sub (broadcast), mul",
                 gradcheck({random_tensor(rng, m, n), random_tensor(rng, m, n), random_tensor(rng, 1, n),
                            random_tensor(rng, 1, 1)},
                           [&](Graph& g, const std::vector<Var>& v) {
                             return probe(g, add(sub(mul(v[0], v[1]), v[2]), v[3]), seed);
                           }));
    for (const auto& [name, f] : unary)
      suite.record(name, gradcheck({random_tensor(rng, m, n)},
                                   [&](Graph& g, const std::vector<Var>& v) { return probe(g, f(g, v[0]), seed); }));
    suite.record("log", gradcheck({positive_tensor(rng, m, n)},
                                  [&](Graph& g, const std::vector<Var>& v) { return probe(g, log(v[0]), seed); }));
    suite.record("sum", gradcheck({random_tensor(rng, m, n)},
                                  [&](Graph& g, const std::vector<Var>& v) { return sum(mul(v[0], v[0])); }));
    suite.record("mean", gradcheck({random_tensor(rng, m, n)},
                                   [&](Graph& g, const std::vector<Var>& v) { return mean(exp(v[0])); }));
    suite.record("layer_norm", gradcheck({random_tensor(rng, m, n + 1), random_tensor(rng, 1, n + 1),
                                          random_tensor(rng, 1, n + 1)},
                                         [&](Graph& g, const std::vector<Var>& v) {
                                           return probe(g, layer_norm(v[0], v[1], v[2]), seed);
                                         }));
    const int axis = t % 2;
    suite.record("concat/slice", gradcheck({random_tensor(rng, m, n), random_tensor(rng, m, n)},
                                           [&](Graph& g, const std::vector<Var>& v) {
                                             Var c = concat({v[0], v[1]}, axis);
                                             Var s = axis == 0 ? slice_rows(c, m / 2, m / 2 + m)
                                                               : slice_cols(c, n / 2, n / 2 + n);
                                             return probe(g, s, seed);
                                           }));
    std::vector<std::size_t> ids, cols;
    for (std::size_t i = 0; i < m + 2; ++i) ids.push_back(rng() % m);
    for (std::size_t i = 0; i < m; ++i) cols.push_back(rng() % n);
    suite.record("gather/embedding_lookup", gradcheck({random_tensor(rng, m, n)}, [&](Graph& g, const std::vector<Var>& v) {
                   return add(probe(g, gather_rows(v[0], ids), seed), probe(g, embedding_lookup(v[0], ids), seed + 1));
                 }));
    suite.record("pick", gradcheck({random_tensor(rng, m, n)},
                                   [&](Graph& g, const std::vector<Var>& v) { return probe(g, pick(v[0], cols), seed); }));
    const std::size_t sn = 1 + rng() % 6;
    suite.record("logdet", gradcheck({showcase::testing::random_spd(rng, sn)},
                                     [](Graph&, const std::vector<Var>& v) { return logdet(v[0]); }));
    const std::size_t lq = dim(), lk = dim(), d = dim();
    Tensor mask(lq, lk);
    for (std::size_t r = 0; r < lq; ++r)
      for (std::size_t c = 1; c < lk; ++c)
        if (rng() % 3 == 0) mask(r, c) = kMaskedLogit;
    suite.record("scaled_dot_attention",
                 gradcheck({random_tensor(rng, lq, d), random_tensor(rng, lk, d), random_tensor(rng, lk, d)},
                           [&](Graph& g, const std::vector<Var>& v) {
                             return probe(g, scaled_dot_attention(v[0], v[1], v[2], mask).output, seed);
                           }));
  }

  // Losses.
  std::uniform_real_distribution<double> tau_dist(0.1, 1.0);
  for (int t = 0; t < kGradInstances; ++t) {
    const std::size_t B = 1 + static_cast<std::size_t>(t) % 5;
    const double tau = tau_dist(rng);
    suite.record("loss CL", gradcheck({random_normal(rng, B, 4), random_normal(rng, B, 4)},
                                      [&](Graph&, const std::vector<Var>& v) { return pc2l::cl_loss(v[0], v[1], tau); }));
    std::vector<bool> present(B);
    for (std::size_t i = 0; i < B; ++i) present[i] = (static_cast<std::size_t>(t) + i) % 3 != 0;
    suite.record("loss CCL", gradcheck({random_normal(rng, B, 4), random_normal(rng, B, 4), random_normal(rng, B, 4)},
                                       [&](Graph&, const std::vector<Var>& v) {
                                         pc2l::ProjectedBatch p;
                                         p.h_v = v[0];
                                         p.h_y = v[1];
                                         p.h_ent = pc2l::ExtraNegatives{v[2], present};
                                         return pc2l::ccl_loss(p, tau);
                                       }));
    const auto histories = rows_of(random_normal(rng, B, 3));
    suite.record("loss PCL", gradcheck({random_normal(rng, B, 4), random_normal(rng, B, 4)},
                                       [&](Graph&, const std::vector<Var>& v) {
                                         pc2l::ProjectedBatch p;
                                         p.h_r = v[0];
                                         p.h_y = v[1];
                                         p.history_means = histories;
                                         return pc2l::pcl_loss(p, tau, std::numbers::e);
                                       }));

    const std::size_t n = 2 + static_cast<std::size_t>(t) % 6;
    const Tensor cands = random_normal(rng, n, 4);
    const Tensor S = dpp::cosine_similarity_matrix(cands);
    std::vector<std::size_t> gt(n);
    std::iota(gt.begin(), gt.end(), 0);
    std::shuffle(gt.begin(), gt.end(), rng);
    gt.resize(1 + static_cast<std::size_t>(t) % std::min<std::size_t>(n, 3));
    suite.record("loss DPP NLL", gradcheck({random_tensor(rng, n, 1)}, [&](Graph& g, const std::vector<Var>& v) {
                   return dpp::dpp_nll(g, dpp::kernel_var(g, exp(v[0]), S), gt);
                 }));

    std::vector<distill::LabeledPair> pairs;
    for (std::size_t i = 0; i < 6 + static_cast<std::size_t>(t) % 5; ++i) {
      auto s = random_normal(rng, 1, 3), im = random_normal(rng, 1, 3);
      pairs.push_back({{s.values().begin(), s.values().end()}, {im.values().begin(), im.values().end()},
                       static_cast<int>(i % 2)});
    }
    const auto des = distill::detail::make_design(pairs);
    suite.record("loss logistic", gradcheck({random_tensor(rng, 6, 1), random_tensor(rng, 1, 1)},
                                            [&](Graph& g, const std::vector<Var>& v) {
                                              return distill::weighted_bce(g, v[0], v[1], des.features, des.labels,
                                                                           des.weights);
                                            }));

    model::ShowcaseModel m(tiny_model(12, 0.3), static_cast<std::uint64_t>(100 + t));
    const model::EncoderInput in{random_normal(rng, 1 + t % 3, 4), random_normal(rng, t % 3, 5), {}, {}};
    std::vector<TokenId> y(2 + static_cast<std::size_t>(t) % 5);
    for (auto& tok : y) tok = static_cast<TokenId>(4 + rng() % 8);
    suite.record("loss CE", showcase::testing::gradcheck_params(
                                m.params(),
                                [&](Graph& g) {
                                  auto enc = m.encode(g, in);
                                  return m.sample_nll(g, enc, y);
                                },
                                120, static_cast<std::uint64_t>(t)));
  }
  return suite.outcome();
}

// ---------------------------------------------------------------- criterion 2

Outcome reduction_identities() {
  std::mt19937_64 rng(8);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t B = 1 + static_cast<std::size_t>(trial) % 8;
    Graph g = Graph::inference();
    pc2l::ProjectedBatch p;
    p.h_v = g.constant(random_normal(rng, B, 6));
    p.h_r = g.constant(random_normal(rng, B, 6));
    p.h_y = g.constant(random_normal(rng, B, 6));
    p.history_means = rows_of(random_normal(rng, B, 4));
    const double cl_r = g.value(pc2l::cl_loss(p.h_r, p.h_y, 0.1)).item();
    const double cl_v = g.value(pc2l::cl_loss(p.h_v, p.h_y, 0.1)).item();
    worst = std::max(worst, std::abs(g.value(pc2l::pcl_loss(p, 0.1, 1.0)).item() - cl_r));
    worst = std::max(worst, std::abs(g.value(pc2l::ccl_loss(p, 0.1)).item() - cl_v));
    p.h_ent = pc2l::ExtraNegatives{g.constant(random_normal(rng, B, 6)), std::vector<bool>(B, false)};
    worst = std::max(worst, std::abs(g.value(pc2l::ccl_loss(p, 0.1)).item() - cl_v));
  }
  return {worst <= 1e-12, "100 batches, max |diff| " + fmt(worst) + " (tol 1e-12)"};
}

// ---------------------------------------------------------------- criterion 3

Outcome closed_form_losses() {
  std::mt19937_64 rng(4);
  Outcome o;
  double single = 0.0;
  for (int i = 0; i < 20; ++i) {
    Graph g = Graph::inference();
    single = std::max(single, std::abs(g.value(pc2l::cl_loss(g.constant(random_normal(rng, 1, 6)),
                                                             g.constant(random_normal(rng, 1, 6)), 0.1))
                                           .item()));
  }
  Graph g = Graph::inference();
  Tensor same(2, 3, 1.0);
  const double pair = g.value(pc2l::cl_loss(g.constant(same), g.constant(same), 0.1)).item();
  const double pair_err = std::abs(pair - 2.0 * std::log(2.0));

  double ce_err = 0.0;
  for (std::size_t V : {12u, 40u, 100u}) {
    model::ShowcaseModel m(tiny_model(V, 0.3), V);
    m.zero_output_head();
    for (std::size_t len : {1u, 3u, 9u}) {
      std::vector<TokenId> y(len);
      for (auto& t : y) t = static_cast<TokenId>(4 + rng() % (V - 4));
      Graph h = Graph::inference();
      auto enc = m.encode(h, {random_normal(rng, 2, 4), random_normal(rng, 1, 5), {}, {}});
      const double ce = h.value(m.sample_nll(h, enc, y)).item();
      ce_err = std::max(ce_err, std::abs(ce - static_cast<double>(len + 1) * std::log(static_cast<double>(V))));
    }
  }
  o.pass = single <= 1e-12 && pair_err <= 1e-9 && ce_err <= 1e-6;
  o.detail = "batch-1 " + fmt(single) + ", batch-2 err " + fmt(pair_err) + ", uniform CE err " + fmt(ce_err) +
             " (L counts the end token)";
  return o;
}

// ---------------------------------------------------------------- criterion 4

Outcome dpp_correctness() {
  using showcase::testing::eigen_det;
  std::mt19937_64 rng(7);
  double gain_err = 0.0, dup = 0.0;
  int order_mismatch = 0, selection_mismatch = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(trial) % 11;
    const std::size_t rank = 1 + rng() % n;
    const std::size_t K = 1 + static_cast<std::size_t>(trial) % 4;
    const Tensor L = showcase::testing::random_kernel(rng, n, rank);
    const auto res = dpp::greedy_map(L, K, dpp::GreedyMethod::kIncremental);
    if (res.selected != showcase::testing::naive_greedy(L, std::min(K, rank))) ++selection_mismatch;
    double cum = 0.0;
    for (std::size_t s = 0; s < res.selected.size(); ++s) {
      cum += res.gains[s];
      std::vector<std::size_t> prefix(res.selected.begin(), res.selected.begin() + static_cast<std::ptrdiff_t>(s + 1));
      const double ld = std::log(eigen_det(L, prefix));
      gain_err = std::max(gain_err, std::abs(cum - ld) / std::max(1.0, std::abs(ld)));
    }

    Tensor cands = random_normal(rng, 6, 5);
    const std::size_t a = rng() % 6, b = (a + 1 + rng() % 5) % 6;
    for (std::size_t k = 0; k < 5; ++k) cands(b, k) = cands(a, k);
    std::uniform_real_distribution<double> rel(0.1, 5.0);
    std::vector<double> r(6);
    for (auto& x : r) x = rel(rng);
    const auto kernel = dpp::kernel_from(r, dpp::cosine_similarity_matrix(cands));
    dup = std::max(dup, dpp::marginal_gains(kernel.L, {a})[b]);

    const std::size_t ni = 2 + static_cast<std::size_t>(trial) % 11;
    std::vector<double> ri(ni);
    for (auto& x : ri) x = rel(rng);
    const auto ik = dpp::kernel_from(ri, Tensor::identity(ni));
    std::vector<std::size_t> expected(ni);
    std::iota(expected.begin(), expected.end(), 0);
    std::stable_sort(expected.begin(), expected.end(), [&](auto x, auto y) { return ri[x] > ri[y]; });
    for (auto m : {dpp::GreedyMethod::kDirect, dpp::GreedyMethod::kIncremental})
      if (dpp::greedy_map(ik, ni, m).selected != expected) ++order_mismatch;
  }
  Outcome o;
  o.pass = gain_err <= 1e-8 && dup <= 1e-10 && order_mismatch == 0 && selection_mismatch == 0;
  o.detail = "200 kernels: log-det gain err " + fmt(gain_err) + ", selection mismatches " +
             std::to_string(selection_mismatch) + ", duplicate gain " + fmt(dup) + ", S=I order mismatches " +
             std::to_string(order_mismatch);
  return o;
}

// ---------------------------------------------------------------- criterion 5

std::vector<std::string> names(const std::vector<std::size_t>& idx) {
  std::vector<std::string> out;
  for (auto i : idx) out.push_back(std::to_string(i));
  return out;
}

Outcome selection_learning() {
  auto bench = fixture::planted_selection({.interactions = 500, .seed = 21});
  std::vector<dpp::Interaction> train(bench.interactions.begin(), bench.interactions.begin() + 400);
  std::vector<dpp::Interaction> test(bench.interactions.begin() + 400, bench.interactions.end());
  dpp::RelevanceModel model(dpp::MlpConfig::desk(8, 8), 4);
  dpp::train_relevance(model, train, {.epochs = 400, .lr = 1e-3, .batch = 512, .seed = 2});
  double f1 = 0.0;
  for (const auto& x : test)
    f1 += dpp::rank_metrics(names(dpp::greedy_map(dpp::build_kernel(x.profile, x.candidates, model), 3).selected),
                            names(x.ground_truth), 3)
              .f1;
  f1 /= static_cast<double>(test.size());
  std::mt19937_64 rng(3);
  double baseline = 0.0;
  for (int t = 0; t < 1000; ++t)
    for (const auto& x : test)
      baseline +=
          dpp::rank_metrics(names(dpp::random_selection(x.candidates.rows(), 3, rng)), names(x.ground_truth), 3).f1;
  baseline /= 1000.0 * static_cast<double>(test.size());
  return {f1 >= 2.0 * baseline, "held-out F1@3 " + fmt(f1) + " vs random " + fmt(baseline) + " (400 train / 100 test)"};
}

// ---------------------------------------------------------------- criterion 6

Outcome overfit_sanity() {
  struct Reached {};
  const std::size_t V = 40;
  std::mt19937_64 rng(6);
  std::vector<pc2l::TrainSample> suite(8);
  for (std::size_t i = 0; i < suite.size(); ++i) {
    suite[i].input = {random_normal(rng, 1 + i % 3, 16), random_normal(rng, 1 + i % 2, 16), {}, {}};
    suite[i].target.resize(10);
    for (auto& t : suite[i].target) t = static_cast<TokenId>(4 + rng() % (V - 4));
  }
  model::ShowcaseModel m(model::ModelConfig::desk(V, 16, 16), 6);
  std::size_t reached = 0;
  double last = 0.0;
  try {
    pc2l::train(m, suite, {.mode = pc2l::LossMode::kCe, .lr = 1e-3, .batch = 8, .epochs = 2000, .max_steps = 2000, .seed = 1},
                nullptr, [&](const pc2l::StepLog& s) {
                  last = s.loss.ce;
                  if (s.loss.ce < 0.1) {
                    reached = s.step + 1;
                    throw Reached{};
                  }
                });
  } catch (const Reached&) {
  }
  if (reached == 0) return {false, "CE still " + fmt(last) + " after 2000 steps"};
  return {true, "CE " + fmt(last) + " < 0.1 at step " + std::to_string(reached) + " (lr 1e-3, 8 samples x 10 tokens)"};
}

// ---------------------------------------------------------------- criterion 7

std::vector<metrics::Tokens> random_corpus(std::mt19937_64& rng, std::size_t records, std::size_t vocab) {
  std::uniform_int_distribution<std::size_t> len(1, 12), word(0, vocab - 1);
  std::vector<metrics::Tokens> out(records);
  for (auto& s : out) {
    s.resize(len(rng));
    for (auto& w : s) w = "w" + std::to_string(word(rng));
  }
  return out;
}

Outcome metric_oracles() {
  namespace st = showcase::testing;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(0, 1);
  auto vectors = [&](std::size_t n, std::size_t d) {
    std::vector<std::vector<double>> out(n, std::vector<double>(d));
    for (auto& v : out)
      for (auto& x : v) x = nd(rng);
    return out;
  };
  auto as_rows = [](const std::vector<std::vector<double>>& v) {
    metrics::Rows<double> r;
    for (const auto& x : v) r.emplace_back(x);
    return r;
  };
  double worst = 0.0;
  int presence_mismatch = 0;
  auto track = [&](double a, double b) { worst = std::max(worst, std::abs(a - b)); };
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t records = 1 + static_cast<std::size_t>(trial) % 50;
    const auto cand = random_corpus(rng, records, 6 + static_cast<std::size_t>(trial) % 10);
    const auto ref = random_corpus(rng, records, 6 + static_cast<std::size_t>(trial) % 10);
    for (std::size_t k : {1u, 2u}) track(metrics::distinct_n(cand, k), st::naive_distinct(cand, k));
    for (std::size_t k : {1u, 2u, 3u, 4u}) track(metrics::bleu_n(cand, ref, k), st::naive_bleu(cand, ref, k));

    std::vector<metrics::DiversityItem> items;
    std::vector<st::NaiveItem> naive;
    const auto vecs = vectors(records, 5);
    for (std::size_t i = 0; i < records; ++i) {
      const std::string b = "b" + std::to_string(rng() % 4), u = "u" + std::to_string(rng() % 4);
      items.push_back({b, u, vecs[i]});
      naive.push_back({b, u, vecs[i]});
    }
    const auto d = metrics::corpus_diversity(items);
    const auto o = st::naive_diversity(naive);
    for (auto [x, y] : {std::pair{d.intra_business, o.business}, std::pair{d.inter_user, o.inter},
                        std::pair{d.intra_user, o.intra}}) {
      if (x.has_value() != y.has_value()) ++presence_mismatch;
      else if (x) track(*x, *y);
    }

    for (std::size_t r = 0; r < std::min<std::size_t>(records, 5); ++r) {
      const std::size_t ni = 1 + rng() % 5, ns = 1 + rng() % 6;
      const auto img = vectors(ni, 6), sent = vectors(ns, 6);
      distill::AlignmentClassifier clf(vectors(1, 12)[0], nd(rng));
      std::vector<std::vector<double>> cs(ni, std::vector<double>(ns)), cos(ni, std::vector<double>(ns));
      for (std::size_t i = 0; i < ni; ++i)
        for (std::size_t j = 0; j < ns; ++j) {
          cos[i][j] = st::naive_cosine(img[i], sent[j]);
          double z = clf.bias();
          for (std::size_t k = 0; k < 6; ++k) z += clf.weights()[k] * sent[j][k] + clf.weights()[6 + k] * img[i][k];
          cs[i][j] = 1.0 / (1.0 + std::exp(-z));
        }
      track(metrics::clip_score(as_rows(img), as_rows(sent)), st::naive_mean_max(cos));
      track(metrics::clip_align(as_rows(img), as_rows(sent), clf), st::naive_mean_max(cs));
    }
  }
  return {worst <= 1e-9 && presence_mismatch == 0,
          "100 corpora: max |diff| " + fmt(worst) + ", undefined-level mismatches " + std::to_string(presence_mismatch)};
}

// ---------------------------------------------------------------- criterion 8

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("showcase_acceptance_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

Outcome distillation() {
  TempDir dir("distill");
  std::clog.setstate(std::ios::failbit);
  pipeline::cmd_fixture(dir.path, 0);
  auto cfg = pipeline::load_config(dir.path / "config.ini");
  pipeline::CommandOptions opt;
  opt.out = dir.path;
  pipeline::cmd_distill(cfg, opt);
  std::clog.clear();
  std::ifstream in(dir.path / "distill_report.json");
  const auto report = nlohmann::json::parse(in);
  const double auc = report.at("test").at("auc").get<double>();

  std::mt19937_64 rng(21);
  std::normal_distribution<float> n;
  int violations = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t ns = 1 + rng() % 8, ni = 1 + rng() % 5;
    std::vector<std::string> sids, iids;
    for (std::size_t i = 0; i < ns; ++i) sids.push_back("s" + std::to_string(i));
    for (std::size_t i = 0; i < ni; ++i) iids.push_back("i" + std::to_string(i));
    std::vector<float> s(ns * 4), im(ni * 4);
    for (auto& v : s) v = n(rng);
    for (auto& v : im) v = n(rng);
    EmbeddingStore ss(EmbeddingKind::kSentence, 4, sids, s);
    EmbeddingStore is(EmbeddingKind::kImage, 4, iids, im);
    std::vector<double> w(8);
    for (auto& v : w) v = n(rng);
    distill::AlignmentClassifier clf(w, n(rng));
    distill::RawReview review{"r", "u", "b", sids, iids};
    std::vector<std::pair<std::size_t, std::string>> prev;
    for (int step = 0; step <= 20; ++step) {
      std::vector<std::pair<std::size_t, std::string>> kept;
      for (const auto& p : distill::distill_review(review, step / 20.0, clf, ss, is))
        kept.emplace_back(p.sentence_idx, p.image_id);
      std::sort(kept.begin(), kept.end());
      if (step > 0 && !std::includes(prev.begin(), prev.end(), kept.begin(), kept.end())) ++violations;
      prev = std::move(kept);
    }
  }
  return {auc >= 0.95 && violations == 0,
          "fixture test AUC " + fmt(auc) + ", monotonicity violations over 50 corpora " + std::to_string(violations)};
}

// ---------------------------------------------------------------- criterion 9

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("\"") + SHOWCASE_CLI_PATH + "\" " + args + " >>\"" + log.string() + "\" 2>&1";
  const int rc = std::system(cmd.c_str());
  return rc == -1 ? -1 : WEXITSTATUS(rc);
}

std::map<std::string, std::string> snapshot_tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), root).generic_string();
    std::ifstream in(e.path(), std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (rel.rfind("manifests/", 0) == 0) {
      auto j = nlohmann::json::parse(bytes);
      for (const char* k : {"started_at", "finished_at", "wall_seconds"}) j.erase(k);
      bytes = j.dump();
    }
    out[rel] = std::move(bytes);
  }
  return out;
}

Outcome determinism() {
  TempDir dir("determinism");
  std::vector<std::map<std::string, std::string>> trees;
  for (const char* run : {"a", "b"}) {
    const fs::path out = dir.path / run / "out";
    const fs::path log = dir.path / (std::string(run) + ".log");
    const std::string common = " --out \"" + out.string() + "\"";
    if (run_cli("fixture --seed 0" + common, log) != 0) return {false, "fixture failed, see " + log.string()};
    const std::string cfg = " --config \"" + (out / "config.ini").string() + "\"";
    for (const char* cmd : {"distill", "select-train", "select", "train", "generate", "evaluate"})
      if (run_cli(std::string(cmd) + cfg + common, log) != 0) {
        std::ifstream in(log);
        return {false, std::string(cmd) + " failed: " + std::string(std::istreambuf_iterator<char>(in), {})};
      }
    trees.push_back(snapshot_tree(out));
  }
  std::vector<std::string> differing;
  for (const auto& [rel, bytes] : trees[0]) {
    auto it = trees[1].find(rel);
    if (it == trees[1].end() || it->second != bytes) differing.push_back(rel);
  }
  for (const auto& [rel, bytes] : trees[1])
    if (!trees[0].contains(rel)) differing.push_back(rel);
  if (!differing.empty()) {
    std::string d = "differing artifacts:";
    for (const auto& r : differing) d += " " + r;
    return {false, d};
  }
  return {true, std::to_string(trees[0].size()) +
                    " artifacts byte-identical across two seed-0 runs (manifest timestamps excluded)"};
}

// ---------------------------------------------------------------- criterion 10

Outcome decoding() {
  std::mt19937_64 rng(12);
  int mismatches = 0;
  std::size_t longest = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto cfg = tiny_model(10, 1.0);
    cfg.enc_layers = 2;
    cfg.dec_layers = 2;
    cfg.ffn = 12;
    model::ShowcaseModel m(cfg, static_cast<std::uint64_t>(400 + trial));
    const model::EncoderInput in{random_normal(rng, 1 + trial % 3, 4), random_normal(rng, trial % 4, 5), {}, {}};
    const auto beam1 = m.generate(in, 1, 64);
    if (beam1 != showcase::testing::greedy_oracle(m, in, 64)) ++mismatches;
    longest = std::max({longest, beam1.size(), m.generate(in, 2, 64).size(), m.generate(in, 4, 64).size()});
  }
  return {mismatches == 0 && longest <= 64,
          "100 models: beam-1 mismatches " + std::to_string(mismatches) + ", longest output " + std::to_string(longest)};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient integrity", gradient_integrity},
      {"reduction identities", reduction_identities},
      {"closed-form loss values", closed_form_losses},
      {"DPP correctness", dpp_correctness},
      {"selection learning", selection_learning},
      {"overfit sanity", overfit_sanity},
      {"metric oracles", metric_oracles},
      {"distillation", distillation},
      {"determinism", determinism},
      {"decoding", decoding},
  };
  const std::map<int, double> budget_seconds = {{1, 60.0}, {5, 300.0}, {6, 180.0}};
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (auto b = budget_seconds.find(id); b != budget_seconds.end() && secs >= b->second) {
      o.pass = false;
      o.detail += "; over the " + fmt(b->second) + " s budget";
    }
    failures += !o.pass;
    std::printf("%s  %2d %-24s %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
