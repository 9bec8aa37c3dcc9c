#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numbers>
#include <random>

#include "showcase/pc2l.hpp"
#include "support/gradcheck.hpp"

using namespace showcase;
using namespace showcase::pc2l;
using showcase::testing::random_normal;

namespace {

double cos_rows(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t k = 0; k < a.cols(); ++k) {
    ab += a(i, k) * b(j, k);
    aa += a(i, k) * a(i, k);
    bb += b(j, k) * b(j, k);
  }
  return ab / std::sqrt(aa * bb);
}

// Direct double loop over the InfoNCE definition.
double naive_nce(const Tensor& A, const Tensor& T, double tau, const Tensor* W = nullptr, const Tensor* E = nullptr,
                 const std::vector<bool>* present = nullptr) {
  double total = 0.0;
  for (std::size_t i = 0; i < A.rows(); ++i) {
    const double pos = std::exp(cos_rows(A, i, T, i) / tau);
    double den = pos;
    for (std::size_t j = 0; j < A.rows(); ++j)
      if (j != i) den += (W ? (*W)(i, j) : 1.0) * std::exp(cos_rows(A, i, T, j) / tau);
    if (E && (*present)[i]) den += std::exp(cos_rows(A, i, *E, i) / tau);
    total += -std::log(pos / den);
  }
  return total;
}

double nce(const Tensor& A, const Tensor& T, double tau, const std::optional<Tensor>& W = std::nullopt,
           const Tensor* E = nullptr, const std::vector<bool>* present = nullptr) {
  Graph g = Graph::inference();
  std::optional<ExtraNegatives> extra;
  if (E) extra = ExtraNegatives{g.constant(*E), *present};
  return g.value(info_nce(g.constant(A), g.constant(T), tau, W, extra)).item();
}

std::vector<std::vector<double>> random_histories(std::mt19937_64& rng, std::size_t B, std::size_t d) {
  Tensor t = random_normal(rng, B, d);
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < B; ++i) out.emplace_back(t.row(i).begin(), t.row(i).end());
  return out;
}

Tensor weights_oracle(const std::vector<std::vector<double>>& h, double alpha) {
  Tensor w(h.size(), h.size(), 1.0);
  for (std::size_t i = 0; i < h.size(); ++i)
    for (std::size_t j = 0; j < h.size(); ++j) {
      if (i == j) continue;
      double ab = 0, aa = 0, bb = 0;
      for (std::size_t k = 0; k < h[i].size(); ++k) {
        ab += h[i][k] * h[j][k];
        aa += h[i][k] * h[i][k];
        bb += h[j][k] * h[j][k];
      }
      const double sim = std::min(1.0, std::max(0.0, ab / std::sqrt(aa * bb)));
      w(i, j) = std::pow(alpha, 1.0 - sim);
    }
  return w;
}

Vocab food_vocab() { return Vocab({"i", "like", "the", "sushi", "burger", "fried", "rice", "was", "great"}); }

model::ModelConfig tiny_config(std::size_t vocab) {
  auto c = model::ModelConfig::desk(vocab, 4, 5);
  c.hidden = 8;
  c.heads = 2;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.ffn = 8;
  c.proj_dim = 4;
  c.init_std = 0.3;
  return c;
}

std::vector<TrainSample> random_samples(std::mt19937_64& rng, std::size_t n, const Vocab& v) {
  std::vector<TrainSample> out;
  std::uniform_int_distribution<int> len(3, 7);
  for (std::size_t i = 0; i < n; ++i) {
    TrainSample s;
    s.input.images = random_normal(rng, 1 + i % 3, 4);
    s.input.reviews = random_normal(rng, 1 + i % 2, 5);
    const int L = len(rng);
    for (int t = 0; t < L; ++t) s.target.push_back(static_cast<TokenId>(4 + (i * 3 + static_cast<std::size_t>(t)) % 9));
    if (i % 2 == 0) {
      s.target[1] = v.id("sushi");
      s.spans.push_back({1, 2, "sushi"});
    }
    auto h = random_normal(rng, 1, 5);
    s.history_mean.assign(h.values().begin(), h.values().end());
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST(EntityNegative, SwapsSushiForBurger) {
  Vocab v = food_vocab();
  EntityVocab ev({"sushi", "burger"}, v);
  std::mt19937_64 rng(1);
  auto y = v.encode("I like the sushi");
  auto neg = make_entity_negative(y, {{3, 4, "sushi"}}, ev, rng);
  ASSERT_TRUE(neg.has_value());
  EXPECT_EQ(v.decode(*neg), "i like the burger");
}

TEST(EntityNegative, NoSpansGivesNothing) {
  Vocab v = food_vocab();
  EntityVocab ev({"sushi", "burger"}, v);
  std::mt19937_64 rng(1);
  EXPECT_FALSE(make_entity_negative(v.encode("i like the sushi"), {}, ev, rng).has_value());
}

TEST(EntityNegative, SplicesMultiTokenEntitiesAndTruncates) {
  Vocab v = food_vocab();
  EntityVocab ev({"sushi", "fried rice"}, v);
  std::mt19937_64 rng(2);
  auto neg = make_entity_negative(v.encode("the sushi was great"), {{1, 2, "sushi"}}, ev, rng);
  EXPECT_EQ(v.decode(*neg), "the fried rice was great");
  std::vector<TokenId> longy(64, v.id("great"));
  longy[63] = v.id("sushi");
  neg = make_entity_negative(longy, {{63, 64, "sushi"}}, ev, rng);
  EXPECT_EQ(neg->size(), 64u);
  EXPECT_EQ(neg->back(), v.id("fried"));
}

TEST(EntityNegative, NeverKeepsTheOriginalAndIsUniform) {
  Vocab v({"a", "b", "c", "d"});
  EntityVocab ev({"a", "b", "c", "d"}, v);
  std::mt19937_64 rng(3);
  std::map<TokenId, int> counts;
  for (int i = 0; i < 3000; ++i) {
    auto neg = make_entity_negative({v.id("a"), v.id("b")}, {{0, 1, "a"}, {1, 2, "b"}}, ev, rng);
    EXPECT_NE((*neg)[0], v.id("a"));
    EXPECT_NE((*neg)[1], v.id("b"));
    ++counts[(*neg)[0]];
  }
  for (auto t : {v.id("b"), v.id("c"), v.id("d")}) EXPECT_NEAR(counts[t] / 3000.0, 1.0 / 3.0, 0.04);
}

TEST(EntityNegative, SeededAndValidated) {
  Vocab v = food_vocab();
  EntityVocab ev({"sushi", "burger", "fried rice"}, v);
  auto y = v.encode("i like the sushi , the burger");
  std::vector<EntitySpan> spans{{5, 6, "burger"}, {3, 4, "sushi"}};
  std::mt19937_64 r1(9), r2(9);
  EXPECT_EQ(make_entity_negative(y, spans, ev, r1), make_entity_negative(y, spans, ev, r2));
  EXPECT_THROW(make_entity_negative(y, {{3, 9, "sushi"}}, ev, r1), DataError);
  EXPECT_THROW(make_entity_negative(y, {{3, 5, "x"}, {4, 6, "y"}}, ev, r1), DataError);
  EXPECT_THROW(make_entity_negative(y, {{3, 3, "x"}}, ev, r1), DataError);
  EntityVocab one({"sushi"}, v);
  EXPECT_THROW(make_entity_negative(y, spans, one, r1), DataError);
}

TEST(InfoNce, ClosedForms) {
  std::mt19937_64 rng(4);
  Tensor a = random_normal(rng, 1, 6), t = random_normal(rng, 1, 6);
  EXPECT_EQ(nce(a, t, 0.1), 0.0);
  Tensor same(2, 3, 1.0);
  EXPECT_NEAR(nce(same, same, 0.1), 2.0 * std::log(2.0), 1e-9);
  Tensor ent = t;
  std::vector<bool> present{true};
  EXPECT_NEAR(nce(a, t, 0.1, std::nullopt, &ent, &present), std::log(2.0), 1e-12);
  std::vector<bool> absent{false};
  EXPECT_EQ(nce(a, t, 0.1, std::nullopt, &ent, &absent), 0.0);
}

TEST(InfoNce, MatchesNaiveOracle) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> wdist(0.5, 3.0);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t B = 2 + trial % 5;
    Tensor A = random_normal(rng, B, 6), T = random_normal(rng, B, 6), E = random_normal(rng, B, 6);
    Tensor W(B, B);
    for (auto& w : W.values()) w = wdist(rng);
    std::vector<bool> present(B);
    for (std::size_t i = 0; i < B; ++i) present[i] = (trial + i) % 3 != 0;
    const double tau = 0.05 + 0.1 * (trial % 4);
    EXPECT_NEAR(nce(A, T, tau), naive_nce(A, T, tau), 1e-9);
    EXPECT_NEAR(nce(A, T, tau, W), naive_nce(A, T, tau, &W), 1e-9);
    EXPECT_NEAR(nce(A, T, tau, W, &E, &present), naive_nce(A, T, tau, &W, &E, &present), 1e-9);
    EXPECT_GT(nce(A, T, tau), 0.0);
  }
}

TEST(InfoNce, RaisingANegativeSimilarityIncreasesLoss) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor A = random_normal(rng, 3, 4), T = random_normal(rng, 3, 4);
    const double before = nce(A, T, 0.1);
    // Move target 1 toward anchor 0: raises s_01, leaves the other rows' positives as they were...
    Tensor T2 = T;
    for (std::size_t k = 0; k < 4; ++k) T2(1, k) = 0.5 * T(1, k) + 0.5 * A(0, k) * std::sqrt(1.0);
    // ...but that also changes s_11 and s_21, so compare the row-0 contribution alone.
    auto row0 = [](const Tensor& a, const Tensor& t) {
      Tensor a0(1, 4), t0(1, 4), tj(2, 4);
      for (std::size_t k = 0; k < 4; ++k) a0(0, k) = a(0, k);
      double pos = std::exp(cos_rows(a, 0, t, 0) / 0.1), den = pos;
      for (std::size_t j = 1; j < 3; ++j) den += std::exp(cos_rows(a, 0, t, j) / 0.1);
      return -std::log(pos / den);
    };
    if (cos_rows(A, 0, T2, 1) > cos_rows(A, 0, T, 1)) EXPECT_GT(row0(A, T2), row0(A, T));
    (void)before;
  }
  // Extra-negative column: only s_i,ent changes.
  for (int trial = 0; trial < 50; ++trial) {
    Tensor A = random_normal(rng, 3, 4), T = random_normal(rng, 3, 4), E = random_normal(rng, 3, 4);
    std::vector<bool> present{true, true, true};
    Tensor E2 = E;
    for (std::size_t k = 0; k < 4; ++k) E2(1, k) = E(1, k) + 0.5 * A(1, k) / std::sqrt(1.0);
    const bool raised = cos_rows(A, 1, E2, 1) > cos_rows(A, 1, E, 1);
    const double l1 = nce(A, T, 0.1, std::nullopt, &E, &present);
    const double l2 = nce(A, T, 0.1, std::nullopt, &E2, &present);
    if (raised) EXPECT_GT(l2, l1);
  }
}

TEST(InfoNce, Errors) {
  Graph g = Graph::inference();
  Var a = g.constant(Tensor(2, 3, 1.0));
  EXPECT_THROW(info_nce(a, a, 0.0), UsageError);
  EXPECT_THROW(info_nce(a, a, -1.0), UsageError);
  Tensor w(2, 2, 1.0);
  w(0, 1) = 0.0;
  EXPECT_THROW(info_nce(a, a, 0.1, w), DataError);
  EXPECT_THROW(info_nce(a, g.constant(Tensor(3, 3, 1.0)), 0.1), DataError);
}

TEST(PclWeights, ClosedFormsAndBounds) {
  EXPECT_DOUBLE_EQ(pcl_weight(1.0, std::numbers::e), 1.0);
  EXPECT_NEAR(pcl_weight(0.0, std::numbers::e), 2.718281828459045, 1e-15);
  EXPECT_DOUBLE_EQ(pcl_weight(0.3, 1.0), 1.0);
  EXPECT_THROW(pcl_weight(0.5, 0.9), UsageError);
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    auto h = random_histories(rng, 5, 4);
    const double alpha = 1.0 + trial * 0.1;
    Tensor w = pcl_weights(h, alpha);
    Tensor o = weights_oracle(h, alpha);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        EXPECT_EQ(w(i, j), w(j, i));
        EXPECT_GE(w(i, j), 1.0);
        EXPECT_LE(w(i, j), alpha);
        if (i != j) EXPECT_NEAR(w(i, j), o(i, j), 1e-12);
      }
  }
  EXPECT_THROW(pcl_weights({{1, 0}, {0, 1}}, 0.5), UsageError);
}

TEST(Reductions, PclWithUnitAlphaAndCclWithoutEntitiesEqualCl) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t B = 1 + trial % 6;
    Graph g = Graph::inference();
    ProjectedBatch p;
    p.h_v = g.constant(random_normal(rng, B, 5));
    p.h_r = g.constant(random_normal(rng, B, 5));
    p.h_y = g.constant(random_normal(rng, B, 5));
    p.history_means = random_histories(rng, B, 3);
    const double cl_r = g.value(cl_loss(p.h_r, p.h_y, 0.1)).item();
    EXPECT_NEAR(g.value(pcl_loss(p, 0.1, 1.0)).item(), cl_r, 1e-12);
    const double cl_v = g.value(cl_loss(p.h_v, p.h_y, 0.1)).item();
    EXPECT_NEAR(g.value(ccl_loss(p, 0.1)).item(), cl_v, 1e-12);
    p.h_ent = ExtraNegatives{g.constant(random_normal(rng, B, 5)), std::vector<bool>(B, false)};
    EXPECT_NEAR(g.value(ccl_loss(p, 0.1)).item(), cl_v, 1e-12);
  }
}

TEST(Reductions, CclAndPclMatchNaiveOracles) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    Graph g = Graph::inference();
    Tensor V = random_normal(rng, 3, 5), R = random_normal(rng, 4, 5), Y3 = random_normal(rng, 3, 5),
           Y4 = random_normal(rng, 4, 5), E = random_normal(rng, 3, 5);
    std::vector<bool> present{true, trial % 2 == 0, true};
    ProjectedBatch p;
    p.h_v = g.constant(V);
    p.h_y = g.constant(Y3);
    p.h_ent = ExtraNegatives{g.constant(E), present};
    EXPECT_NEAR(g.value(ccl_loss(p, 0.1)).item(), naive_nce(V, Y3, 0.1, nullptr, &E, &present), 1e-9);
    ProjectedBatch q;
    q.h_r = g.constant(R);
    q.h_y = g.constant(Y4);
    q.history_means = random_histories(rng, 4, 3);
    Tensor W = weights_oracle(q.history_means, std::numbers::e);
    EXPECT_NEAR(g.value(pcl_loss(q, 0.1, std::numbers::e)).item(), naive_nce(R, Y4, 0.1, &W), 1e-9);
  }
}

TEST(TotalLoss, Arithmetic) {
  auto b = total_loss(1.0, 2.0, 3.0, 0.2, 0.2);
  EXPECT_NEAR(b.total, 2.0, 1e-12);
  EXPECT_EQ(total_loss(1.5, 2.0, 3.0, 0.0, 0.0).total, 1.5);
  EXPECT_THROW(total_loss(1, 1, 1, -0.1, 0), UsageError);
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(0, 10);
  for (int i = 0; i < 100; ++i) {
    const double ce = u(rng), c = u(rng), p = u(rng), l1 = u(rng) / 10, l2 = u(rng) / 10;
    EXPECT_NEAR(total_loss(ce, c, p, l1, l2).total, ce + l1 * c + l2 * p, 1e-9);
  }
}

TEST(LossMode, ParseRoundTrip) {
  for (const char* s : {"ce", "ce+cl", "ce+ccl", "ce+pcl", "ce+ccl+pcl"}) EXPECT_EQ(to_string(parse_loss_mode(s)), s);
  EXPECT_THROW(parse_loss_mode("cl"), UsageError);
}

TEST(Gradients, InfoNceWithWeightsAndExtras) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> wdist(0.5, 3.0);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t B = 1 + trial % 5;
    Tensor W(B, B);
    for (auto& w : W.values()) w = wdist(rng);
    std::vector<bool> present(B);
    for (std::size_t i = 0; i < B; ++i) present[i] = (trial + i) % 2 == 0;
    const double err = showcase::testing::gradcheck(
        {random_normal(rng, B, 4), random_normal(rng, B, 4), random_normal(rng, B, 4)},
        [&](Graph&, const std::vector<Var>& x) {
          return info_nce(x[0], x[1], 0.5, W, ExtraNegatives{x[2], present});
        });
    EXPECT_LT(err, 1e-3) << "trial " << trial;
  }
}

TEST(Gradients, AllLossesThroughProjectionHeads) {
  Vocab v = food_vocab();
  EntityVocab ev({"sushi", "burger", "fried rice"}, v);
  std::mt19937_64 rng(12);
  for (auto mode : {LossMode::kCeCl, LossMode::kCeCcl, LossMode::kCePcl, LossMode::kCeCclPcl}) {
    int checked = 0;
    for (std::uint64_t seed = 0; checked < 3; ++seed) {
      auto cfg = tiny_config(v.size());
      cfg.lambda1 = 0.7;
      cfg.lambda2 = 0.4;
      cfg.tau = 0.5;
      model::ShowcaseModel m(cfg, seed);
      auto samples = random_samples(rng, 4, v);
      std::vector<const TrainSample*> batch;
      for (auto& s : samples) batch.push_back(&s);
      auto f = [&](Graph& g) {
        std::mt19937_64 ent(5);
        return batch_loss(g, m, batch, mode, &ev, ent).total;
      };
      {
        // Central differences are only meaningful away from the head ReLU kinks.
        Graph probe = Graph::inference();
        f(probe);
        if (probe.kink_margin() < 1e-2) continue;
      }
      const double err = showcase::testing::gradcheck_params(m.params(), f, 400, seed);
      EXPECT_LT(err, 1e-3) << to_string(mode) << " seed " << seed;
      ++checked;
    }
  }
}

TEST(Gradients, TotalLossReachesEveryComponent) {
  Vocab v = food_vocab();
  EntityVocab ev({"sushi", "burger", "fried rice"}, v);
  std::mt19937_64 rng(13);
  model::ShowcaseModel m(tiny_config(v.size()), 13);
  auto samples = random_samples(rng, 4, v);
  std::vector<const TrainSample*> batch;
  for (auto& s : samples) batch.push_back(&s);
  std::mt19937_64 ent(1);
  m.params().zero_grad();
  Graph g;
  auto loss = batch_loss(g, m, batch, LossMode::kCeCclPcl, &ev, ent);
  g.backward(loss.total);
  auto norm = [&](const std::string& prefix) {
    double s = 0.0;
    for (auto& [name, p] : m.params())
      if (name.rfind(prefix, 0) == 0)
        for (double x : p.grad.values()) s += x * x;
    return s;
  };
  for (const char* part : {"enc.", "dec.", "pc2l.phi_v", "pc2l.phi_r", "pc2l.phi_y"}) EXPECT_GT(norm(part), 0.0) << part;
  EXPECT_NEAR(loss.breakdown.total,
              loss.breakdown.ce + loss.breakdown.lambda1 * loss.breakdown.ccl + loss.breakdown.lambda2 * loss.breakdown.pcl,
              1e-9);
}

TEST(Trainer, ZeroLambdasReproduceCeModeBitForBit) {
  Vocab v = food_vocab();
  EntityVocab ev({"sushi", "burger", "fried rice"}, v);
  std::mt19937_64 rng(14);
  auto samples = random_samples(rng, 10, v);
  auto cfg = tiny_config(v.size());
  cfg.lambda1 = 0.0;
  cfg.lambda2 = 0.0;
  model::ShowcaseModel a(cfg, 3), b(cfg, 3);
  TrainOptions o{.mode = LossMode::kCe, .lr = 1e-3, .batch = 4, .epochs = 3, .seed = 7};
  auto la = train(a, samples, o, &ev);
  o.mode = LossMode::kCeCclPcl;
  auto lb = train(b, samples, o, &ev);
  ASSERT_EQ(la.size(), lb.size());
  for (std::size_t i = 0; i < la.size(); ++i) {
    EXPECT_EQ(la[i].loss.ce, lb[i].loss.ce);
    EXPECT_EQ(la[i].loss.total, lb[i].loss.total);
  }
  EXPECT_TRUE(a.params() == b.params());
}

TEST(Trainer, SameSeedSameParameters) {
  Vocab v = food_vocab();
  EntityVocab ev({"sushi", "burger", "fried rice"}, v);
  std::mt19937_64 rng(15);
  auto samples = random_samples(rng, 6, v);
  model::ShowcaseModel a(tiny_config(v.size()), 4), b(tiny_config(v.size()), 4);
  TrainOptions o{.mode = LossMode::kCeCclPcl, .lr = 1e-3, .batch = 3, .epochs = 2, .seed = 1};
  train(a, samples, o, &ev);
  train(b, samples, o, &ev);
  EXPECT_TRUE(a.params() == b.params());
  model::ShowcaseModel c(tiny_config(v.size()), 4);
  o.seed = 2;
  train(c, samples, o, &ev);
  EXPECT_FALSE(a.params() == c.params());
}

TEST(Trainer, CeDecreasesAndMaxStepsHonoured) {
  Vocab v = food_vocab();
  std::mt19937_64 rng(16);
  auto samples = random_samples(rng, 4, v);
  model::ShowcaseModel m(tiny_config(v.size()), 5);
  auto log = train(m, samples, {.mode = LossMode::kCe, .lr = 1e-2, .batch = 4, .epochs = 1000, .max_steps = 150});
  ASSERT_EQ(log.size(), 150u);
  EXPECT_LT(log.back().loss.ce, 0.5 * log.front().loss.ce);
  EXPECT_THROW(train(m, samples, {.mode = LossMode::kCeCcl}), UsageError);
  EXPECT_THROW(train(m, {}, {}), DataError);
}

TEST(Project, PoolsRowsThenAppliesHead) {
  model::ShowcaseModel m(tiny_config(12), 6);
  Graph g = Graph::inference();
  Tensor rows(3, 8, 0.0);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t k = 0; k < 8; ++k) rows(r, k) = 0.1 * static_cast<double>(k) - 0.3;
  Tensor one(1, 8);
  for (std::size_t k = 0; k < 8; ++k) one(0, k) = rows(0, k);
  const Tensor a = g.value(m.project(g, "v", g.constant(rows), {0, 1, 2}));
  const Tensor b = g.value(m.project(g, "v", g.constant(one), {0}));
  EXPECT_EQ(a.cols(), 4u);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(a[k], b[k], 1e-15);
  EXPECT_THROW(m.project(g, "v", g.constant(rows), {}), DataError);
}
