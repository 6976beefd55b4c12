#include <gtest/gtest.h>

#include "cfmult/generative.hpp"

using namespace cfmult;

namespace {

TrainConfig small_cfg(int epochs, std::uint64_t seed = 1) {
  TrainConfig c;
  c.epochs = epochs;
  c.seed = seed;
  c.hidden = 8;
  c.batch_size = 32;
  return c;
}

std::vector<Vector> draws(std::size_t n, std::size_t k, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<Vector> out(n, Vector(k));
  for (auto& e : out)
    for (auto& v : e) v = g(rng);
  return out;
}

}  // namespace

TEST(SupportRound, CountsPositivesAndBounds) {
  Feature c{"c"};
  c.likelihood = Likelihood::count;
  EXPECT_EQ(support_round(c, 2.4), 2.0);
  EXPECT_EQ(support_round(c, 2.6), 3.0);
  EXPECT_EQ(support_round(c, -1.7), 0.0);
  Feature p{"p"};
  p.likelihood = Likelihood::positive_continuous;
  EXPECT_EQ(support_round(p, -3.0), kPositiveFloor);
  Feature r{"r"};
  r.lower = -1.0;
  r.upper = 1.0;
  EXPECT_EQ(support_round(r, 5.0), 1.0);
  EXPECT_EQ(support_round(r, 0.25), 0.25);
}

TEST(LinearMap, DecodeEncodeRoundTrip) {
  auto spec = make_manifold_spec(3, 7, 5);
  auto h = LinearGenerativeMap::from_manifold(spec);
  EXPECT_EQ(h.dim(), 7u);
  EXPECT_EQ(h.latent_dim(), 3u);
  for (const auto& z : draws(50, 3, 2)) {
    auto back = h.encode(h.decode(z));
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(back[c], z[c], 1e-10);
    EXPECT_EQ(h.decode(z), spec.embed(z));
  }
}

TEST(LinearMap, NonOrthogonalEmbeddingLeastSquares) {
  // E = [[1,0],[1,1],[0,2]]; x = E z exactly, so least squares recovers z.
  LinearGenerativeMap h(manifold_schema(3), {{1, 0}, {1, 1}, {0, 2}}, {0.5, 0, -1});
  Vector z{0.3, -1.2};
  auto x = h.decode(z);
  EXPECT_NEAR(x[0], 0.8, 1e-15);
  EXPECT_NEAR(x[1], -0.9, 1e-15);
  EXPECT_NEAR(x[2], -3.4, 1e-15);
  auto back = h.encode(x);
  EXPECT_NEAR(back[0], 0.3, 1e-12);
  EXPECT_NEAR(back[1], -1.2, 1e-12);
  EXPECT_THROW(LinearGenerativeMap(manifold_schema(3), {{1, 2}, {1, 2}, {1, 2}}, {0, 0, 0}), std::invalid_argument);
}

TEST(Autoencoder, ZeroEpochsLeavesInitialisation) {
  auto d = synthesize_credit(200, 3);
  auto m = train_autoencoder(d, 3, small_cfg(0, 7));
  Rng rng(7);
  AutoencoderModel fresh(d, 3, 8, rng);
  EXPECT_EQ(m.params(), fresh.params());
}

TEST(Autoencoder, ZeroKlWeightObjectiveIsReconstruction) {
  auto d = synthesize_credit(100, 3);
  auto m = train_autoencoder(d, 3, small_cfg(0));
  auto eps = draws(d.n(), 3, 4);
  auto v = m.objective(m.params(), d.rows(), eps, 0.0, nullptr);
  EXPECT_EQ(v.total, v.reconstruction);
  EXPECT_GT(v.kl, 0.0);
  auto w = m.objective(m.params(), d.rows(), eps, 2.0, nullptr);
  EXPECT_DOUBLE_EQ(w.total, w.reconstruction + 2.0 * w.kl);
}

TEST(Autoencoder, GradientMatchesFiniteDifferences) {
  auto d = synthesize_credit(300, 9);
  auto m = train_autoencoder(d, 3, small_cfg(2));
  std::vector<Vector> rows(d.rows().begin(), d.rows().begin() + 5);
  auto eps = draws(5, 3, 11);
  Vector grad;
  m.objective(m.params(), rows, eps, 1.0, &grad);
  ASSERT_EQ(grad.size(), m.params().size());
  const double h = 1e-5;
  int checked = 0;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    Vector p = m.params();
    p[i] += h;
    const double up = m.objective(p, rows, eps, 1.0, nullptr).total;
    p[i] -= 2.0 * h;
    const double down = m.objective(p, rows, eps, 1.0, nullptr).total;
    const double fd = (up - down) / (2.0 * h);
    const double scale = std::max({std::abs(fd), std::abs(grad[i]), 1e-3});
    EXPECT_LE(std::abs(fd - grad[i]) / scale, 1e-4) << "param " << i;
    ++checked;
  }
  EXPECT_GT(checked, 100);
}

TEST(Autoencoder, DecodePreservesSupportAndEncodeIsDeterministic) {
  auto d = synthesize_credit(400, 5);
  auto m = train_autoencoder(d, 3, small_cfg(3));
  for (const auto& z : draws(200, 3, 6)) {
    Vector zz = z;
    for (auto& v : zz) v *= 4.0;
    auto x = m.decode(zz);
    for (std::size_t j = 0; j < x.size(); ++j)
      EXPECT_TRUE(check_feature_value(d.schema()[j], x[j]).empty()) << d.schema()[j].name << "=" << x[j];
  }
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(m.encode(d.row(i)), m.encode(d.row(i)));
  EXPECT_THROW(m.decode(Vector{0.0, std::nan(""), 0.0}), std::invalid_argument);
}

TEST(Autoencoder, TrainingLowersObjective) {
  auto d = synthesize_credit(500, 2);
  AutoencoderTrace trace;
  auto cfg = small_cfg(10);
  cfg.learning_rate = 5e-3;
  train_autoencoder(d, 3, cfg, &trace);
  ASSERT_EQ(trace.objective.size(), 11u);
  EXPECT_LE(trace.objective.back(), trace.objective[1]);
  EXPECT_LT(trace.objective.back(), trace.objective.front());
}

TEST(Autoencoder, RecoversLinearManifold) {
  auto spec = make_manifold_spec(2, 6, 3);
  auto s = synthesize_manifold(spec, 500, 4);
  auto cfg = small_cfg(200);
  cfg.hidden = 16;
  cfg.learning_rate = 1e-2;
  cfg.kl_weight = 0.01;
  auto m = train_autoencoder(s.data, 2, cfg);
  Vector mean(6, 0.0);
  for (const auto& r : s.data.rows())
    for (std::size_t j = 0; j < 6; ++j) mean[j] += r[j] / 500.0;
  double err = 0.0, var = 0.0;
  for (const auto& r : s.data.rows()) {
    auto x = m.decode(m.encode(r));
    for (std::size_t j = 0; j < 6; ++j) {
      err += (x[j] - r[j]) * (x[j] - r[j]);
      var += (r[j] - mean[j]) * (r[j] - mean[j]);
    }
  }
  EXPECT_LT(err / var, 0.10);
}

TEST(Autoencoder, JsonRoundTrip) {
  auto d = synthesize_credit(200, 8);
  auto m = train_autoencoder(d, 4, small_cfg(1));
  auto back = AutoencoderModel::from_json(nlohmann::json::parse(m.to_json().dump()));
  EXPECT_EQ(back.latent_dim(), 4u);
  for (std::size_t i = 0; i < 20; ++i) {
    auto a = m.encode(d.row(i)), b = back.encode(d.row(i));
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(a[c], b[c], 1e-12);
    auto xa = m.decode(a), xb = back.decode(a);
    for (std::size_t j = 0; j < xa.size(); ++j) EXPECT_NEAR(xa[j], xb[j], 1e-12 * std::max(1.0, std::abs(xa[j])));
  }
  auto j = m.to_json();
  j["params"].erase(0);
  EXPECT_THROW(AutoencoderModel::from_json(j), DataError);
}

TEST(Autoencoder, RejectsBadConfig) {
  auto d = synthesize_credit(50, 1);
  auto c = small_cfg(1);
  EXPECT_THROW(train_autoencoder(d, 10, c), std::invalid_argument);
  c.batch_size = 0;
  EXPECT_THROW(train_autoencoder(d, 2, c), std::invalid_argument);
  c = small_cfg(-1);
  EXPECT_THROW(train_autoencoder(d, 2, c), std::invalid_argument);
}
