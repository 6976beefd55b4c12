#include <gtest/gtest.h>

#include <Eigen/Dense>

#include "cfmult/analytics.hpp"

using namespace cfmult;

namespace {

std::shared_ptr<LinearModel> linear(Vector w, double b, const std::string& id = "m") {
  auto m = std::make_shared<LinearModel>(LinearModel::affine(std::move(w), b));
  m->id = id;
  return m;
}

// Minimum-norm projection by active-set enumeration with dense solves.
std::optional<Eigen::VectorXd> oracle_projection(const Eigen::VectorXd& x, const std::vector<Eigen::VectorXd>& a,
                                                 const std::vector<double>& beta) {
  auto feasible = [&](const Eigen::VectorXd& p) {
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i].dot(p) < beta[i] - 1e-9) return false;
    return true;
  };
  std::optional<Eigen::VectorXd> best;
  const int n = static_cast<int>(a.size());
  for (int mask = 0; mask < (1 << n); ++mask) {
    std::vector<int> act;
    for (int i = 0; i < n; ++i)
      if (mask & (1 << i)) act.push_back(i);
    Eigen::VectorXd p = x;
    if (!act.empty()) {
      Eigen::MatrixXd A(act.size(), x.size());
      Eigen::VectorXd r(act.size());
      for (std::size_t k = 0; k < act.size(); ++k) {
        A.row(static_cast<Eigen::Index>(k)) = a[act[k]].transpose();
        r(static_cast<Eigen::Index>(k)) = beta[act[k]] - a[act[k]].dot(x);
      }
      Eigen::MatrixXd G = A * A.transpose();
      if (std::abs(G.determinant()) < 1e-12) continue;
      p = x + A.transpose() * G.ldlt().solve(r);
    }
    if (feasible(p) && (!best || (p - x).norm() < (*best - x).norm())) best = p;
  }
  return best;
}

Dataset one_d(const std::vector<double>& xs, const std::vector<int>& ys) {
  std::vector<Vector> rows;
  for (double v : xs) rows.push_back({v});
  return Dataset(manifold_schema(1), rows, ys);
}

}  // namespace

TEST(Projection, MatchesActiveSetOracle) {
  Rng rng(21);
  std::normal_distribution<double> n(0.0, 1.0);
  int two_active = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t d = 2 + trial % 4;
    std::vector<Halfspace> hs;
    std::vector<Eigen::VectorXd> ea;
    std::vector<double> eb;
    for (int k = 0; k < 2; ++k) {
      Vector a(d);
      for (auto& v : a) v = n(rng);
      const double beta = n(rng) + 1.5;
      hs.push_back({a, beta});
      ea.push_back(Eigen::Map<Eigen::VectorXd>(a.data(), static_cast<Eigen::Index>(d)));
      eb.push_back(beta);
    }
    Vector x(d);
    for (auto& v : x) v = n(rng);
    const Eigen::VectorXd ex = Eigen::Map<Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(d));
    auto got = project_halfspaces(x, hs);
    auto want = oracle_projection(ex, ea, eb);
    ASSERT_EQ(got.has_value(), want.has_value());
    if (!got) continue;
    const Eigen::VectorXd eg = Eigen::Map<Eigen::VectorXd>(got->data(), static_cast<Eigen::Index>(d));
    EXPECT_LT((eg - *want).norm(), 1e-8) << trial;
    two_active += std::abs(hs[0].slack(*got)) < 1e-9 && std::abs(hs[1].slack(*got)) < 1e-9;
  }
  EXPECT_GT(two_active, 20);
}

TEST(Projection, ParallelEmptyIntersection) {
  // x1 >= 1 and -x1 >= 0 cannot both hold
  auto p = project_halfspaces(Vector{0.0, 0.0}, {{{1.0, 0.0}, 1.0}, {{-1.0, 0.0}, 0.0}});
  EXPECT_FALSE(p.has_value());
  EXPECT_FALSE(project_halfspaces(Vector{0.0}, {{{0.0}, 1.0}}).has_value());
  EXPECT_TRUE(project_halfspaces(Vector{0.0}, {{{0.0}, -1.0}}).has_value());
}

TEST(Transfer, Examples) {
  auto f = linear({1.0}, -1.0, "f");
  auto neg = linear({-1.0}, 1.0, "neg");
  std::vector<RecourseResult> rs;
  for (int i = 0; i < 10; ++i) {
    RecourseResult r;
    r.found = true;
    r.x_cf = {2.0 + i};
    rs.push_back(r);
  }
  auto rep = transferability(rs, {f, neg});
  EXPECT_EQ(rep.peers[0].T, 1.0);
  EXPECT_EQ(rep.peers[1].T, 0.0);
  auto g = linear({-1.0}, 8.5, "g");  // accepts x < 8.5: 2..8 -> 7 of 10
  EXPECT_DOUBLE_EQ(transferability(rs, {g}).peers[0].T, 0.7);
  EXPECT_EQ(transferability(rs, {g}).to_json()["peers"][0]["valid_count"], 7);
  EXPECT_THROW(transferability({}, {f}), DomainError);
  rs[0].found = false;
  EXPECT_THROW(transferability(rs, {f}), std::invalid_argument);
}

TEST(Discrepancy, Examples) {
  auto f = linear({1.0, 0.0}, 0.0);
  auto g = linear({0.0, 1.0}, 0.0);
  EXPECT_DOUBLE_EQ(discrepancy(*f, *g, {{-1, -2}, {-3, -1}, {-0.5, -0.5}}), 1.0);
  auto shifted = linear({1.0, 0.0}, 0.3);
  EXPECT_NEAR(discrepancy(*f, *shifted, {{-1, 0}, {2, 5}, {0.1, 0}}), 0.3, 1e-15);
  EXPECT_EQ(discrepancy(*f, *f, {{-1, 0}}), 0.0);
  EXPECT_THROW(discrepancy(*f, *g, {}), DomainError);
  auto nu = negative_union(*f, *g, {{1, 1}, {-1, 1}, {1, -1}, {-1, -1}});
  EXPECT_EQ(nu.size(), 3u);
}

TEST(BoundComponents, HandBuiltFourPoints) {
  auto f = linear({1.0}, 0.0);
  auto d = one_d({-0.5, -1.0, -2.0, 0.7}, {1, -1, -1, 1});
  auto c = bound_components(*f, d);
  EXPECT_EQ(c.n_negative, 3);
  EXPECT_DOUBLE_EQ(c.pi, 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(c.c_max, 2.0);
  EXPECT_DOUBLE_EQ(c.c_pos_mean, -0.5);
  EXPECT_DOUBLE_EQ(c.c_neg_mean, -1.5);
  EXPECT_DOUBLE_EQ(c.risk_neg, 1.0 / 3.0);
  EXPECT_FALSE(c.pos_cell_empty);

  auto f2 = linear({2.0}, 0.0);
  auto c2 = bound_components(*f2, d);
  EXPECT_DOUBLE_EQ(c2.c_max, 2.0 * c.c_max);
  EXPECT_DOUBLE_EQ(c2.c_pos_mean, 2.0 * c.c_pos_mean);
  EXPECT_DOUBLE_EQ(c2.c_neg_mean, 2.0 * c.c_neg_mean);
  EXPECT_EQ(c2.pi, c.pi);
  EXPECT_EQ(c2.risk_neg, c.risk_neg);
}

TEST(BoundComponents, PerfectClassifierAndAllPositive) {
  auto f = linear({1.0}, 0.0);
  auto c = bound_components(*f, one_d({-1.0, -2.0, 1.0}, {-1, -1, 1}));
  EXPECT_EQ(c.pi, 0.0);
  EXPECT_TRUE(c.pos_cell_empty);
  EXPECT_EQ(c.c_pos_mean, 0.0);
  EXPECT_THROW(bound_components(*f, one_d({1.0, 2.0}, {1, -1})), DomainError);
}

TEST(Bounds, Examples) {
  BoundComponents zero;
  EXPECT_EQ(multiplicity_bound(zero, zero, 0.0, {1.0, 1.0}), 0.0);
  EXPECT_EQ(single_model_bound(zero, 1.0), 0.0);

  BoundComponents c;
  c.pi = 0.5;
  c.c_pos_mean = -1.0;
  c.c_neg_mean = -1.0;
  c.c_max = 1.0;
  c.risk_neg = 0.2;
  EXPECT_NEAR(single_model_bound(c, 1.0), 0.4, 1e-15);
  EXPECT_NEAR(single_model_bound(c, 2.0), 0.8, 1e-15);
  EXPECT_NEAR(multiplicity_bound(c, c, 0.0, {1.0, 1.0}), 0.8, 1e-15);
  // bracket 0.8 + 3.2 = 4 at gamma 1/2: 8^(1/2) * 4^(1/2) = 4 sqrt 2
  EXPECT_NEAR(multiplicity_bound(c, c, 3.2, {1.0, 0.5}), 4.0 * std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(multiplicity_bound(c, c, 3.2, {1.0, 0.0}), 8.0, 1e-12);

  BoundComponents bad = c;
  bad.c_pos_mean = 5.0;
  bad.pi = 0.0;
  bad.c_neg_mean = 5.0;
  bad.risk_neg = 0.0;
  EXPECT_THROW(multiplicity_bound(bad, bad, 0.0, {1.0, 1.0}), DomainError);
  EXPECT_THROW(multiplicity_bound(c, c, 0.0, {0.0, 1.0}), std::invalid_argument);
  EXPECT_THROW(multiplicity_bound(c, c, 0.0, {1.0, 1.5}), std::invalid_argument);
  EXPECT_THROW(multiplicity_bound(c, c, -0.1, {1.0, 1.0}), std::invalid_argument);
}

TEST(Bounds, TwoModelIsTwiceSingleForIdenticalComponents) {
  Rng rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 200; ++t) {
    BoundComponents c;
    c.pi = u(rng);
    c.risk_neg = c.pi;
    c.c_max = 3.0 * u(rng);
    c.c_pos_mean = -c.c_max * u(rng);
    c.c_neg_mean = -c.c_max * u(rng);
    const double alpha = 0.1 + 5.0 * u(rng);
    EXPECT_NEAR(multiplicity_bound(c, c, 0.0, {alpha, 1.0}), 2.0 * single_model_bound(c, alpha),
                1e-12 * std::max(1.0, single_model_bound(c, alpha)));
  }
}

TEST(Calibration, UnitNormSingleModelGivesOne) {
  Rng rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  Vector w = sample_unit_sphere(3, rng);
  auto f = linear(w, 0.2);
  std::vector<Vector> rows;
  for (int i = 0; i < 200; ++i) {
    Vector x{n(rng), n(rng), n(rng)};
    if (std::abs(f->score(x)) > 0.05) rows.push_back(x);
  }
  auto cal = calibrate_alpha(*f, *f, rows);
  ASSERT_TRUE(cal.defined);
  EXPECT_NEAR(cal.alpha, 1.0, 1e-6);
  EXPECT_GT(cal.empty_regions, 0);
  EXPECT_EQ(audit_alpha(*f, *f, rows, cal.alpha), 0);
}

TEST(Calibration, OrthogonalPairOnDiagonalGivesRootTwo) {
  auto f = linear({1.0, 0.0}, -1.0, "f");
  auto g = linear({0.0, 1.0}, -1.0, "g");
  std::vector<Vector> rows;
  for (int i = 0; i < 40; ++i) rows.push_back({-3.0 + 0.09 * i, -3.0 + 0.09 * i});
  auto cal = calibrate_alpha(*f, *g, rows);
  EXPECT_NEAR(cal.alpha, std::sqrt(2.0), 1e-6);
  EXPECT_EQ(audit_alpha(*f, *g, rows, cal.alpha), 0);
  EXPECT_GT(audit_alpha(*f, *g, rows, 1.3), 0);

  auto fh = linear({0.5, 0.0}, -0.5, "f");
  auto gh = linear({0.0, 0.5}, -0.5, "g");
  EXPECT_NEAR(calibrate_alpha(*fh, *gh, rows).alpha, 2.0 * cal.alpha, 1e-6);
}

TEST(Calibration, RejectsForests) {
  auto d = synthesize_credit(200, 1);
  auto forest = std::make_shared<ForestModel>(train_forest(d, 3, 2, 1));
  auto f = linear(Vector(10, 0.1), 0.0);
  EXPECT_THROW(calibrate_alpha(*forest, *f, d.rows()), std::invalid_argument);
}

TEST(ExactCost, Examples) {
  auto f = linear({0.6, 0.8}, 0.0);
  auto one = exact_single_cost(*f, {{-0.42, -0.56}});  // f = -0.7
  EXPECT_NEAR(one.mean, 0.7, 1e-8);
  EXPECT_GE(one.mean, 0.7);

  auto a = linear({1.0, 0.0}, -1.0, "a");
  auto b = linear({0.0, 1.0}, -1.0, "b");
  auto c = empirical_multiplicity_cost(*a, *b, {{0.0, 0.0}, {5.0, 5.0}});
  EXPECT_EQ(c.sample_size, 1);
  EXPECT_NEAR(c.mean, std::sqrt(2.0), 1e-6);

  auto opposite = linear({-1.0, 0.0}, 0.0, "o");
  EXPECT_THROW(empirical_multiplicity_cost(*a, *opposite, {{0.5, 0.0}}), DomainError);
}

TEST(ExactCost, EngineEstimateUpperBoundsExact) {
  auto a = linear({1.0, 0.0}, -1.0, "a");
  auto b = linear({0.0, 1.0}, -1.0, "b");
  RecourseRequest base;
  base.schema = manifold_schema(2);
  base.budget = 10000;
  Engine gs = [](const RecourseRequest& r) { return growing_spheres(r); };
  std::vector<Vector> rows{{0, 0}, {0.5, -1}, {-1, 0.3}};
  auto est = empirical_multiplicity_cost(a, b, rows, base, gs);
  auto exact = empirical_multiplicity_cost(*a, *b, rows);
  EXPECT_TRUE(est.upper_estimate);
  EXPECT_GE(est.mean, exact.mean);
  EXPECT_LE(est.mean, 1.2 * exact.mean);
}

TEST(EvaluateBound, TwoRegularisedLogisticModelsHold) {
  auto d = synthesize_credit(1000, 3);
  auto f = std::make_shared<LinearModel>(train_linear(d, 1e-3, 100, 0.5, 1));
  auto g = std::make_shared<LinearModel>(train_linear(d, 1.0, 100, 0.5, 2));
  auto rep = evaluate_bound(*f, *g, d);
  EXPECT_TRUE(rep.holds) << rep.to_json().dump();
  EXPECT_GT(rep.discrepancy, 0.0);
  auto same = evaluate_bound(*f, *f, d);
  EXPECT_EQ(same.discrepancy, 0.0);
  EXPECT_TRUE(same.holds);
}

TEST(Surprise, Examples) {
  auto rep = surprise({{"gs", MethodFamily::sparse, 2.0, 1.0, 2.0, 0.4},
                       {"latent", MethodFamily::support, 1.0, 1.0, 1.0, 0.4},
                       {"odd", MethodFamily::sparse, 0.5, 1.0, 1.0, 0.4}});
  EXPECT_EQ(rep.methods[0].s_bar, 0.5);
  EXPECT_EQ(rep.methods[1].s_bar, 1.0);
  EXPECT_FALSE(rep.methods[1].joint_below_single);
  EXPECT_TRUE(rep.methods[2].joint_below_single);
  EXPECT_EQ(rep.methods[2].s_bar, 2.0);
  ASSERT_EQ(rep.pairs.size(), 2u);
  EXPECT_TRUE(rep.pairs[0].ordering_condition_met);
  EXPECT_EQ(rep.pairs[0].ordering_verdict, "D_more_robust");
  EXPECT_FALSE(rep.pairs[1].ordering_condition_met);

  auto unequal = surprise({{"gs", MethodFamily::sparse, 2.0, 1.0, 2.0, 0.4},
                           {"latent", MethodFamily::support, 1.0, 1.0, 1.0, 0.5}});
  EXPECT_FALSE(unequal.pairs[0].ordering_condition_met);
  EXPECT_THROW(surprise({{"gs", MethodFamily::sparse, 1.0, 0.0, 1.0, 0.0}}), std::invalid_argument);
  EXPECT_EQ(rep.to_json()["pairs"][0]["support_method"], "latent");
}

TEST(Toolkit, Examples) {
  EXPECT_TRUE(max_identity(3, 5));
  EXPECT_TRUE(max_identity(-2.5, -7));
  const Vector ones{1, 1, 1, 1};
  EXPECT_TRUE(power_mean(ones, 0.5));
  EXPECT_TRUE(jensen_power(Vector{0.3, 2.0, 9.0}, 1.0));
  EXPECT_TRUE(probability_power(0.25, 0.5));
  EXPECT_THROW(power_mean(Vector{-1.0}, 0.5), std::invalid_argument);
  EXPECT_THROW(jensen_power(Vector{1.0}, 1.5), std::invalid_argument);
  EXPECT_THROW(probability_power(1.5, 0.5), std::invalid_argument);
}

TEST(Toolkit, RandomDrawsNeverViolate) {
  Rng rng(99);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::exponential_distribution<double> e(0.5);
  for (int t = 0; t < 2000; ++t) {
    const double gamma = u(rng);
    Vector z(1 + t % 9);
    for (auto& v : z) v = e(rng);
    EXPECT_TRUE(power_mean(z, gamma));
    EXPECT_TRUE(jensen_power(z, gamma));
    EXPECT_TRUE(probability_power(u(rng), gamma));
    EXPECT_TRUE(max_identity(e(rng) - 2.0, e(rng) - 2.0));
  }
}

TEST(Corollary, Examples) {
  const Vector a{1.0, 2.0, 3.0};
  EXPECT_TRUE(corollary_check(a, a));
  EXPECT_TRUE(corollary_check(Vector{1, 1, 1}, Vector{1.5, 1.5, 1.5}));
  EXPECT_FALSE(corollary_check(Vector{1.5, 1.5}, Vector{1, 1}));
  EXPECT_THROW(corollary_check(Vector{1}, Vector{1, 2}), std::invalid_argument);
  EXPECT_THROW(corollary_check(Vector{}, Vector{}), std::invalid_argument);
}
