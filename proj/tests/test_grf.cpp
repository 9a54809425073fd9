#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "emm/grf.hpp"

using namespace emm;

namespace {

DecisionTree stump_tree(std::vector<int> members) {
  DecisionTree t;
  t.nodes.emplace_back();
  t.nodes[0].members = std::move(members);
  return t;
}

// Minimal model whose forest is one stump over all units: kernel weights
// are uniform, so every formula can be checked by hand.
CausalForestModel hand_model(std::vector<double> z_centered, std::vector<double> y_centered,
                             std::vector<double> tau_oob, std::vector<double> ehat) {
  CausalForestModel m;
  const std::size_t n = z_centered.size();
  m.x = Matrix(n, 1);
  m.z_centered = std::move(z_centered);
  m.y_centered = std::move(y_centered);
  m.tau_oob = std::move(tau_oob);
  m.ehat = std::move(ehat);
  std::vector<int> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = static_cast<int>(i);
  m.trees.push_back(stump_tree(all));
  return m;
}

ObservationalDataset recovery_data(std::size_t n, std::uint64_t seed, double& true_ate,
                                   std::vector<double>& truth) {
  ObservationalDataset d;
  d.x = Matrix(n, 3);
  d.exposure.resize(n);
  d.outcome.resize(n);
  d.covariate_names = {"x1", "x2", "x3"};
  d.outcome_kind = OutcomeKind::continuous;
  truth.resize(n);
  Rng gen(seed);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < 3; ++j) d.x(i, j) = gen.bernoulli(0.5) ? 1.0 : 0.0;
    d.exposure[i] = gen.bernoulli(0.5) ? 1.0 : 0.0;
    truth[i] = d.x(i, 0);
    d.outcome[i] = truth[i] * d.exposure[i] + 0.1 * gen.normal();
    sum += truth[i];
  }
  true_ate = sum / static_cast<double>(n);
  return d;
}

}  // namespace

TEST_CASE("ite prediction from a hand forest") {
  auto m = hand_model({0.5, -0.5}, {1.0, -1.0}, {}, {});

  SECTION("weighted slope with zero residuals") {
    const ItePrediction p = predict_ite(m, {0.0});
    REQUIRE(p.estimate == Catch::Approx(2.0).margin(1e-15));
    REQUIRE(p.variance == Catch::Approx(0.0).margin(1e-15));
  }

  SECTION("plug-in variance from the residuals") {
    m.y_centered = {1.5, -0.5};
    const ItePrediction p = predict_ite(m, {0.0});
    // slope still 2; residuals (0.5, 0.5); each term w^2 r^2 z~^2 = 0.015625
    REQUIRE(p.estimate == Catch::Approx(2.0).margin(1e-15));
    REQUIRE(p.variance == Catch::Approx(0.5).margin(1e-15));
  }

  SECTION("no exposure variation is an error") {
    m.z_centered = {0.0, 0.0};
    REQUIRE_THROWS_WITH(predict_ite(m, {0.0}),
                        Catch::Matchers::ContainsSubstring("no exposure variation"));
  }

  SECTION("point dimension is checked") {
    REQUIRE_THROWS(predict_ite(m, {0.0, 1.0}));
  }
}

TEST_CASE("doubly robust average effect") {
  SECTION("exact nuisances and constant effect give a zero-width interval") {
    // tau = 1 everywhere and y~ = z~ make every augmented score exactly 1.
    auto m = hand_model({0.5, -0.5, 0.5, -0.5}, {0.5, -0.5, 0.5, -0.5}, {1.0, 1.0, 1.0, 1.0},
                        {0.5, 0.5, 0.5, 0.5});
    const auto scores = aipw_scores(m);
    for (double g : scores) REQUIRE(g == 1.0);
    const AteResult ate = average_treatment_effect(m);
    REQUIRE(ate.estimate == 1.0);
    REQUIRE(ate.se == 0.0);
    REQUIRE(ate.ci_lower == 1.0);
    REQUIRE(ate.ci_upper == 1.0);
  }

  SECTION("augmentation corrects a biased effect estimate") {
    // tau_oob = 0 but y~ = z~: Gamma_i = z~_i^2 / (e(1-e)) = 1.
    auto m = hand_model({0.5, -0.5}, {0.5, -0.5}, {0.0, 0.0}, {0.5, 0.5});
    const auto scores = aipw_scores(m);
    REQUIRE(scores[0] == Catch::Approx(1.0).margin(1e-15));
    REQUIRE(scores[1] == Catch::Approx(1.0).margin(1e-15));
  }

  SECTION("exposure probabilities must be inside (0,1)") {
    auto m = hand_model({0.5, -0.5}, {0.5, -0.5}, {0.0, 0.0}, {0.5, 1.0});
    REQUIRE_THROWS(aipw_scores(m));
  }
}

TEST_CASE("calibration test") {
  SECTION("orthogonal design recovers exact coefficients") {
    // taubar = 1, C = z~, D = (tau - 1) z~; C and D orthogonal by design.
    auto m = hand_model({1.0, -1.0, 1.0, -1.0}, {1.0, -1.0, 1.0, -1.0}, {2.0, 0.0, 0.0, 2.0}, {});
    const CalibrationResult r = test_calibration(m);
    REQUIRE_FALSE(r.degenerate);
    REQUIRE(r.mean_coef == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(r.diff_coef == Catch::Approx(0.0).margin(1e-12));
    // Perfect fit: zero robust standard errors fall back to p = 1.
    REQUIRE(r.mean_se == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(r.diff_p == 1.0);
  }

  SECTION("differential signal loads on the second coefficient") {
    auto m = hand_model({1.0, -1.0, 1.0, -1.0}, {}, {2.0, 0.0, 0.0, 2.0}, {});
    // y~ = C + 0.5 D exactly.
    const std::vector<double> c = {1.0, -1.0, 1.0, -1.0};
    const std::vector<double> d = {1.0, 1.0, -1.0, -1.0};
    m.y_centered.resize(4);
    for (std::size_t i = 0; i < 4; ++i) m.y_centered[i] = c[i] + 0.5 * d[i];
    const CalibrationResult r = test_calibration(m);
    REQUIRE(r.mean_coef == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(r.diff_coef == Catch::Approx(0.5).margin(1e-12));
  }

  SECTION("no spread in the estimates degenerates the differential term") {
    auto m = hand_model({1.0, -1.0, 1.0, -1.0}, {0.5, -0.5, 0.5, -0.5},
                        {0.5, 0.5, 0.5, 0.5}, {});
    const CalibrationResult r = test_calibration(m);
    REQUIRE(r.degenerate);
    REQUIRE(r.mean_coef == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(r.diff_coef == 0.0);
    REQUIRE(r.diff_se == 0.0);
    REQUIRE(r.diff_p == 1.0);
  }
}

TEST_CASE("best linear projection") {
  // y~ = tau z~ exactly, so Gamma_i = tau_i = 2 + 3 x0.
  const std::size_t n = 8;
  std::vector<double> zc(n), yc(n), tau(n), ehat(n, 0.5);
  auto m = hand_model({}, {}, {}, {});
  m.x = Matrix(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    m.x(i, 0) = i < 4 ? 0.0 : 1.0;
    m.x(i, 1) = static_cast<double>(i % 2);
    zc[i] = (i % 2 == 0) ? 0.5 : -0.5;
    tau[i] = 2.0 + 3.0 * m.x(i, 0);
    yc[i] = tau[i] * zc[i];
  }
  m.z_centered = zc;
  m.y_centered = yc;
  m.tau_oob = tau;
  m.ehat = ehat;

  const auto rows = best_linear_projection(m, {0}, {"age", "sex"});
  REQUIRE(rows.size() == 2);
  REQUIRE(rows[0].name == "(intercept)");
  REQUIRE(rows[1].name == "age");
  REQUIRE(rows[0].coef == Catch::Approx(2.0).margin(1e-12));
  REQUIRE(rows[1].coef == Catch::Approx(3.0).margin(1e-12));
  REQUIRE(rows[1].ci_lower <= rows[1].coef);
  REQUIRE(rows[1].ci_upper >= rows[1].coef);

  REQUIRE_THROWS(best_linear_projection(m, {}, {"age", "sex"}));
}

TEST_CASE("variable importance") {
  CausalForestModel m;
  m.x = Matrix(1, 2);

  SECTION("depth-discounted split counts") {
    // One root split on covariate 0, one depth-2 split on covariate 1:
    // raw (1, 1/4) normalizes to (0.8, 0.2).
    DecisionTree t;
    t.nodes.resize(5);
    t.nodes[0] = TreeNode{0, 0.5, 1, 4, 1, {}, 0.0};
    t.nodes[1] = TreeNode{1, 0.5, 2, 3, 2, {}, 0.0};
    t.nodes[2].depth = 3;
    t.nodes[3].depth = 3;
    t.nodes[4].depth = 2;
    m.trees.push_back(t);
    const auto vi = variable_importance(m);
    REQUIRE(vi[0] == Catch::Approx(0.8).margin(1e-15));
    REQUIRE(vi[1] == Catch::Approx(0.2).margin(1e-15));
  }

  SECTION("splits deeper than four levels are ignored") {
    DecisionTree t;
    // Chain of five splits: depths 1-4 on covariate 0, depth 5 on covariate 1.
    t.nodes.resize(11);
    for (int d = 0; d < 5; ++d) {
      t.nodes[static_cast<std::size_t>(d)] =
          TreeNode{d < 4 ? 0 : 1, 0.5, d + 1, 5 + d, d + 1, {}, 0.0};
    }
    for (int i = 5; i < 11; ++i) t.nodes[static_cast<std::size_t>(i)].depth = 6;
    m.trees.push_back(t);
    const auto vi = variable_importance(m);
    REQUIRE(vi[0] == 1.0);
    REQUIRE(vi[1] == 0.0);
  }

  SECTION("forest with no splits reports all zeros") {
    m.trees.push_back(stump_tree({0}));
    const auto vi = variable_importance(m);
    REQUIRE(vi == std::vector<double>{0.0, 0.0});
  }
}

TEST_CASE("causal forest end to end") {
  double true_ate = 0.0;
  std::vector<double> truth;
  const auto data = recovery_data(400, 31, true_ate, truth);

  CausalForestConfig cfg;
  cfg.num_trees = 80;
  cfg.nuisance_trees = 60;
  cfg.seed = 4;

  const CausalForestModel m = fit_causal_forest(data, cfg);
  REQUIRE(m.tau_oob.size() == 400);

  SECTION("out-of-bag effects track the modifier") {
    REQUIRE(correlation(m.tau_oob, truth) > 0.3);
    const AteResult ate = average_treatment_effect(m);
    REQUIRE(std::abs(ate.estimate - true_ate) < 0.25);
    REQUIRE(ate.se > 0.0);
  }

  SECTION("modifier dominates the importance ranking") {
    const auto vi = variable_importance(m);
    REQUIRE(vi[0] > vi[1]);
    REQUIRE(vi[0] > vi[2]);
    REQUIRE(vi[0] + vi[1] + vi[2] == Catch::Approx(1.0).margin(1e-12));
  }

  SECTION("refit with the same seed is identical") {
    const CausalForestModel m2 = fit_causal_forest(data, cfg);
    REQUIRE(m2.tau_oob == m.tau_oob);
  }

  SECTION("per-unit predictions carry the method tag") {
    const IteVector ites = predict_ite_all(m);
    REQUIRE(ites.estimates.size() == 400);
    REQUIRE(ites.method == IteMethod::grf);
    REQUIRE(correlation(ites.estimates, truth) > 0.3);
  }

  SECTION("injected nuisances bypass the centering forests") {
    FitNuisance nuis;
    nuis.mhat.assign(400, 0.25);
    nuis.ehat.assign(400, 0.5);
    const CausalForestModel mi = fit_causal_forest(data, cfg, nuis);
    for (std::size_t i = 0; i < 400; ++i) {
      REQUIRE(mi.ehat[i] == 0.5);
      REQUIRE(mi.z_centered[i] == data.exposure[i] - 0.5);
    }
  }

  SECTION("input validation") {
    FitNuisance bad;
    bad.mhat.assign(400, 0.0);
    bad.ehat.assign(400, 1.0);
    REQUIRE_THROWS(fit_causal_forest(data, cfg, bad));
    bad.ehat.assign(10, 0.5);
    REQUIRE_THROWS(fit_causal_forest(data, cfg, bad));

    auto small = data;
    small.x = Matrix(10, 3);
    small.exposure.resize(10);
    small.outcome.resize(10);
    REQUIRE_THROWS_WITH(fit_causal_forest(small, cfg),
                        Catch::Matchers::ContainsSubstring("n >= 20"));

    auto badcfg = cfg;
    badcfg.subsample_rate = 1.0;
    REQUIRE_THROWS(fit_causal_forest(data, badcfg));
    badcfg = cfg;
    badcfg.honest_fraction = 0.0;
    REQUIRE_THROWS(fit_causal_forest(data, badcfg));
  }
}
