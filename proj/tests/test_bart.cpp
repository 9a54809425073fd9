#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "emm/bart.hpp"

using namespace emm;

namespace {

// Independent check of the leaf marginal: integrate the leaf likelihood
// against the N(0, sigma_mu^2) value prior by Simpson's rule.
double quadrature_leaf_marginal(const std::vector<double>& r, const std::vector<double>& w,
                                double sigma2, double sigma_mu2) {
  const double sigma_mu = std::sqrt(sigma_mu2);
  double r_max = 0.0;
  for (double v : r) r_max = std::max(r_max, std::abs(v));
  const double lim = 10.0 * std::max(sigma_mu, 1.0) + r_max;
  const int steps = 40000;  // even
  const double h = 2.0 * lim / steps;

  auto integrand = [&](double mu) {
    double f = std::exp(-mu * mu / (2.0 * sigma_mu2)) / std::sqrt(2.0 * kPi * sigma_mu2);
    for (std::size_t i = 0; i < r.size(); ++i) {
      const double e = r[i] - w[i] * mu;
      f *= std::exp(-e * e / (2.0 * sigma2)) / std::sqrt(2.0 * kPi * sigma2);
    }
    return f;
  };

  double acc = integrand(-lim) + integrand(lim);
  for (int i = 1; i < steps; ++i)
    acc += integrand(-lim + h * i) * (i % 2 == 1 ? 4.0 : 2.0);
  return std::log(acc * h / 3.0);
}

Matrix column(std::vector<double> v) {
  Matrix x(v.size(), 1);
  for (std::size_t i = 0; i < v.size(); ++i) x(i, 0) = v[i];
  return x;
}

}  // namespace

TEST_CASE("tree structure prior") {
  TreePriorParams pr;  // alpha 0.95, beta 2

  REQUIRE(split_prob(pr, 0) == Catch::Approx(0.95).margin(1e-15));
  REQUIRE(split_prob(pr, 1) == Catch::Approx(0.2375).margin(1e-15));

  BartTree stump;
  REQUIRE(std::exp(tree_structure_log_prior(stump, pr)) == Catch::Approx(0.05).margin(1e-12));

  BartTree split;
  split.grow(0, 0, 0.5);
  // 0.95 * (1 - 0.2375)^2
  REQUIRE(std::exp(tree_structure_log_prior(split, pr)) ==
          Catch::Approx(0.5523359375).margin(1e-12));

  SECTION("rule prior divides by the cut count") {
    const Matrix x = column({0.0, 1.0, 2.0, 3.0});
    const CutTable cuts = make_cut_table(x);
    REQUIRE(std::exp(tree_log_prior(split, pr, cuts)) ==
            Catch::Approx(0.5523359375 / 4.0).margin(1e-12));
  }
}

TEST_CASE("cut table holds sorted distinct values") {
  Matrix x(4, 2);
  x(0, 0) = 3.0;
  x(1, 0) = 1.0;
  x(2, 0) = 3.0;
  x(3, 0) = 2.0;
  for (std::size_t i = 0; i < 4; ++i) x(i, 1) = 7.0;
  const CutTable ct = make_cut_table(x);
  REQUIRE(ct.values[0] == std::vector<double>{1.0, 2.0, 3.0});
  REQUIRE(ct.values[1] == std::vector<double>{7.0});
}

TEST_CASE("leaf marginal likelihood") {
  SECTION("frozen unit case") {
    // n = 4, all residuals 1, unit weights, sigma = sigma_mu = 1.
    REQUIRE(leaf_marginal_loglik(4.0, 4.0, 4.0, 4.0, 1.0, 1.0) ==
            Catch::Approx(-4.8804730890357408).margin(1e-12));
  }

  SECTION("matches numeric integration") {
    struct Case {
      std::vector<double> r, w;
      double sigma2, sigma_mu2;
    };
    const std::vector<Case> cases = {
        {{1.0, 1.0, 1.0, 1.0}, {1.0, 1.0, 1.0, 1.0}, 1.0, 1.0},
        {{0.5, -0.3, 0.2, 0.1}, {1.0, 0.0, 1.0, 0.0}, 0.64, 0.25},
        {{2.0, -1.0, 0.5}, {1.0, 1.0, 1.0}, 2.0, 3.0},
        {{0.4}, {1.0}, 0.5, 0.04},
    };
    for (const auto& c : cases) {
      double n = static_cast<double>(c.r.size()), se2 = 0.0, sww = 0.0, swe = 0.0;
      for (std::size_t i = 0; i < c.r.size(); ++i) {
        se2 += c.r[i] * c.r[i];
        sww += c.w[i] * c.w[i];
        swe += c.w[i] * c.r[i];
      }
      const double got = leaf_marginal_loglik(n, se2, sww, swe, c.sigma2, c.sigma_mu2);
      const double want = quadrature_leaf_marginal(c.r, c.w, c.sigma2, c.sigma_mu2);
      REQUIRE(got == Catch::Approx(want).margin(1e-6));
    }
  }
}

TEST_CASE("move proposals") {
  const Matrix x = column({0.0, 1.0, 2.0, 3.0});
  const CutTable cuts = make_cut_table(x);
  TreePriorParams pr;

  SECTION("a stump can only grow, with the exact proposal ratio") {
    BartTree stump;
    Rng rng(17);
    const MoveProposal prop = propose_move(stump, cuts, pr, rng);
    REQUIRE(prop.valid);
    REQUIRE(prop.kind == MoveKind::grow);
    REQUIRE(prop.anchor == 0);
    // forward: kind prob 1, 1 leaf, 1 covariate, 4 cuts; reverse: prune
    // prob 0.25/0.9 over the single nog.
    REQUIRE(prop.log_ratio ==
            Catch::Approx(std::log(0.25 / 0.9) + std::log(4.0)).margin(1e-12));
  }

  SECTION("grow and its reverse prune cancel") {
    BartTree stump;
    Rng rng(5);
    const MoveProposal grown = propose_move(stump, cuts, pr, rng);
    REQUIRE(grown.kind == MoveKind::grow);

    MoveProposal back;
    for (int attempt = 0; attempt < 200; ++attempt) {
      back = propose_move(grown.tree, cuts, pr, rng);
      if (back.kind == MoveKind::prune) break;
    }
    REQUIRE(back.kind == MoveKind::prune);
    REQUIRE(back.anchor == grown.anchor);
    REQUIRE(back.log_ratio == Catch::Approx(-grown.log_ratio).margin(1e-12));
    REQUIRE(detail::count_tree(back.tree).leaves == 1);
  }

  SECTION("kind frequencies follow the renormalized weights") {
    // Root - internal child - leaves: every move kind is feasible.
    BartTree t;
    t.grow(0, 0, 1.0);
    t.grow(t.node(0).left, 0, 0.0);
    const detail::TreeCounts c = detail::count_tree(t);
    REQUIRE(c.leaves == 3);
    REQUIRE(c.nogs == 1);
    REQUIRE(c.internals == 2);
    REQUIRE(c.pairs == 1);

    Rng rng(101);
    const int trials = 100000;
    std::vector<int> hits(4, 0);
    for (int i = 0; i < trials; ++i) ++hits[static_cast<int>(detail::pick_kind(c, rng))];
    REQUIRE(static_cast<double>(hits[0]) / trials == Catch::Approx(0.25).margin(0.01));
    REQUIRE(static_cast<double>(hits[1]) / trials == Catch::Approx(0.25).margin(0.01));
    REQUIRE(static_cast<double>(hits[2]) / trials == Catch::Approx(0.40).margin(0.01));
    REQUIRE(static_cast<double>(hits[3]) / trials == Catch::Approx(0.10).margin(0.01));
  }

}

TEST_CASE("depth-capped grow is invalid") {
  const Matrix x = column({0.0, 1.0});
  const CutTable cuts = make_cut_table(x);
  TreePriorParams pr;
  pr.max_depth = 0;
  BartTree stump;
  Rng rng(3);
  const MoveProposal prop = propose_move(stump, cuts, pr, rng);
  REQUIRE(prop.kind == MoveKind::grow);
  REQUIRE_FALSE(prop.valid);
}

TEST_CASE("change and swap proposals") {
  const Matrix x = column({0.0, 1.0, 2.0, 3.0});
  const CutTable cuts = make_cut_table(x);
  TreePriorParams pr;

  BartTree t;
  t.grow(0, 0, 2.0);
  t.grow(t.node(0).left, 0, 0.0);

  Rng rng(7);
  bool saw_change = false, saw_swap = false;
  for (int i = 0; i < 400 && !(saw_change && saw_swap); ++i) {
    const MoveProposal prop = propose_move(t, cuts, pr, rng);
    if (prop.kind == MoveKind::change) {
      saw_change = true;
      REQUIRE(prop.valid);
      // same covariate everywhere: ratio of cut counts is 1
      REQUIRE(prop.log_ratio == Catch::Approx(0.0).margin(1e-12));
      REQUIRE(detail::count_tree(prop.tree).internals == 2);
    } else if (prop.kind == MoveKind::swap) {
      saw_swap = true;
      REQUIRE(prop.valid);
      REQUIRE(prop.log_ratio == 0.0);
      // rules exchanged between root and its internal child
      REQUIRE(prop.tree.node(0).cut == 0.0);
      REQUIRE(prop.tree.node(prop.tree.node(0).left).cut == 2.0);
    }
  }
  REQUIRE(saw_change);
  REQUIRE(saw_swap);
}

TEST_CASE("units routed through a node") {
  const Matrix x = column({0.0, 1.0, 2.0, 3.0});
  BartTree t;
  t.grow(0, 0, 1.5);
  std::vector<int> units;
  detail::units_through(t, 0, x, units);
  REQUIRE(units == std::vector<int>{0, 1, 2, 3});
  detail::units_through(t, t.node(0).left, x, units);
  REQUIRE(units == std::vector<int>{0, 1});
  detail::units_through(t, t.node(0).right, x, units);
  REQUIRE(units == std::vector<int>{2, 3});
}

TEST_CASE("frozen stump posterior") {
  // One stump, frozen structure, sigma^2 = sigma_mu^2 = 1, y = 1: each kept
  // draw is an independent N(4/5, 1/5) leaf value.
  const Matrix x = column({0.0, 1.0, 2.0, 3.0});
  const std::vector<double> y = {1.0, 1.0, 1.0, 1.0};

  BartConfig cfg;
  cfg.num_trees = 1;
  cfg.burn_in = 0;
  cfg.draws = 2000;
  cfg.seed = 42;
  cfg.scale_outcome = false;
  cfg.freeze_structure = true;
  cfg.fixed_sigma2 = 1.0;
  cfg.sigma_mu_override = 1.0;

  const BartPosterior post = backfit_mcmc(x, y, OutcomeKind::continuous, cfg);
  REQUIRE(post.no_burn_in);
  REQUIRE(post.train_link.rows() == 2000);

  std::vector<double> draws(2000);
  for (std::size_t k = 0; k < 2000; ++k) {
    draws[k] = post.train_link(k, 0);
    // stump: same value at every unit
    REQUIRE(post.train_link(k, 3) == draws[k]);
  }
  const double mc_se = std::sqrt(0.2 / 2000.0);
  REQUIRE(mean(draws) == Catch::Approx(0.8).margin(3.0 * mc_se));
  REQUIRE(sd(draws) == Catch::Approx(std::sqrt(0.2)).margin(0.05));

  SECTION("fixed sigma is carried into the posterior") {
    for (double s : post.sigma) REQUIRE(s == 1.0);
  }
}

TEST_CASE("shrinkage limit collapses predictions to the scaled center") {
  const std::size_t n = 40;
  Matrix x(n, 1);
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    x(i, 0) = static_cast<double>(i);
    y[i] = 0.1 + 0.8 * static_cast<double>(i) / static_cast<double>(n - 1);
  }

  BartConfig cfg;
  cfg.num_trees = 10;
  cfg.burn_in = 30;
  cfg.draws = 20;
  cfg.seed = 9;
  cfg.sigma_mu_override = 1e-8;

  const BartPosterior post = backfit_mcmc(x, y, OutcomeKind::continuous, cfg);
  // y spans [0.1, 0.9]; with no leaf freedom every prediction sits at the midrange.
  const auto pred = predict_outcome_draw(post, 0, x);
  for (double v : pred) REQUIRE(v == Catch::Approx(0.5).margin(1e-3));
}

TEST_CASE("hand-built posterior predictions") {
  ObservationalDataset d;
  d.x = column({0.2, 0.8, 0.5});
  d.exposure = {0.0, 1.0, 0.0};
  d.outcome = {0.0, 1.0, 1.0};
  d.covariate_names = {"x1"};
  d.outcome_kind = OutcomeKind::binary;

  // One tree splitting on the appended exposure column.
  BartTree t;
  t.grow(0, 1, 0.5);
  const int lo = t.node(0).left, hi = t.node(0).right;

  SECTION("probit contrast is a cdf difference") {
    t.set_value(lo, 0.0);
    t.set_value(hi, normal_quantile(0.75));
    BartPosterior post;
    post.ensembles = {{t}};
    post.link = BartLink::probit;
    post.offset = 0.0;
    post.n_features = 2;

    const IteVector ites = estimate_ite_counterfactual(post, d, 33);
    REQUIRE(ites.method == IteMethod::bart);
    REQUIRE(ites.seed == 33);
    for (double v : ites.estimates) REQUIRE(v == Catch::Approx(0.25).margin(1e-12));
  }

  SECTION("probit offset shifts the link") {
    t.set_value(lo, 0.0);
    t.set_value(hi, 0.0);
    BartPosterior post;
    post.ensembles = {{t}};
    post.link = BartLink::probit;
    post.offset = normal_quantile(0.9);
    post.n_features = 2;
    Matrix pts(1, 2);
    pts(0, 0) = 0.5;
    pts(0, 1) = 0.0;
    REQUIRE(predict_outcome_draw(post, 0, pts)[0] == Catch::Approx(0.9).margin(1e-12));
  }

  SECTION("identity contrast undoes the outcome scaling") {
    t.set_value(lo, 0.0);
    t.set_value(hi, 0.25);
    BartPosterior post;
    post.ensembles = {{t}};
    post.link = BartLink::identity;
    post.y_min = 2.0;
    post.y_range = 4.0;
    post.n_features = 2;

    const Matrix draws = counterfactual_draws(post, d);
    REQUIRE(draws.rows() == 1);
    for (std::size_t i = 0; i < 3; ++i) REQUIRE(draws(0, i) == Catch::Approx(1.0).margin(1e-12));

    Matrix pts(1, 2);
    pts(0, 0) = 0.1;
    pts(0, 1) = 1.0;
    REQUIRE(predict_outcome_draw(post, 0, pts)[0] == Catch::Approx(5.0).margin(1e-12));
  }

  SECTION("feature schema is checked") {
    BartPosterior post;
    post.ensembles = {{t}};
    post.n_features = 3;
    REQUIRE_THROWS_WITH(counterfactual_draws(post, d),
                        Catch::Matchers::ContainsSubstring("covariate schema"));
  }
}

TEST_CASE("causal feature table appends the exposure") {
  ObservationalDataset d;
  d.x = column({0.2, 0.8});
  d.exposure = {1.0, 0.0};
  d.outcome = {1.0, 0.0};
  d.covariate_names = {"x1"};
  const Matrix feats = bart_causal_features(d);
  REQUIRE(feats.cols() == 2);
  REQUIRE(feats(0, 0) == 0.2);
  REQUIRE(feats(0, 1) == 1.0);
  REQUIRE(feats(1, 1) == 0.0);
}

TEST_CASE("sampler configuration") {
  const std::size_t n = 30;
  Matrix x(n, 1);
  std::vector<double> yb(n), yc(n);
  Rng gen(2);
  for (std::size_t i = 0; i < n; ++i) {
    x(i, 0) = gen.uniform01();
    yb[i] = gen.bernoulli(0.3) ? 1.0 : 0.0;
    yc[i] = gen.normal();
  }

  SECTION("tree count defaults depend on the link") {
    BartConfig cfg;
    REQUIRE(BartSampler(x, yc, OutcomeKind::continuous, cfg).num_trees() == 200);
    REQUIRE(BartSampler(x, yb, OutcomeKind::binary, cfg).num_trees() == 50);
    cfg.num_trees = 7;
    REQUIRE(BartSampler(x, yc, OutcomeKind::continuous, cfg).num_trees() == 7);
  }

  SECTION("probit offset is the quantile of the base rate") {
    BartConfig cfg;
    const BartSampler s(x, yb, OutcomeKind::binary, cfg);
    REQUIRE(s.link() == BartLink::probit);
    REQUIRE(s.offset() == Catch::Approx(normal_quantile(mean(yb))).margin(1e-12));
    REQUIRE(s.sigma_mu() == Catch::Approx(3.0 / (2.0 * std::sqrt(50.0))).margin(1e-12));
  }

  SECTION("identity leaf scale follows the tree count") {
    BartConfig cfg;
    cfg.num_trees = 100;
    const BartSampler s(x, yc, OutcomeKind::continuous, cfg);
    REQUIRE(s.sigma_mu() == Catch::Approx(0.5 / (2.0 * std::sqrt(100.0))).margin(1e-12));
  }

  SECTION("probit link requires a 0/1 outcome") {
    BartConfig cfg;
    REQUIRE_THROWS(BartSampler(x, yc, OutcomeKind::binary, cfg));
  }

  SECTION("bad chain lengths are rejected") {
    BartConfig cfg;
    cfg.draws = 0;
    REQUIRE_THROWS(backfit_mcmc(x, yc, OutcomeKind::continuous, cfg));
    cfg.draws = 10;
    cfg.thin = 0;
    REQUIRE_THROWS(backfit_mcmc(x, yc, OutcomeKind::continuous, cfg));
    cfg.thin = 1;
    cfg.burn_in = -1;
    REQUIRE_THROWS(backfit_mcmc(x, yc, OutcomeKind::continuous, cfg));
  }
}

TEST_CASE("chain recovers a step function") {
  const std::size_t n = 120;
  Matrix x(n, 1);
  std::vector<double> y(n);
  Rng gen(14);
  for (std::size_t i = 0; i < n; ++i) {
    x(i, 0) = gen.uniform01();
    y[i] = (x(i, 0) > 0.5 ? 1.0 : 0.0) + 0.1 * gen.normal();
  }

  BartConfig cfg;
  cfg.num_trees = 20;
  cfg.burn_in = 100;
  cfg.draws = 60;
  cfg.seed = 6;
  cfg.consistency_checks = true;

  Matrix pts(2, 1);
  pts(0, 0) = 0.25;
  pts(1, 0) = 0.75;
  const BartPosterior post = backfit_mcmc(x, y, OutcomeKind::continuous, cfg, &pts);
  REQUIRE_FALSE(post.no_burn_in);

  double lo = 0.0, hi = 0.0;
  for (std::size_t k = 0; k < post.test_link.rows(); ++k) {
    const auto pred = predict_outcome_draw(post, k, pts);
    lo += pred[0];
    hi += pred[1];
  }
  lo /= static_cast<double>(post.test_link.rows());
  hi /= static_cast<double>(post.test_link.rows());
  REQUIRE(lo == Catch::Approx(0.0).margin(0.25));
  REQUIRE(hi == Catch::Approx(1.0).margin(0.25));

  SECTION("same seed reproduces the chain") {
    const BartPosterior again = backfit_mcmc(x, y, OutcomeKind::continuous, cfg, &pts);
    for (std::size_t k = 0; k < post.train_link.rows(); ++k)
      for (std::size_t i = 0; i < post.train_link.cols(); ++i)
        REQUIRE(again.train_link(k, i) == post.train_link(k, i));
  }

  SECTION("different seed gives a different chain") {
    auto cfg2 = cfg;
    cfg2.seed = 7;
    const BartPosterior other = backfit_mcmc(x, y, OutcomeKind::continuous, cfg2, &pts);
    REQUIRE(other.train_link(0, 0) != post.train_link(0, 0));
  }

  SECTION("error sd lands near the truth") {
    REQUIRE(mean(post.sigma) > 0.0);
    REQUIRE(mean(post.sigma) < 0.3);
  }
}

TEST_CASE("probit chain recovers a risk step") {
  const std::size_t n = 400;
  Matrix x(n, 1);
  std::vector<double> y(n);
  Rng gen(25);
  for (std::size_t i = 0; i < n; ++i) {
    x(i, 0) = gen.uniform01();
    const double p = x(i, 0) > 0.5 ? 0.8 : 0.2;
    y[i] = gen.bernoulli(p) ? 1.0 : 0.0;
  }

  BartConfig cfg;
  cfg.num_trees = 20;
  cfg.burn_in = 100;
  cfg.draws = 60;
  cfg.seed = 11;

  Matrix pts(2, 1);
  pts(0, 0) = 0.25;
  pts(1, 0) = 0.75;
  const BartPosterior post = backfit_mcmc(x, y, OutcomeKind::binary, cfg, &pts);

  double lo = 0.0, hi = 0.0;
  for (std::size_t k = 0; k < post.ensembles.size(); ++k) {
    const auto pred = predict_outcome_draw(post, k, pts);
    lo += pred[0];
    hi += pred[1];
  }
  lo /= static_cast<double>(post.ensembles.size());
  hi /= static_cast<double>(post.ensembles.size());
  REQUIRE(hi - lo > 0.3);
  for (std::size_t k = 0; k < post.ensembles.size(); ++k)
    REQUIRE(post.sigma[k] == 1.0);  // probit error scale is fixed
}

TEST_CASE("degenerate designs stay at the stump") {
  // A constant covariate admits no non-trivial cut: growing always leaves
  // one child empty, so every structure move is rejected.
  const std::size_t n = 25;
  Matrix x(n, 1);
  std::vector<double> y(n);
  Rng gen(8);
  for (std::size_t i = 0; i < n; ++i) {
    x(i, 0) = 1.0;
    y[i] = gen.normal();
  }

  BartConfig cfg;
  cfg.num_trees = 3;
  cfg.burn_in = 30;
  cfg.draws = 5;
  cfg.seed = 2;

  const BartPosterior post = backfit_mcmc(x, y, OutcomeKind::continuous, cfg);
  for (const auto& trees : post.ensembles)
    for (const auto& t : trees) REQUIRE(detail::count_tree(t).leaves == 1);
}

TEST_CASE("constant outcome survives scaling") {
  const Matrix x = column({0.0, 1.0, 2.0, 3.0, 4.0});
  const std::vector<double> y(5, 3.25);

  BartConfig cfg;
  cfg.num_trees = 4;
  cfg.burn_in = 10;
  cfg.draws = 5;
  cfg.seed = 1;

  const BartPosterior post = backfit_mcmc(x, y, OutcomeKind::continuous, cfg);
  REQUIRE(post.y_range == 0.0);
  const auto pred = predict_outcome_draw(post, 0, x);
  for (double v : pred) REQUIRE(v == Catch::Approx(3.25).margin(1e-9));
}
