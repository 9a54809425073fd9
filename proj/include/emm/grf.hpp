#pragma once

// Honest causal forest: local centering by out-of-bag regression forests,
// gradient trees on the centered residuals, kernel-weighted effect
// estimates with plug-in variance, doubly robust average effects, an
// omnibus calibration test, and best linear projections of the scores.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "emm/dataset.hpp"
#include "emm/forest.hpp"
#include "emm/stats.hpp"

namespace emm {

struct CausalForestConfig {
  int num_trees = 500;
  int nuisance_trees = 200;     // per centering forest
  double subsample_rate = 0.5;  // without replacement
  double honest_fraction = 0.5;
  TreeGrowConfig tree;
  std::uint64_t seed = 0;
};

// Exact nuisance values for testing; bypasses the centering forests.
struct FitNuisance {
  std::vector<double> mhat;  // E[Y | X]
  std::vector<double> ehat;  // E[Z | X], each in (0,1)
};

struct CausalForestModel {
  Matrix x;
  std::vector<double> y, z;
  std::vector<double> mhat, ehat;
  std::vector<double> y_centered, z_centered;
  std::vector<DecisionTree> trees;
  std::vector<std::vector<char>> in_bag;  // [tree][unit]
  std::vector<double> tau_oob;            // per-unit estimate from trees not containing the unit
  bool oob_fallback = false;              // some unit used the full forest
  CausalForestConfig config;

  std::size_t n() const { return x.rows(); }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json out;
    out["format_version"] = kFormatVersion;
    out["num_trees"] = trees.size();
    out["oob_fallback"] = oob_fallback;
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& t : trees) arr.push_back(t.to_json());
    out["trees"] = std::move(arr);
    return out;
  }
};

namespace detail {

// Per-unit leave-one-forest-out estimate: ratio of per-tree leaf sums
// sum(z~ y~)/|L| over sum(z~^2)/|L|, restricted to trees where the unit
// is out of bag. The shared 1/B factor cancels in the ratio.
inline void causal_forest_oob(CausalForestModel& m) {
  const std::size_t n = m.n();
  m.tau_oob.assign(n, 0.0);
  bool fallback = false;

  struct LeafStat {
    double num = 0.0, den = 0.0;
  };
  std::vector<std::vector<LeafStat>> stats(m.trees.size());
  for (std::size_t t = 0; t < m.trees.size(); ++t) {
    auto& per_leaf = stats[t];
    per_leaf.assign(m.trees[t].nodes.size(), LeafStat{});
    for (std::size_t nd = 0; nd < m.trees[t].nodes.size(); ++nd) {
      const auto& members = m.trees[t].nodes[nd].members;
      if (m.trees[t].nodes[nd].cov >= 0 || members.empty()) continue;
      double num = 0.0, den = 0.0;
      for (int u : members) {
        const std::size_t i = static_cast<std::size_t>(u);
        num += m.z_centered[i] * m.y_centered[i];
        den += m.z_centered[i] * m.z_centered[i];
      }
      const double inv = 1.0 / static_cast<double>(members.size());
      per_leaf[nd] = {num * inv, den * inv};
    }
  }

#pragma omp parallel for schedule(static) reduction(|| : fallback)
  for (std::ptrdiff_t ip = 0; ip < static_cast<std::ptrdiff_t>(n); ++ip) {
    const std::size_t i = static_cast<std::size_t>(ip);
    double num = 0.0, den = 0.0;
    std::size_t used = 0;
    for (std::size_t t = 0; t < m.trees.size(); ++t) {
      if (m.in_bag[t][i]) continue;
      const int leaf = m.trees[t].find_leaf(m.x, i);
      num += stats[t][static_cast<std::size_t>(leaf)].num;
      den += stats[t][static_cast<std::size_t>(leaf)].den;
      ++used;
    }
    if (used == 0) {
      fallback = true;
      for (std::size_t t = 0; t < m.trees.size(); ++t) {
        const int leaf = m.trees[t].find_leaf(m.x, i);
        num += stats[t][static_cast<std::size_t>(leaf)].num;
        den += stats[t][static_cast<std::size_t>(leaf)].den;
      }
    }
    m.tau_oob[i] = den > 0.0 ? num / den : 0.0;
  }
  m.oob_fallback = fallback;
}

}  // namespace detail

inline CausalForestModel fit_causal_forest(const ObservationalDataset& data,
                                           const CausalForestConfig& cfg,
                                           const FitNuisance& injected = {}) {
  validate(data);
  const std::size_t n = data.n();
  require(n >= 20, "causal forest needs n >= 20");
  require(cfg.num_trees >= 1, "causal forest needs at least one tree");
  require(cfg.subsample_rate > 0.0 && cfg.subsample_rate < 1.0,
          "subsample rate outside (0,1)");
  require(cfg.honest_fraction > 0.0 && cfg.honest_fraction < 1.0,
          "honest fraction outside (0,1)");

  CausalForestModel m;
  m.x = data.x;
  m.y = data.outcome;
  m.z = data.exposure;
  m.config = cfg;

  if (!injected.mhat.empty() || !injected.ehat.empty()) {
    require(injected.mhat.size() == n && injected.ehat.size() == n,
            "injected nuisance length mismatch");
    for (double e : injected.ehat)
      require(e > 0.0 && e < 1.0, "injected exposure probability outside (0,1)");
    m.mhat = injected.mhat;
    m.ehat = injected.ehat;
  } else {
    RegressionForestConfig rc;
    rc.num_trees = cfg.nuisance_trees;
    rc.tree = cfg.tree;
    rc.seed = derive_seed(cfg.seed, "mhat");
    m.mhat = regression_forest_oob(m.x, m.y, rc).oob;
    rc.seed = derive_seed(cfg.seed, "ehat");
    rc.clip_unit_interval = true;  // keeps inverse-probability terms bounded
    m.ehat = regression_forest_oob(m.x, m.z, rc).oob;
  }

  m.y_centered.resize(n);
  m.z_centered.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    m.y_centered[i] = m.y[i] - m.mhat[i];
    m.z_centered[i] = m.z[i] - m.ehat[i];
  }

  const int n_sub =
      std::max<int>(4, static_cast<int>(std::floor(cfg.subsample_rate * static_cast<double>(n))));
  const std::uint64_t tree_seed = derive_seed(cfg.seed, "tau");

  m.trees.resize(static_cast<std::size_t>(cfg.num_trees));
  m.in_bag.assign(m.trees.size(), std::vector<char>(n, 0));

#pragma omp parallel for schedule(dynamic)
  for (int t = 0; t < cfg.num_trees; ++t) {
    Rng rng = Rng::substream(tree_seed, static_cast<std::uint64_t>(t));
    std::vector<int> sub = rng.sample_without_replacement(static_cast<int>(n), n_sub);
    for (int u : sub) m.in_bag[static_cast<std::size_t>(t)][static_cast<std::size_t>(u)] = 1;
    HonestPartition hp = honest_partition(std::move(sub), cfg.honest_fraction, rng);
    m.trees[static_cast<std::size_t>(t)] =
        grow_gradient_tree(m.x, m.y_centered, m.z_centered, hp.grow, hp.estimate, cfg.tree, rng);
  }

  detail::causal_forest_oob(m);
  return m;
}

// -------------------------------------------------------------- prediction

struct ItePrediction {
  double estimate = 0.0;
  double variance = 0.0;
};

// Kernel-weighted residual-on-residual slope at `point`, with the plug-in
// variance sum alpha_i^2 (y~_i - tau z~_i)^2 z~_i^2 / (sum alpha_i z~_i^2)^2.
inline ItePrediction predict_ite(const CausalForestModel& m, const std::vector<double>& point) {
  require(point.size() == m.x.cols(), "prediction point dimension mismatch");
  const KernelWeights kw = forest_weights(m.trees, point, m.n());

  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < m.n(); ++i) {
    num += kw.w[i] * m.z_centered[i] * m.y_centered[i];
    den += kw.w[i] * m.z_centered[i] * m.z_centered[i];
  }
  require(den > 0.0, "no exposure variation near the query point");

  ItePrediction out;
  out.estimate = num / den;
  double meat = 0.0;
  for (std::size_t i = 0; i < m.n(); ++i) {
    const double r = m.y_centered[i] - out.estimate * m.z_centered[i];
    meat += kw.w[i] * kw.w[i] * r * r * m.z_centered[i] * m.z_centered[i];
  }
  out.variance = meat / (den * den);
  return out;
}

inline IteVector predict_ite_all(const CausalForestModel& m) {
  IteVector out;
  out.method = IteMethod::grf;
  out.seed = m.config.seed;
  out.estimates.assign(m.n(), 0.0);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ip = 0; ip < static_cast<std::ptrdiff_t>(m.n()); ++ip) {
    const std::size_t i = static_cast<std::size_t>(ip);
    out.estimates[i] = predict_ite(m, m.x.row(i)).estimate;
  }
  return out;
}

// ------------------------------------------------------- doubly robust ATE

// Augmented scores Gamma_i built from out-of-bag effect estimates; their
// mean is the average effect and their sd/sqrt(n) its standard error.
inline std::vector<double> aipw_scores(const CausalForestModel& m) {
  std::vector<double> gamma(m.n());
  for (std::size_t i = 0; i < m.n(); ++i) {
    const double tau = m.tau_oob[i];
    const double e = m.ehat[i];
    require(e > 0.0 && e < 1.0, "exposure probability outside (0,1)");
    const double resid = m.y_centered[i] - tau * m.z_centered[i];
    gamma[i] = tau + m.z_centered[i] * resid / (e * (1.0 - e));
  }
  return gamma;
}

struct AteResult {
  double estimate = 0.0;
  double se = 0.0;
  double ci_lower = 0.0, ci_upper = 0.0;
};

inline AteResult average_treatment_effect(const CausalForestModel& m) {
  const std::vector<double> gamma = aipw_scores(m);
  AteResult out;
  out.estimate = mean(gamma);
  out.se = gamma.size() > 1 ? sd(gamma) / std::sqrt(static_cast<double>(gamma.size())) : 0.0;
  out.ci_lower = out.estimate - kZ975 * out.se;
  out.ci_upper = out.estimate + kZ975 * out.se;
  return out;
}

// --------------------------------------------------------- calibration test

struct CalibrationResult {
  double mean_coef = 0.0, mean_se = 0.0, mean_p = 1.0;
  double diff_coef = 0.0, diff_se = 0.0, diff_p = 1.0;
  bool degenerate = false;  // out-of-bag estimates had no spread
};

// Regresses the centered outcome on C_i = taubar * z~_i and
// D_i = (tau^oob_i - taubar) * z~_i without an intercept. A mean
// coefficient near 1 says the average is calibrated; a differential
// coefficient near 1 with a small one-sided p says the heterogeneity
// in the out-of-bag estimates tracks real signal.
inline CalibrationResult test_calibration(const CausalForestModel& m) {
  const std::size_t n = m.n();
  const double taubar = mean(m.tau_oob);

  std::vector<double> c(n), d(n);
  for (std::size_t i = 0; i < n; ++i) {
    c[i] = taubar * m.z_centered[i];
    d[i] = (m.tau_oob[i] - taubar) * m.z_centered[i];
  }

  CalibrationResult out;
  if (variance(d) == 0.0) {
    out.degenerate = true;
    Matrix xm(n, 1);
    for (std::size_t i = 0; i < n; ++i) xm(i, 0) = c[i];
    const RobustFit fit = ols_hc3(xm, m.y_centered);
    out.mean_coef = fit.coef[0];
    out.mean_se = fit.se[0];
    out.mean_p = 1.0 - normal_cdf(out.mean_coef / (out.mean_se > 0.0 ? out.mean_se : 1.0));
    out.diff_coef = 0.0;
    out.diff_se = 0.0;
    out.diff_p = 1.0;
    return out;
  }

  Matrix xm(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    xm(i, 0) = c[i];
    xm(i, 1) = d[i];
  }
  const RobustFit fit = ols_hc3(xm, m.y_centered);
  out.mean_coef = fit.coef[0];
  out.mean_se = fit.se[0];
  out.diff_coef = fit.coef[1];
  out.diff_se = fit.se[1];
  out.mean_p = out.mean_se > 0.0 ? 1.0 - normal_cdf(out.mean_coef / out.mean_se) : 1.0;
  out.diff_p = out.diff_se > 0.0 ? 1.0 - normal_cdf(out.diff_coef / out.diff_se) : 1.0;
  return out;
}

// -------------------------------------------------- best linear projection

struct BlpRow {
  std::string name;
  double coef = 0.0, se = 0.0;
  double ci_lower = 0.0, ci_upper = 0.0;
};

// OLS of the doubly robust scores on (1, chosen modifiers) with HC3
// errors. Row 0 is the intercept.
inline std::vector<BlpRow> best_linear_projection(const CausalForestModel& m,
                                                  const std::vector<int>& modifier_cols,
                                                  const std::vector<std::string>& names) {
  require(!modifier_cols.empty(), "best linear projection needs at least one modifier");
  const std::vector<double> gamma = aipw_scores(m);
  const std::size_t n = m.n();

  Matrix xm(n, 1 + modifier_cols.size());
  for (std::size_t i = 0; i < n; ++i) {
    xm(i, 0) = 1.0;
    for (std::size_t j = 0; j < modifier_cols.size(); ++j)
      xm(i, 1 + j) = m.x(i, static_cast<std::size_t>(modifier_cols[j]));
  }
  const RobustFit fit = ols_hc3(xm, gamma);

  std::vector<BlpRow> rows(1 + modifier_cols.size());
  for (std::size_t j = 0; j < rows.size(); ++j) {
    rows[j].name = j == 0 ? "(intercept)" : names[static_cast<std::size_t>(modifier_cols[j - 1])];
    rows[j].coef = fit.coef[j];
    rows[j].se = fit.se[j];
    rows[j].ci_lower = fit.coef[j] - kZ975 * fit.se[j];
    rows[j].ci_upper = fit.coef[j] + kZ975 * fit.se[j];
  }
  return rows;
}

// ------------------------------------------------------ variable importance

// Depth-discounted split counts over the first four levels, weight 1/d^2
// at depth d, normalized to sum 1 across covariates.
inline std::vector<double> variable_importance(const CausalForestModel& m) {
  std::vector<double> raw(m.x.cols(), 0.0);
  for (const auto& t : m.trees)
    for (const auto& nd : t.nodes) {
      if (nd.cov < 0 || nd.depth > 4) continue;
      raw[static_cast<std::size_t>(nd.cov)] +=
          1.0 / (static_cast<double>(nd.depth) * static_cast<double>(nd.depth));
    }
  double total = 0.0;
  for (double v : raw) total += v;
  if (total > 0.0)
    for (double& v : raw) v /= total;
  return raw;
}

}  // namespace emm
