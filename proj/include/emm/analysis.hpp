#pragma once

// Interpretation layer shared by every effect estimator: a deterministic
// CART refit of the per-unit effect estimates, subgroup distribution
// summaries, and the classical comparison suite (IRLS logistic
// regression, 2x2 contrasts, stratified adjusted odds ratios, and an
// inverse-variance heterogeneity test).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "emm/dataset.hpp"
#include "emm/forest.hpp"
#include "emm/stats.hpp"

namespace emm {

// ------------------------------------------------------------- fit the fit

struct FitTheFitConfig {
  int max_depth = 3;               // deepest splitting level, root = 1
  double min_leaf_fraction = 0.05;  // min leaf size = ceil(fraction * n)
};

struct FitTheFitTree {
  DecisionTree tree;
  std::vector<double> node_mean;   // mean effect per node, parallel to tree.nodes
  std::vector<double> node_share;  // fraction of the sample per node
  std::vector<std::string> covariate_names;

  int root_covariate() const { return tree.nodes.empty() ? -1 : tree.nodes[0].cov; }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json out;
    out["format_version"] = kFormatVersion;
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
      const TreeNode& nd = tree.nodes[i];
      nlohmann::ordered_json jn;
      jn["depth"] = nd.depth;
      jn["mean_ite"] = node_mean[i];
      jn["share"] = node_share[i];
      if (nd.cov >= 0) {
        jn["covariate"] = covariate_names[static_cast<std::size_t>(nd.cov)];
        jn["threshold"] = nd.threshold;
        jn["left"] = nd.left;
        jn["right"] = nd.right;
      } else {
        jn["count"] = nd.members.size();
      }
      arr.push_back(std::move(jn));
    }
    out["nodes"] = std::move(arr);
    return out;
  }

  // Nodes carry the split rule plus mean effect (as percent) and share.
  std::string to_dot() const {
    std::ostringstream os;
    os << "digraph fit_the_fit {\n  node [shape=box];\n";
    char buf[128];
    for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
      const TreeNode& nd = tree.nodes[i];
      std::snprintf(buf, sizeof buf, "mean ITE %.1f%%, share %.1f%%", 100.0 * node_mean[i],
                    100.0 * node_share[i]);
      if (nd.cov >= 0) {
        char rule[96];
        std::snprintf(rule, sizeof rule, "%s <= %g",
                      covariate_names[static_cast<std::size_t>(nd.cov)].c_str(), nd.threshold);
        os << "  n" << i << " [label=\"" << rule << "\\n" << buf << "\"];\n";
        os << "  n" << i << " -> n" << nd.left << " [label=\"yes\"];\n";
        os << "  n" << i << " -> n" << nd.right << " [label=\"no\"];\n";
      } else {
        os << "  n" << i << " [label=\"" << buf << "\"];\n";
      }
    }
    os << "}\n";
    return os.str();
  }
};

namespace detail {

inline int grow_fit_node(const Matrix& x, const std::vector<double>& ite, std::vector<int> members,
                         const FitTheFitConfig& cfg, int min_leaf, int depth, FitTheFitTree& out) {
  const int id = static_cast<int>(out.tree.nodes.size());
  out.tree.nodes.emplace_back();
  out.tree.nodes.back().depth = depth;

  double sum = 0.0;
  for (int u : members) sum += ite[static_cast<std::size_t>(u)];
  out.node_mean.push_back(sum / static_cast<double>(members.size()));
  out.node_share.push_back(static_cast<double>(members.size()) / static_cast<double>(x.rows()));

  auto make_leaf = [&]() {
    out.tree.nodes[static_cast<std::size_t>(id)].members = std::move(members);
    out.tree.nodes[static_cast<std::size_t>(id)].value = out.node_mean[static_cast<std::size_t>(id)];
    return id;
  };

  if (depth > cfg.max_depth || members.size() < 2 * static_cast<std::size_t>(min_leaf))
    return make_leaf();

  std::vector<int> all_covs(x.cols());
  for (std::size_t j = 0; j < x.cols(); ++j) all_covs[j] = static_cast<int>(j);
  const detail::SplitResult best = detail::best_split(x, ite, members, all_covs, min_leaf, nullptr, 0);
  if (!best.found() || !(best.gain > 0.0)) return make_leaf();

  std::vector<int> l, r;
  detail::partition_by_rule(x, best.cov, best.threshold, members, l, r);
  const int left = grow_fit_node(x, ite, std::move(l), cfg, min_leaf, depth + 1, out);
  const int right = grow_fit_node(x, ite, std::move(r), cfg, min_leaf, depth + 1, out);
  TreeNode& nd = out.tree.nodes[static_cast<std::size_t>(id)];
  nd.cov = best.cov;
  nd.threshold = best.threshold;
  nd.left = left;
  nd.right = right;
  return id;
}

}  // namespace detail

// Greedy sum-of-squared-error CART with the effect estimates as target.
// No randomness: all covariates, all midpoint thresholds, ties to the
// lowest covariate index then lowest threshold.
inline FitTheFitTree fit_the_fit(const IteVector& ites, const Matrix& x,
                                 const std::vector<std::string>& names,
                                 const FitTheFitConfig& cfg = {}) {
  const std::size_t n = x.rows();
  require(n >= 20, "fit_the_fit needs n >= 20");
  require(ites.estimates.size() == n, "effect vector length mismatch");
  require(names.size() == x.cols(), "covariate name count mismatch");
  require(cfg.max_depth >= 1, "max_depth must be >= 1");
  require(cfg.min_leaf_fraction > 0.0 && cfg.min_leaf_fraction < 0.5,
          "min_leaf_fraction outside (0,0.5)");

  FitTheFitTree out;
  out.covariate_names = names;
  const int min_leaf =
      static_cast<int>(std::ceil(cfg.min_leaf_fraction * static_cast<double>(n)));
  std::vector<int> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = static_cast<int>(i);
  detail::grow_fit_node(x, ites.estimates, std::move(all), cfg, min_leaf, 1, out);
  return out;
}

// --------------------------------------------------------- subgroup summary

struct SubgroupLevel {
  double level = 0.0;
  std::size_t count = 0;
  double mean_ite = 0.0, sd_ite = 0.0;
  double q025 = 0.0, q25 = 0.0, median = 0.0, q75 = 0.0, q975 = 0.0;
  std::vector<std::size_t> bin_counts;  // over the shared edges
};

struct SubgroupSummary {
  std::string covariate;
  std::vector<double> bin_edges;  // kSubgroupBins + 1 edges over the pooled range
  std::vector<SubgroupLevel> levels;
  bool single_level = false;
};

inline constexpr std::size_t kSubgroupBins = 20;

// Distribution of effect estimates per level of a grouping covariate.
// Histogram bins are shared across levels (pooled range) so panels align.
inline SubgroupSummary subgroup_summary(const IteVector& ites, const std::vector<double>& group,
                                        const std::string& covariate_name) {
  const std::size_t n = ites.estimates.size();
  require(group.size() == n, "grouping covariate length mismatch");
  require(n >= 1, "subgroup summary needs data");

  std::vector<double> level_values(group);
  std::sort(level_values.begin(), level_values.end());
  level_values.erase(std::unique(level_values.begin(), level_values.end()), level_values.end());
  require(level_values.size() <= 20, "grouping covariate has more than 20 levels");

  SubgroupSummary out;
  out.covariate = covariate_name;
  out.single_level = level_values.size() == 1;

  const auto [lo_it, hi_it] = std::minmax_element(ites.estimates.begin(), ites.estimates.end());
  const double lo = *lo_it, hi = *hi_it;
  const double width = hi > lo ? (hi - lo) / static_cast<double>(kSubgroupBins) : 1.0;
  out.bin_edges.resize(kSubgroupBins + 1);
  for (std::size_t b = 0; b <= kSubgroupBins; ++b)
    out.bin_edges[b] = lo + width * static_cast<double>(b);

  for (double lv : level_values) {
    SubgroupLevel row;
    row.level = lv;
    row.bin_counts.assign(kSubgroupBins, 0);
    std::vector<double> vals;
    for (std::size_t i = 0; i < n; ++i) {
      if (group[i] != lv) continue;
      const double v = ites.estimates[i];
      vals.push_back(v);
      std::size_t b = hi > lo ? static_cast<std::size_t>((v - lo) / width) : 0;
      if (b >= kSubgroupBins) b = kSubgroupBins - 1;  // top edge closes the last bin
      ++row.bin_counts[b];
    }
    row.count = vals.size();
    row.mean_ite = mean(vals);
    row.sd_ite = vals.size() > 1 ? sd(vals) : 0.0;
    row.q025 = quantile(vals, 0.025);
    row.q25 = quantile(vals, 0.25);
    row.median = quantile(vals, 0.5);
    row.q75 = quantile(vals, 0.75);
    row.q975 = quantile(vals, 0.975);
    out.levels.push_back(std::move(row));
  }
  return out;
}

// -------------------------------------------------------- logistic regression

struct LogisticFit {
  std::vector<double> coef;
  Matrix covariance;  // inverse observed information
  bool converged = false;
  int iterations = 0;
  double loglik = 0.0;
};

namespace detail {

inline double bernoulli_loglik(const Matrix& x, const std::vector<double>& y,
                               const std::vector<double>& beta) {
  double ll = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double eta = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) eta += x(i, j) * beta[j];
    // log p = eta - log(1+e^eta), log(1-p) = -log(1+e^eta), stably
    const double log1pe = eta > 0.0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta));
    ll += y[i] * eta - log1pe;
  }
  return ll;
}

}  // namespace detail

// Maximum likelihood by iteratively reweighted least squares with step
// halving, so the log likelihood never decreases. Converges when the
// score is flat (max |score| < 1e-8) within 50 iterations, or earlier
// when the Newton model predicts a gain below the evaluation noise of
// the log likelihood itself; past that point the comparison ll_new >= ll
// is deciding on rounding dust, not on the objective.
inline LogisticFit logistic_irls(const Matrix& features, const std::vector<double>& y,
                                 bool add_intercept = true) {
  const std::size_t n = features.rows();
  require(y.size() == n, "target length mismatch");
  for (double v : y) require(v == 0.0 || v == 1.0, "logistic target must be 0/1");
  const std::size_t k = features.cols() + (add_intercept ? 1 : 0);
  require(n > k, "more coefficients than observations");

  Matrix x(n, k);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t j0 = 0;
    if (add_intercept) x(i, j0++) = 1.0;
    for (std::size_t j = 0; j < features.cols(); ++j) x(i, j0 + j) = features(i, j);
  }

  LogisticFit fit;
  fit.coef.assign(k, 0.0);
  double ll = detail::bernoulli_loglik(x, y, fit.coef);

  std::vector<double> prob(n), score(k), delta(k);
  Matrix info(k, k);
  for (int iter = 0; iter < 50; ++iter) {
    for (std::size_t i = 0; i < n; ++i) {
      double eta = 0.0;
      for (std::size_t j = 0; j < k; ++j) eta += x(i, j) * fit.coef[j];
      prob[i] = expit(eta);
    }
    std::fill(score.begin(), score.end(), 0.0);
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t i = 0; i < n; ++i) score[j] += x(i, j) * (y[i] - prob[i]);

    double max_score = 0.0;
    for (double s : score) max_score = std::max(max_score, std::abs(s));
    if (max_score < 1e-8) {
      fit.converged = true;
      break;
    }

    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = 0; b < k; ++b) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += x(i, a) * x(i, b) * prob[i] * (1.0 - prob[i]);
        info(a, b) = s;
      }
    delta = Cholesky(info).solve(score);

    // Summing n same-sign terms leaves rounding error of order n eps |ll|.
    double predicted_gain = 0.0;
    for (std::size_t j = 0; j < k; ++j) predicted_gain += score[j] * delta[j];
    predicted_gain *= 0.5;
    const double noise_floor = 8.0 * std::numeric_limits<double>::epsilon() *
                               static_cast<double>(n) * (std::abs(ll) + 1.0);
    if (predicted_gain <= noise_floor) {
      fit.converged = true;
      break;
    }

    double step = 1.0;
    std::vector<double> trial(k);
    double ll_new = -std::numeric_limits<double>::infinity();
    for (int h = 0; h < 30; ++h) {
      for (std::size_t j = 0; j < k; ++j) trial[j] = fit.coef[j] + step * delta[j];
      ll_new = detail::bernoulli_loglik(x, y, trial);
      if (ll_new >= ll) break;
      step *= 0.5;
    }
    require(ll_new >= ll, "log likelihood decreased");
    fit.coef = trial;
    ll = ll_new;
    fit.iterations = iter + 1;

    for (double b : fit.coef)
      require(std::abs(b) <= 30.0, "complete separation (coefficient magnitude exceeds 30)");
  }

  fit.loglik = ll;
  for (std::size_t i = 0; i < n; ++i) {
    double eta = 0.0;
    for (std::size_t j = 0; j < k; ++j) eta += x(i, j) * fit.coef[j];
    prob[i] = expit(eta);
  }
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = 0; b < k; ++b) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += x(i, a) * x(i, b) * prob[i] * (1.0 - prob[i]);
      info(a, b) = s;
    }
  fit.covariance = Cholesky(info).inverse();
  return fit;
}

inline std::vector<double> logistic_fitted(const Matrix& features, const LogisticFit& fit,
                                           bool add_intercept = true) {
  std::vector<double> out(features.rows());
  for (std::size_t i = 0; i < features.rows(); ++i) {
    double eta = add_intercept ? fit.coef[0] : 0.0;
    const std::size_t j0 = add_intercept ? 1 : 0;
    for (std::size_t j = 0; j < features.cols(); ++j) eta += features(i, j) * fit.coef[j0 + j];
    out[i] = expit(eta);
  }
  return out;
}

// ------------------------------------------------------------- 2x2 measures

struct EffectEstimate {
  double estimate = 0.0;
  double ci_lower = 0.0, ci_upper = 0.0;
};

struct TwoByTwoMeasures {
  std::size_t n1 = 0, a = 0;  // exposed: total, events
  std::size_t n0 = 0, c = 0;  // unexposed: total, events
  EffectEstimate risk_difference, risk_ratio, odds_ratio;
  double rd_se = 0.0, log_rr_se = 0.0, log_or_se = 0.0;
  bool zero_cell = false;  // some cell empty: ratio CIs unbounded, no correction applied
};

inline TwoByTwoMeasures two_by_two_measures(std::size_t n1, std::size_t a, std::size_t n0,
                                            std::size_t c) {
  require(n1 >= 1 && n0 >= 1, "both arms need at least one unit");
  require(a <= n1 && c <= n0, "events exceed arm size");
  const double inf = std::numeric_limits<double>::infinity();

  TwoByTwoMeasures m;
  m.n1 = n1;
  m.a = a;
  m.n0 = n0;
  m.c = c;
  m.zero_cell = a == 0 || a == n1 || c == 0 || c == n0;

  const double p1 = static_cast<double>(a) / static_cast<double>(n1);
  const double p0 = static_cast<double>(c) / static_cast<double>(n0);

  m.risk_difference.estimate = p1 - p0;
  m.rd_se = std::sqrt(p1 * (1.0 - p1) / static_cast<double>(n1) +
                      p0 * (1.0 - p0) / static_cast<double>(n0));
  m.risk_difference.ci_lower = m.risk_difference.estimate - kZ975 * m.rd_se;
  m.risk_difference.ci_upper = m.risk_difference.estimate + kZ975 * m.rd_se;

  m.risk_ratio.estimate = p0 > 0.0 ? p1 / p0 : (p1 > 0.0 ? inf : 1.0);
  m.odds_ratio.estimate = (a == n1 || c == 0)
                              ? ((c == n0 && a == n1) || (a == 0 && c == 0) ? 1.0 : inf)
                              : (p1 / (1.0 - p1)) / (p0 > 0.0 ? p0 / (1.0 - p0) : inf);
  if (a == 0 && c > 0) m.odds_ratio.estimate = 0.0;

  if (m.zero_cell) {
    m.log_rr_se = inf;
    m.log_or_se = inf;
    m.risk_ratio.ci_lower = 0.0;
    m.risk_ratio.ci_upper = inf;
    m.odds_ratio.ci_lower = 0.0;
    m.odds_ratio.ci_upper = inf;
    return m;
  }

  const double da = static_cast<double>(a), dc = static_cast<double>(c);
  const double dn1 = static_cast<double>(n1), dn0 = static_cast<double>(n0);
  m.log_rr_se = std::sqrt(1.0 / da - 1.0 / dn1 + 1.0 / dc - 1.0 / dn0);
  m.log_or_se = std::sqrt(1.0 / da + 1.0 / (dn1 - da) + 1.0 / dc + 1.0 / (dn0 - dc));

  const double log_rr = std::log(m.risk_ratio.estimate);
  m.risk_ratio.ci_lower = std::exp(log_rr - kZ975 * m.log_rr_se);
  m.risk_ratio.ci_upper = std::exp(log_rr + kZ975 * m.log_rr_se);
  const double log_or = std::log(m.odds_ratio.estimate);
  m.odds_ratio.ci_lower = std::exp(log_or - kZ975 * m.log_or_se);
  m.odds_ratio.ci_upper = std::exp(log_or + kZ975 * m.log_or_se);
  return m;
}

inline TwoByTwoMeasures two_by_two_measures(const ObservationalDataset& data) {
  require(data.outcome_kind == OutcomeKind::binary, "2x2 measures need a binary outcome");
  std::size_t n1 = 0, a = 0, n0 = 0, c = 0;
  for (std::size_t i = 0; i < data.n(); ++i) {
    if (data.exposure[i] == 1.0) {
      ++n1;
      if (data.outcome[i] == 1.0) ++a;
    } else {
      ++n0;
      if (data.outcome[i] == 1.0) ++c;
    }
  }
  return two_by_two_measures(n1, a, n0, c);
}

// ------------------------------------------------------------ stratified CATE

struct StratifiedRow {
  double stratum = 0.0;
  std::size_t n = 0;
  TwoByTwoMeasures crude;     // within-stratum 2x2
  double log_or = 0.0;        // exposure coefficient, adjusted for other covariates
  double log_or_se = 0.0;
  EffectEstimate adjusted_or;
};

struct StratifiedReport {
  std::string covariate;
  std::vector<StratifiedRow> rows;
  double q = 0.0;
  std::size_t q_df = 0;
  double q_p = 1.0;
};

struct CochranQ {
  double q = 0.0;
  std::size_t df = 0;
  double p = 1.0;
};

inline CochranQ cochran_q(const std::vector<double>& estimates, const std::vector<double>& ses) {
  require(estimates.size() == ses.size(), "estimate/se length mismatch");
  require(estimates.size() >= 2, "heterogeneity test needs at least 2 strata");
  for (double s : ses) require(s > 0.0 && std::isfinite(s), "standard errors must be positive");

  double sw = 0.0, swt = 0.0;
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    const double w = 1.0 / (ses[i] * ses[i]);
    sw += w;
    swt += w * estimates[i];
  }
  const double pooled = swt / sw;
  CochranQ out;
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    const double w = 1.0 / (ses[i] * ses[i]);
    const double d = estimates[i] - pooled;
    out.q += w * d * d;
  }
  out.df = estimates.size() - 1;
  out.p = chi_squared_sf(out.q, static_cast<double>(out.df));
  return out;
}

// Per level of the stratification covariate: the crude 2x2 contrasts and
// the exposure odds ratio from a logistic fit adjusted for all other
// covariates; the heterogeneity test runs on the adjusted log odds ratios.
inline StratifiedReport stratified_cate(const ObservationalDataset& data, int stratum_col) {
  validate(data);
  require(data.outcome_kind == OutcomeKind::binary, "stratified analysis needs a binary outcome");
  require(stratum_col >= 0 && static_cast<std::size_t>(stratum_col) < data.p(),
          "stratification covariate out of range");

  const std::size_t sc = static_cast<std::size_t>(stratum_col);
  std::vector<double> levels(data.x.col(sc), data.x.col(sc) + data.n());
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  require(levels.size() >= 2, "stratification covariate has a single level");
  require(levels.size() <= 10, "stratification covariate has more than 10 levels");

  StratifiedReport out;
  out.covariate = data.covariate_names[sc];

  for (double lv : levels) {
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < data.n(); ++i)
      if (data.x(i, sc) == lv) keep.push_back(i);

    StratifiedRow row;
    row.stratum = lv;
    row.n = keep.size();
    const std::string label = out.covariate + " = " + fmt_number(lv);

    std::size_t n1 = 0, a = 0, n0 = 0, c = 0;
    for (std::size_t i : keep) {
      if (data.exposure[i] == 1.0) {
        ++n1;
        if (data.outcome[i] == 1.0) ++a;
      } else {
        ++n0;
        if (data.outcome[i] == 1.0) ++c;
      }
    }
    require(n1 >= 1 && n0 >= 1, "stratum " + label + " lacks an exposure group");
    require(a + c >= 1 && a + c < n1 + n0, "stratum " + label + " has no outcome variation");
    row.crude = two_by_two_measures(n1, a, n0, c);

    // exposure first, then every covariate except the stratifier
    Matrix feats(keep.size(), data.p());
    for (std::size_t r = 0; r < keep.size(); ++r) {
      feats(r, 0) = data.exposure[keep[r]];
      std::size_t jc = 1;
      for (std::size_t j = 0; j < data.p(); ++j) {
        if (j == sc) continue;
        feats(r, jc++) = data.x(keep[r], j);
      }
    }
    std::vector<double> y(keep.size());
    for (std::size_t r = 0; r < keep.size(); ++r) y[r] = data.outcome[keep[r]];

    try {
      const LogisticFit fit = logistic_irls(feats, y, true);
      row.log_or = fit.coef[1];
      row.log_or_se = std::sqrt(fit.covariance(1, 1));
    } catch (const Error& e) {
      throw Error("stratum " + label + ": " + e.what());
    }
    row.adjusted_or.estimate = std::exp(row.log_or);
    row.adjusted_or.ci_lower = std::exp(row.log_or - kZ975 * row.log_or_se);
    row.adjusted_or.ci_upper = std::exp(row.log_or + kZ975 * row.log_or_se);
    out.rows.push_back(std::move(row));
  }

  std::vector<double> est, se;
  for (const auto& r : out.rows) {
    est.push_back(r.log_or);
    se.push_back(r.log_or_se);
  }
  const CochranQ q = cochran_q(est, se);
  out.q = q.q;
  out.q_df = q.df;
  out.q_p = q.p;
  return out;
}

}  // namespace emm
