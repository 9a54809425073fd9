#pragma once

// Tree growing blocks shared by the causal forest, the nuisance
// regression forests, and the interpretation tree: honest sample
// partitioning, the mean-shift split criterion on pseudo-outcomes,
// recursive growth, and forest kernel weights.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "emm/common.hpp"
#include "emm/rng.hpp"

namespace emm {

struct TreeNode {
  int cov = -1;  // -1: leaf
  double threshold = 0.0;
  int left = -1, right = -1;
  int depth = 1;  // root = 1
  std::vector<int> members;  // leaf payload (estimation set for honest trees)
  double value = 0.0;        // leaf mean where the tree predicts directly
};

struct DecisionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root
  bool degenerate = false;      // a node saw all-zero instrument residuals

  bool is_leaf(int id) const { return nodes[static_cast<std::size_t>(id)].cov < 0; }

  // Routing rule everywhere: go left iff x[cov] <= threshold.
  int find_leaf(const Matrix& x, std::size_t row) const {
    int id = 0;
    while (!is_leaf(id)) {
      const TreeNode& nd = nodes[static_cast<std::size_t>(id)];
      id = x(row, static_cast<std::size_t>(nd.cov)) <= nd.threshold ? nd.left : nd.right;
    }
    return id;
  }

  int find_leaf_point(const std::vector<double>& point) const {
    int id = 0;
    while (!is_leaf(id)) {
      const TreeNode& nd = nodes[static_cast<std::size_t>(id)];
      id = point[static_cast<std::size_t>(nd.cov)] <= nd.threshold ? nd.left : nd.right;
    }
    return id;
  }

  int max_internal_depth() const {
    int d = 0;
    for (const auto& nd : nodes)
      if (nd.cov >= 0) d = std::max(d, nd.depth);
    return d;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json out;
    out["format_version"] = kFormatVersion;
    out["degenerate"] = degenerate;
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& nd : nodes) {
      nlohmann::ordered_json jn;
      jn["depth"] = nd.depth;
      if (nd.cov >= 0) {
        jn["covariate"] = nd.cov;
        jn["threshold"] = nd.threshold;
        jn["left"] = nd.left;
        jn["right"] = nd.right;
      } else {
        jn["members"] = nd.members;
        jn["value"] = nd.value;
      }
      arr.push_back(std::move(jn));
    }
    out["nodes"] = std::move(arr);
    return out;
  }
};

// Node labels show the split rule; leaves show size. Covariate names optional.
inline std::string tree_to_dot(const DecisionTree& t, const std::vector<std::string>& names = {}) {
  std::ostringstream os;
  os << "digraph tree {\n  node [shape=box];\n";
  for (std::size_t i = 0; i < t.nodes.size(); ++i) {
    const TreeNode& nd = t.nodes[i];
    if (nd.cov >= 0) {
      const std::string nm = static_cast<std::size_t>(nd.cov) < names.size()
                                 ? names[static_cast<std::size_t>(nd.cov)]
                                 : "x" + std::to_string(nd.cov + 1);
      char buf[64];
      std::snprintf(buf, sizeof buf, "%g", nd.threshold);
      os << "  n" << i << " [label=\"" << nm << " <= " << buf << "\"];\n";
      os << "  n" << i << " -> n" << nd.left << " [label=\"yes\"];\n";
      os << "  n" << i << " -> n" << nd.right << " [label=\"no\"];\n";
    } else {
      os << "  n" << i << " [label=\"n = " << nd.members.size() << "\"];\n";
    }
  }
  os << "}\n";
  return os.str();
}

// ------------------------------------------------------------ honest partition

struct HonestPartition {
  std::vector<int> grow;
  std::vector<int> estimate;
};

// Random disjoint split; grow gets floor(fraction * |indices|).
inline HonestPartition honest_partition(std::vector<int> indices, double fraction, Rng& rng) {
  require(fraction > 0.0 && fraction < 1.0, "honest fraction outside (0,1)");
  require(indices.size() >= 2, "honest partition needs at least 2 indices");
  rng.shuffle(indices);
  const std::size_t n_grow =
      static_cast<std::size_t>(std::floor(fraction * static_cast<double>(indices.size())));
  require(n_grow >= 1, "honest partition leaves the grow side empty");
  require(n_grow < indices.size(), "honest partition leaves the estimate side empty");
  HonestPartition out;
  out.grow.assign(indices.begin(), indices.begin() + static_cast<std::ptrdiff_t>(n_grow));
  out.estimate.assign(indices.begin() + static_cast<std::ptrdiff_t>(n_grow), indices.end());
  return out;
}

// ----------------------------------------------------------------- split gain

// Proxy criterion (n1*n2 / np^2) * (mean1 - mean2)^2; argmax matches the
// within-child sum-of-squares reduction.
inline double split_gain(std::size_t n1, double mean1, std::size_t n2, double mean2) {
  require(n1 >= 1 && n2 >= 1, "split_gain: empty child");
  const double np = static_cast<double>(n1 + n2);
  const double diff = mean1 - mean2;
  return (static_cast<double>(n1) * static_cast<double>(n2) / (np * np)) * diff * diff;
}

struct TreeGrowConfig {
  int min_leaf = 5;
  int max_depth = 0;  // 0: unlimited; bounds the depth of splitting nodes, root = 1
  int covariate_subsample = 0;  // 0: ceil(sqrt(p) + 0.2 p), capped at p
};

namespace detail {

inline int default_mtry(std::size_t p) {
  const double d = std::ceil(std::sqrt(static_cast<double>(p)) + 0.2 * static_cast<double>(p));
  return std::min<int>(static_cast<int>(p), static_cast<int>(d));
}

struct SplitResult {
  int cov = -1;
  double threshold = 0.0;
  double gain = -1.0;
  bool found() const { return cov >= 0; }
};

// Best (covariate, midpoint threshold) by the mean-shift criterion over
// `members`. Ties go to the lowest covariate index, then lowest threshold;
// sorting keys are (value, score) pairs so the scan is invariant to unit
// order. A split must keep >= min_main members per child and, when an
// estimation set is supplied, >= min_est of it per child.
inline SplitResult best_split(const Matrix& x, const std::vector<double>& score,
                              const std::vector<int>& members, const std::vector<int>& cand_covs,
                              int min_main, const std::vector<int>* est, int min_est) {
  SplitResult best;
  const std::size_t n = members.size();
  if (n < 2 * static_cast<std::size_t>(min_main)) return best;

  std::vector<std::pair<double, double>> vals(n);
  std::vector<double> est_vals;
  for (int cov : cand_covs) {
    const std::size_t c = static_cast<std::size_t>(cov);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t u = static_cast<std::size_t>(members[i]);
      vals[i] = {x(u, c), score[u]};
    }
    std::sort(vals.begin(), vals.end());
    if (vals.front().first == vals.back().first) continue;

    if (est) {
      est_vals.resize(est->size());
      for (std::size_t i = 0; i < est->size(); ++i)
        est_vals[i] = x(static_cast<std::size_t>((*est)[i]), c);
      std::sort(est_vals.begin(), est_vals.end());
    }

    double total = 0.0;
    for (const auto& v : vals) total += v.second;

    double sum_left = 0.0;
    for (std::size_t k = 0; k + 1 < n; ++k) {
      sum_left += vals[k].second;
      if (vals[k].first == vals[k + 1].first) continue;
      const std::size_t n_l = k + 1, n_r = n - n_l;
      if (n_l < static_cast<std::size_t>(min_main) || n_r < static_cast<std::size_t>(min_main))
        continue;
      double thr = 0.5 * (vals[k].first + vals[k + 1].first);
      if (!(thr < vals[k + 1].first)) thr = vals[k].first;  // adjacent doubles
      if (est) {
        const std::size_t e_l = static_cast<std::size_t>(
            std::upper_bound(est_vals.begin(), est_vals.end(), thr) - est_vals.begin());
        const std::size_t e_r = est_vals.size() - e_l;
        if (e_l < static_cast<std::size_t>(min_est) || e_r < static_cast<std::size_t>(min_est))
          continue;
      }
      const double g = split_gain(n_l, sum_left / static_cast<double>(n_l), n_r,
                                  (total - sum_left) / static_cast<double>(n_r));
      if (g > best.gain) best = {cov, thr, g};
    }
  }
  return best;
}

inline void partition_by_rule(const Matrix& x, int cov, double thr, const std::vector<int>& in,
                              std::vector<int>& left, std::vector<int>& right) {
  left.clear();
  right.clear();
  for (int u : in) {
    if (x(static_cast<std::size_t>(u), static_cast<std::size_t>(cov)) <= thr)
      left.push_back(u);
    else
      right.push_back(u);
  }
}

}  // namespace detail

// ------------------------------------------------------------- gradient tree

namespace detail {

struct GradientGrowCtx {
  const Matrix& x;
  const std::vector<double>& yc;  // centered outcome
  const std::vector<double>& zc;  // centered exposure
  TreeGrowConfig cfg;
  int mtry;
  Rng& rng;
  DecisionTree& tree;
  std::vector<double> score;  // per-unit pseudo-outcome scratch, length n
};

inline int grow_gradient_node(GradientGrowCtx& c, std::vector<int> grow, std::vector<int> est,
                              int depth) {
  const int id = static_cast<int>(c.tree.nodes.size());
  c.tree.nodes.emplace_back();
  c.tree.nodes.back().depth = depth;

  double szz = 0.0, szy = 0.0;
  for (int u : grow) {
    const std::size_t i = static_cast<std::size_t>(u);
    szz += c.zc[i] * c.zc[i];
    szy += c.zc[i] * c.yc[i];
  }
  const double a_p = szz / static_cast<double>(grow.size());

  auto make_leaf = [&]() {
    c.tree.nodes[static_cast<std::size_t>(id)].members = std::move(est);
    return id;
  };

  if (a_p == 0.0) {  // no instrument variation: nothing to regress on
    c.tree.degenerate = true;
    return make_leaf();
  }
  const bool depth_ok = c.cfg.max_depth <= 0 || depth <= c.cfg.max_depth;
  if (!depth_ok || grow.size() < 2 * static_cast<std::size_t>(c.cfg.min_leaf) ||
      est.size() < 2 * static_cast<std::size_t>(c.cfg.min_leaf))
    return make_leaf();

  const double theta_p = szy / szz;
  for (int u : grow) {
    const std::size_t i = static_cast<std::size_t>(u);
    c.score[i] = c.zc[i] * (c.yc[i] - theta_p * c.zc[i]) / a_p;
  }

  const std::vector<int> cands =
      c.rng.sample_without_replacement(static_cast<int>(c.x.cols()), c.mtry);
  const detail::SplitResult best =
      detail::best_split(c.x, c.score, grow, cands, c.cfg.min_leaf, &est, c.cfg.min_leaf);
  if (!best.found() || !(best.gain > 0.0)) return make_leaf();

  std::vector<int> gl, gr, el, er;
  detail::partition_by_rule(c.x, best.cov, best.threshold, grow, gl, gr);
  detail::partition_by_rule(c.x, best.cov, best.threshold, est, el, er);

  const int left = grow_gradient_node(c, std::move(gl), std::move(el), depth + 1);
  const int right = grow_gradient_node(c, std::move(gr), std::move(er), depth + 1);
  TreeNode& nd = c.tree.nodes[static_cast<std::size_t>(id)];
  nd.cov = best.cov;
  nd.threshold = best.threshold;
  nd.left = left;
  nd.right = right;
  return id;
}

}  // namespace detail

// Grows one honest gradient tree. Split scores are computed from the grow
// half only; leaves hold the estimation half. Each recursion re-centers
// the node by its own local slope theta_P before scoring candidate splits.
inline DecisionTree grow_gradient_tree(const Matrix& x, const std::vector<double>& y_centered,
                                       const std::vector<double>& z_centered,
                                       const std::vector<int>& grow_idx,
                                       const std::vector<int>& estimate_idx,
                                       const TreeGrowConfig& cfg, Rng& rng) {
  require(!grow_idx.empty() && !estimate_idx.empty(), "gradient tree needs grow and estimate units");
  require(cfg.min_leaf >= 1, "min_leaf must be >= 1");
  require(x.rows() == y_centered.size() && x.rows() == z_centered.size(),
          "gradient tree input length mismatch");

  DecisionTree tree;
  const int mtry = cfg.covariate_subsample > 0
                       ? std::min<int>(static_cast<int>(x.cols()), cfg.covariate_subsample)
                       : detail::default_mtry(x.cols());
  detail::GradientGrowCtx ctx{x, y_centered, z_centered, cfg, mtry, rng, tree,
                              std::vector<double>(x.rows(), 0.0)};
  detail::grow_gradient_node(ctx, grow_idx, estimate_idx, 1);
  return tree;
}

// -------------------------------------------------------------- forest weights

struct KernelWeights {
  std::vector<double> w;  // per training unit; sums to 1
};

// Average of per-tree leaf-uniform weights at x. Trees whose leaf at x is
// empty contribute nothing and the average renormalizes over the rest.
inline KernelWeights forest_weights(const std::vector<DecisionTree>& trees,
                                    const std::vector<double>& point, std::size_t n_train) {
  require(!trees.empty(), "forest_weights needs at least one tree");
  KernelWeights kw;
  kw.w.assign(n_train, 0.0);
  std::size_t contributing = 0;
  for (const auto& t : trees) {
    const int leaf = t.find_leaf_point(point);
    const auto& members = t.nodes[static_cast<std::size_t>(leaf)].members;
    if (members.empty()) continue;
    ++contributing;
    const double w = 1.0 / static_cast<double>(members.size());
    for (int u : members) kw.w[static_cast<std::size_t>(u)] += w;
  }
  require(contributing > 0, "every tree has an empty leaf at the query point");
  const double inv = 1.0 / static_cast<double>(contributing);
  for (double& w : kw.w) w *= inv;
  return kw;
}

// ------------------------------------------------------- regression forest

struct RegressionForestConfig {
  int num_trees = 200;
  double subsample_rate = 0.5;  // without replacement
  TreeGrowConfig tree;
  bool clip_unit_interval = false;  // clip predictions to [0.01, 0.99]
  std::uint64_t seed = 0;
};

struct RegressionForestResult {
  std::vector<double> oob;  // per-unit prediction from trees not containing the unit
  bool full_forest_fallback = false;  // some unit was in-bag everywhere
  std::vector<DecisionTree> trees;
  std::vector<std::vector<char>> in_bag;  // [tree][unit]
};

// Averages each unit over the trees whose subsample missed it; units
// in-bag everywhere take the full-forest average and set the flag.
inline std::pair<std::vector<double>, bool> oob_average(const std::vector<DecisionTree>& trees,
                                                        const std::vector<std::vector<char>>& in_bag,
                                                        const Matrix& x, bool clip_unit_interval) {
  const std::size_t n = x.rows();
  std::vector<double> oob(n, 0.0);
  bool fallback = false;

#pragma omp parallel for schedule(static) reduction(|| : fallback)
  for (std::ptrdiff_t ip = 0; ip < static_cast<std::ptrdiff_t>(n); ++ip) {
    const std::size_t i = static_cast<std::size_t>(ip);
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t t = 0; t < trees.size(); ++t) {
      if (in_bag[t][i]) continue;
      const int leaf = trees[t].find_leaf(x, i);
      sum += trees[t].nodes[static_cast<std::size_t>(leaf)].value;
      ++count;
    }
    if (count == 0) {  // in-bag everywhere
      fallback = true;
      for (std::size_t t = 0; t < trees.size(); ++t) {
        const int leaf = trees[t].find_leaf(x, i);
        sum += trees[t].nodes[static_cast<std::size_t>(leaf)].value;
      }
      count = trees.size();
    }
    double pred = sum / static_cast<double>(count);
    if (clip_unit_interval) pred = std::clamp(pred, 0.01, 0.99);
    oob[i] = pred;
  }
  return {std::move(oob), fallback};
}

namespace detail {

inline int grow_regression_node(const Matrix& x, const std::vector<double>& y,
                                std::vector<int> members, const TreeGrowConfig& cfg, int mtry,
                                int depth, Rng& rng, DecisionTree& tree) {
  const int id = static_cast<int>(tree.nodes.size());
  tree.nodes.emplace_back();
  tree.nodes.back().depth = depth;

  double sum = 0.0;
  for (int u : members) sum += y[static_cast<std::size_t>(u)];
  const double node_mean = sum / static_cast<double>(members.size());

  auto make_leaf = [&]() {
    TreeNode& nd = tree.nodes[static_cast<std::size_t>(id)];
    nd.value = node_mean;
    nd.members = std::move(members);
    return id;
  };

  const bool depth_ok = cfg.max_depth <= 0 || depth <= cfg.max_depth;
  if (!depth_ok || members.size() < 2 * static_cast<std::size_t>(cfg.min_leaf)) return make_leaf();

  const std::vector<int> cands = rng.sample_without_replacement(static_cast<int>(x.cols()), mtry);
  const detail::SplitResult best = detail::best_split(x, y, members, cands, cfg.min_leaf, nullptr, 0);
  if (!best.found() || !(best.gain > 0.0)) return make_leaf();

  std::vector<int> l, r;
  detail::partition_by_rule(x, best.cov, best.threshold, members, l, r);
  const int left = grow_regression_node(x, y, std::move(l), cfg, mtry, depth + 1, rng, tree);
  const int right = grow_regression_node(x, y, std::move(r), cfg, mtry, depth + 1, rng, tree);
  TreeNode& nd = tree.nodes[static_cast<std::size_t>(id)];
  nd.cov = best.cov;
  nd.threshold = best.threshold;
  nd.left = left;
  nd.right = right;
  return id;
}

}  // namespace detail

// Bagged regression trees with out-of-bag prediction. Units never out of
// bag fall back to the full-forest average and raise the fallback flag.
inline RegressionForestResult regression_forest_oob(const Matrix& x, const std::vector<double>& y,
                                                    const RegressionForestConfig& cfg) {
  const std::size_t n = x.rows();
  require(n >= 10, "regression forest needs n >= 10");
  require(y.size() == n, "regression forest target length mismatch");
  require(cfg.num_trees >= 1, "regression forest needs at least one tree");
  require(cfg.subsample_rate > 0.0 && cfg.subsample_rate <= 1.0, "subsample rate outside (0,1]");

  const int n_sub = std::max<int>(2, static_cast<int>(std::floor(cfg.subsample_rate * static_cast<double>(n))));
  const int mtry = cfg.tree.covariate_subsample > 0
                       ? std::min<int>(static_cast<int>(x.cols()), cfg.tree.covariate_subsample)
                       : detail::default_mtry(x.cols());

  std::vector<DecisionTree> trees(static_cast<std::size_t>(cfg.num_trees));
  std::vector<std::vector<char>> in_bag(trees.size(), std::vector<char>(n, 0));

#pragma omp parallel for schedule(dynamic)
  for (int t = 0; t < cfg.num_trees; ++t) {
    Rng rng = Rng::substream(cfg.seed, static_cast<std::uint64_t>(t));
    const std::vector<int> sub = rng.sample_without_replacement(static_cast<int>(n), n_sub);
    for (int u : sub) in_bag[static_cast<std::size_t>(t)][static_cast<std::size_t>(u)] = 1;
    detail::grow_regression_node(x, y, sub, cfg.tree, mtry, 1, rng, trees[static_cast<std::size_t>(t)]);
  }

  RegressionForestResult out;
  auto [oob, fallback] = oob_average(trees, in_bag, x, cfg.clip_unit_interval);
  out.oob = std::move(oob);
  out.full_forest_fallback = fallback;
  out.trees = std::move(trees);
  out.in_bag = std::move(in_bag);
  return out;
}

}  // namespace emm
