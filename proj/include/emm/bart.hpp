#pragma once

// Additive regression trees sampled by backfitting: each sweep revisits
// every tree, proposes one structure move (grow / prune / change / swap)
// against the tree's integrated-out marginal likelihood, then redraws
// its leaf values conjugately. Leaf updates take per-unit multipliers so
// an ensemble can enter the model as w_i * g(x_i); the plain sampler
// passes w = 1, the treatment-moderation ensemble passes w = z.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <utility>
#include <vector>

#include "emm/dataset.hpp"
#include "emm/rng.hpp"
#include "emm/stats.hpp"

namespace emm {

enum class BartLink { identity, probit };

struct TreePriorParams {
  double alpha = 0.95;
  double beta = 2.0;
  int max_depth = -1;  // <0: unlimited; 0: stumps; else deepest splittable level, root = 0
};

struct BartConfig {
  int num_trees = 0;  // 0: 200 for identity, 50 for probit
  int burn_in = 500;
  int draws = 500;
  int thin = 1;
  double k = 2.0;  // leaf-scale multiplier
  TreePriorParams prior;
  double nu = 3.0;   // error-variance prior dof
  double q = 0.9;    // prior mass below the data sd
  std::uint64_t seed = 0;

  // test hooks
  std::optional<double> sigma_mu_override;
  std::optional<double> fixed_sigma2;
  bool scale_outcome = true;
  bool freeze_structure = false;
  bool consistency_checks = false;
};

// ------------------------------------------------------------------ tree

struct BartNode {
  int parent = -1, left = -1, right = -1;
  int depth = 0;  // root = 0
  int cov = -1;
  double cut = 0.0;
  double value = 0.0;
  bool in_use = false;
};

class BartTree {
 public:
  BartTree() : nodes_(1) { nodes_[0].in_use = true; }

  const BartNode& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  bool is_leaf(int id) const { return nodes_[static_cast<std::size_t>(id)].left < 0; }

  int route(const Matrix& x, std::size_t row) const { return route_from(0, x, row); }

  int route_from(int start, const Matrix& x, std::size_t row) const {
    int id = start;
    while (!is_leaf(id)) {
      const BartNode& nd = nodes_[static_cast<std::size_t>(id)];
      id = x(row, static_cast<std::size_t>(nd.cov)) <= nd.cut ? nd.left : nd.right;
    }
    return id;
  }

  // Node ids in preorder (left subtree before right). All picks and leaf
  // draws enumerate through this so the sampler ignores slot reuse order.
  void preorder(std::vector<int>& out) const {
    out.clear();
    std::vector<int> stack{0};
    while (!stack.empty()) {
      const int id = stack.back();
      stack.pop_back();
      out.push_back(id);
      const BartNode& nd = nodes_[static_cast<std::size_t>(id)];
      if (nd.left >= 0) {
        stack.push_back(nd.right);
        stack.push_back(nd.left);
      }
    }
  }

  void set_value(int id, double v) { nodes_[static_cast<std::size_t>(id)].value = v; }

  void set_rule(int id, int cov, double cut) {
    nodes_[static_cast<std::size_t>(id)].cov = cov;
    nodes_[static_cast<std::size_t>(id)].cut = cut;
  }

  void grow(int leaf, int cov, double cut) {
    const int l = alloc(), r = alloc();
    BartNode& nd = nodes_[static_cast<std::size_t>(leaf)];
    nd.cov = cov;
    nd.cut = cut;
    nd.left = l;
    nd.right = r;
    for (int c : {l, r}) {
      BartNode& ch = nodes_[static_cast<std::size_t>(c)];
      ch.parent = leaf;
      ch.depth = nd.depth + 1;
      ch.left = ch.right = -1;
      ch.cov = -1;
      ch.value = 0.0;
    }
  }

  void prune(int nog) {
    BartNode& nd = nodes_[static_cast<std::size_t>(nog)];
    release(nd.left);
    release(nd.right);
    nd.left = nd.right = -1;
    nd.cov = -1;
  }

 private:
  int alloc() {
    if (!free_.empty()) {
      const int id = free_.back();
      free_.pop_back();
      nodes_[static_cast<std::size_t>(id)] = BartNode{};
      nodes_[static_cast<std::size_t>(id)].in_use = true;
      return id;
    }
    nodes_.emplace_back();
    nodes_.back().in_use = true;
    return static_cast<int>(nodes_.size()) - 1;
  }

  void release(int id) {
    nodes_[static_cast<std::size_t>(id)].in_use = false;
    free_.push_back(id);
  }

  std::vector<BartNode> nodes_;
  std::vector<int> free_;
};

// ------------------------------------------------------------------ priors

inline double split_prob(const TreePriorParams& pr, int depth) {
  return pr.alpha * std::pow(1.0 + static_cast<double>(depth), -pr.beta);
}

inline double tree_structure_log_prior(const BartTree& t, const TreePriorParams& pr) {
  std::vector<int> order;
  t.preorder(order);
  double lp = 0.0;
  for (int id : order) {
    const double ps = split_prob(pr, t.node(id).depth);
    lp += t.is_leaf(id) ? std::log1p(-ps) : std::log(ps);
  }
  return lp;
}

struct CutTable {
  std::vector<std::vector<double>> values;  // per covariate, sorted distinct observed values
};

inline CutTable make_cut_table(const Matrix& x) {
  CutTable ct;
  ct.values.resize(x.cols());
  for (std::size_t j = 0; j < x.cols(); ++j) {
    std::vector<double> v(x.col(j), x.col(j) + x.rows());
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    ct.values[j] = std::move(v);
  }
  return ct;
}

// Structure prior plus the uniform rule prior 1/(p * #cuts(cov)) per split.
inline double tree_log_prior(const BartTree& t, const TreePriorParams& pr, const CutTable& cuts) {
  std::vector<int> order;
  t.preorder(order);
  const double log_p = std::log(static_cast<double>(cuts.values.size()));
  double lp = 0.0;
  for (int id : order) {
    const double ps = split_prob(pr, t.node(id).depth);
    if (t.is_leaf(id)) {
      lp += std::log1p(-ps);
    } else {
      lp += std::log(ps) - log_p -
            std::log(static_cast<double>(cuts.values[static_cast<std::size_t>(t.node(id).cov)].size()));
    }
  }
  return lp;
}

// --------------------------------------------------------------- marginals

// Log marginal likelihood of one leaf after integrating out its value
// under value ~ N(0, sigma_mu^2), model r_i = w_i * value + N(0, sigma^2):
// stats are n (count), sum_e2 = sum r^2, s_ww = sum w^2, s_we = sum w r.
inline double leaf_marginal_loglik(double n_raw, double sum_e2, double s_ww, double s_we,
                                   double sigma2, double sigma_mu2) {
  const double denom = sigma2 + s_ww * sigma_mu2;
  return 0.5 * std::log(sigma2 / denom) + sigma_mu2 * s_we * s_we / (2.0 * sigma2 * denom) -
         sum_e2 / (2.0 * sigma2) - 0.5 * n_raw * std::log(2.0 * kPi * sigma2);
}

// Move kinds in pick order; weights renormalize over the feasible set.
enum class MoveKind { grow = 0, prune = 1, change = 2, swap = 3 };

namespace detail {

struct LeafStats {
  double n = 0.0, sum_e2 = 0.0, s_ww = 0.0, s_we = 0.0;
};

struct TreeCounts {
  int leaves = 0, nogs = 0, internals = 0, pairs = 0;
};

inline TreeCounts count_tree(const BartTree& t) {
  std::vector<int> order;
  t.preorder(order);
  TreeCounts c;
  for (int id : order) {
    if (t.is_leaf(id)) {
      ++c.leaves;
      continue;
    }
    ++c.internals;
    const BartNode& nd = t.node(id);
    if (t.is_leaf(nd.left) && t.is_leaf(nd.right)) ++c.nogs;
    if (!t.is_leaf(nd.left)) ++c.pairs;
    if (!t.is_leaf(nd.right)) ++c.pairs;
  }
  return c;
}

inline double kind_weight(MoveKind k) {
  switch (k) {
    case MoveKind::grow: return 0.25;
    case MoveKind::prune: return 0.25;
    case MoveKind::change: return 0.40;
    default: return 0.10;
  }
}

inline bool kind_feasible(MoveKind k, const TreeCounts& c) {
  switch (k) {
    case MoveKind::grow: return true;
    case MoveKind::prune: return c.nogs >= 1;
    case MoveKind::change: return c.internals >= 1;
    default: return c.pairs >= 1;
  }
}

inline double kind_prob(MoveKind k, const TreeCounts& c) {
  if (!kind_feasible(k, c)) return 0.0;
  double z = 0.0;
  for (int i = 0; i < 4; ++i)
    if (kind_feasible(static_cast<MoveKind>(i), c)) z += kind_weight(static_cast<MoveKind>(i));
  return kind_weight(k) / z;
}

inline MoveKind pick_kind(const TreeCounts& c, Rng& rng) {
  double z = 0.0;
  for (int i = 0; i < 4; ++i)
    if (kind_feasible(static_cast<MoveKind>(i), c)) z += kind_weight(static_cast<MoveKind>(i));
  const double u = rng.uniform01() * z;
  double acc = 0.0;
  for (int i = 0; i < 4; ++i) {
    const MoveKind k = static_cast<MoveKind>(i);
    if (!kind_feasible(k, c)) continue;
    acc += kind_weight(k);
    if (u <= acc) return k;
  }
  return MoveKind::swap;
}

// Units whose root-to-leaf path passes through `target`.
inline void units_through(const BartTree& t, int target, const Matrix& x, std::vector<int>& out) {
  out.clear();
  const std::size_t n = x.rows();
  if (target == 0) {
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<int>(i);
    return;
  }
  for (std::size_t i = 0; i < n; ++i) {
    int id = 0;
    while (true) {
      if (id == target) {
        out.push_back(static_cast<int>(i));
        break;
      }
      if (t.is_leaf(id)) break;
      const BartNode& nd = t.node(id);
      id = x(i, static_cast<std::size_t>(nd.cov)) <= nd.cut ? nd.left : nd.right;
    }
  }
}

// Sum of leaf marginals over the subtree at `sub_root`, restricted to
// `units`. Sets `empty_leaf` when some subtree leaf receives no unit.
inline double subtree_marglik(const BartTree& t, int sub_root, const Matrix& x,
                              const std::vector<int>& units, const std::vector<double>& r,
                              const std::vector<double>& w, double sigma2, double sigma_mu2,
                              bool& empty_leaf) {
  std::map<int, LeafStats> stats;
  for (int u : units) {
    const std::size_t i = static_cast<std::size_t>(u);
    LeafStats& s = stats[t.route_from(sub_root, x, i)];
    s.n += 1.0;
    s.sum_e2 += r[i] * r[i];
    s.s_ww += w[i] * w[i];
    s.s_we += w[i] * r[i];
  }

  std::size_t leaf_count = 0;
  std::vector<int> order;
  {
    std::vector<int> stack{sub_root};
    while (!stack.empty()) {
      const int id = stack.back();
      stack.pop_back();
      if (t.is_leaf(id)) {
        ++leaf_count;
        continue;
      }
      stack.push_back(t.node(id).right);
      stack.push_back(t.node(id).left);
    }
  }
  if (stats.size() < leaf_count) {
    empty_leaf = true;
    return 0.0;
  }
  empty_leaf = false;
  double total = 0.0;
  for (const auto& [id, s] : stats)
    total += leaf_marginal_loglik(s.n, s.sum_e2, s.s_ww, s.s_we, sigma2, sigma_mu2);
  return total;
}

}  // namespace detail

struct MoveProposal {
  bool valid = false;  // false: rejected outright (self-loop), no accept draw
  MoveKind kind = MoveKind::grow;
  BartTree tree;       // proposed state
  int anchor = 0;      // root of the affected subtree
  double log_ratio = 0.0;  // log q(reverse) - log q(forward)
};

// Draws one structure move. The kind comes from weights (grow 0.25,
// prune 0.25, change 0.40, swap 0.10) renormalized over the kinds the
// tree supports; picks within a kind are uniform. Grow proposals at the
// depth cap come back invalid; empty-leaf rejection happens at the
// acceptance step where the data is in hand.
inline MoveProposal propose_move(const BartTree& tree, const CutTable& cuts,
                                 const TreePriorParams& pr, Rng& rng) {
  const detail::TreeCounts counts = detail::count_tree(tree);
  const std::size_t p = cuts.values.size();

  std::vector<int> order;
  tree.preorder(order);

  MoveProposal out;
  out.kind = detail::pick_kind(counts, rng);
  out.tree = tree;

  if (out.kind == MoveKind::grow) {
    std::vector<int> leaves;
    for (int id : order)
      if (tree.is_leaf(id)) leaves.push_back(id);
    out.anchor =
        leaves[static_cast<std::size_t>(rng.uniform_int(static_cast<std::uint64_t>(leaves.size())))];
    const int cov = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(p)));
    const auto& cand = cuts.values[static_cast<std::size_t>(cov)];
    const double cut =
        cand[static_cast<std::size_t>(rng.uniform_int(static_cast<std::uint64_t>(cand.size())))];
    if (pr.max_depth >= 0 && tree.node(out.anchor).depth >= pr.max_depth) return out;
    out.tree.grow(out.anchor, cov, cut);
    const detail::TreeCounts after = detail::count_tree(out.tree);
    out.log_ratio = std::log(detail::kind_prob(MoveKind::prune, after)) -
                    std::log(static_cast<double>(after.nogs)) -
                    (std::log(detail::kind_prob(MoveKind::grow, counts)) -
                     std::log(static_cast<double>(counts.leaves)) - std::log(static_cast<double>(p)) -
                     std::log(static_cast<double>(cand.size())));
  } else if (out.kind == MoveKind::prune) {
    std::vector<int> nogs;
    for (int id : order)
      if (!tree.is_leaf(id) && tree.is_leaf(tree.node(id).left) && tree.is_leaf(tree.node(id).right))
        nogs.push_back(id);
    out.anchor =
        nogs[static_cast<std::size_t>(rng.uniform_int(static_cast<std::uint64_t>(nogs.size())))];
    const int removed_cov = tree.node(out.anchor).cov;
    out.tree.prune(out.anchor);
    const detail::TreeCounts after = detail::count_tree(out.tree);
    const std::size_t n_cuts = cuts.values[static_cast<std::size_t>(removed_cov)].size();
    out.log_ratio = std::log(detail::kind_prob(MoveKind::grow, after)) -
                    std::log(static_cast<double>(after.leaves)) - std::log(static_cast<double>(p)) -
                    std::log(static_cast<double>(n_cuts)) -
                    (std::log(detail::kind_prob(MoveKind::prune, counts)) -
                     std::log(static_cast<double>(counts.nogs)));
  } else if (out.kind == MoveKind::change) {
    std::vector<int> internals;
    for (int id : order)
      if (!tree.is_leaf(id)) internals.push_back(id);
    out.anchor = internals[static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::uint64_t>(internals.size())))];
    const int cov = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(p)));
    const auto& cand = cuts.values[static_cast<std::size_t>(cov)];
    const double cut =
        cand[static_cast<std::size_t>(rng.uniform_int(static_cast<std::uint64_t>(cand.size())))];
    const std::size_t old_cuts = cuts.values[static_cast<std::size_t>(tree.node(out.anchor).cov)].size();
    out.tree.set_rule(out.anchor, cov, cut);
    out.log_ratio = std::log(static_cast<double>(cand.size())) - std::log(static_cast<double>(old_cuts));
  } else {  // swap rules between an internal node and an internal child
    std::vector<std::pair<int, int>> pairs;
    for (int id : order) {
      if (tree.is_leaf(id)) continue;
      const BartNode& nd = tree.node(id);
      if (!tree.is_leaf(nd.left)) pairs.emplace_back(id, nd.left);
      if (!tree.is_leaf(nd.right)) pairs.emplace_back(id, nd.right);
    }
    const auto [parent, child] =
        pairs[static_cast<std::size_t>(rng.uniform_int(static_cast<std::uint64_t>(pairs.size())))];
    out.anchor = parent;
    const BartNode& pn = tree.node(parent);
    const BartNode& cn = tree.node(child);
    out.tree.set_rule(parent, cn.cov, cn.cut);
    out.tree.set_rule(child, pn.cov, pn.cut);
    out.log_ratio = 0.0;
  }
  out.valid = true;
  return out;
}

namespace detail {

// One Metropolis-Hastings structure move. Invalid proposals and those
// that leave a leaf empty are self-loops.
inline void update_tree_structure(BartTree& tree, const Matrix& x, const std::vector<double>& r,
                                  const std::vector<double>& w, double sigma2, double sigma_mu2,
                                  const TreePriorParams& pr, const CutTable& cuts, Rng& rng) {
  MoveProposal prop = propose_move(tree, cuts, pr, rng);
  if (!prop.valid) return;

  std::vector<int> units;
  units_through(tree, prop.anchor, x, units);

  bool empty_old = false, empty_new = false;
  const double ml_old = subtree_marglik(tree, prop.anchor, x, units, r, w, sigma2, sigma_mu2, empty_old);
  const double ml_new =
      subtree_marglik(prop.tree, prop.anchor, x, units, r, w, sigma2, sigma_mu2, empty_new);
  if (empty_new) return;
  require(!empty_old, "tree invariant violated: empty leaf in current state");

  const double delta_prior = tree_log_prior(prop.tree, pr, cuts) - tree_log_prior(tree, pr, cuts);
  const double log_accept = ml_new - ml_old + delta_prior + prop.log_ratio;
  if (std::log(rng.uniform01()) < log_accept) tree = std::move(prop.tree);
}

// Conjugate redraw of every leaf value; fills `fit` with the new per-unit
// contribution. Leaves are visited in preorder.
inline void draw_leaf_values(BartTree& tree, const Matrix& x, const std::vector<double>& r,
                             const std::vector<double>& w, double sigma2, double sigma_mu2,
                             Rng& rng, std::vector<double>& fit) {
  const std::size_t n = x.rows();
  std::vector<int> leaf_of(n);
  std::map<int, LeafStats> stats;
  for (std::size_t i = 0; i < n; ++i) {
    leaf_of[i] = tree.route(x, i);
    LeafStats& s = stats[leaf_of[i]];
    s.n += 1.0;
    s.s_ww += w[i] * w[i];
    s.s_we += w[i] * r[i];
  }
  std::vector<int> order;
  tree.preorder(order);
  for (int id : order) {
    if (!tree.is_leaf(id)) continue;
    const LeafStats& s = stats[id];
    const double denom = sigma2 + s.s_ww * sigma_mu2;
    const double mu = sigma_mu2 * s.s_we / denom;
    const double sd_leaf = std::sqrt(sigma2 * sigma_mu2 / denom);
    tree.set_value(id, rng.normal(mu, sd_leaf));
  }
  fit.resize(n);
  for (std::size_t i = 0; i < n; ++i) fit[i] = tree.node(leaf_of[i]).value;
}

}  // namespace detail

// ---------------------------------------------------------------- ensemble

// A sum of trees over fixed features, updated by backfitting. `fit()` is
// the unweighted sum of leaf values per training unit; callers apply
// their own multiplier when the ensemble enters the model as w * g(x).
class TreeEnsemble {
 public:
  TreeEnsemble() = default;

  TreeEnsemble(const Matrix* x, int num_trees)
      : x_(x), trees_(static_cast<std::size_t>(num_trees)), fit_(x->rows(), 0.0) {}

  // y_partial holds the target with every other model component removed;
  // the tree-t residual is y_partial - w * (fit - fit_t).
  void sweep(const std::vector<double>& y_partial, const std::vector<double>& w, double sigma2,
             double sigma_mu2, const TreePriorParams& pr, const CutTable& cuts, Rng& rng,
             bool freeze_structure) {
    const std::size_t n = x_->rows();
    std::vector<double> r(n), tree_fit(n);
    for (auto& tree : trees_) {
      for (std::size_t i = 0; i < n; ++i) tree_fit[i] = tree.node(tree.route(*x_, i)).value;
      for (std::size_t i = 0; i < n; ++i) r[i] = y_partial[i] - w[i] * (fit_[i] - tree_fit[i]);
      if (!freeze_structure)
        detail::update_tree_structure(tree, *x_, r, w, sigma2, sigma_mu2, pr, cuts, rng);
      std::vector<double> new_fit;
      detail::draw_leaf_values(tree, *x_, r, w, sigma2, sigma_mu2, rng, new_fit);
      for (std::size_t i = 0; i < n; ++i) fit_[i] += new_fit[i] - tree_fit[i];
    }
  }

  const std::vector<double>& fit() const { return fit_; }
  const std::vector<BartTree>& trees() const { return trees_; }

  void rebuild_fit() {
    std::fill(fit_.begin(), fit_.end(), 0.0);
    for (const auto& tree : trees_)
      for (std::size_t i = 0; i < x_->rows(); ++i) fit_[i] += tree.node(tree.route(*x_, i)).value;
  }

 private:
  const Matrix* x_ = nullptr;
  std::vector<BartTree> trees_;
  std::vector<double> fit_;
};

inline std::vector<double> predict_ensemble(const std::vector<BartTree>& trees, const Matrix& pts) {
  std::vector<double> out(pts.rows(), 0.0);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ip = 0; ip < static_cast<std::ptrdiff_t>(pts.rows()); ++ip) {
    const std::size_t i = static_cast<std::size_t>(ip);
    double s = 0.0;
    for (const auto& t : trees) s += t.node(t.route(pts, i)).value;
    out[i] = s;
  }
  return out;
}

// ----------------------------------------------------------------- sampler

class BartSampler {
 public:
  BartSampler(const Matrix& x, const std::vector<double>& y, OutcomeKind kind, BartConfig cfg)
      : x_(x), y_raw_(y), cfg_(std::move(cfg)), rng_(Rng::substream(cfg_.seed, "chain")) {
    require(x_.rows() == y_raw_.size(), "sampler feature/outcome length mismatch");
    require(x_.rows() >= 2, "sampler needs at least 2 units");
    link_ = kind == OutcomeKind::binary ? BartLink::probit : BartLink::identity;
    const int m = cfg_.num_trees > 0 ? cfg_.num_trees : (link_ == BartLink::probit ? 50 : 200);
    num_trees_ = m;

    if (link_ == BartLink::identity) {
      if (cfg_.scale_outcome) {
        const auto [lo, hi] = std::minmax_element(y_raw_.begin(), y_raw_.end());
        y_min_ = *lo;
        y_range_ = *hi - *lo;
        y_.resize(y_raw_.size());
        for (std::size_t i = 0; i < y_raw_.size(); ++i)
          y_[i] = y_range_ > 0.0 ? (y_raw_[i] - y_min_) / y_range_ - 0.5 : 0.0;
      } else {
        y_min_ = -0.5;  // makes the affine unscaling the identity
        y_range_ = 1.0;
        y_ = y_raw_;
      }
      sigma_mu_ = 0.5 / (cfg_.k * std::sqrt(static_cast<double>(m)));
      const double sigma_hat = y_.size() > 1 ? sd(y_) : 1.0;
      lambda_ = sigma_hat * sigma_hat * chi_squared_quantile(1.0 - cfg_.q, cfg_.nu) / cfg_.nu;
      sigma2_ = 1.0;
    } else {
      for (double v : y_raw_) require(v == 0.0 || v == 1.0, "probit link needs a 0/1 outcome");
      const double pbar = std::clamp(mean(y_raw_), 1e-3, 1.0 - 1e-3);
      offset_ = normal_quantile(pbar);
      sigma_mu_ = 3.0 / (cfg_.k * std::sqrt(static_cast<double>(m)));
      sigma2_ = 1.0;
      y_ = y_raw_;  // kept 0/1; latents live in y_work_
    }
    if (cfg_.sigma_mu_override) sigma_mu_ = *cfg_.sigma_mu_override;
    if (cfg_.fixed_sigma2) sigma2_ = *cfg_.fixed_sigma2;

    cuts_ = make_cut_table(x_);
    ens_ = TreeEnsemble(&x_, m);
    ones_.assign(x_.rows(), 1.0);
    y_work_.assign(x_.rows(), 0.0);
  }

  void sweep() {
    const std::size_t n = x_.rows();
    if (link_ == BartLink::probit) {
      const auto& g = ens_.fit();
      for (std::size_t i = 0; i < n; ++i) {
        const double mu = offset_ + g[i];
        const double latent = y_[i] == 1.0 ? rng_.trunc_normal_left(mu, 1.0, 0.0)
                                           : rng_.trunc_normal_right(mu, 1.0, 0.0);
        y_work_[i] = latent - offset_;
      }
    } else {
      y_work_ = y_;
    }

    ens_.sweep(y_work_, ones_, sigma2_, sigma_mu_ * sigma_mu_, cfg_.prior, cuts_, rng_,
               cfg_.freeze_structure);

    if (link_ == BartLink::identity && !cfg_.fixed_sigma2) {
      double sse = 0.0;
      const auto& g = ens_.fit();
      for (std::size_t i = 0; i < n; ++i) {
        const double e = y_[i] - g[i];
        sse += e * e;
      }
      sigma2_ = (cfg_.nu * lambda_ + sse) / rng_.chi_squared(cfg_.nu + static_cast<double>(n));
    }

    if (cfg_.consistency_checks) {
      TreeEnsemble check = ens_;
      check.rebuild_fit();
      for (std::size_t i = 0; i < n; ++i)
        require(std::abs(check.fit()[i] - ens_.fit()[i]) < 1e-8, "ensemble fit drifted");
    }
  }

  const TreeEnsemble& ensemble() const { return ens_; }
  BartLink link() const { return link_; }
  double sigma2() const { return sigma2_; }
  double sigma_mu() const { return sigma_mu_; }
  double offset() const { return offset_; }
  double y_min() const { return y_min_; }
  double y_range() const { return y_range_; }
  int num_trees() const { return num_trees_; }

  // Current sum of trees on the link scale (includes the probit offset).
  std::vector<double> train_link() const {
    std::vector<double> out = ens_.fit();
    if (link_ == BartLink::probit)
      for (double& v : out) v += offset_;
    return out;
  }

 private:
  Matrix x_;
  std::vector<double> y_raw_, y_, y_work_, ones_;
  BartConfig cfg_;
  Rng rng_;
  BartLink link_ = BartLink::identity;
  TreeEnsemble ens_;
  CutTable cuts_;
  int num_trees_ = 0;
  double sigma2_ = 1.0, sigma_mu_ = 1.0, lambda_ = 1.0;
  double offset_ = 0.0, y_min_ = -0.5, y_range_ = 1.0;
};

// --------------------------------------------------------------- posterior

struct BartPosterior {
  std::vector<std::vector<BartTree>> ensembles;  // one snapshot per kept draw
  Matrix train_link;                             // kept draws x n, link scale
  Matrix test_link;                              // kept draws x n_test when test points were given
  std::vector<double> sigma;                     // per kept draw, scaled-outcome units
  BartLink link = BartLink::identity;
  double offset = 0.0, y_min = -0.5, y_range = 1.0;
  bool no_burn_in = false;
  std::size_t n_features = 0;
};

inline BartPosterior backfit_mcmc(const Matrix& x, const std::vector<double>& y, OutcomeKind kind,
                                  const BartConfig& cfg, const Matrix* test_points = nullptr) {
  require(cfg.burn_in >= 0 && cfg.draws >= 1 && cfg.thin >= 1, "bad chain length configuration");
  BartSampler sampler(x, y, kind, cfg);
  for (int it = 0; it < cfg.burn_in; ++it) sampler.sweep();

  BartPosterior post;
  post.no_burn_in = cfg.burn_in == 0;
  post.n_features = x.cols();
  post.link = sampler.link();
  post.offset = sampler.offset();
  post.y_min = sampler.y_min();
  post.y_range = sampler.y_range();
  post.train_link = Matrix(static_cast<std::size_t>(cfg.draws), x.rows());
  if (test_points) {
    require(test_points->cols() == x.cols(), "test point dimension mismatch");
    post.test_link = Matrix(static_cast<std::size_t>(cfg.draws), test_points->rows());
  }
  post.ensembles.reserve(static_cast<std::size_t>(cfg.draws));
  post.sigma.reserve(static_cast<std::size_t>(cfg.draws));

  for (int k = 0; k < cfg.draws; ++k) {
    for (int s = 0; s < cfg.thin; ++s) sampler.sweep();
    post.ensembles.push_back(sampler.ensemble().trees());
    post.sigma.push_back(std::sqrt(sampler.sigma2()));
    const std::vector<double> link_fit = sampler.train_link();
    for (std::size_t i = 0; i < link_fit.size(); ++i)
      post.train_link(static_cast<std::size_t>(k), i) = link_fit[i];
    if (test_points) {
      std::vector<double> tl = predict_ensemble(sampler.ensemble().trees(), *test_points);
      for (std::size_t i = 0; i < tl.size(); ++i)
        post.test_link(static_cast<std::size_t>(k), i) =
            post.link == BartLink::probit ? tl[i] + post.offset : tl[i];
    }
  }
  return post;
}

inline std::vector<double> predict_link_draw(const BartPosterior& post, std::size_t k,
                                             const Matrix& pts) {
  std::vector<double> out = predict_ensemble(post.ensembles[k], pts);
  if (post.link == BartLink::probit)
    for (double& v : out) v += post.offset;
  return out;
}

// Response scale: identity draws undo the outcome scaling, probit draws
// pass through the normal cdf.
inline std::vector<double> predict_outcome_draw(const BartPosterior& post, std::size_t k,
                                                const Matrix& pts) {
  std::vector<double> out = predict_link_draw(post, k, pts);
  if (post.link == BartLink::probit) {
    for (double& v : out) v = normal_cdf(v);
  } else {
    for (double& v : out) v = (v + 0.5) * post.y_range + post.y_min;
  }
  return out;
}

// Training feature table for causal use: covariates with the exposure
// appended as the last column, so counterfactual tables just overwrite it.
inline Matrix bart_causal_features(const ObservationalDataset& data) {
  const std::size_t n = data.n(), p = data.p();
  Matrix feats(n, p + 1);
  for (std::size_t j = 0; j < p; ++j)
    for (std::size_t i = 0; i < n; ++i) feats(i, j) = data.x(i, j);
  for (std::size_t i = 0; i < n; ++i) feats(i, p) = data.exposure[i];
  return feats;
}

// Per-draw individual effects on the response scale: each kept ensemble
// predicts the counterfactual tables with exposure forced to 1 and to 0.
inline Matrix counterfactual_draws(const BartPosterior& post, const ObservationalDataset& data) {
  const std::size_t n = data.n(), p = data.p();
  require(post.n_features == p + 1,
          "fitted run and counterfactual tables disagree on the covariate schema");
  Matrix pts1 = bart_causal_features(data), pts0 = pts1;
  for (std::size_t i = 0; i < n; ++i) {
    pts1(i, p) = 1.0;
    pts0(i, p) = 0.0;
  }

  Matrix draws(post.ensembles.size(), n);
  for (std::size_t k = 0; k < post.ensembles.size(); ++k) {
    const std::vector<double> f1 = predict_outcome_draw(post, k, pts1);
    const std::vector<double> f0 = predict_outcome_draw(post, k, pts0);
    for (std::size_t i = 0; i < n; ++i) draws(k, i) = f1[i] - f0[i];
  }
  return draws;
}

inline IteVector estimate_ite_counterfactual(const BartPosterior& post,
                                             const ObservationalDataset& data,
                                             std::uint64_t seed = 0) {
  const Matrix draws = counterfactual_draws(post, data);
  IteVector out;
  out.method = IteMethod::bart;
  out.seed = seed;
  out.estimates.assign(data.n(), 0.0);
  for (std::size_t k = 0; k < draws.rows(); ++k)
    for (std::size_t i = 0; i < draws.cols(); ++i) out.estimates[i] += draws(k, i);
  const double inv = 1.0 / static_cast<double>(draws.rows());
  for (double& v : out.estimates) v *= inv;
  return out;
}

}  // namespace emm
