#pragma once

// Report document assembled by the pipeline: one block per effect
// estimation method, a classical-analysis block, and provenance. Renders
// to structured text and to a JSON sidecar carrying identical content.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "emm/analysis.hpp"
#include "emm/grf.hpp"

namespace emm {

namespace detail {

// Three decimals, trailing zeros trimmed: 0.020 -> "0.02", 1.000 -> "1".
inline std::string fmt3(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  std::string s(buf);
  while (!s.empty() && s.back() == '0') s.pop_back();
  if (!s.empty() && s.back() == '.') s.pop_back();
  if (s.empty() || s == "-0") s = "0";
  return s;
}

inline std::string fmt_ci(double est, double lo, double hi) {
  return fmt3(est) + " (" + fmt3(lo) + ", " + fmt3(hi) + ")";
}

inline std::string fmt_ci(const EffectEstimate& e) {
  return fmt_ci(e.estimate, e.ci_lower, e.ci_upper);
}

inline std::string fmt_p(double p) { return p < 0.001 ? "<0.001" : fmt3(p); }

// JSON numbers cannot carry infinities; nlohmann would silently emit
// null, which we do deliberately and document with flags next to them.
inline nlohmann::ordered_json json_num(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

inline nlohmann::ordered_json json_effect(const EffectEstimate& e) {
  nlohmann::ordered_json j;
  j["estimate"] = json_num(e.estimate);
  j["ci_lower"] = json_num(e.ci_lower);
  j["ci_upper"] = json_num(e.ci_upper);
  return j;
}

}  // namespace detail

struct IteSummary {
  std::size_t n = 0;
  double mean = 0.0, sd = 0.0;
  double min = 0.0, q25 = 0.0, median = 0.0, q75 = 0.0, max = 0.0;
};

inline IteSummary summarize_ites(const std::vector<double>& v) {
  IteSummary s;
  s.n = v.size();
  if (v.empty()) return s;
  s.mean = mean(v);
  s.sd = v.size() > 1 ? sd(v) : 0.0;
  s.min = quantile(v, 0.0);
  s.q25 = quantile(v, 0.25);
  s.median = quantile(v, 0.5);
  s.q75 = quantile(v, 0.75);
  s.max = quantile(v, 1.0);
  return s;
}

struct MethodBlock {
  std::string method;
  std::uint64_t seed = 0;
  IteVector ites;
  IteSummary ite_summary;
  double ate = 0.0, ate_se = 0.0, ate_ci_lower = 0.0, ate_ci_upper = 0.0;
  std::string ate_method;  // "aipw" or "posterior mean"
  double ite_mean = 0.0;   // simple average, reported alongside for comparison

  // grf only
  bool has_calibration = false;
  CalibrationResult calibration;
  std::vector<BlpRow> blp;
  std::vector<double> importance;  // per covariate
  bool oob_fallback = false;

  // chain methods
  bool has_split_half = false;
  double split_half_diff = 0.0;  // |mean ATE, first vs second half of kept draws|
  bool probit_link = false;
  bool no_burn_in = false;
  bool binary_as_continuous = false;

  FitTheFitTree fit_tree;
  SubgroupSummary subgroups;
};

struct TraditionalBlock {
  TwoByTwoMeasures overall;
  double overall_log_or = 0.0, overall_log_or_se = 0.0;
  EffectEstimate overall_adjusted_or;
  StratifiedReport stratified;
};

struct FailureRecord {
  std::string stage;
  std::string message;
};

struct EmmReport {
  std::string version = kVersion;
  std::uint64_t seed = 0;
  std::string config_digest;
  std::size_t n = 0, p = 0;
  OutcomeKind outcome_kind = OutcomeKind::binary;
  std::string exposure_name, outcome_name;
  std::vector<std::string> covariate_names;
  std::vector<MethodBlock> methods;
  bool has_traditional = false;
  TraditionalBlock traditional;
  std::vector<FailureRecord> failures;
};

namespace detail {

inline void render_tree_text(const FitTheFitTree& t, int id, int indent, std::ostringstream& os) {
  const TreeNode& nd = t.tree.nodes[static_cast<std::size_t>(id)];
  const std::string pad(static_cast<std::size_t>(indent) * 2, ' ');
  os << pad << (nd.cov >= 0 ? "node" : "leaf") << " (share "
     << fmt3(100.0 * t.node_share[static_cast<std::size_t>(id)]) << "%, mean ITE "
     << fmt3(100.0 * t.node_mean[static_cast<std::size_t>(id)]) << "%)\n";
  if (nd.cov < 0) return;
  const std::string& nm = t.covariate_names[static_cast<std::size_t>(nd.cov)];
  os << pad << "  " << nm << " <= " << fmt_number(nd.threshold) << ":\n";
  render_tree_text(t, nd.left, indent + 2, os);
  os << pad << "  " << nm << " > " << fmt_number(nd.threshold) << ":\n";
  render_tree_text(t, nd.right, indent + 2, os);
}

}  // namespace detail

inline std::string render_text(const EmmReport& r) {
  std::ostringstream os;
  os << "effect modification report\n";
  os << "==========================\n";
  os << "version: " << r.version << "\n";
  os << "seed: " << r.seed << "\n";
  os << "config digest: " << r.config_digest << "\n";
  os << "data: n = " << r.n << ", p = " << r.p << ", exposure = " << r.exposure_name
     << ", outcome = " << r.outcome_name << " ("
     << (r.outcome_kind == OutcomeKind::binary ? "binary" : "continuous") << ")\n";

  for (const auto& m : r.methods) {
    os << "\n[" << m.method << "]\n";
    os << "  method seed: " << m.seed << "\n";
    std::vector<std::string> notes;
    if (m.probit_link) notes.push_back("probit link");
    if (m.binary_as_continuous) notes.push_back("binary outcome fit with gaussian errors");
    if (m.no_burn_in) notes.push_back("no burn-in");
    if (m.oob_fallback) notes.push_back("some units used full-forest predictions");
    if (!notes.empty()) {
      os << "  notes: ";
      for (std::size_t i = 0; i < notes.size(); ++i) os << (i ? "; " : "") << notes[i];
      os << "\n";
    }
    os << "  ITEs: mean " << detail::fmt3(m.ite_summary.mean) << ", sd "
       << detail::fmt3(m.ite_summary.sd) << ", quartiles (" << detail::fmt3(m.ite_summary.q25)
       << ", " << detail::fmt3(m.ite_summary.median) << ", " << detail::fmt3(m.ite_summary.q75)
       << "), range (" << detail::fmt3(m.ite_summary.min) << ", " << detail::fmt3(m.ite_summary.max)
       << ")\n";
    os << "  ATE (" << m.ate_method << "): " << detail::fmt_ci(m.ate, m.ate_ci_lower, m.ate_ci_upper)
       << ", se " << detail::fmt3(m.ate_se) << "\n";
    os << "  mean of ITEs: " << detail::fmt3(m.ite_mean) << "\n";
    if (m.has_split_half)
      os << "  split-half ATE check: |difference| = " << detail::fmt3(m.split_half_diff) << "\n";
    if (m.has_calibration) {
      os << "  calibration: mean forest prediction " << detail::fmt3(m.calibration.mean_coef)
         << " (se " << detail::fmt3(m.calibration.mean_se) << ", p "
         << detail::fmt_p(m.calibration.mean_p) << "), differential forest prediction "
         << detail::fmt3(m.calibration.diff_coef) << " (se " << detail::fmt3(m.calibration.diff_se)
         << ", p " << detail::fmt_p(m.calibration.diff_p) << ")"
         << (m.calibration.degenerate ? " [no spread in out-of-bag estimates]" : "") << "\n";
    }
    if (!m.blp.empty()) {
      os << "  best linear projection of the doubly robust scores:\n";
      for (const auto& row : m.blp)
        os << "    " << row.name << ": " << detail::fmt_ci(row.coef, row.ci_lower, row.ci_upper)
           << ", se " << detail::fmt3(row.se) << "\n";
    }
    if (!m.importance.empty()) {
      os << "  variable importance:";
      for (std::size_t j = 0; j < m.importance.size(); ++j)
        os << (j ? ", " : " ") << r.covariate_names[j] << " " << detail::fmt3(m.importance[j]);
      os << "\n";
    }
    os << "  fit-the-fit tree:\n";
    detail::render_tree_text(m.fit_tree, 0, 2, os);
    os << "  subgroups by " << m.subgroups.covariate
       << (m.subgroups.single_level ? " [single level]" : "") << ":\n";
    for (const auto& lv : m.subgroups.levels)
      os << "    " << m.subgroups.covariate << " = " << fmt_number(lv.level) << ": n = " << lv.count
         << ", mean " << detail::fmt3(lv.mean_ite) << ", sd " << detail::fmt3(lv.sd_ite)
         << ", median " << detail::fmt3(lv.median) << ", IQR (" << detail::fmt3(lv.q25) << ", "
         << detail::fmt3(lv.q75) << ")\n";
  }

  if (r.has_traditional) {
    const TraditionalBlock& t = r.traditional;
    os << "\n[traditional]\n";
    os << "  overall: events " << t.overall.a << "/" << t.overall.n1 << " exposed vs " << t.overall.c
       << "/" << t.overall.n0 << " unexposed\n";
    os << "  risk difference: " << detail::fmt_ci(t.overall.risk_difference) << "\n";
    os << "  risk ratio: " << detail::fmt_ci(t.overall.risk_ratio) << "\n";
    os << "  odds ratio: " << detail::fmt_ci(t.overall.odds_ratio) << "\n";
    if (t.overall.zero_cell) os << "  note: empty cell, ratio intervals unbounded\n";
    os << "  adjusted odds ratio (all covariates): " << detail::fmt_ci(t.overall_adjusted_or) << "\n";
    os << "  stratified by " << t.stratified.covariate << ":\n";
    for (const auto& row : t.stratified.rows) {
      os << "    " << t.stratified.covariate << " = " << fmt_number(row.stratum) << " (n = " << row.n
         << "): RD " << detail::fmt_ci(row.crude.risk_difference) << "; RR "
         << detail::fmt_ci(row.crude.risk_ratio) << "; adjusted OR "
         << detail::fmt_ci(row.adjusted_or) << "\n";
    }
    os << "  heterogeneity of adjusted log odds ratios: Q = " << detail::fmt3(t.stratified.q)
       << ", df = " << t.stratified.q_df << ", p = " << detail::fmt_p(t.stratified.q_p) << "\n";
  }

  if (!r.failures.empty()) {
    os << "\n[failures]\n";
    for (const auto& f : r.failures) os << "  " << f.stage << ": " << f.message << "\n";
  }
  return os.str();
}

inline nlohmann::ordered_json to_json(const EmmReport& r) {
  using detail::json_num;
  nlohmann::ordered_json j;
  j["format_version"] = kFormatVersion;
  j["version"] = r.version;
  j["seed"] = r.seed;
  j["config_digest"] = r.config_digest;
  j["data"] = {{"n", r.n},
               {"p", r.p},
               {"exposure", r.exposure_name},
               {"outcome", r.outcome_name},
               {"outcome_kind", r.outcome_kind == OutcomeKind::binary ? "binary" : "continuous"},
               {"covariates", r.covariate_names}};

  nlohmann::ordered_json methods = nlohmann::ordered_json::array();
  for (const auto& m : r.methods) {
    nlohmann::ordered_json jm;
    jm["method"] = m.method;
    jm["seed"] = m.seed;
    jm["flags"] = {{"probit_link", m.probit_link},
                   {"binary_as_continuous", m.binary_as_continuous},
                   {"no_burn_in", m.no_burn_in},
                   {"oob_fallback", m.oob_fallback}};
    jm["ite_summary"] = {{"n", m.ite_summary.n},       {"mean", json_num(m.ite_summary.mean)},
                         {"sd", json_num(m.ite_summary.sd)}, {"min", json_num(m.ite_summary.min)},
                         {"q25", json_num(m.ite_summary.q25)}, {"median", json_num(m.ite_summary.median)},
                         {"q75", json_num(m.ite_summary.q75)}, {"max", json_num(m.ite_summary.max)}};
    jm["ate"] = {{"method", m.ate_method},
                 {"estimate", json_num(m.ate)},
                 {"se", json_num(m.ate_se)},
                 {"ci_lower", json_num(m.ate_ci_lower)},
                 {"ci_upper", json_num(m.ate_ci_upper)}};
    jm["ite_mean"] = json_num(m.ite_mean);
    if (m.has_split_half) jm["split_half_ate_diff"] = json_num(m.split_half_diff);
    if (m.has_calibration)
      jm["calibration"] = {{"mean_coef", json_num(m.calibration.mean_coef)},
                           {"mean_se", json_num(m.calibration.mean_se)},
                           {"mean_p", json_num(m.calibration.mean_p)},
                           {"diff_coef", json_num(m.calibration.diff_coef)},
                           {"diff_se", json_num(m.calibration.diff_se)},
                           {"diff_p", json_num(m.calibration.diff_p)},
                           {"degenerate", m.calibration.degenerate}};
    if (!m.blp.empty()) {
      nlohmann::ordered_json rows = nlohmann::ordered_json::array();
      for (const auto& row : m.blp)
        rows.push_back({{"name", row.name},
                        {"coef", json_num(row.coef)},
                        {"se", json_num(row.se)},
                        {"ci_lower", json_num(row.ci_lower)},
                        {"ci_upper", json_num(row.ci_upper)}});
      jm["best_linear_projection"] = std::move(rows);
    }
    if (!m.importance.empty()) {
      nlohmann::ordered_json vi = nlohmann::ordered_json::array();
      for (std::size_t k = 0; k < m.importance.size(); ++k)
        vi.push_back({{"covariate", r.covariate_names[k]}, {"score", json_num(m.importance[k])}});
      jm["variable_importance"] = std::move(vi);
    }
    jm["fit_the_fit"] = m.fit_tree.to_json();
    {
      nlohmann::ordered_json sg;
      sg["covariate"] = m.subgroups.covariate;
      sg["single_level"] = m.subgroups.single_level;
      sg["bin_edges"] = m.subgroups.bin_edges;
      nlohmann::ordered_json lvls = nlohmann::ordered_json::array();
      for (const auto& lv : m.subgroups.levels)
        lvls.push_back({{"level", lv.level},
                        {"n", lv.count},
                        {"mean", json_num(lv.mean_ite)},
                        {"sd", json_num(lv.sd_ite)},
                        {"q025", json_num(lv.q025)},
                        {"q25", json_num(lv.q25)},
                        {"median", json_num(lv.median)},
                        {"q75", json_num(lv.q75)},
                        {"q975", json_num(lv.q975)},
                        {"bin_counts", lv.bin_counts}});
      sg["levels"] = std::move(lvls);
      jm["subgroups"] = std::move(sg);
    }
    jm["ites"] = m.ites.estimates;
    methods.push_back(std::move(jm));
  }
  j["methods"] = std::move(methods);

  if (r.has_traditional) {
    const TraditionalBlock& t = r.traditional;
    nlohmann::ordered_json jt;
    jt["overall"] = {{"n1", t.overall.n1},
                     {"events_exposed", t.overall.a},
                     {"n0", t.overall.n0},
                     {"events_unexposed", t.overall.c},
                     {"risk_difference", detail::json_effect(t.overall.risk_difference)},
                     {"risk_ratio", detail::json_effect(t.overall.risk_ratio)},
                     {"odds_ratio", detail::json_effect(t.overall.odds_ratio)},
                     {"zero_cell", t.overall.zero_cell}};
    jt["adjusted_odds_ratio"] = detail::json_effect(t.overall_adjusted_or);
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& row : t.stratified.rows)
      rows.push_back({{"stratum", row.stratum},
                      {"n", row.n},
                      {"risk_difference", detail::json_effect(row.crude.risk_difference)},
                      {"risk_ratio", detail::json_effect(row.crude.risk_ratio)},
                      {"zero_cell", row.crude.zero_cell},
                      {"adjusted_odds_ratio", detail::json_effect(row.adjusted_or)},
                      {"log_or", json_num(row.log_or)},
                      {"log_or_se", json_num(row.log_or_se)}});
    jt["stratified"] = {{"covariate", t.stratified.covariate},
                        {"rows", std::move(rows)},
                        {"q", json_num(t.stratified.q)},
                        {"q_df", t.stratified.q_df},
                        {"q_p", json_num(t.stratified.q_p)}};
    j["traditional"] = std::move(jt);
  }

  nlohmann::ordered_json fails = nlohmann::ordered_json::array();
  for (const auto& f : r.failures) fails.push_back({{"stage", f.stage}, {"message", f.message}});
  j["failures"] = std::move(fails);
  return j;
}

}  // namespace emm
