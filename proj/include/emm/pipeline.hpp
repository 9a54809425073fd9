#pragma once

// End-to-end pipeline: flat key=value config, one stage per requested
// method with its own derived seed, report assembly, and the exported
// artifact files. A failed stage becomes a failure record in the report
// instead of aborting the run.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "emm/analysis.hpp"
#include "emm/bart.hpp"
#include "emm/bcf.hpp"
#include "emm/dataset.hpp"
#include "emm/grf.hpp"
#include "emm/report.hpp"

namespace emm {

struct PipelineConfig {
  std::uint64_t seed = 0;
  std::vector<std::string> methods;  // order preserved: grf | bart | bcf | traditional

  // data source: exactly one of csv / synthetic
  std::string data_csv;
  CsvSchema schema;
  bool synthetic = false;
  SyntheticSpec synth;

  CausalForestConfig grf;
  BartConfig bart;
  BcfConfig bcf;
  FitTheFitConfig fit;
  std::vector<std::string> modifiers;  // linear projection modifiers; default: stratify covariate
  std::string stratify_by;             // default: first covariate
  bool save_draws = false;
  std::string output_dir = "emm_out";

  std::string digest;  // hash of effective config (and input bytes for csv runs)

  bool wants(const std::string& m) const {
    for (const auto& v : methods)
      if (v == m) return true;
    return false;
  }
};

namespace detail {

inline std::string cfg_err(const std::string& key, const std::string& what) {
  return "config key " + key + ": " + what;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const unsigned long long r = std::stoull(v, &pos);
    require(pos == v.size(), cfg_err(key, "not an integer: " + v));
    return static_cast<std::uint64_t>(r);
  } catch (const Error&) {
    throw;
  } catch (const std::exception&) {
    throw Error(cfg_err(key, "not an integer: " + v));
  }
}

inline int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const int r = std::stoi(v, &pos);
    require(pos == v.size(), cfg_err(key, "not an integer: " + v));
    return r;
  } catch (const Error&) {
    throw;
  } catch (const std::exception&) {
    throw Error(cfg_err(key, "not an integer: " + v));
  }
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double r = std::stod(v, &pos);
    require(pos == v.size(), cfg_err(key, "not a number: " + v));
    return r;
  } catch (const Error&) {
    throw;
  } catch (const std::exception&) {
    throw Error(cfg_err(key, "not a number: " + v));
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error(cfg_err(key, "expected true or false, got " + v));
}

inline std::vector<std::string> parse_list(const std::string& v) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(v);
  while (std::getline(is, cur, ',')) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

inline std::vector<double> parse_double_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& s : parse_list(v)) out.push_back(parse_double(key, s));
  return out;
}

inline OutcomeKind parse_outcome_kind(const std::string& key, const std::string& v) {
  if (v == "binary") return OutcomeKind::binary;
  if (v == "continuous") return OutcomeKind::continuous;
  throw Error(cfg_err(key, "expected binary or continuous, got " + v));
}

// Synthetic covariates are always named x1..xp.
inline std::size_t synth_covariate(const std::string& key, const std::string& name, std::size_t p) {
  if (name.size() >= 2 && name[0] == 'x') {
    const std::string idx = name.substr(1);
    bool digits = !idx.empty();
    for (char c : idx) digits = digits && c >= '0' && c <= '9';
    if (digits) {
      const std::size_t j = static_cast<std::size_t>(std::stoull(idx));
      require(j >= 1 && j <= p, cfg_err(key, "covariate out of range: " + name));
      return j - 1;
    }
  }
  throw Error(cfg_err(key, "expected a synthetic covariate name x1..x" + std::to_string(p) +
                               ", got " + name));
}

inline const std::set<std::string>& known_config_keys() {
  static const std::set<std::string> keys = {
      "seed",
      "methods",
      "output_dir",
      "data.csv",
      "data.outcome",
      "data.exposure",
      "data.covariates",
      "data.outcome_kind",
      "synth.n",
      "synth.p",
      "synth.prevalences",
      "synth.baseline_risk",
      "synth.covariate_effects",
      "synth.tau",
      "synth.exposure_rate",
      "synth.confounding_strength",
      "synth.confounder",
      "synth.noise_sd",
      "synth.outcome",
      "grf.num_trees",
      "grf.nuisance_trees",
      "grf.subsample_rate",
      "grf.honest_fraction",
      "grf.min_leaf",
      "grf.max_depth",
      "grf.mtry",
      "bart.num_trees",
      "bart.burn_in",
      "bart.draws",
      "bart.thin",
      "bart.k",
      "bart.alpha",
      "bart.beta",
      "bart.max_depth",
      "bcf.mu_trees",
      "bcf.tau_trees",
      "bcf.burn_in",
      "bcf.draws",
      "bcf.thin",
      "bcf.k",
      "bcf.include_pihat",
      "analysis.max_depth",
      "analysis.min_leaf_fraction",
      "analysis.modifiers",
      "analysis.stratify_by",
      "report.save_draws",
  };
  return keys;
}

inline std::string digest_hex(std::uint64_t h) {
  static const char* hexd = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = hexd[h & 0xF];
    h >>= 4;
  }
  return s;
}

}  // namespace detail

// Flat key=value lines; '#' starts a comment; dots namespace the keys.
// Unknown keys and unknown method names are rejected before any work.
inline PipelineConfig parse_pipeline_config(const std::string& text,
                                            std::optional<std::uint64_t> seed_override = {},
                                            std::optional<std::string> out_override = {}) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    require(eq != std::string::npos, "config line has no '=': " + line);
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    require(!key.empty(), "config line has an empty key: " + line);
    require(detail::known_config_keys().count(key) == 1, "unknown config key: " + key);
    require(kv.emplace(key, value).second, "duplicate config key: " + key);
  }

  if (seed_override) kv["seed"] = std::to_string(*seed_override);
  if (out_override) kv["output_dir"] = *out_override;

  auto has = [&](const std::string& k) { return kv.count(k) == 1; };
  auto get = [&](const std::string& k) { return kv.at(k); };

  PipelineConfig cfg;
  if (has("seed")) cfg.seed = detail::parse_u64("seed", get("seed"));
  if (has("output_dir")) cfg.output_dir = get("output_dir");

  require(has("methods"), "config needs a methods list");
  cfg.methods = detail::parse_list(get("methods"));
  require(!cfg.methods.empty(), "config needs at least one method");
  {
    std::set<std::string> seen;
    for (const auto& m : cfg.methods) {
      require(m == "grf" || m == "bart" || m == "bcf" || m == "traditional",
              "unknown method: " + m);
      require(seen.insert(m).second, "method listed twice: " + m);
    }
  }

  const bool has_csv = has("data.csv");
  const bool has_synth = has("synth.n");
  require(has_csv != has_synth, "config needs exactly one data source: data.csv or synth.*");
  for (const auto& [k, v] : kv) {
    (void)v;
    if (has_csv && k.rfind("synth.", 0) == 0)
      throw Error("config mixes csv and synthetic sources: " + k);
    if (has_synth && k.rfind("data.", 0) == 0)
      throw Error("config mixes csv and synthetic sources: " + k);
  }

  if (has_csv) {
    cfg.data_csv = get("data.csv");
    require(has("data.outcome") && has("data.exposure"),
            "csv source needs data.outcome and data.exposure");
    cfg.schema.outcome = get("data.outcome");
    cfg.schema.exposure = get("data.exposure");
    if (has("data.covariates")) cfg.schema.covariates = detail::parse_list(get("data.covariates"));
    if (has("data.outcome_kind"))
      cfg.schema.outcome_kind_override =
          detail::parse_outcome_kind("data.outcome_kind", get("data.outcome_kind"));
  } else {
    cfg.synthetic = true;
    SyntheticSpec& s = cfg.synth;
    s.n = detail::parse_u64("synth.n", get("synth.n"));
    require(has("synth.p"), "synthetic source needs synth.p");
    s.p = detail::parse_u64("synth.p", get("synth.p"));
    s.prevalences.assign(s.p, 0.5);
    if (has("synth.prevalences")) {
      const auto v = detail::parse_double_list("synth.prevalences", get("synth.prevalences"));
      if (v.size() == 1)
        s.prevalences.assign(s.p, v[0]);
      else {
        require(v.size() == s.p, "synth.prevalences needs 1 or p values");
        s.prevalences = v;
      }
    }
    s.baseline_risk = has("synth.baseline_risk")
                          ? detail::parse_double("synth.baseline_risk", get("synth.baseline_risk"))
                          : 0.1;
    if (has("synth.covariate_effects")) {
      const auto v =
          detail::parse_double_list("synth.covariate_effects", get("synth.covariate_effects"));
      if (v.size() == 1)
        s.covariate_effects.assign(s.p, v[0]);
      else {
        require(v.size() == s.p, "synth.covariate_effects needs 1 or p values");
        s.covariate_effects = v;
      }
    }
    if (has("synth.tau")) {
      const auto parts = [&] {
        std::vector<std::string> out;
        std::istringstream ts(get("synth.tau"));
        std::string piece;
        while (std::getline(ts, piece, ':')) out.push_back(detail::trim(piece));
        return out;
      }();
      if (!parts.empty() && parts[0] == "constant") {
        require(parts.size() == 2, "synth.tau constant form is constant:<effect>");
        s.tau_rule = TauRule::constant(detail::parse_double("synth.tau", parts[1]));
      } else if (!parts.empty() && parts[0] == "modifier") {
        require(parts.size() == 4, "synth.tau modifier form is modifier:<covariate>:<tau0>:<tau1>");
        s.tau_rule = TauRule::modifier(detail::synth_covariate("synth.tau", parts[1], s.p),
                                       detail::parse_double("synth.tau", parts[2]),
                                       detail::parse_double("synth.tau", parts[3]));
      } else {
        throw Error("config key synth.tau: expected constant:... or modifier:...");
      }
    }
    if (has("synth.exposure_rate"))
      s.exposure_rate = detail::parse_double("synth.exposure_rate", get("synth.exposure_rate"));
    if (has("synth.confounding_strength"))
      s.confounding_strength =
          detail::parse_double("synth.confounding_strength", get("synth.confounding_strength"));
    if (has("synth.confounder"))
      s.confounder = detail::synth_covariate("synth.confounder", get("synth.confounder"), s.p);
    if (has("synth.noise_sd"))
      s.noise_sd = detail::parse_double("synth.noise_sd", get("synth.noise_sd"));
    if (has("synth.outcome"))
      s.outcome = detail::parse_outcome_kind("synth.outcome", get("synth.outcome"));
    s.seed = cfg.seed;
  }

  if (has("grf.num_trees")) cfg.grf.num_trees = detail::parse_int("grf.num_trees", get("grf.num_trees"));
  if (has("grf.nuisance_trees"))
    cfg.grf.nuisance_trees = detail::parse_int("grf.nuisance_trees", get("grf.nuisance_trees"));
  if (has("grf.subsample_rate"))
    cfg.grf.subsample_rate = detail::parse_double("grf.subsample_rate", get("grf.subsample_rate"));
  if (has("grf.honest_fraction"))
    cfg.grf.honest_fraction = detail::parse_double("grf.honest_fraction", get("grf.honest_fraction"));
  if (has("grf.min_leaf")) cfg.grf.tree.min_leaf = detail::parse_int("grf.min_leaf", get("grf.min_leaf"));
  if (has("grf.max_depth"))
    cfg.grf.tree.max_depth = detail::parse_int("grf.max_depth", get("grf.max_depth"));
  if (has("grf.mtry"))
    cfg.grf.tree.covariate_subsample = detail::parse_int("grf.mtry", get("grf.mtry"));

  if (has("bart.num_trees"))
    cfg.bart.num_trees = detail::parse_int("bart.num_trees", get("bart.num_trees"));
  if (has("bart.burn_in")) cfg.bart.burn_in = detail::parse_int("bart.burn_in", get("bart.burn_in"));
  if (has("bart.draws")) cfg.bart.draws = detail::parse_int("bart.draws", get("bart.draws"));
  if (has("bart.thin")) cfg.bart.thin = detail::parse_int("bart.thin", get("bart.thin"));
  if (has("bart.k")) cfg.bart.k = detail::parse_double("bart.k", get("bart.k"));
  if (has("bart.alpha")) cfg.bart.prior.alpha = detail::parse_double("bart.alpha", get("bart.alpha"));
  if (has("bart.beta")) cfg.bart.prior.beta = detail::parse_double("bart.beta", get("bart.beta"));
  if (has("bart.max_depth"))
    cfg.bart.prior.max_depth = detail::parse_int("bart.max_depth", get("bart.max_depth"));

  if (has("bcf.mu_trees")) cfg.bcf.mu_trees = detail::parse_int("bcf.mu_trees", get("bcf.mu_trees"));
  if (has("bcf.tau_trees")) cfg.bcf.tau_trees = detail::parse_int("bcf.tau_trees", get("bcf.tau_trees"));
  if (has("bcf.burn_in")) cfg.bcf.burn_in = detail::parse_int("bcf.burn_in", get("bcf.burn_in"));
  if (has("bcf.draws")) cfg.bcf.draws = detail::parse_int("bcf.draws", get("bcf.draws"));
  if (has("bcf.thin")) cfg.bcf.thin = detail::parse_int("bcf.thin", get("bcf.thin"));
  if (has("bcf.k")) cfg.bcf.k = detail::parse_double("bcf.k", get("bcf.k"));
  if (has("bcf.include_pihat"))
    cfg.bcf.include_pihat_in_mu = detail::parse_bool("bcf.include_pihat", get("bcf.include_pihat"));

  if (has("analysis.max_depth"))
    cfg.fit.max_depth = detail::parse_int("analysis.max_depth", get("analysis.max_depth"));
  if (has("analysis.min_leaf_fraction"))
    cfg.fit.min_leaf_fraction =
        detail::parse_double("analysis.min_leaf_fraction", get("analysis.min_leaf_fraction"));
  if (has("analysis.modifiers")) cfg.modifiers = detail::parse_list(get("analysis.modifiers"));
  if (has("analysis.stratify_by")) cfg.stratify_by = get("analysis.stratify_by");
  if (has("report.save_draws"))
    cfg.save_draws = detail::parse_bool("report.save_draws", get("report.save_draws"));

  // The digest covers every result-affecting input: the effective config
  // (output location excluded) and, for csv runs, the raw file bytes.
  {
    std::map<std::string, std::string> eff(kv);
    eff["seed"] = std::to_string(cfg.seed);
    eff.erase("output_dir");
    std::string canon;
    for (const auto& [k, v] : eff) canon += k + "=" + v + "\n";
    std::uint64_t h = fnv1a64(canon);
    if (has_csv) {
      std::ifstream in(cfg.data_csv, std::ios::binary);
      if (!in) throw Error("cannot open file: " + cfg.data_csv);
      std::ostringstream bytes;
      bytes << in.rdbuf();
      h = mix_bits(h ^ fnv1a64(bytes.str()));
    }
    cfg.digest = detail::digest_hex(h);
  }
  return cfg;
}

inline PipelineConfig load_pipeline_config(const std::string& path,
                                           std::optional<std::uint64_t> seed_override = {},
                                           std::optional<std::string> out_override = {}) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config: " + path);
  std::ostringstream text;
  text << in.rdbuf();
  return parse_pipeline_config(text.str(), seed_override, out_override);
}

// ---------------------------------------------------------------- stages

struct PipelineOutcome {
  EmmReport report;
  ObservationalDataset data;
  std::vector<std::pair<std::string, Matrix>> draws;  // per chain method when save_draws
  bool synthetic = false;
  bool ok = true;
};

namespace detail {

inline int covariate_index(const std::vector<std::string>& names, const std::string& nm) {
  for (std::size_t j = 0; j < names.size(); ++j)
    if (names[j] == nm) return static_cast<int>(j);
  throw Error("unknown covariate: " + nm);
}

inline std::string effective_stratify(const PipelineConfig& cfg, const ObservationalDataset& d) {
  return cfg.stratify_by.empty() ? d.covariate_names.at(0) : cfg.stratify_by;
}

inline void finish_method_block(MethodBlock& b, const ObservationalDataset& d,
                                const PipelineConfig& cfg) {
  b.ite_summary = summarize_ites(b.ites.estimates);
  b.ite_mean = b.ites.estimates.empty() ? 0.0 : mean(b.ites.estimates);
  b.fit_tree = fit_the_fit(b.ites, d.x, d.covariate_names, cfg.fit);
  const std::string strat = effective_stratify(cfg, d);
  const int sc = covariate_index(d.covariate_names, strat);
  const double* col = d.x.col(static_cast<std::size_t>(sc));
  b.subgroups = subgroup_summary(b.ites, std::vector<double>(col, col + d.n()), strat);
}

// ATE summaries for the posterior-sampling methods: the per-draw sample
// average effect, summarized over kept draws, plus a split-half drift check.
inline void chain_ate(const std::vector<double>& ate_draws, MethodBlock& b) {
  b.ate_method = "posterior mean";
  b.ate = mean(ate_draws);
  b.ate_se = ate_draws.size() > 1 ? sd(ate_draws) : 0.0;
  b.ate_ci_lower = quantile(ate_draws, 0.025);
  b.ate_ci_upper = quantile(ate_draws, 0.975);
  if (ate_draws.size() >= 2) {
    const std::size_t half = ate_draws.size() / 2;
    const std::vector<double> first(ate_draws.begin(), ate_draws.begin() + static_cast<std::ptrdiff_t>(half));
    const std::vector<double> second(ate_draws.begin() + static_cast<std::ptrdiff_t>(half), ate_draws.end());
    b.has_split_half = true;
    b.split_half_diff = std::abs(mean(first) - mean(second));
  }
}

inline std::vector<double> row_means(const Matrix& m) {
  std::vector<double> out(m.rows(), 0.0);
  for (std::size_t k = 0; k < m.rows(); ++k) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.cols(); ++i) s += m(k, i);
    out[k] = s / static_cast<double>(m.cols());
  }
  return out;
}

inline MethodBlock run_grf_stage(const ObservationalDataset& d, const PipelineConfig& cfg) {
  CausalForestConfig c = cfg.grf;
  c.seed = derive_seed(cfg.seed, "grf");

  const CausalForestModel model = fit_causal_forest(d, c);
  MethodBlock b;
  b.method = "grf";
  b.seed = c.seed;
  b.ites.estimates = model.tau_oob;
  b.ites.method = IteMethod::grf;
  b.ites.seed = c.seed;
  b.ites.config_digest = cfg.digest;
  b.oob_fallback = model.oob_fallback;

  const AteResult ate = average_treatment_effect(model);
  b.ate_method = "augmented inverse propensity weighting";
  b.ate = ate.estimate;
  b.ate_se = ate.se;
  b.ate_ci_lower = ate.ci_lower;
  b.ate_ci_upper = ate.ci_upper;

  b.has_calibration = true;
  b.calibration = test_calibration(model);

  std::vector<std::string> modifier_names = cfg.modifiers;
  if (modifier_names.empty()) modifier_names.push_back(effective_stratify(cfg, d));
  std::vector<int> cols;
  for (const auto& nm : modifier_names) cols.push_back(covariate_index(d.covariate_names, nm));
  b.blp = best_linear_projection(model, cols, modifier_names);

  b.importance = variable_importance(model);
  finish_method_block(b, d, cfg);
  return b;
}

inline MethodBlock run_bart_stage(const ObservationalDataset& d, const PipelineConfig& cfg,
                                  Matrix* draws_out) {
  BartConfig c = cfg.bart;
  c.seed = derive_seed(cfg.seed, "bart");

  const Matrix feats = bart_causal_features(d);
  const BartPosterior post = backfit_mcmc(feats, d.outcome, d.outcome_kind, c);
  const Matrix draws = counterfactual_draws(post, d);

  MethodBlock b;
  b.method = "bart";
  b.seed = c.seed;
  b.ites.method = IteMethod::bart;
  b.ites.seed = c.seed;
  b.ites.config_digest = cfg.digest;
  b.ites.estimates.assign(d.n(), 0.0);
  for (std::size_t k = 0; k < draws.rows(); ++k)
    for (std::size_t i = 0; i < draws.cols(); ++i) b.ites.estimates[i] += draws(k, i);
  for (double& v : b.ites.estimates) v /= static_cast<double>(draws.rows());

  chain_ate(row_means(draws), b);
  b.probit_link = post.link == BartLink::probit;
  b.no_burn_in = post.no_burn_in;
  finish_method_block(b, d, cfg);
  if (draws_out) *draws_out = draws;
  return b;
}

inline MethodBlock run_bcf_stage(const ObservationalDataset& d, const PipelineConfig& cfg,
                                 Matrix* draws_out) {
  BcfConfig c = cfg.bcf;
  c.seed = derive_seed(cfg.seed, "bcf");

  // Estimated propensities enter the prognostic ensemble as a covariate.
  const LogisticFit pf = logistic_irls(d.x, d.exposure);
  std::vector<double> pihat = logistic_fitted(d.x, pf);
  for (double& e : pihat) e = std::clamp(e, 1e-6, 1.0 - 1e-6);

  const BcfModel model = fit_bcf(d, pihat, c);
  const BcfItePrediction pred = predict_ite_bcf(model);

  MethodBlock b;
  b.method = "bcf";
  b.seed = c.seed;
  b.ites = pred.ite;
  b.ites.config_digest = cfg.digest;
  chain_ate(row_means(model.tau_draws), b);
  b.binary_as_continuous = model.binary_as_continuous;
  finish_method_block(b, d, cfg);
  if (draws_out) *draws_out = model.tau_draws;
  return b;
}

inline TraditionalBlock run_traditional_stage(const ObservationalDataset& d,
                                              const PipelineConfig& cfg) {
  TraditionalBlock t;
  t.overall = two_by_two_measures(d);

  // Adjusted overall contrast: exposure coefficient from the logistic
  // model of the outcome on exposure and every covariate.
  {
    Matrix feats(d.n(), d.p() + 1);
    for (std::size_t i = 0; i < d.n(); ++i) feats(i, 0) = d.exposure[i];
    for (std::size_t j = 0; j < d.p(); ++j)
      for (std::size_t i = 0; i < d.n(); ++i) feats(i, j + 1) = d.x(i, j);
    const LogisticFit fit = logistic_irls(feats, d.outcome);
    t.overall_log_or = fit.coef[1];
    t.overall_log_or_se = std::sqrt(fit.covariance(1, 1));
    t.overall_adjusted_or.estimate = std::exp(t.overall_log_or);
    t.overall_adjusted_or.ci_lower = std::exp(t.overall_log_or - kZ975 * t.overall_log_or_se);
    t.overall_adjusted_or.ci_upper = std::exp(t.overall_log_or + kZ975 * t.overall_log_or_se);
  }

  const std::string strat = effective_stratify(cfg, d);
  t.stratified = stratified_cate(d, covariate_index(d.covariate_names, strat));
  return t;
}

}  // namespace detail

inline PipelineOutcome run_pipeline(const PipelineConfig& cfg, bool parallel_methods = false) {
  PipelineOutcome out;
  EmmReport& r = out.report;
  r.seed = cfg.seed;
  r.config_digest = cfg.digest;

  try {
    if (cfg.synthetic) {
      SyntheticSpec spec = cfg.synth;
      spec.seed = cfg.seed;
      out.data = generate_synthetic(spec).data;
      out.synthetic = true;
    } else {
      out.data = load_csv(cfg.data_csv, cfg.schema);
    }
    validate(out.data);
  } catch (const std::exception& e) {
    r.failures.push_back({"data", e.what()});
    out.ok = false;
    return out;
  }

  const ObservationalDataset& d = out.data;
  r.n = d.n();
  r.p = d.p();
  r.outcome_kind = d.outcome_kind;
  r.exposure_name = d.exposure_name;
  r.outcome_name = d.outcome_name;
  r.covariate_names = d.covariate_names;

  struct Slot {
    std::optional<MethodBlock> block;
    std::optional<TraditionalBlock> traditional;
    std::optional<Matrix> draws;
    std::optional<FailureRecord> failure;
  };
  std::vector<Slot> slots(cfg.methods.size());

  auto run_one = [&](std::size_t idx) {
    const std::string& m = cfg.methods[idx];
    Slot& slot = slots[idx];
    try {
      if (m == "grf") {
        slot.block = detail::run_grf_stage(d, cfg);
      } else if (m == "bart") {
        Matrix draws;
        slot.block = detail::run_bart_stage(d, cfg, cfg.save_draws ? &draws : nullptr);
        if (cfg.save_draws) slot.draws = std::move(draws);
      } else if (m == "bcf") {
        Matrix draws;
        slot.block = detail::run_bcf_stage(d, cfg, cfg.save_draws ? &draws : nullptr);
        if (cfg.save_draws) slot.draws = std::move(draws);
      } else {
        slot.traditional = detail::run_traditional_stage(d, cfg);
      }
    } catch (const std::exception& e) {
      slot.failure = FailureRecord{m, e.what()};
    }
  };

  if (parallel_methods && cfg.methods.size() > 1) {
    std::vector<std::thread> workers;
    workers.reserve(cfg.methods.size());
    for (std::size_t i = 0; i < cfg.methods.size(); ++i) workers.emplace_back(run_one, i);
    for (auto& w : workers) w.join();
  } else {
    for (std::size_t i = 0; i < cfg.methods.size(); ++i) run_one(i);
  }

  for (std::size_t i = 0; i < cfg.methods.size(); ++i) {
    Slot& slot = slots[i];
    if (slot.failure) {
      r.failures.push_back(*slot.failure);
      out.ok = false;
      continue;
    }
    if (slot.block) {
      if (slot.draws) out.draws.emplace_back(slot.block->method, std::move(*slot.draws));
      r.methods.push_back(std::move(*slot.block));
    } else if (slot.traditional) {
      r.has_traditional = true;
      r.traditional = std::move(*slot.traditional);
    }
  }
  return out;
}

// ---------------------------------------------------------------- artifacts

namespace detail {

// DOT text from the report's fit-the-fit node list. Shared by the run and
// export paths so both emit identical bytes.
inline std::string fit_dot_from_json(const nlohmann::ordered_json& jt) {
  std::ostringstream os;
  os << "digraph fit_the_fit {\n  node [shape=box];\n";
  char buf[128];
  const auto& nodes = jt.at("nodes");
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto& jn = nodes[i];
    std::snprintf(buf, sizeof buf, "mean ITE %.1f%%, share %.1f%%",
                  100.0 * jn.at("mean_ite").get<double>(), 100.0 * jn.at("share").get<double>());
    if (jn.contains("covariate")) {
      char rule[96];
      std::snprintf(rule, sizeof rule, "%s <= %g", jn.at("covariate").get<std::string>().c_str(),
                    jn.at("threshold").get<double>());
      os << "  n" << i << " [label=\"" << rule << "\\n" << buf << "\"];\n";
      os << "  n" << i << " -> n" << jn.at("left").get<int>() << " [label=\"yes\"];\n";
      os << "  n" << i << " -> n" << jn.at("right").get<int>() << " [label=\"no\"];\n";
    } else {
      os << "  n" << i << " [label=\"" << buf << "\"];\n";
    }
  }
  os << "}\n";
  return os.str();
}

inline std::string subgroups_csv_from_json(const nlohmann::ordered_json& sg) {
  std::ostringstream os;
  os.precision(17);
  os << "level,bin,bin_lower,bin_upper,count\n";
  const auto& edges = sg.at("bin_edges");
  for (const auto& lv : sg.at("levels")) {
    const auto& counts = lv.at("bin_counts");
    for (std::size_t b = 0; b < counts.size(); ++b)
      os << lv.at("level").get<double>() << ',' << b << ',' << edges[b].get<double>() << ','
         << edges[b + 1].get<double>() << ',' << counts[b].get<std::size_t>() << '\n';
  }
  return os.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write file: " + path.string());
  out << content;
}

}  // namespace detail

// Per-method sidecar files derived from the report document. `formats`
// chooses among dot (graphviz tree), tree-doc (tree as json), and
// plotdata (per-level histogram counts as csv).
inline void export_artifacts(const nlohmann::ordered_json& report,
                             const std::set<std::string>& formats,
                             const std::filesystem::path& out_dir) {
  for (const auto& f : formats)
    require(f == "dot" || f == "tree-doc" || f == "plotdata", "unknown export format: " + f);
  std::filesystem::create_directories(out_dir);
  for (const auto& jm : report.at("methods")) {
    const std::string m = jm.at("method").get<std::string>();
    if (formats.count("dot"))
      detail::write_text_file(out_dir / (m + "_fit_the_fit.dot"),
                              detail::fit_dot_from_json(jm.at("fit_the_fit")));
    if (formats.count("tree-doc"))
      detail::write_text_file(out_dir / (m + "_fit_the_fit.json"),
                              jm.at("fit_the_fit").dump(2) + "\n");
    if (formats.count("plotdata"))
      detail::write_text_file(out_dir / (m + "_subgroups.csv"),
                              detail::subgroups_csv_from_json(jm.at("subgroups")));
  }
}

// Writes every run artifact into the output directory: the text report,
// its json twin, the per-method sidecars, the synthetic dataset when one
// was generated, and posterior draw files when requested.
inline void write_outputs(const PipelineOutcome& out, const PipelineConfig& cfg) {
  const std::filesystem::path dir(cfg.output_dir);
  std::filesystem::create_directories(dir);

  const nlohmann::ordered_json j = to_json(out.report);
  detail::write_text_file(dir / "report.txt", render_text(out.report));
  detail::write_text_file(dir / "report.json", j.dump(2) + "\n");
  export_artifacts(j, {"dot", "tree-doc", "plotdata"}, dir);

  if (out.synthetic && out.data.n() > 0) write_csv(out.data, (dir / "data.csv").string());

  for (const auto& [method, draws] : out.draws) {
    std::ostringstream os;
    os.precision(17);
    os << "iteration,unit,value\n";
    for (std::size_t k = 0; k < draws.rows(); ++k)
      for (std::size_t i = 0; i < draws.cols(); ++i)
        os << (k + 1) << ',' << (i + 1) << ',' << draws(k, i) << '\n';
    detail::write_text_file(dir / (method + "_draws.csv"), os.str());
  }
}

}  // namespace emm
